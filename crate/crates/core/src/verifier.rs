//! Ground-truth verifier: boxed-answer extraction and answer equivalence.
//!
//! The verifier decides whether a response's final `\boxed{...}` answer
//! matches a gold answer. Answers are normalized into a canonical form
//! (integer, rational, decimal, or symbolic) and compared exactly where
//! possible. Decimals compare under a rounding rule: when one side carries
//! `d` decimal digits, the other side is rounded to `d` digits first, with a
//! 1e-4 relative (1e-6 absolute near zero) tolerance as a backstop. This lets
//! a gold answer printed at two decimals (e.g. `20.39`) match the exact value
//! it was rounded from (`20.3855`).
//!
//! Markup stripping is limited to a fixed list: `$`, `\left`/`\right`, TeX
//! spacing commands, whitespace, a trailing period, degree marks, and a
//! leading single-variable assignment (`x = 11` -> `11`). Anything that does
//! not parse as a number afterwards falls back to symbolic string comparison,
//! which is stricter than a full CAS.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const REL_TOLERANCE: f64 = 1e-4;
const ABS_TOLERANCE: f64 = 1e-6;

/// Exact canonical representation of a final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CanonicalValue {
    Integer(i128),
    /// Lowest terms, positive denominator.
    Rational { num: i128, den: i128 },
    /// value = mantissa * 10^(-scale); digits and exponent stored exactly as
    /// written, so `1.50` keeps scale 2.
    Decimal { mantissa: i128, scale: u32 },
    /// Markup-stripped string, compared by equality.
    Symbolic(String),
}

/// A normalized answer together with the original string it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub value: CanonicalValue,
    pub raw: String,
}

impl CanonicalAnswer {
    /// Canonical rendering; normalizing it again yields the same value.
    pub fn rendering(&self) -> String {
        match &self.value {
            CanonicalValue::Integer(n) => n.to_string(),
            CanonicalValue::Rational { num, den } => format!("{num}/{den}"),
            CanonicalValue::Decimal { mantissa, scale } => render_decimal(*mantissa, *scale),
            CanonicalValue::Symbolic(s) => s.clone(),
        }
    }
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendering())
    }
}

fn render_decimal(mantissa: i128, scale: u32) -> String {
    if scale == 0 {
        return mantissa.to_string();
    }
    let sign = if mantissa < 0 { "-" } else { "" };
    let abs = mantissa.unsigned_abs().to_string();
    let scale = scale as usize;
    if abs.len() > scale {
        let (int, frac) = abs.split_at(abs.len() - scale);
        format!("{sign}{int}.{frac}")
    } else {
        format!("{sign}0.{}{}", "0".repeat(scale - abs.len()), abs)
    }
}

/// Content of the last balanced `\boxed{...}` group, or `None` when the text
/// has no such group. The last box governs because trajectories emit
/// intermediate boxed values before the final answer.
pub fn extract_boxed(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let needle = b"\\boxed{";
    let mut last = None;
    let mut i = 0;
    while i + needle.len() <= bytes.len() {
        if &bytes[i..i + needle.len()] == needle {
            let start = i + needle.len();
            if let Some(end) = find_balanced_close(bytes, start) {
                last = Some(text[start..end].to_string());
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    last
}

/// Index of the `}` closing a group opened just before `start`. `\{` and `\}`
/// are literal braces and do not count.
fn find_balanced_close(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 1usize;
    let mut i = start;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if i + 1 < bytes.len() => i += 1,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

fn strip_markup(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    // Repeatedly peel enclosing $...$ pairs.
    loop {
        let t = s.trim();
        if t.len() >= 2 && t.starts_with('$') && t.ends_with('$') {
            s = t[1..t.len() - 1].to_string();
        } else {
            s = t.to_string();
            break;
        }
    }
    for pat in ["\\left", "\\right", "\\!", "\\,", "\\;", "\\ ", "~"] {
        s = s.replace(pat, "");
    }
    s.retain(|c| !c.is_whitespace());
    while s.ends_with('.') {
        s.pop();
    }
    for suffix in ["^{\\circ}", "^\\circ", "°"] {
        if let Some(stripped) = s.strip_suffix(suffix) {
            s = stripped.to_string();
        }
    }
    static ASSIGN: OnceLock<Regex> = OnceLock::new();
    let assign = ASSIGN.get_or_init(|| Regex::new(r"^[A-Za-z]=").unwrap());
    if let Some(m) = assign.find(&s) {
        let rest = &s[m.end()..];
        if !rest.is_empty() {
            s = rest.to_string();
        }
    }
    s
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn make_rational(num: i128, den: i128) -> CanonicalValue {
    debug_assert!(den != 0);
    let sign = if (num < 0) != (den < 0) { -1 } else { 1 };
    let (num, den) = (num.abs(), den.abs());
    let g = gcd(num, den).max(1);
    let (num, den) = (sign * (num / g), den / g);
    if den == 1 {
        CanonicalValue::Integer(num)
    } else {
        CanonicalValue::Rational { num, den }
    }
}

fn parse_numeric(stripped: &str) -> Option<CanonicalValue> {
    static INT: OnceLock<Regex> = OnceLock::new();
    static FRAC: OnceLock<Regex> = OnceLock::new();
    static SLASH: OnceLock<Regex> = OnceLock::new();
    static DEC: OnceLock<Regex> = OnceLock::new();
    let int = INT.get_or_init(|| Regex::new(r"^[+-]?\d+$").unwrap());
    let frac = FRAC
        .get_or_init(|| Regex::new(r"^([+-]?)\\d?frac\{([+-]?\d+)\}\{([+-]?\d+)\}$").unwrap());
    let slash = SLASH.get_or_init(|| Regex::new(r"^([+-]?\d+)/([+-]?\d+)$").unwrap());
    let dec = DEC.get_or_init(|| Regex::new(r"^([+-]?)(\d*)\.(\d+)$").unwrap());

    if int.is_match(stripped) {
        return stripped.parse::<i128>().ok().map(CanonicalValue::Integer);
    }
    if let Some(c) = frac.captures(stripped) {
        let sign: i128 = if &c[1] == "-" { -1 } else { 1 };
        let num: i128 = c[2].parse().ok()?;
        let den: i128 = c[3].parse().ok()?;
        if den == 0 {
            return None;
        }
        return Some(make_rational(sign * num, den));
    }
    if let Some(c) = slash.captures(stripped) {
        let num: i128 = c[1].parse().ok()?;
        let den: i128 = c[2].parse().ok()?;
        if den == 0 {
            return None;
        }
        return Some(make_rational(num, den));
    }
    if let Some(c) = dec.captures(stripped) {
        let negative = &c[1] == "-";
        let int_part = &c[2];
        let frac_part = &c[3];
        let scale = frac_part.len() as u32;
        let digits = format!("{int_part}{frac_part}");
        let mantissa: i128 = digits.parse().ok()?;
        let mantissa = if negative { -mantissa } else { mantissa };
        return Some(CanonicalValue::Decimal { mantissa, scale });
    }
    None
}

/// Normalize a raw answer string. Total: anything that does not parse as
/// integer, rational, or decimal becomes symbolic. Idempotent on canonical
/// renderings.
pub fn normalize_answer(raw: &str) -> CanonicalAnswer {
    let stripped = strip_markup(raw);
    let value = parse_numeric(&stripped).unwrap_or(CanonicalValue::Symbolic(stripped));
    CanonicalAnswer {
        value,
        raw: raw.to_string(),
    }
}

/// Exact rational view (num, den) of a non-symbolic value.
fn as_fraction(value: &CanonicalValue) -> Option<(i128, i128)> {
    match value {
        CanonicalValue::Integer(n) => Some((*n, 1)),
        CanonicalValue::Rational { num, den } => Some((*num, *den)),
        CanonicalValue::Decimal { mantissa, scale } => {
            Some((*mantissa, 10i128.checked_pow(*scale)?))
        }
        CanonicalValue::Symbolic(_) => None,
    }
}

fn to_f64(num: i128, den: i128) -> f64 {
    num as f64 / den as f64
}

/// round(num/den * 10^scale), half away from zero. None on overflow.
fn round_to_scale(num: i128, den: i128, scale: u32) -> Option<i128> {
    let pow = 10i128.checked_pow(scale)?;
    let scaled = num.checked_mul(pow)?;
    let (a, b) = (scaled.abs(), den.abs());
    let rounded = (a.checked_mul(2)?.checked_add(b)?) / (b.checked_mul(2)?);
    Some(if scaled < 0 { -rounded } else { rounded })
}

fn numbers_close(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_TOLERANCE.max(REL_TOLERANCE * a.abs().max(b.abs()))
}

/// Answer equivalence. Symmetric and reflexive. Integers and rationals
/// compare exactly (cross-kind via the exact rational embedding); decimals
/// apply the rounding rule described in the module docs; symbolic values
/// compare by normalized string equality and never match numeric values.
pub fn answers_equal(a: &CanonicalAnswer, b: &CanonicalAnswer) -> bool {
    use CanonicalValue::*;
    match (&a.value, &b.value) {
        (Symbolic(x), Symbolic(y)) => x == y,
        (Symbolic(_), _) | (_, Symbolic(_)) => false,
        (Decimal { .. }, _) | (_, Decimal { .. }) => {
            let (xn, xd) = as_fraction(&a.value).expect("numeric");
            let (yn, yd) = as_fraction(&b.value).expect("numeric");
            // Exact equality first (covers equal-scale decimals, 0.50 vs 1/2).
            if let (Some(l), Some(r)) = (xn.checked_mul(yd), yn.checked_mul(xd)) {
                if l == r {
                    return true;
                }
            }
            // Rounding rule: round the other side to this side's digit count.
            let mut matched = false;
            if let Decimal { mantissa, scale } = a.value {
                if b_rounds_to(yn, yd, mantissa, scale) {
                    matched = true;
                }
            }
            if let Decimal { mantissa, scale } = b.value {
                if b_rounds_to(xn, xd, mantissa, scale) {
                    matched = true;
                }
            }
            if matched {
                return true;
            }
            // Relative-tolerance backstop.
            numbers_close(to_f64(xn, xd), to_f64(yn, yd))
        }
        _ => {
            let (xn, xd) = as_fraction(&a.value).expect("numeric");
            let (yn, yd) = as_fraction(&b.value).expect("numeric");
            match (xn.checked_mul(yd), yn.checked_mul(xd)) {
                (Some(l), Some(r)) => l == r,
                _ => numbers_close(to_f64(xn, xd), to_f64(yn, yd)),
            }
        }
    }
}

/// Does num/den round (half away from zero) to exactly `mantissa` at `scale`
/// digits, without being coarser than the target itself?
fn b_rounds_to(num: i128, den: i128, mantissa: i128, scale: u32) -> bool {
    match round_to_scale(num, den, scale) {
        Some(r) => r == mantissa,
        None => false,
    }
}

/// Which comparison stage decided a [`verify`] outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyStage {
    NoBoxedAnswer,
    Equal,
    NotEqual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub correct: bool,
    pub stage: VerifyStage,
    pub extracted: Option<String>,
}

/// Ground-truth verdict: 1 iff the response's last boxed answer equals the
/// gold answer. Total on arbitrary text; absence of a boxed answer is 0.
pub fn verify(response_text: &str, gold: &str) -> VerifyOutcome {
    match extract_boxed(response_text) {
        None => VerifyOutcome {
            correct: false,
            stage: VerifyStage::NoBoxedAnswer,
            extracted: None,
        },
        Some(content) => {
            let answer = normalize_answer(&content);
            let gold = normalize_answer(gold);
            let equal = answers_equal(&answer, &gold);
            VerifyOutcome {
                correct: equal,
                stage: if equal {
                    VerifyStage::Equal
                } else {
                    VerifyStage::NotEqual
                },
                extracted: Some(content),
            }
        }
    }
}
