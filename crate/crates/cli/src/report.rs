//! Report writing: one machine-readable JSON document per command plus a
//! human-readable table on stdout.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

pub fn write_report<T: Serialize>(out: &Path, command: &str, report: &T) -> Result<PathBuf> {
    ensure_out_dir(out)?;
    let path = out.join(format!("{command}-report.json"));
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Two-column table with aligned keys.
pub fn print_table(title: &str, rows: &[(String, String)]) {
    println!("{title}");
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, value) in rows {
        println!("  {key:<width$}  {value}");
    }
}

pub fn row(key: &str, value: impl std::fmt::Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Percent at one decimal, rounded half away from zero.
pub fn pct(rate: f64) -> String {
    format!("{:.1}", selfreward::metrics::percent_1dp(rate))
}
