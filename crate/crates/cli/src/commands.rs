//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use selfreward::config::AppConfig;
use selfreward::mdp::{brute_force, build_self_correction_mdp, hacking_probe, solve, TabularMdp};
use selfreward::metrics::{
    budget_curves, compute_metrics, estimate_p_cti, BudgetCurve, MetricsReport,
};
use selfreward::model::{
    read_problems, read_trajectories, write_problems, write_trajectories, Problem, Trajectory,
};
use selfreward::oracle::roll_trajectory;
use selfreward::pipeline::{
    assemble_candidates, build_mdpo_pairs, collect, compose_dataset, filter_ift, read_pairs,
    sample_corrections, write_pairs, IftDataset, PairStrategy,
};
use selfreward::rng::RngFactory;
use selfreward::trainer::{
    mean_preference_satisfaction, train, LossKind, TabularSpace, TrainOutcome, TrainingData,
};
use selfreward::verifier::verify;

use crate::report::{ensure_out_dir, pct, print_table, row, write_report};

pub struct Ctx {
    pub config: AppConfig,
    pub out: PathBuf,
    pub factory: RngFactory,
}

impl Ctx {
    fn problems(&self) -> Result<Vec<Problem>, selfreward::Error> {
        self.config.dataset.load()
    }
}

#[derive(Serialize)]
struct SimulateReport {
    problems: usize,
    trajectories: usize,
    mode: String,
    termination: BTreeMap<String, usize>,
    problems_path: String,
    trajectories_path: String,
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let problems = ctx.problems()?;
    let mode = ctx.config.evaluate.mode;
    let trajectories: Vec<Trajectory> = problems
        .iter()
        .map(|p| {
            roll_trajectory(
                &ctx.config.profile,
                mode,
                &ctx.config.protocol,
                p,
                &ctx.factory,
                0,
            )
        })
        .collect();
    ensure_out_dir(&ctx.out)?;
    let problems_path = ctx.out.join("problems.jsonl");
    let trajectories_path = ctx.out.join("trajectories.jsonl");
    write_problems(&problems_path, &problems)?;
    write_trajectories(&trajectories_path, &trajectories)?;

    let mut termination: BTreeMap<String, usize> = BTreeMap::new();
    for t in &trajectories {
        *termination
            .entry(format!("{:?}", t.terminated_by))
            .or_default() += 1;
    }
    let report = SimulateReport {
        problems: problems.len(),
        trajectories: trajectories.len(),
        mode: format!("{mode:?}"),
        termination: termination.clone(),
        problems_path: problems_path.display().to_string(),
        trajectories_path: trajectories_path.display().to_string(),
    };
    let path = write_report(&ctx.out, "simulate", &report)?;
    let mut rows = vec![
        row("problems", problems.len()),
        row("trajectories", trajectories.len()),
        row("mode", format!("{mode:?}")),
    ];
    for (k, v) in &termination {
        rows.push(row(&format!("terminated {k}"), v));
    }
    rows.push(row("report", path.display()));
    print_table("simulate", &rows);
    Ok(())
}

#[derive(Serialize)]
struct CollectReport {
    problems: usize,
    total_responses: usize,
    dropped: usize,
    attrition_rate: f64,
    g_correct: usize,
    g_wrong: usize,
    corrections: usize,
    count_law_expected: usize,
    candidates: usize,
    candidates_path: String,
    problems_path: String,
}

pub fn collect_cmd(ctx: &Ctx) -> Result<()> {
    let problems = ctx.problems()?;
    let grouped = collect(
        &problems,
        &ctx.config.profile,
        &ctx.config.collection,
        &ctx.factory,
    )?;
    let corrections = sample_corrections(
        &grouped,
        &problems,
        &ctx.config.profile,
        &ctx.config.collection,
        &ctx.factory,
    )?;
    let expected =
        ctx.config.collection.m1 * grouped.g_wrong.len() + ctx.config.collection.m2 * grouped.g_correct.len();
    let candidates = assemble_candidates(&grouped, &corrections);
    ensure_out_dir(&ctx.out)?;
    let problems_path = ctx.out.join("problems.jsonl");
    let candidates_path = ctx.out.join("candidates.jsonl");
    write_problems(&problems_path, &problems)?;
    write_trajectories(&candidates_path, &candidates)?;

    let report = CollectReport {
        problems: problems.len(),
        total_responses: grouped.total_responses,
        dropped: grouped.dropped,
        attrition_rate: grouped.attrition_rate(),
        g_correct: grouped.g_correct.len(),
        g_wrong: grouped.g_wrong.len(),
        corrections: corrections.len(),
        count_law_expected: expected,
        candidates: candidates.len(),
        candidates_path: candidates_path.display().to_string(),
        problems_path: problems_path.display().to_string(),
    };
    let path = write_report(&ctx.out, "collect", &report)?;
    print_table(
        "collect",
        &[
            row("responses", grouped.total_responses),
            row("dropped (no matching eval)", grouped.dropped),
            row("attrition %", pct(grouped.attrition_rate())),
            row("g_correct", grouped.g_correct.len()),
            row("g_wrong", grouped.g_wrong.len()),
            row("corrections", corrections.len()),
            row("count-law expected", expected),
            row("candidates", candidates.len()),
            row("report", path.display()),
        ],
    );
    Ok(())
}

fn ift_paths(dir: &Path) -> [(&'static str, PathBuf); 4] {
    [
        ("d1", dir.join("ift-d1.jsonl")),
        ("d2", dir.join("ift-d2.jsonl")),
        ("d3", dir.join("ift-d3.jsonl")),
        ("c2c", dir.join("ift-c2c.jsonl")),
    ]
}

fn write_ift(dir: &Path, dataset: &IftDataset) -> Result<()> {
    let [d1, d2, d3, c2c] = ift_paths(dir);
    write_trajectories(d1.1, &dataset.d1)?;
    write_trajectories(d2.1, &dataset.d2)?;
    write_trajectories(d3.1, &dataset.d3)?;
    write_trajectories(c2c.1, &dataset.c2c)?;
    Ok(())
}

fn read_ift(dir: &Path) -> Result<IftDataset, selfreward::Error> {
    let [d1, d2, d3, c2c] = ift_paths(dir);
    Ok(IftDataset {
        d1: read_trajectories(d1.1)?,
        d2: read_trajectories(d2.1)?,
        d3: read_trajectories(d3.1)?,
        c2c: read_trajectories(c2c.1)?,
    })
}

#[derive(Serialize)]
struct FilterReport {
    input: String,
    input_count: usize,
    d1: usize,
    d2: usize,
    d3: usize,
    dedup: bool,
}

pub fn filter_cmd(ctx: &Ctx, input: &Path) -> Result<()> {
    let candidates = read_trajectories(input)?;
    let dataset = filter_ift(
        &candidates,
        ctx.config.collection.horizon_cap,
        ctx.config.collection.dedup,
    )?;
    ensure_out_dir(&ctx.out)?;
    write_ift(&ctx.out, &dataset)?;
    let report = FilterReport {
        input: input.display().to_string(),
        input_count: candidates.len(),
        d1: dataset.d1.len(),
        d2: dataset.d2.len(),
        d3: dataset.d3.len(),
        dedup: ctx.config.collection.dedup,
    };
    let path = write_report(&ctx.out, "filter", &report)?;
    print_table(
        "filter",
        &[
            row("input trajectories", candidates.len()),
            row("d1 (wrong, flagged, fixed)", dataset.d1.len()),
            row("d2 (correct, misflagged, kept)", dataset.d2.len()),
            row("d3 (correct, confirmed)", dataset.d3.len()),
            row("dedup", ctx.config.collection.dedup),
            row("report", path.display()),
        ],
    );
    Ok(())
}

#[derive(Serialize)]
struct ComposeReport {
    policy: String,
    d1: usize,
    d2: usize,
    d3: usize,
    c2c: usize,
}

pub fn compose_cmd(ctx: &Ctx, input_dir: &Path) -> Result<()> {
    let dataset = read_ift(input_dir)?;
    let composed = compose_dataset(
        &dataset,
        ctx.config.compose.policy,
        &ctx.config.compose.ratios,
        ctx.config.compose.c2c,
        &ctx.factory,
    )?;
    ensure_out_dir(&ctx.out)?;
    write_ift(&ctx.out, &composed)?;
    let report = ComposeReport {
        policy: format!("{:?}", ctx.config.compose.policy),
        d1: composed.d1.len(),
        d2: composed.d2.len(),
        d3: composed.d3.len(),
        c2c: composed.c2c.len(),
    };
    let path = write_report(&ctx.out, "compose", &report)?;
    print_table(
        "compose",
        &[
            row("policy", format!("{:?}", ctx.config.compose.policy)),
            row("d1", composed.d1.len()),
            row("d2", composed.d2.len()),
            row("d3", composed.d3.len()),
            row("c2c", composed.c2c.len()),
            row("report", path.display()),
        ],
    );
    Ok(())
}

#[derive(Serialize)]
struct PairsReport {
    input: String,
    pairs: usize,
    m1: usize,
    m2: usize,
    m3: usize,
    pairs_path: String,
}

pub fn pairs_cmd(ctx: &Ctx, input: &Path) -> Result<()> {
    let candidates = read_trajectories(input)?;
    let pairs = build_mdpo_pairs(&candidates);
    ensure_out_dir(&ctx.out)?;
    let pairs_path = ctx.out.join("pairs.jsonl");
    write_pairs(&pairs_path, &pairs)?;
    let count = |s: PairStrategy| pairs.iter().filter(|p| p.strategy == s).count();
    let report = PairsReport {
        input: input.display().to_string(),
        pairs: pairs.len(),
        m1: count(PairStrategy::M1),
        m2: count(PairStrategy::M2),
        m3: count(PairStrategy::M3),
        pairs_path: pairs_path.display().to_string(),
    };
    let path = write_report(&ctx.out, "pairs", &report)?;
    print_table(
        "pairs",
        &[
            row("pairs", pairs.len()),
            row("m1 (fix beats non-fix)", report.m1),
            row("m2 (keep beats flip)", report.m2),
            row("m3 (signal comparisons)", report.m3),
            row("report", path.display()),
        ],
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveReport {
    eta: f64,
    objective: f64,
    states: usize,
    v_star: BTreeMap<String, f64>,
    pi_star: BTreeMap<String, Vec<(String, f64)>>,
    brute_objective: Option<f64>,
    brute_gap: Option<f64>,
}

pub fn solve_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config.solve;
    let mdp: TabularMdp = match &cfg.mdp_path {
        Some(path) => TabularMdp::load_spec_file(path)?,
        None => {
            build_self_correction_mdp(cfg.n_prompts, cfg.mode, &cfg.refs, cfg.reward.design())?.mdp
        }
    };
    let solved = solve(&mdp, cfg.eta)?;
    let mut v_star = BTreeMap::new();
    let mut pi_star = BTreeMap::new();
    for (i, state) in mdp.states.iter().enumerate() {
        v_star.insert(state.name.clone(), solved.v_star[i]);
        let probs = solved.pi_star.probabilities(i)?;
        pi_star.insert(
            state.name.clone(),
            state
                .actions
                .iter()
                .zip(probs)
                .map(|(a, p)| (a.name.clone(), p))
                .collect(),
        );
    }
    let (brute_objective, brute_gap) = match cfg.brute_resolution {
        Some(resolution) => {
            let b = brute_force(&mdp, cfg.eta, resolution)?;
            (Some(b.objective), Some(solved.objective - b.objective))
        }
        None => (None, None),
    };
    let report = SolveReport {
        eta: cfg.eta,
        objective: solved.objective,
        states: mdp.states.len(),
        v_star,
        pi_star,
        brute_objective,
        brute_gap,
    };
    let path = write_report(&ctx.out, "solve", &report)?;
    let mut rows = vec![
        row("eta", cfg.eta),
        row("states", mdp.states.len()),
        row("objective", format!("{:.6}", solved.objective)),
    ];
    if let Some(b) = brute_objective {
        rows.push(row("grid-search objective", format!("{b:.6}")));
        rows.push(row("gap", format!("{:.2e}", brute_gap.unwrap_or(0.0))));
    }
    rows.push(row("report", path.display()));
    print_table("solve", &rows);
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    objective: String,
    states: usize,
    initial_loss: f64,
    final_loss: f64,
    accepted_steps: usize,
    converged: bool,
    mean_preference_satisfaction: Option<f64>,
    policy_path: String,
    trace_path: String,
}

pub fn train_cmd(
    ctx: &Ctx,
    objective: LossKind,
    data_dir: &Path,
    pairs_file: Option<&Path>,
    problems_file: &Path,
) -> Result<()> {
    let problems = read_problems(problems_file)?;
    let train_config = ctx.config.train.to_train_config(ctx.factory.master_seed());

    let (outcome, satisfaction, states): (TrainOutcome, Option<f64>, usize) = match objective {
        LossKind::Sft => {
            let dataset = read_ift(data_dir)?;
            let space = TabularSpace::covering(&problems, dataset.iter_all(), &[]);
            let segments = space.segment_ift(&dataset, ctx.config.train.include_a1_for_d3)?;
            let initial = space.uniform_policy();
            let outcome = train(
                &initial,
                &TrainingData::Sft {
                    segments: &segments,
                },
                &train_config,
            )?;
            let n = space.num_states();
            (outcome, None, n)
        }
        LossKind::Mdpo => {
            let pairs_path = pairs_file
                .map(Path::to_path_buf)
                .unwrap_or_else(|| data_dir.join("pairs.jsonl"));
            let pairs = read_pairs(&pairs_path)?;
            let space = TabularSpace::covering(&problems, std::iter::empty(), &pairs);
            let segmented = space.segment_pairs(&pairs)?;
            let reference = space.uniform_policy();
            let outcome = train(
                &reference,
                &TrainingData::Mdpo {
                    reference: &reference,
                    pairs: &segmented,
                },
                &train_config,
            )?;
            let satisfaction = mean_preference_satisfaction(
                &outcome.policy,
                &reference,
                &segmented,
                train_config.eta,
            )?;
            let n = space.num_states();
            (outcome, Some(satisfaction), n)
        }
    };

    ensure_out_dir(&ctx.out)?;
    let policy_path = ctx.out.join("policy.json");
    std::fs::write(
        &policy_path,
        serde_json::to_string_pretty(&outcome.policy)?,
    )
    .with_context(|| format!("writing {}", policy_path.display()))?;
    let trace_path = ctx.out.join("loss-trace.json");
    std::fs::write(&trace_path, serde_json::to_string_pretty(&outcome.trace)?)
        .with_context(|| format!("writing {}", trace_path.display()))?;

    let report = TrainReport {
        objective: format!("{objective:?}"),
        states,
        initial_loss: *outcome.trace.first().expect("trace has initial loss"),
        final_loss: *outcome.trace.last().expect("trace non-empty"),
        accepted_steps: outcome.trace.len() - 1,
        converged: outcome.converged,
        mean_preference_satisfaction: satisfaction,
        policy_path: policy_path.display().to_string(),
        trace_path: trace_path.display().to_string(),
    };
    let path = write_report(&ctx.out, "train", &report)?;
    let mut rows = vec![
        row("objective", format!("{objective:?}")),
        row("tabular states", states),
        row("initial loss", format!("{:.6}", report.initial_loss)),
        row("final loss", format!("{:.6}", report.final_loss)),
        row("accepted steps", report.accepted_steps),
        row("converged", report.converged),
    ];
    if let Some(s) = satisfaction {
        rows.push(row("mean sigma(delta u)", format!("{s:.4}")));
    }
    rows.push(row("report", path.display()));
    print_table("train", &rows);
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport {
    input: String,
    metrics: MetricsReport,
    p_cti: Option<selfreward::metrics::RateEstimate>,
}

pub fn evaluate_cmd(ctx: &Ctx, input: &Path) -> Result<()> {
    let trajectories = read_trajectories(input)?;
    let mut metrics = compute_metrics(&trajectories)?;
    let p_cti = if ctx.config.evaluate.p_cti_trials > 0 {
        let problems = ctx.problems()?;
        let estimate = estimate_p_cti(
            &ctx.config.profile,
            &problems,
            ctx.config.evaluate.p_cti_trials,
            &ctx.factory,
        )?;
        metrics.p_cti_hat = Some(estimate.rate);
        Some(estimate)
    } else {
        None
    };
    let report = EvaluateReport {
        input: input.display().to_string(),
        metrics: metrics.clone(),
        p_cti,
    };
    let path = write_report(&ctx.out, "evaluate", &report)?;
    let fmt_opt = |v: Option<f64>| v.map(pct).unwrap_or_else(|| "-".into());
    let mut rows = vec![
        row("n", metrics.counts.n),
        row("turn 1 %", pct(metrics.turn1)),
        row("final %", pct(metrics.final_accuracy)),
        row("delta", pct(metrics.delta)),
        row("delta i->c", pct(metrics.delta_itc)),
        row("delta c->i", pct(metrics.delta_cti)),
        row("rm accuracy a (correct)", fmt_opt(metrics.rm_tpr_hat)),
        row("rm accuracy b (wrong)", fmt_opt(metrics.rm_tnr_hat)),
        row("malformed %", pct(metrics.malformed_rate)),
    ];
    if let Some(p) = metrics.p_cti_hat {
        rows.push(row("p c->i (misleading)", pct(p)));
    }
    rows.push(row("report", path.display()));
    print_table("evaluate", &rows);
    Ok(())
}

#[derive(Serialize)]
struct VoteReport {
    independent: BudgetCurve,
    self_rewarding: BudgetCurve,
}

pub fn vote_cmd(ctx: &Ctx) -> Result<()> {
    let problems = ctx.problems()?;
    let (independent, self_rewarding) = budget_curves(
        &ctx.config.profile,
        &problems,
        &ctx.config.vote.budgets,
        &ctx.config.protocol,
        &ctx.factory,
    )?;
    let report = VoteReport {
        independent: independent.clone(),
        self_rewarding: self_rewarding.clone(),
    };
    let path = write_report(&ctx.out, "vote", &report)?;
    println!("vote (budget sweep, {} problems)", problems.len());
    println!(
        "  {:<16} {:>6} {:>18} {:>10} {:>14}",
        "mode", "votes", "expected samples", "accuracy", "samples/traj"
    );
    for (label, curve) in [
        ("independent", &independent),
        ("self-rewarding", &self_rewarding),
    ] {
        for p in &curve.points {
            println!(
                "  {label:<16} {:>6} {:>18.3} {:>10} {:>14.3}",
                p.votes,
                p.expected_samples,
                pct(p.accuracy),
                p.samples_per_trajectory
            );
        }
    }
    println!("  report  {}", path.display());
    Ok(())
}

pub fn probe_hacking_cmd(ctx: &Ctx) -> Result<()> {
    let report = hacking_probe(&ctx.config.probe.to_probe_config())?;
    let path = write_report(&ctx.out, "probe-hacking", &report)?;
    print_table(
        "probe-hacking",
        &[
            row(
                "P[first wrong] correctness-only",
                format!("{:.4}", report.first_wrong_correctness_only),
            ),
            row(
                "P[first wrong] shaped bonus",
                format!("{:.4}", report.first_wrong_shaped),
            ),
            row("margin", report.margin),
            row("hacking detected", report.hacking_detected),
            row("report", path.display()),
        ],
    );
    Ok(())
}

/// Exit code 0 when the response's final boxed answer matches gold, 1 when
/// it does not.
pub fn verify_cmd(gold: &str, response_file: &Path) -> Result<i32> {
    let text = std::fs::read_to_string(response_file)
        .with_context(|| format!("reading {}", response_file.display()))?;
    let outcome = verify(&text, gold);
    println!(
        "verdict: {} (stage {:?}, extracted {:?})",
        if outcome.correct { "correct" } else { "incorrect" },
        outcome.stage,
        outcome.extracted
    );
    Ok(if outcome.correct { 0 } else { 1 })
}

