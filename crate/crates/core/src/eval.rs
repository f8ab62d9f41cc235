//! Evaluation protocol, cross-seed aggregation and failure tags.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, Algorithm};
use crate::demogen::ScriptedPolicy;
use crate::env::{Action, EnvConfig, Observation, TaskId, TissueRetractEnv, Transition};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_EPISODES: usize = 50;
pub const DEFAULT_STRAIN_THRESHOLD: f64 = 0.5;

/// Anything that maps observations to actions during evaluation.
pub trait Policy {
    fn begin_episode(&mut self, _obs: &Observation) {}
    fn act(&mut self, obs: &Observation) -> Action;
}

impl Policy for Agent {
    fn act(&mut self, obs: &Observation) -> Action {
        Agent::act(self, obs, false)
    }
}

impl Policy for ScriptedPolicy {
    fn begin_episode(&mut self, obs: &Observation) {
        self.reset(obs);
    }

    fn act(&mut self, obs: &Observation) -> Action {
        ScriptedPolicy::act(self, obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    ImproperGrasp,
    Distortion,
    GripLoss,
    Timeout,
}

impl Outcome {
    pub fn tag(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::ImproperGrasp => "improper_grasp",
            Outcome::Distortion => "distortion",
            Outcome::GripLoss => "grip_loss",
            Outcome::Timeout => "timeout",
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Tag for an unsuccessful episode. Priority: distortion, then grip loss,
/// then improper grasp (the designated anchor was never held), else timeout.
pub fn classify_failure(trace: &[Transition], strain_threshold: f64) -> Result<Outcome> {
    let Some(last) = trace.last() else {
        return Err(Error::InvalidArgument("empty episode trace".into()));
    };
    if last.info.success {
        return Err(Error::InvalidArgument("episode succeeded; nothing to classify".into()));
    }
    Ok(if trace.iter().any(|t| t.info.max_strain > strain_threshold) {
        Outcome::Distortion
    } else if trace.iter().any(|t| t.info.grip_lost) {
        Outcome::GripLoss
    } else if !trace.iter().any(|t| t.info.anchor_held) {
        Outcome::ImproperGrasp
    } else {
        Outcome::Timeout
    })
}

/// Success, or the failure tag.
pub fn outcome_of(trace: &[Transition], strain_threshold: f64) -> Result<Outcome> {
    match trace.last() {
        Some(t) if t.info.success => Ok(Outcome::Success),
        _ => classify_failure(trace, strain_threshold),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub improper_grasp: usize,
    pub distortion: usize,
    pub grip_loss: usize,
    pub timeout: usize,
}

impl FailureCounts {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Success => {}
            Outcome::ImproperGrasp => self.improper_grasp += 1,
            Outcome::Distortion => self.distortion += 1,
            Outcome::GripLoss => self.grip_loss += 1,
            Outcome::Timeout => self.timeout += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.improper_grasp + self.distortion + self.grip_loss + self.timeout
    }

    fn add(&mut self, other: &FailureCounts) {
        self.improper_grasp += other.improper_grasp;
        self.distortion += other.distortion;
        self.grip_loss += other.grip_loss;
        self.timeout += other.timeout;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub env_seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub final_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rate: f64,
    pub failures: FailureCounts,
    pub episodes: Vec<EpisodeResult>,
}

/// Roll one noise-free episode, returning its trace.
pub fn run_episode(policy: &mut dyn Policy, env: &mut TissueRetractEnv, env_seed: u64) -> Result<Vec<Transition>> {
    let mut obs = env.reset(env_seed)?;
    policy.begin_episode(&obs);
    let mut trace = Vec::with_capacity(env.config().horizon);
    loop {
        let t = env.step(&policy.act(&obs))?;
        obs = t.next_obs;
        let done = t.done;
        trace.push(t);
        if done {
            return Ok(trace);
        }
    }
}

/// `episodes` episodes with seeds derived from `seed`; the rate is
/// successes / episodes.
pub fn run_eval(
    policy: &mut dyn Policy,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    strain_threshold: f64,
) -> Result<SeedResult> {
    run_eval_traced(policy, env_config, episodes, seed, strain_threshold, &mut |_, _| Ok(()))
}

/// [`run_eval`] that also hands every episode trace to `on_trace`.
pub fn run_eval_traced(
    policy: &mut dyn Policy,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    strain_threshold: f64,
    on_trace: &mut dyn FnMut(usize, &[Transition]) -> Result<()>,
) -> Result<SeedResult> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut env = TissueRetractEnv::new(env_config.clone())?;
    let mut failures = FailureCounts::default();
    let mut results = Vec::with_capacity(episodes);
    let mut successes = 0;
    for i in 0..episodes {
        let env_seed = derive_seed(seed, stream::EVAL, i as u64);
        let trace = run_episode(policy, &mut env, env_seed)?;
        on_trace(i, &trace)?;
        let outcome = outcome_of(&trace, strain_threshold)?;
        if outcome == Outcome::Success {
            successes += 1;
        }
        failures.record(outcome);
        let last = trace.last().expect("episodes have at least one step");
        results.push(EpisodeResult {
            env_seed,
            outcome,
            steps: trace.len(),
            final_distance: (last.next_obs.achieved_goal - last.next_obs.desired_goal).norm(),
        });
    }
    Ok(SeedResult {
        seed,
        rate: successes as f64 / episodes as f64,
        failures,
        episodes: results,
    })
}

/// Mean of per-seed success percentages and the normal-approximation 95%
/// half-width `1.96 * s / sqrt(n)`, both in percent.
pub fn aggregate(per_seed_rates: &[f64]) -> Result<(f64, f64)> {
    let n = per_seed_rates.len();
    if n < 2 {
        return Err(Error::InsufficientData(n));
    }
    let pct: Vec<f64> = per_seed_rates.iter().map(|r| r * 100.0).collect();
    let mean = pct.iter().sum::<f64>() / n as f64;
    let var = pct.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: TaskId,
    pub algorithm: String,
    pub demo_count: Option<usize>,
    pub seeds: Vec<u64>,
    pub per_seed_rates: Vec<f64>,
    pub episodes_per_seed: usize,
    /// Percent; absent with fewer than two seeds.
    pub mean: Option<f64>,
    pub ci95_halfwidth: Option<f64>,
    pub successes: usize,
    pub failure_counts: FailureCounts,
}

impl EvalReport {
    pub fn from_results(
        task_id: TaskId,
        algorithm: impl Into<String>,
        demo_count: Option<usize>,
        results: &[SeedResult],
    ) -> Result<Self> {
        let Some(first) = results.first() else {
            return Err(Error::InsufficientData(0));
        };
        let per_seed_rates: Vec<f64> = results.iter().map(|r| r.rate).collect();
        let (mean, ci) = match aggregate(&per_seed_rates) {
            Ok((m, c)) => (Some(m), Some(c)),
            Err(Error::InsufficientData(_)) => (None, None),
            Err(e) => return Err(e),
        };
        let mut failure_counts = FailureCounts::default();
        let mut successes = 0;
        for r in results {
            failure_counts.add(&r.failures);
            successes += r.episodes.iter().filter(|e| e.outcome == Outcome::Success).count();
        }
        Ok(Self {
            task_id,
            algorithm: algorithm.into(),
            demo_count,
            seeds: results.iter().map(|r| r.seed).collect(),
            per_seed_rates,
            episodes_per_seed: first.episodes.len(),
            mean,
            ci95_halfwidth: ci,
            successes,
            failure_counts,
        })
    }

    pub fn total_episodes(&self) -> usize {
        self.episodes_per_seed * self.seeds.len()
    }

    /// `85.0 ± 5.7`, or the single-seed rate marked as lacking a CI.
    pub fn summary(&self) -> String {
        match (self.mean, self.ci95_halfwidth) {
            (Some(m), Some(c)) => format!("{m:.1} ± {c:.1}"),
            _ => format!(
                "{:.1} (CI: insufficient data)",
                self.per_seed_rates.first().copied().unwrap_or(0.0) * 100.0
            ),
        }
    }
}

pub const CSV_HEADER: &str = "task,algorithm,demos,seeds,rates,episodes_per_seed,mean,ci95,successes,improper_grasp,distortion,grip_loss,timeout";

pub fn csv_row(r: &EvalReport) -> String {
    let join = |v: Vec<String>| v.join(";");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.task_id,
        r.algorithm,
        r.demo_count.map(|d| d.to_string()).unwrap_or_default(),
        join(r.seeds.iter().map(u64::to_string).collect()),
        join(r.per_seed_rates.iter().map(|x| format!("{x:.4}")).collect()),
        r.episodes_per_seed,
        r.mean.map(|m| format!("{m:.4}")).unwrap_or_default(),
        r.ci95_halfwidth.map(|c| format!("{c:.4}")).unwrap_or_default(),
        r.successes,
        r.failure_counts.improper_grasp,
        r.failure_counts.distortion,
        r.failure_counts.grip_loss,
        r.failure_counts.timeout,
    )
}

pub fn write_csv(out: &mut dyn Write, reports: &[EvalReport]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

/// Success rates with algorithms as rows and tasks (or demo counts, for
/// ablations) as columns.
pub fn format_table(reports: &[EvalReport]) -> String {
    let ablation = reports.iter().any(|r| r.demo_count.is_some())
        && reports
            .iter()
            .map(|r| r.task_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            == 1;
    let column = |r: &EvalReport| {
        if ablation {
            format!("{} demos", r.demo_count.unwrap_or(0))
        } else {
            format!("Task {}", r.task_id)
        }
    };
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    for r in reports {
        let c = column(r);
        if !columns.contains(&c) {
            columns.push(c);
        }
        if !rows.contains(&r.algorithm) {
            rows.push(r.algorithm.clone());
        }
    }
    let width = reports
        .iter()
        .map(|r| r.summary().chars().count())
        .chain(columns.iter().map(|c| c.len()))
        .max()
        .unwrap_or(8);
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "Algorithm");
    for c in &columns {
        let _ = write!(out, " | {c:^width$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(10 + columns.len() * (width + 3)));
    out.push('\n');
    for alg in &rows {
        let _ = write!(out, "{alg:<10}");
        for c in &columns {
            let cell = reports
                .iter()
                .find(|r| &r.algorithm == alg && &column(r) == c)
                .map(EvalReport::summary)
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {cell:^width$}");
        }
        out.push('\n');
    }
    out
}

/// Failure-mode breakdown, one line per report.
pub fn format_failures(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let f = &r.failure_counts;
        let _ = writeln!(
            out,
            "{} task {}{}: success {}/{}, improper_grasp {}, distortion {}, grip_loss {}, timeout {}",
            r.algorithm,
            r.task_id,
            r.demo_count.map(|d| format!(" ({d} demos)")).unwrap_or_default(),
            r.successes,
            r.total_episodes(),
            f.improper_grasp,
            f.distortion,
            f.grip_loss,
            f.timeout
        );
    }
    out
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub algorithm: Algorithm,
    pub demo_count: usize,
}

pub fn ablation_cells(algorithms: &[Algorithm], demo_counts: &[usize]) -> Vec<AblationCell> {
    algorithms
        .iter()
        .flat_map(|&algorithm| {
            demo_counts
                .iter()
                .map(move |&demo_count| AblationCell { algorithm, demo_count })
        })
        .collect()
}
