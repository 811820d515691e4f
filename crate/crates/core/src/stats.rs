//! Success-rate aggregation: interquartile means and stratified
//! bootstrap confidence intervals over (run x task) score matrices.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::EnvName;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::Scalar;

/// Fixed task registry: report ordering and the task -> domain mapping.
pub const TASK_REGISTRY: [(EnvName, &str); 4] = [
    (EnvName::PointReach, "reach"),
    (EnvName::PointPickPlace, "single_arm"),
    (EnvName::BipointTransfer, "bimanual"),
    (EnvName::PointTrack, "tracking"),
];

pub fn domain_of(task: &str) -> Result<&'static str> {
    TASK_REGISTRY
        .iter()
        .find(|(name, _)| name.as_str() == task)
        .map(|(_, domain)| *domain)
        .ok_or_else(|| Error::config(format!("task '{task}' is not in the registry")))
}

fn registry_rank(task: &str) -> usize {
    TASK_REGISTRY
        .iter()
        .position(|(name, _)| name.as_str() == task)
        .unwrap_or(TASK_REGISTRY.len())
}

/// Fraction of successful outcomes.
pub fn success_rate(outcomes: &[bool]) -> Result<Scalar> {
    if outcomes.is_empty() {
        return Err(Error::usage("success_rate of an empty outcome list"));
    }
    Ok(outcomes.iter().filter(|&&s| s).count() as Scalar / outcomes.len() as Scalar)
}

/// Interquartile mean with fractional end-weights.
///
/// Sorted scores are weighted by how much of the unit interval
/// `[i, i+1)` overlaps the middle half `[n/4, 3n/4]`; a score straddling
/// a cut contributes proportionally, which keeps the estimator
/// continuous in `n` and equal to the plain mean for n <= 2.
pub fn iqm<F: Real>(scores: &[F]) -> Result<F> {
    if scores.is_empty() {
        return Err(Error::usage("iqm of an empty score list"));
    }
    let mut sorted: Vec<F> = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("scores are comparable"));
    let n = sorted.len() as f64;
    let lo = 0.25 * n;
    let hi = 0.75 * n;
    let mut weighted = F::zero();
    let mut total = F::zero();
    for (i, &x) in sorted.iter().enumerate() {
        let left = (i as f64).max(lo);
        let right = ((i + 1) as f64).min(hi);
        if right > left {
            let w = F::from_f64(right - left);
            weighted = w.mul_add(x, weighted);
            total += w;
        }
    }
    Ok(weighted / total)
}

/// Stratified bootstrap confidence interval for the pooled IQM of a
/// runs-by-tasks score matrix (`columns[t]` holds task `t`'s run scores).
///
/// Each resample draws runs with replacement independently within every
/// task column, pools them, and takes the IQM; the interval is the
/// `(1 - level) / 2` and `(1 + level) / 2` empirical percentiles over
/// `n_resamples` such statistics. With a single run per task the
/// interval degenerates to the point estimate.
pub fn stratified_bootstrap_ci(
    columns: &[Vec<Scalar>],
    n_resamples: usize,
    level: Scalar,
    rng: &mut Rng,
) -> Result<(Scalar, Scalar)> {
    if columns.is_empty() || columns.iter().any(Vec::is_empty) {
        return Err(Error::usage("bootstrap needs at least one score per task"));
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::usage(format!("level {level} must lie in (0, 1)")));
    }
    if n_resamples == 0 {
        return Err(Error::usage("n_resamples must be >= 1"));
    }

    let pooled: Vec<Scalar> = columns.iter().flatten().copied().collect();
    let point = iqm(&pooled)?;
    if columns.iter().all(|c| c.len() == 1) {
        return Ok((point, point));
    }

    let mut stats = Vec::with_capacity(n_resamples);
    let mut resample = Vec::with_capacity(pooled.len());
    for _ in 0..n_resamples {
        resample.clear();
        for column in columns {
            for _ in 0..column.len() {
                resample.push(column[rng.gen_range(0..column.len())]);
            }
        }
        stats.push(iqm(&resample)?);
    }
    stats.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let lower = percentile(&stats, (1.0 - level) / 2.0);
    let upper = percentile(&stats, (1.0 + level) / 2.0);
    Ok((lower, upper))
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[Scalar], q: Scalar) -> Scalar {
    let position = q * (sorted.len() - 1) as Scalar;
    let below = position.floor() as usize;
    let above = position.ceil() as usize;
    if below == above {
        sorted[below]
    } else {
        let frac = position - below as Scalar;
        sorted[below] + frac * (sorted[above] - sorted[below])
    }
}

/// One finished run's evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub seed: u64,
    pub agent: String,
    pub score: Scalar,
    pub step_budget: u64,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::config(format!(
                "score {} outside [0, 1] for task {} agent {}",
                self.score, self.task, self.agent
            )));
        }
        Ok(())
    }
}

/// Aggregation granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    PerTask,
    PerDomain,
    Overall,
}

impl Grouping {
    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "per-task" => Ok(Grouping::PerTask),
            "per-domain" => Ok(Grouping::PerDomain),
            "overall" => Ok(Grouping::Overall),
            other => Err(Error::usage(format!(
                "unknown grouping '{other}' (per-task | per-domain | overall)"
            ))),
        }
    }
}

/// Per-(task, agent) mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub agent: String,
    pub n_runs: usize,
    pub mean: Scalar,
    pub std: Scalar,
}

/// Per-(group, agent) IQM with a bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub agent: String,
    pub n_runs: usize,
    pub iqm: Scalar,
    pub ci_lower: Scalar,
    pub ci_upper: Scalar,
}

/// Full aggregation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub grouping: Grouping,
    pub step_budget: u64,
    pub n_resamples: usize,
    /// Population (n-denominator) standard deviations.
    pub task_summaries: Vec<TaskSummary>,
    pub group_summaries: Vec<GroupSummary>,
}

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_CI_LEVEL: Scalar = 0.95;

/// Aggregates run records: per-task mean +- std for every agent, plus
/// IQM and a 95% stratified bootstrap CI per grouping cell. Mixed step
/// budgets are refused since the scores would not be comparable.
pub fn aggregate(
    records: &[RunRecord],
    grouping: Grouping,
    n_resamples: usize,
    seed: u64,
) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::usage("no run records to aggregate"));
    }
    for record in records {
        record.validate()?;
        domain_of(&record.task)?;
    }
    let step_budget = records[0].step_budget;
    if let Some(bad) = records.iter().find(|r| r.step_budget != step_budget) {
        return Err(Error::usage(format!(
            "mixed step budgets: {} (task {} agent {}) vs {}; aggregate runs with a uniform budget",
            bad.step_budget, bad.task, bad.agent, step_budget
        )));
    }

    let mut agents: Vec<String> = records.iter().map(|r| r.agent.clone()).collect();
    agents.sort();
    agents.dedup();

    let mut task_summaries = Vec::new();
    let mut group_summaries = Vec::new();

    for agent in &agents {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| &r.agent == agent).collect();
        let mut tasks: Vec<String> = mine.iter().map(|r| r.task.clone()).collect();
        tasks.sort_by_key(|t| registry_rank(t));
        tasks.dedup();

        for task in &tasks {
            let scores: Vec<Scalar> = mine
                .iter()
                .filter(|r| &r.task == task)
                .map(|r| r.score)
                .collect();
            let n = scores.len() as Scalar;
            let mean = scores.iter().sum::<Scalar>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<Scalar>() / n;
            task_summaries.push(TaskSummary {
                task: task.clone(),
                agent: agent.clone(),
                n_runs: scores.len(),
                mean,
                std: var.sqrt(),
            });
        }

        // Grouping cells: (cell label, member tasks in registry order).
        let cells: Vec<(String, Vec<String>)> = match grouping {
            Grouping::PerTask => tasks.iter().map(|t| (t.clone(), vec![t.clone()])).collect(),
            Grouping::PerDomain => {
                let mut cells: Vec<(String, Vec<String>)> = Vec::new();
                for (name, domain) in TASK_REGISTRY {
                    if tasks.iter().any(|t| t == name.as_str()) {
                        match cells.iter_mut().find(|(d, _)| d == domain) {
                            Some((_, members)) => members.push(name.as_str().to_string()),
                            None => cells
                                .push((domain.to_string(), vec![name.as_str().to_string()])),
                        }
                    }
                }
                cells
            }
            Grouping::Overall => vec![("overall".to_string(), tasks.clone())],
        };

        for (cell, members) in cells {
            let columns: Vec<Vec<Scalar>> = members
                .iter()
                .map(|task| {
                    mine.iter()
                        .filter(|r| &r.task == task)
                        .map(|r| r.score)
                        .collect()
                })
                .collect();
            let pooled: Vec<Scalar> = columns.iter().flatten().copied().collect();
            let point = iqm(&pooled)?;
            let mut rng = crate::rng::derive_rng(seed, "bootstrap", &[registry_rank(&members[0]) as u64]);
            let (ci_lower, ci_upper) =
                stratified_bootstrap_ci(&columns, n_resamples, DEFAULT_CI_LEVEL, &mut rng)?;
            debug_assert!(ci_lower <= point + 1e-12 && point <= ci_upper + 1e-12);
            group_summaries.push(GroupSummary {
                group: cell,
                agent: agent.clone(),
                n_runs: pooled.len(),
                iqm: point,
                ci_lower,
                ci_upper,
            });
        }
    }

    Ok(AggregateReport {
        grouping,
        step_budget,
        n_resamples,
        task_summaries,
        group_summaries,
    })
}

/// CSV rendering: task rows first (registry order), then group rows.
pub fn render_csv(report: &AggregateReport) -> String {
    let mut out = String::new();
    out.push_str("kind,name,agent,n_runs,mean,std,iqm,ci_lower,ci_upper\n");
    for t in &report.task_summaries {
        out.push_str(&format!(
            "task,{},{},{},{:.6},{:.6},,,\n",
            t.task, t.agent, t.n_runs, t.mean, t.std
        ));
    }
    for g in &report.group_summaries {
        out.push_str(&format!(
            "group,{},{},{},,,{:.6},{:.6},{:.6}\n",
            g.group, g.agent, g.n_runs, g.iqm, g.ci_lower, g.ci_upper
        ));
    }
    out
}

/// Fixed-width text table: one row per task (mean +- std) and per group
/// (IQM [lo, hi]), one column per agent.
pub fn render_text(report: &AggregateReport) -> String {
    let mut agents: Vec<String> = report
        .task_summaries
        .iter()
        .map(|t| t.agent.clone())
        .chain(report.group_summaries.iter().map(|g| g.agent.clone()))
        .collect();
    agents.sort();
    agents.dedup();

    let mut tasks: Vec<String> = report.task_summaries.iter().map(|t| t.task.clone()).collect();
    tasks.sort_by_key(|t| registry_rank(t));
    tasks.dedup();
    let mut groups: Vec<String> = report.group_summaries.iter().map(|g| g.group.clone()).collect();
    groups.sort();
    groups.dedup();

    const CELL: usize = 22;
    let mut out = String::new();
    out.push_str(&format!("{:<18}", "name"));
    for agent in &agents {
        out.push_str(&format!("{agent:>CELL$}"));
    }
    out.push('\n');
    for task in &tasks {
        out.push_str(&format!("{task:<18}"));
        for agent in &agents {
            let cell = report
                .task_summaries
                .iter()
                .find(|t| &t.task == task && &t.agent == agent)
                .map(|t| format!("{:.2} +- {:.2}", t.mean, t.std))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!("{cell:>CELL$}"));
        }
        out.push('\n');
    }
    for group in &groups {
        let label = format!("[{group}]");
        out.push_str(&format!("{label:<18}"));
        for agent in &agents {
            let cell = report
                .group_summaries
                .iter()
                .find(|g| &g.group == group && &g.agent == agent)
                .map(|g| format!("{:.2} [{:.2},{:.2}]", g.iqm, g.ci_lower, g.ci_upper))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!("{cell:>CELL$}"));
        }
        out.push('\n');
    }
    out
}
