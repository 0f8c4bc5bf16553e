//! Per-task metrics and their aggregation over tasks and seeds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, balanced_accuracy_at, mean_std, percentile_threshold};
use crate::config::{Protocol, RunConfig};
use crate::data::Label;
use crate::detector::{DetectionScore, ScoreRow};
use crate::error::{ClanError, Result};
use crate::pipeline::{enumerate_tasks, load_raw, run_task, TaskOutcome, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(values: &[f64]) -> Self {
        Self {
            n: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub seed: u64,
    pub known: Vec<Label>,
    /// AUROC of `sc_clan`, known test episodes as the positive class.
    pub auroc: f64,
    pub auroc_time: f64,
    pub auroc_frequency: f64,
    pub balanced_accuracy: f64,
    /// `score > threshold` predicts known.
    pub threshold: f64,
    pub known_scores: ScoreSummary,
    pub new_scores: ScoreSummary,
}

/// Metrics of one task from its test-split scores.
pub fn evaluate_rows(task: &TaskSpec, rows: &[ScoreRow]) -> Result<TaskMetrics> {
    let known: BTreeSet<Label> = task.known.iter().copied().collect();
    let is_known: Vec<bool> = rows.iter().map(|r| known.contains(&r.label)).collect();
    let split = |f: fn(&ScoreRow) -> f64| {
        let mut k = Vec::new();
        let mut n = Vec::new();
        for (r, &isk) in rows.iter().zip(&is_known) {
            if isk { k.push(f(r)) } else { n.push(f(r)) }
        }
        (k, n)
    };
    let (k, n) = split(|r| r.sc_clan);
    if k.is_empty() || n.is_empty() {
        return Err(ClanError::Contract(format!(
            "task {}: the test split needs both known and new episodes",
            task.id
        )));
    }
    let (kt, nt) = split(|r| r.sc_t);
    let (kf, nf) = split(|r| r.sc_f);
    let all: Vec<f64> = rows.iter().map(|r| r.sc_clan).collect();
    let threshold = percentile_threshold(&all, &is_known);
    Ok(TaskMetrics {
        task: task.id.clone(),
        seed: task.seed,
        known: task.known.clone(),
        auroc: auroc(&k, &n)?,
        auroc_time: auroc(&kt, &nt)?,
        auroc_frequency: auroc(&kf, &nf)?,
        balanced_accuracy: balanced_accuracy_at(&all, &is_known, threshold)?,
        threshold,
        known_scores: ScoreSummary::of(&k),
        new_scores: ScoreSummary::of(&n),
    })
}

pub fn evaluate_scores(task: &TaskSpec, scores: &[DetectionScore]) -> Result<TaskMetrics> {
    let rows: Vec<ScoreRow> = scores
        .iter()
        .map(|s| ScoreRow {
            episode_id: s.episode_id,
            label: s.label,
            sc_t: s.time.total,
            sc_f: s.frequency.total,
            sc_clan: s.sc_clan,
        })
        .collect();
    evaluate_rows(task, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Absent with a single task.
    pub std: Option<f64>,
}

impl MeanStd {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        let (mean, std) = mean_std(&v);
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auroc: MeanStd,
    pub auroc_time: MeanStd,
    pub auroc_frequency: MeanStd,
    pub balanced_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub threshold_policy: String,
    pub tasks: Vec<TaskMetrics>,
    /// Unweighted over all task rows (tasks × seeds).
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(cfg: &RunConfig, tasks: Vec<TaskMetrics>) -> Self {
        let aggregate = Aggregate {
            auroc: MeanStd::of(tasks.iter().map(|t| t.auroc)),
            auroc_time: MeanStd::of(tasks.iter().map(|t| t.auroc_time)),
            auroc_frequency: MeanStd::of(tasks.iter().map(|t| t.auroc_frequency)),
            balanced_accuracy: MeanStd::of(tasks.iter().map(|t| t.balanced_accuracy)),
        };
        Self {
            config_hash: cfg.hash(),
            protocol: cfg.run.protocol,
            seeds: cfg.run.seeds.clone(),
            threshold_policy: "percentile of all test scores at the new-episode share; score > threshold is known".into(),
            tasks,
            aggregate,
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8}\n",
            "task", "AUROC", "AUROC_T", "AUROC_F", "BA"
        );
        for t in &self.tasks {
            s.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                t.task, t.auroc, t.auroc_time, t.auroc_frequency, t.balanced_accuracy
            ));
        }
        let a = &self.aggregate;
        s.push_str(&format!("AUROC    {}\n", a.auroc));
        s.push_str(&format!("AUROC_T  {}\n", a.auroc_time));
        s.push_str(&format!("AUROC_F  {}\n", a.auroc_frequency));
        s.push_str(&format!("BA       {}\n", a.balanced_accuracy));
        s.push_str(&format!("config   {}\n", self.config_hash));
        s
    }
}

/// Runs every task of the configured protocol in memory, tasks in parallel.
pub fn run_protocol(cfg: &RunConfig) -> Result<(EvalReport, Vec<TaskOutcome>)> {
    use rayon::prelude::*;
    let raw = load_raw(cfg)?;
    let tasks = enumerate_tasks(cfg, &raw)?;
    let outcomes: Vec<TaskOutcome> = tasks.par_iter().map(|t| run_task(&raw, t, cfg)).collect::<Result<_>>()?;
    let report = EvalReport::new(cfg, outcomes.iter().map(|o| o.metrics.clone()).collect());
    Ok((report, outcomes))
}

/// Every class in turn as the only known class.
pub fn run_one_class(cfg: &RunConfig) -> Result<EvalReport> {
    let mut c = cfg.clone();
    c.run.protocol = Protocol::OneClass;
    run_protocol(&c).map(|r| r.0)
}

/// Random halves of the label set, `run.n_trials` times per seed.
pub fn run_multi_class(cfg: &RunConfig) -> Result<EvalReport> {
    let mut c = cfg.clone();
    c.run.protocol = Protocol::MultiClass;
    run_protocol(&c).map(|r| r.0)
}
