//! The end-to-end pipeline, both in memory and as resumable on-disk stages.
//!
//! Disk layout under `run.output_dir`:
//!
//! ```text
//! config.resolved.toml
//! tasks.json
//! tasks/<task>/manifest.json
//! tasks/<task>/cst-report.{time,frequency}.json
//! tasks/<task>/tower.{time,frequency}.json        (+ .best.json with validation)
//! tasks/<task>/bank.{time,frequency}.json
//! tasks/<task>/train-log.{time,frequency}.csv
//! tasks/<task>/train-log.clan.csv
//! tasks/<task>/scores.csv
//! report.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Protocol, RunConfig};
use crate::contrastive::{build_representation_bank, init_tower_state, train_tower, BestVal, EpochLog, RepresentationBank, TowerState};
use crate::cst::{build_cst_report, AurocReport};
use crate::data::{
    generate_synthetic, load_dataset, pad_and_mask, quantize_sensor_levels, smooth_moving_average, split_dataset,
    zscore_normalize, DatasetManifest, Episode, Label, Split,
};
use crate::detector::{score_dataset, write_scores_csv, DetectionScore, Tower};
use crate::domain::Domain;
use crate::error::{ClanError, Result};
use crate::eval::protocol::{evaluate_scores, EvalReport, TaskMetrics};
use crate::nn::{Checkpoint, HeadLayout, ModelParams};
use crate::rng::{Stream, StreamKey};
use crate::spectral::frequency_manifest;

/// Minimum episodes for a class to serve as the known class of a task.
pub const MIN_CLASS_EPISODES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub seed: u64,
    pub known: Vec<Label>,
}

/// Artifact wrapper carrying provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskList {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSpec>,
}

/// Loads or generates the dataset and applies the optional signal filters.
pub fn load_raw(cfg: &RunConfig) -> Result<DatasetManifest> {
    let mut m = match (&cfg.data.path, &cfg.synthetic) {
        (Some(p), None) => load_dataset(p, cfg.data.format)?,
        (None, Some(s)) => generate_synthetic(s)?,
        _ => return Err(ClanError::Config("one of data.path or [synthetic] is required".into())),
    };
    if let Some(w) = cfg.data.smoothing_width {
        m = smooth_moving_average(&m, w)?;
    }
    if let Some(levels) = cfg.data.quantize_levels {
        m = quantize_sensor_levels(&m, levels)?;
    }
    Ok(m)
}

/// Expands the protocol and seed list into independent tasks.
pub fn enumerate_tasks(cfg: &RunConfig, raw: &DatasetManifest) -> Result<Vec<TaskSpec>> {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for e in &raw.episodes {
        *counts.entry(e.label).or_default() += 1;
    }
    let labels: Vec<Label> = counts.keys().copied().collect();
    let mut tasks = Vec::new();
    for &seed in &cfg.run.seeds {
        match cfg.run.protocol {
            Protocol::Fixed => {
                let known: BTreeSet<Label> = cfg.run.known_labels.iter().copied().collect();
                if let Some(l) = known.iter().find(|l| !counts.contains_key(l)) {
                    return Err(ClanError::Config(format!("known label {l} does not occur in the data")));
                }
                tasks.push(TaskSpec {
                    id: format!("seed{seed}-fixed"),
                    seed,
                    known: known.into_iter().collect(),
                });
            }
            Protocol::OneClass => {
                for (&label, &n) in &counts {
                    if n < MIN_CLASS_EPISODES {
                        warn!("class {label} has {n} episodes; skipping its one-class task");
                        continue;
                    }
                    tasks.push(TaskSpec {
                        id: format!("seed{seed}-class{label}"),
                        seed,
                        known: vec![label],
                    });
                }
            }
            Protocol::MultiClass => {
                if labels.len() < 2 {
                    return Err(ClanError::Config("multi-class protocol needs at least two labels".into()));
                }
                for trial in 0..cfg.run.n_trials {
                    let mut shuffled = labels.clone();
                    shuffled.shuffle(&mut StreamKey::new(seed, Stream::Trials).counter(trial as u64).rng());
                    let mut known = shuffled[..labels.len() / 2].to_vec();
                    known.sort_unstable();
                    tasks.push(TaskSpec {
                        id: format!("seed{seed}-trial{trial}"),
                        seed,
                        known,
                    });
                }
            }
        }
    }
    if tasks.is_empty() {
        return Err(ClanError::Config("no runnable tasks".into()));
    }
    Ok(tasks)
}

/// Split, z-score with train statistics, pad.
pub fn prepare_task(raw: &DatasetManifest, task: &TaskSpec, cfg: &RunConfig) -> Result<DatasetManifest> {
    let known: BTreeSet<Label> = task.known.iter().copied().collect();
    let m = split_dataset(raw, cfg.data.ratios, &known, task.seed)?;
    let m = zscore_normalize(&m)?;
    let l_max = cfg.data.l_max.unwrap_or(m.l_max);
    let m = pad_and_mask(&m, l_max)?;
    m.validate()?;
    Ok(m)
}

/// The time manifest together with its frequency-domain counterpart.
pub struct DomainData {
    pub time: DatasetManifest,
    pub frequency: DatasetManifest,
}

impl DomainData {
    pub fn new(time: DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        let frequency = frequency_manifest(&time, cfg.data.fft_length)?;
        Ok(Self { time, frequency })
    }

    pub fn get(&self, d: Domain) -> &DatasetManifest {
        match d {
            Domain::Time => &self.time,
            Domain::Frequency => &self.frequency,
        }
    }
}

fn owned(eps: Vec<&Episode>) -> Vec<Episode> {
    eps.into_iter().cloned().collect()
}

fn encoder_for(cfg: &RunConfig, m: &DatasetManifest, head: HeadLayout) -> crate::nn::EncoderConfig {
    cfg.encoder.build(m.channels, m.l_max, head)
}

pub fn run_cst(data: &DomainData, domain: Domain, task: &TaskSpec, cfg: &RunConfig, hash: &str) -> Result<AurocReport> {
    let m = data.get(domain);
    let train = owned(m.episodes_in(Split::Train));
    let val = owned(m.known_in(Split::Val));
    let enc = encoder_for(cfg, m, HeadLayout::Discriminator);
    build_cst_report(&train, &val, domain, &cfg.transforms, &enc, &cfg.cst, task.seed, hash)
}

/// Trains (or resumes) one tower. `on_epoch` receives each new state.
pub fn run_train(
    data: &DomainData,
    report: &AurocReport,
    task: &TaskSpec,
    cfg: &RunConfig,
    resume: Option<TowerState>,
    on_epoch: &mut dyn FnMut(&TowerState) -> Result<()>,
) -> Result<TowerState> {
    let domain = report.domain;
    let m = data.get(domain);
    let train = owned(m.episodes_in(Split::Train));
    let val = owned(m.known_in(Split::Val));
    let enc = encoder_for(cfg, m, HeadLayout::Tower { n_classes: report.selected.k() + 1 });
    let state = match resume {
        Some(s) => s,
        None => init_tower_state(&enc, domain, task.seed)?,
    };
    train_tower(
        &train,
        Some(&val),
        &report.selected,
        report.positive_kind,
        &cfg.transforms,
        &cfg.train,
        task.seed,
        domain,
        state,
        on_epoch,
    )
}

/// The parameters used for scoring.
pub fn scoring_params<'a>(state: &'a TowerState, cfg: &RunConfig) -> &'a ModelParams<f32> {
    match (&state.best, cfg.detect.use_best_val) {
        (Some(b), true) => &b.params,
        _ => &state.params,
    }
}

pub fn run_bank(
    data: &DomainData,
    params: &ModelParams<f32>,
    report: &AurocReport,
    task: &TaskSpec,
    cfg: &RunConfig,
) -> Result<RepresentationBank> {
    let m = data.get(report.domain);
    let train = owned(m.episodes_in(Split::Train));
    build_representation_bank(params, &train, &report.selected, &cfg.transforms, report.domain, task.seed)
}

pub fn run_detect(data: &DomainData, time: &Tower, frequency: &Tower, task: &TaskSpec, cfg: &RunConfig) -> Result<Vec<DetectionScore>> {
    let t = owned(data.time.episodes_in(Split::Test));
    let f = owned(data.frequency.episodes_in(Split::Test));
    score_dataset(&t, &f, time, frequency, &cfg.transforms, task.seed, cfg.detect.similarity)
}

/// Everything one task produces, kept in memory.
pub struct TaskOutcome {
    pub task: TaskSpec,
    pub reports: Vec<AurocReport>,
    pub towers: Vec<TowerState>,
    pub scores: Vec<DetectionScore>,
    pub metrics: TaskMetrics,
}

/// Runs every stage of one task without touching the disk.
pub fn run_task(raw: &DatasetManifest, task: &TaskSpec, cfg: &RunConfig) -> Result<TaskOutcome> {
    let hash = cfg.hash();
    let data = DomainData::new(prepare_task(raw, task, cfg)?, cfg)?;
    let mut reports = Vec::new();
    let mut states = Vec::new();
    let mut towers = Vec::new();
    for d in Domain::BOTH {
        let report = run_cst(&data, d, task, cfg, &hash)?;
        info!("task {}: {}", task.id, report.table().trim_end());
        let state = run_train(&data, &report, task, cfg, None, &mut |_| Ok(()))?;
        let params = scoring_params(&state, cfg).clone();
        let bank = run_bank(&data, &params, &report, task, cfg)?;
        towers.push(Tower {
            domain: d,
            params,
            bank,
            cst: report.selected.clone(),
        });
        reports.push(report);
        states.push(state);
    }
    let scores = run_detect(&data, &towers[0], &towers[1], task, cfg)?;
    let metrics = evaluate_scores(task, &scores)?;
    Ok(TaskOutcome {
        task: task.clone(),
        reports,
        towers: states,
        scores,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// On-disk stages

pub struct Workspace {
    pub root: PathBuf,
    pub hash: String,
}

impl Workspace {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.run.output_dir.clone(),
            hash: cfg.hash(),
        }
    }

    pub fn task_dir(&self, task: &TaskSpec) -> PathBuf {
        self.root.join("tasks").join(&task.id)
    }

    fn stamp<T>(&self, task: &TaskSpec, body: T) -> Stamped<T> {
        Stamped {
            config_hash: self.hash.clone(),
            seed: task.seed,
            task: task.id.clone(),
            body,
        }
    }

    fn read_stamped<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        let s: Stamped<T> = read_json(path)?;
        if s.config_hash != self.hash {
            return Err(ClanError::Config(format!(
                "{} was produced by a different configuration; rerun the earlier stages",
                path.display()
            )));
        }
        Ok(s.body)
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        let path = self.root.join("tasks.json");
        let list: TaskList = read_json(&path)?;
        if list.config_hash != self.hash {
            return Err(ClanError::Config(format!(
                "{} was produced by a different configuration; rerun `prepare`",
                path.display()
            )));
        }
        Ok(list.tasks)
    }

    fn data(&self, task: &TaskSpec, cfg: &RunConfig) -> Result<DomainData> {
        let m: DatasetManifest = self.read_stamped(&self.task_dir(task).join("manifest.json"))?;
        DomainData::new(m, cfg)
    }

    fn report(&self, task: &TaskSpec, d: Domain) -> Result<AurocReport> {
        self.read_stamped(&self.task_dir(task).join(format!("cst-report.{d}.json")))
    }

    fn provenance(&self, task: &TaskSpec) -> Vec<(&'static str, String)> {
        vec![
            ("config_hash", self.hash.clone()),
            ("seed", task.seed.to_string()),
            ("task", task.id.clone()),
        ]
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ClanError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| ClanError::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| ClanError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ClanError::json(path.display().to_string(), e))
}

fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match cfg.run.jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ClanError::Config(e.to_string()))?
            .install(f),
    }
}

fn for_each_task<T: Send>(tasks: &[TaskSpec], f: impl Fn(&TaskSpec) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    tasks.par_iter().map(f).collect()
}

/// Normalized, padded, split manifests for every task.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<Vec<TaskSpec>> {
    let ws = Workspace::new(cfg);
    let raw = load_raw(cfg)?;
    let tasks = enumerate_tasks(cfg, &raw)?;
    fs::create_dir_all(&ws.root).map_err(|e| ClanError::io(&ws.root, e))?;
    let resolved = ws.root.join("config.resolved.toml");
    let toml = format!("# config_hash: {}\n{}", ws.hash, cfg.to_toml()?);
    fs::write(&resolved, toml).map_err(|e| ClanError::io(&resolved, e))?;
    with_pool(cfg, || {
        for_each_task(&tasks, |t| {
            let m = prepare_task(&raw, t, cfg)?;
            write_json(&ws.task_dir(t).join("manifest.json"), &ws.stamp(t, m))
        })
    })?;
    write_json(
        &ws.root.join("tasks.json"),
        &TaskList {
            config_hash: ws.hash.clone(),
            seeds: cfg.run.seeds.clone(),
            tasks: tasks.clone(),
        },
    )?;
    info!("prepared {} task(s) in {}", tasks.len(), ws.root.display());
    Ok(tasks)
}

/// AUROC reports and CSTs for both domains of every task.
pub fn cmd_cst(cfg: &RunConfig) -> Result<Vec<AurocReport>> {
    let ws = Workspace::new(cfg);
    let tasks = ws.tasks()?;
    let nested = with_pool(cfg, || {
        for_each_task(&tasks, |t| {
            let data = ws.data(t, cfg)?;
            Domain::BOTH
                .iter()
                .map(|&d| {
                    let r = run_cst(&data, d, t, cfg, &ws.hash)?;
                    write_json(&ws.task_dir(t).join(format!("cst-report.{d}.json")), &ws.stamp(t, r.clone()))?;
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;
    Ok(nested.into_iter().flatten().collect())
}

fn write_train_log(path: &Path, log: &[EpochLog], provenance: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in provenance {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push_str("epoch,l_con,l_cls,l_total,val_total\n");
    for r in log {
        let val = r.val_total.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_con, r.l_cls, r.l_total, val));
    }
    fs::write(path, text).map_err(|e| ClanError::io(path, e))
}

/// Reads a training log written by this module.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("epoch") || line.is_empty() {
            continue;
        }
        let bad = |m: String| ClanError::Parse {
            path: path.into(),
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            l_con: num(f[1])?,
            l_cls: num(f[2])?,
            l_total: num(f[3])?,
            val_total: if f[4].is_empty() { None } else { Some(num(f[4])?) },
        });
    }
    Ok(out)
}

fn checkpoint_of(state: &TowerState, report: &AurocReport, ws: &Workspace, task: &TaskSpec) -> Checkpoint {
    let mut ck = Checkpoint::new(&state.params, &ws.hash, task.seed, report.domain.name());
    ck.cst = report.selected.kinds().to_vec();
    ck.positive_kind = Some(report.positive_kind);
    ck.epochs_done = state.epochs_done;
    ck.optimizer = Some(state.adam.clone());
    ck
}

/// Restores a partially trained tower saved by an earlier `train`.
fn load_resume(ws: &Workspace, dir: &Path, d: Domain) -> Result<Option<TowerState>> {
    let path = dir.join(format!("tower.{d}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != ws.hash {
        warn!("{}: stale checkpoint from another configuration; training from scratch", path.display());
        return Ok(None);
    }
    let params = ck.params()?;
    let adam = ck
        .optimizer
        .clone()
        .ok_or_else(|| ClanError::Schema(format!("{}: no optimizer state to resume from", path.display())))?;
    let mut log = read_train_log(&dir.join(format!("train-log.{d}.csv")))?;
    log.retain(|r| r.epoch <= ck.epochs_done);
    if log.len() != ck.epochs_done {
        return Err(ClanError::Schema(format!("{}: training log does not match the checkpoint", path.display())));
    }
    let best_path = dir.join(format!("tower.{d}.best.json"));
    let best = if best_path.exists() {
        let b = Checkpoint::load(&best_path)?;
        let val_total = log
            .get(b.epochs_done.wrapping_sub(1))
            .and_then(|r| r.val_total)
            .ok_or_else(|| ClanError::Schema(format!("{}: best epoch missing from log", best_path.display())))?;
        Some(BestVal {
            epoch: b.epochs_done,
            val_total,
            params: b.params()?,
        })
    } else {
        None
    };
    info!("resuming {d} tower from epoch {}", ck.epochs_done);
    Ok(Some(TowerState {
        params,
        adam,
        epochs_done: ck.epochs_done,
        log,
        best,
    }))
}

/// Options of the `train` stage that do not affect results.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop (with a resumable checkpoint) once this many epochs are done.
    pub stop_after: Option<usize>,
}

/// Signals a deliberate stop requested through [`TrainOptions`].
const STOP_MARKER: &str = "training stopped on request";

/// Trains both towers of every task, builds banks and writes logs.
pub fn cmd_train(cfg: &RunConfig, opts: TrainOptions) -> Result<()> {
    let ws = Workspace::new(cfg);
    let tasks = ws.tasks()?;
    with_pool(cfg, || {
        for_each_task(&tasks, |t| {
            let dir = ws.task_dir(t);
            let data = ws.data(t, cfg)?;
            let prov = ws.provenance(t);
            let mut logs = Vec::new();
            for d in Domain::BOTH {
                let report = ws.report(t, d)?;
                let resume = load_resume(&ws, &dir, d)?;
                let tower_path = dir.join(format!("tower.{d}.json"));
                let log_path = dir.join(format!("train-log.{d}.csv"));
                let best_path = dir.join(format!("tower.{d}.best.json"));
                let mut save = |s: &TowerState| -> Result<()> {
                    let done = s.epochs_done;
                    let last = done == cfg.train.epochs;
                    let stop = opts.stop_after.is_some_and(|n| done >= n);
                    if last || stop || done % cfg.run.checkpoint_every.max(1) == 0 {
                        checkpoint_of(s, &report, &ws, t).save(&tower_path)?;
                        write_train_log(&log_path, &s.log, &prov)?;
                        if let Some(b) = &s.best {
                            let mut ck = Checkpoint::new(&b.params, &ws.hash, t.seed, d.name());
                            ck.cst = report.selected.kinds().to_vec();
                            ck.positive_kind = Some(report.positive_kind);
                            ck.epochs_done = b.epoch;
                            ck.save(&best_path)?;
                        }
                    }
                    if stop && !last {
                        return Err(ClanError::Config(STOP_MARKER.into()));
                    }
                    Ok(())
                };
                let state = match run_train(&data, &report, t, cfg, resume, &mut save) {
                    Err(ClanError::Config(m)) if m == STOP_MARKER => return Ok(()),
                    other => other?,
                };
                if state.epochs_done == 0 {
                    checkpoint_of(&state, &report, &ws, t).save(&tower_path)?;
                    write_train_log(&log_path, &state.log, &prov)?;
                }
                let params = scoring_params(&state, cfg);
                let bank = run_bank(&data, params, &report, t, cfg)?;
                write_json(&dir.join(format!("bank.{d}.json")), &ws.stamp(t, bank))?;
                logs.push(state.log);
            }
            write_clan_log(&dir.join("train-log.clan.csv"), &logs[0], &logs[1], &prov)
        })
    })?;
    Ok(())
}

fn write_clan_log(path: &Path, time: &[EpochLog], freq: &[EpochLog], provenance: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in provenance {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    text.push_str("epoch,l_time,l_frequency,l_clan\n");
    for (a, b) in time.iter().zip(freq) {
        let clan = crate::contrastive::total_loss_clan(a.l_total, b.l_total);
        text.push_str(&format!("{},{},{},{}\n", a.epoch, a.l_total, b.l_total, clan));
    }
    fs::write(path, text).map_err(|e| ClanError::io(path, e))
}

fn load_tower(ws: &Workspace, t: &TaskSpec, d: Domain, cfg: &RunConfig) -> Result<Tower> {
    let dir = ws.task_dir(t);
    let report = ws.report(t, d)?;
    let best = dir.join(format!("tower.{d}.best.json"));
    let path = if cfg.detect.use_best_val && best.exists() {
        best
    } else {
        dir.join(format!("tower.{d}.json"))
    };
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != ws.hash {
        return Err(ClanError::Config(format!("{} comes from another configuration", path.display())));
    }
    if ck.epochs_done < cfg.train.epochs && path.ends_with(format!("tower.{d}.json")) {
        return Err(ClanError::Config(format!(
            "{}: training stopped after {} of {} epochs; rerun `train`",
            path.display(),
            ck.epochs_done,
            cfg.train.epochs
        )));
    }
    let bank: RepresentationBank = ws.read_stamped(&dir.join(format!("bank.{d}.json")))?;
    let tower = Tower {
        domain: d,
        params: ck.params()?,
        bank,
        cst: report.selected,
    };
    tower.validate()?;
    Ok(tower)
}

/// Scores every task's test split into `scores.csv`.
pub fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::new(cfg);
    let tasks = ws.tasks()?;
    with_pool(cfg, || {
        for_each_task(&tasks, |t| {
            let data = ws.data(t, cfg)?;
            let time = load_tower(&ws, t, Domain::Time, cfg)?;
            let freq = load_tower(&ws, t, Domain::Frequency, cfg)?;
            let scores = run_detect(&data, &time, &freq, t, cfg)?;
            write_scores_csv(&ws.task_dir(t).join("scores.csv"), &scores, &ws.provenance(t))
        })
    })?;
    Ok(())
}

/// Metrics of every task plus the aggregate, written to `report.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ws = Workspace::new(cfg);
    let tasks = ws.tasks()?;
    let mut rows = Vec::new();
    for t in &tasks {
        let path = ws.task_dir(t).join("scores.csv");
        let text = fs::read_to_string(&path).map_err(|e| ClanError::io(&path, e))?;
        if !text.contains(&format!("# config_hash: {}", ws.hash)) {
            return Err(ClanError::Config(format!("{} comes from another configuration", path.display())));
        }
        let scores = crate::detector::read_scores_csv(&path)?;
        rows.push(crate::eval::protocol::evaluate_rows(t, &scores)?);
    }
    let report = EvalReport::new(cfg, rows);
    write_json(&ws.root.join("report.json"), &report)?;
    let table = ws.root.join("report.txt");
    let mut f = fs::File::create(&table).map_err(|e| ClanError::io(&table, e))?;
    f.write_all(report.table().as_bytes()).map_err(|e| ClanError::io(&table, e))?;
    Ok(report)
}

/// `prepare`, `cst`, `train`, `detect` and `eval` in sequence.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    cmd_prepare(cfg)?;
    cmd_cst(cfg)?;
    cmd_train(cfg, TrainOptions::default())?;
    cmd_detect(cfg)?;
    cmd_eval(cfg)
}
