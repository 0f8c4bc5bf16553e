//! New-activity scores: nearest-neighbour similarity to the training bank
//! plus transform-classifier confidence, summed over transforms and towers.
//! Higher scores mean "more likely a known activity".

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::TransformParams;
use crate::contrastive::{eval_views, tower_outputs, RepresentationBank};
use crate::cst::CstSet;
use crate::data::{Episode, EpisodeId, Label};
use crate::domain::Domain;
use crate::error::{ClanError, Result};
use crate::nn::ModelParams;

/// Per-transform diagnostics of one tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub sc_con: f64,
    pub sc_cls: f64,
    /// `sc_con + sc_cls`
    pub total: f64,
    /// Highest bank similarity for each transform index.
    pub nearest: Vec<f64>,
    /// Classifier probability of the true transform index.
    pub prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub episode_id: EpisodeId,
    pub label: Label,
    pub time: DomainScore,
    pub frequency: DomainScore,
    /// `time.total + frequency.total`
    pub sc_clan: f64,
}

/// Similarity variant for the contrastive score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityScore {
    /// Cosine similarity.
    #[default]
    Cosine,
    /// Cosine similarity times the test projection's norm.
    CosineTimesNorm,
}

/// A trained tower with everything scoring needs.
#[derive(Debug, Clone)]
pub struct Tower {
    pub domain: Domain,
    pub params: ModelParams<f32>,
    pub bank: RepresentationBank,
    pub cst: CstSet,
}

impl Tower {
    pub fn validate(&self) -> Result<()> {
        if self.bank.kinds != self.cst.kinds() {
            return Err(ClanError::Invariant(format!(
                "{} bank was built for {:?}, CST is {:?}",
                self.domain,
                self.bank.kinds,
                self.cst.kinds()
            )));
        }
        if self.bank.z.len() != self.cst.k() + 1 {
            return Err(ClanError::Invariant("bank slot count differs from K+1".into()));
        }
        if self.params.config.n_classes() != Some(self.cst.k() + 1) {
            return Err(ClanError::Invariant("classifier width differs from K+1".into()));
        }
        Ok(())
    }
}

/// Dot product in a fixed left-to-right order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Largest similarity between `z` and any row of `bank` (exact full scan),
/// clamped to [-1, 1].
pub fn nearest_similarity(z: &[f64], bank: &ndarray::Array2<f64>) -> Result<f64> {
    if bank.nrows() == 0 {
        return Err(ClanError::Config("empty representation bank".into()));
    }
    let best = bank
        .rows()
        .into_iter()
        .map(|r| dot(z, r.as_slice().expect("bank rows are contiguous")))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best.clamp(-1.0, 1.0))
}

/// Sum of nearest similarities over transform indices.
pub fn score_con(nearest: &[f64]) -> f64 {
    nearest.iter().sum()
}

/// Sum over transform indices of the probability assigned to that index.
pub fn score_cls(probs: &[f64]) -> f64 {
    probs.iter().sum()
}

/// Scores many episodes with one tower; output order follows input order.
pub fn score_domain(
    tower: &Tower,
    episodes: &[Episode],
    tparams: &TransformParams,
    seed: u64,
    similarity: SimilarityScore,
) -> Result<Vec<DomainScore>> {
    tower.validate()?;
    let n = episodes.len();
    let k1 = tower.cst.k() + 1;
    let mut nearest = vec![vec![0.0; k1]; n];
    let mut prob = vec![vec![0.0; k1]; n];
    if n == 0 {
        return Ok(Vec::new());
    }
    for (j, kind) in tower.cst.kinds().iter().enumerate() {
        let views = eval_views(episodes, *kind, tparams, seed)?;
        let out = tower_outputs(&tower.params, &views)?;
        for i in 0..n {
            let z = out.z.row(i);
            let sim = nearest_similarity(z.as_slice().expect("contiguous"), &tower.bank.z[j])?;
            nearest[i][j] = match similarity {
                SimilarityScore::Cosine => sim,
                SimilarityScore::CosineTimesNorm => sim * out.norms[i],
            };
            prob[i][j] = out.probs[[i, j]];
        }
    }
    Ok(nearest
        .into_iter()
        .zip(prob)
        .map(|(nearest, prob)| {
            let sc_con = score_con(&nearest);
            let sc_cls = score_cls(&prob);
            DomainScore {
                sc_con,
                sc_cls,
                total: sc_con + sc_cls,
                nearest,
                prob,
            }
        })
        .collect())
}

/// Combines the two towers' scores.
pub fn score_clan(episode: &Episode, time: DomainScore, frequency: DomainScore) -> DetectionScore {
    let sc_clan = time.total + frequency.total;
    DetectionScore {
        episode_id: episode.id,
        label: episode.label,
        time,
        frequency,
        sc_clan,
    }
}

/// Scores a split: `time_eps` and `freq_eps` are the same episodes in the
/// two domains, in the same order.
pub fn score_dataset(
    time_eps: &[Episode],
    freq_eps: &[Episode],
    time: &Tower,
    frequency: &Tower,
    tparams: &TransformParams,
    seed: u64,
    similarity: SimilarityScore,
) -> Result<Vec<DetectionScore>> {
    if time_eps.len() != freq_eps.len() || time_eps.iter().zip(freq_eps).any(|(a, b)| a.id != b.id) {
        return Err(ClanError::Invariant("time and frequency episodes are not aligned".into()));
    }
    if time.domain != Domain::Time || frequency.domain != Domain::Frequency {
        return Err(ClanError::Config("towers passed in the wrong order".into()));
    }
    let ts = score_domain(time, time_eps, tparams, seed, similarity)?;
    let fs = score_domain(frequency, freq_eps, tparams, seed, similarity)?;
    Ok(time_eps
        .iter()
        .zip(ts.into_iter().zip(fs))
        .map(|(e, (t, f))| score_clan(e, t, f))
        .collect())
}

/// `episode_id,label,sc_T,sc_F,sc_clan,...` with per-transform diagnostics.
pub fn write_scores_csv(path: &Path, scores: &[DetectionScore], header: &[(&str, String)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ClanError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| ClanError::io(path, e);
    for (k, v) in header {
        writeln!(w, "# {k}: {v}").map_err(io)?;
    }
    let (kt, kf) = scores
        .first()
        .map(|s| (s.time.nearest.len(), s.frequency.nearest.len()))
        .unwrap_or((0, 0));
    let mut cols = vec![
        "episode_id".to_string(),
        "label".into(),
        "sc_T_con".into(),
        "sc_T_cls".into(),
        "sc_T".into(),
        "sc_F_con".into(),
        "sc_F_cls".into(),
        "sc_F".into(),
        "sc_clan".into(),
    ];
    for (d, k) in [("T", kt), ("F", kf)] {
        for j in 0..k {
            cols.push(format!("{d}_sim_{j}"));
            cols.push(format!("{d}_prob_{j}"));
        }
    }
    writeln!(w, "{}", cols.join(",")).map_err(io)?;
    for s in scores {
        let mut row = vec![
            s.episode_id.to_string(),
            s.label.to_string(),
            s.time.sc_con.to_string(),
            s.time.sc_cls.to_string(),
            s.time.total.to_string(),
            s.frequency.sc_con.to_string(),
            s.frequency.sc_cls.to_string(),
            s.frequency.total.to_string(),
            s.sc_clan.to_string(),
        ];
        for d in [&s.time, &s.frequency] {
            for (a, p) in d.nearest.iter().zip(&d.prob) {
                row.push(a.to_string());
                row.push(p.to_string());
            }
        }
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads back the `episode_id`, `label` and `sc_clan`, `sc_T`, `sc_F`
/// columns of a scores file.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ScoreRow>().enumerate() {
        out.push(rec.map_err(|e| ClanError::Parse {
            path: path.into(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub episode_id: EpisodeId,
    pub label: Label,
    #[serde(rename = "sc_T")]
    pub sc_t: f64,
    #[serde(rename = "sc_F")]
    pub sc_f: f64,
    pub sc_clan: f64,
}
