//! Readers for the two on-disk episode formats.
//!
//! * `episode-jsonl`: one object per line,
//!   `{"label": int, "subject": str?, "values": [[f64; L]; D]}` (channel-major).
//! * `episode-csv-dir`: one CSV per episode named `<label>_<id>.csv`, rows are
//!   timesteps and columns are channels. A non-numeric first row is taken as a
//!   header.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::episode::{DatasetManifest, Episode, Label};
use crate::error::{ClanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    EpisodeJsonl,
    EpisodeCsvDir,
}

impl FromStr for DatasetFormat {
    type Err = ClanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episode-jsonl" => Ok(DatasetFormat::EpisodeJsonl),
            "episode-csv-dir" => Ok(DatasetFormat::EpisodeCsvDir),
            other => Err(ClanError::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    label: Label,
    #[serde(default)]
    subject: Option<String>,
    values: Vec<Vec<f64>>,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(ClanError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
        ));
    }
    let episodes = match format {
        DatasetFormat::EpisodeJsonl => read_jsonl(path)?,
        DatasetFormat::EpisodeCsvDir => read_csv_dir(path)?,
    };
    DatasetManifest::from_episodes(episodes)
}

fn channel_matrix(rows: Vec<Vec<f64>>) -> std::result::Result<Array2<f64>, String> {
    let d = rows.len();
    if d == 0 {
        return Err("record has no channels".into());
    }
    let l = rows[0].len();
    if l == 0 {
        return Err("record has no timesteps".into());
    }
    if let Some((c, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != l) {
        return Err(format!("channel {c} has {} timesteps, channel 0 has {l}", r.len()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("record contains non-finite values".into());
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((d, l), flat).map_err(|e| e.to_string())
}

fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| ClanError::io(path, e))?;
    let mut episodes = Vec::new();
    let mut channels = None;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ClanError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: JsonRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let values = channel_matrix(record.values).map_err(parse_err)?;
        match channels {
            None => channels = Some(values.nrows()),
            Some(d) if d != values.nrows() => {
                return Err(ClanError::Schema(format!(
                    "{}:{line_no}: record has {} channels, earlier records have {d}",
                    path.display(),
                    values.nrows()
                )))
            }
            Some(_) => {}
        }
        let mut episode = Episode::new(episodes.len() as u64, record.label, values);
        episode.subject = record.subject;
        episodes.push(episode);
    }
    Ok(episodes)
}

fn label_from_file_name(path: &Path) -> Option<Label> {
    let stem = path.file_stem()?.to_str()?;
    let (label, _id) = stem.split_once('_')?;
    label.parse().ok()
}

fn read_csv_dir(dir: &Path) -> Result<Vec<Episode>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ClanError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();

    let mut episodes = Vec::with_capacity(files.len());
    let mut channels = None;
    for file in files {
        let label = label_from_file_name(&file).ok_or_else(|| ClanError::Parse {
            path: file.clone(),
            line: 0,
            message: "file name must look like `<label>_<id>.csv`".into(),
        })?;
        let values = read_csv_episode(&file)?;
        match channels {
            None => channels = Some(values.nrows()),
            Some(d) if d != values.nrows() => {
                return Err(ClanError::Schema(format!(
                    "{}: {} channels, earlier files have {d}",
                    file.display(),
                    values.nrows()
                )))
            }
            Some(_) => {}
        }
        episodes.push(Episode::new(episodes.len() as u64, label, values));
    }
    Ok(episodes)
}

fn read_csv_episode(file: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| ClanError::Parse {
            path: file.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 1;
        let record = record.map_err(|e| ClanError::Parse {
            path: file.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(ClanError::Parse {
                            path: file.to_path_buf(),
                            line,
                            message: format!("{} columns, expected {}", row.len(), first.len()),
                        });
                    }
                }
                rows.push(row);
            }
            Err(_) if line == 1 => continue,
            Err(e) => {
                return Err(ClanError::Parse {
                    path: file.to_path_buf(),
                    line,
                    message: e.to_string(),
                })
            }
        }
    }
    // rows are timesteps; transpose to channel-major
    let l = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let channel_major: Vec<Vec<f64>> = (0..d).map(|c| rows.iter().map(|r| r[c]).collect()).collect();
    if l == 0 {
        return Err(ClanError::Parse {
            path: file.to_path_buf(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    channel_matrix(channel_major).map_err(|message| ClanError::Parse {
        path: file.to_path_buf(),
        line: 0,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn single_record_manifest() {
        let f = jsonl(&[r#"{"label":1,"values":[[0,1,2]]}"#]);
        let m = load_dataset(f.path(), DatasetFormat::EpisodeJsonl).unwrap();
        assert_eq!(m.episodes.len(), 1);
        assert_eq!(m.channels, 1);
        assert_eq!(m.l_max, 3);
        assert_eq!(m.episodes[0].mask, vec![true; 3]);
        assert_eq!(m.episodes[0].values.row(0).to_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn inconsistent_channels_is_schema_error() {
        let f = jsonl(&[
            r#"{"label":1,"values":[[0,1],[1,2]]}"#,
            r#"{"label":2,"values":[[0,1],[1,2],[3,4]]}"#,
        ]);
        let err = load_dataset(f.path(), DatasetFormat::EpisodeJsonl).unwrap_err();
        assert!(matches!(err, ClanError::Schema(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_position() {
        let f = jsonl(&[r#"{"label":1,"values":[[0,1]]}"#, r#"{"label":"x"}"#]);
        match load_dataset(f.path(), DatasetFormat::EpisodeJsonl).unwrap_err() {
            ClanError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ragged_channels_rejected() {
        let f = jsonl(&[r#"{"label":1,"values":[[0,1],[1]]}"#]);
        assert!(matches!(
            load_dataset(f.path(), DatasetFormat::EpisodeJsonl),
            Err(ClanError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_directory_one_file_per_episode() {
        let dir = tempfile::tempdir().unwrap();
        let lens = [3usize, 5, 4, 2];
        for (i, len) in lens.iter().enumerate() {
            let mut text = String::from("acc_x,acc_y\n");
            for t in 0..*len {
                text.push_str(&format!("{},{}\n", t, t * 2));
            }
            std::fs::write(dir.path().join(format!("{}_{i}.csv", i % 2)), text).unwrap();
        }
        let m = load_dataset(dir.path(), DatasetFormat::EpisodeCsvDir).unwrap();
        assert_eq!(m.episodes.len(), 4);
        assert_eq!(m.l_max, *lens.iter().max().unwrap());
        assert_eq!(m.channels, 2);
        let labels: Vec<_> = m.episodes.iter().map(|e| e.label).collect();
        // files are read in name order: 0_0, 0_2, 1_1, 1_3
        assert_eq!(labels, vec![0, 0, 1, 1]);
        assert_eq!(m.episodes[2].values.row(1).to_vec(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn missing_path_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/x.jsonl"), DatasetFormat::EpisodeJsonl)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
