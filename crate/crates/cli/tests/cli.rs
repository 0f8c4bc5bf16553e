use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clan_core::data::{DatasetManifest, Split};
use clan_core::nn::Checkpoint;
use clan_core::pipeline::{read_json, read_train_log, Stamped};

const CONFIG: &str = r#"
[run]
known_labels = [0, 1]
seeds = [3]
checkpoint_every = 2

[synthetic]
n_known_classes = 2
n_new_classes = 2
episodes_per_class = 10
channels = 2
length = 24
frequency_bands = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]
noise_std = 0.3
seed = 11

[encoder]
model_dim = 8
proj_dim = 8

[cst.discriminator]
epochs = 2
batch_size = 16

[train]
epochs = 4
batch_size = 8
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn clan(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_clan"))
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs `cmd -c c.toml -o <out> extra...` and asserts success.
    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) -> String {
        let mut args = vec![cmd, "-c", "c.toml", "-o", out];
        args.extend_from_slice(extra);
        let o = self.clan(&args);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn task(out: &Path) -> PathBuf {
    out.join("tasks/seed3-fixed")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                v.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn prepare_is_repeatable_and_bad_input_exits_2() {
    let r = Run::new();
    r.ok("prepare", "out", &[]);
    let first = fs::read(task(&r.path("out")).join("manifest.json")).unwrap();
    r.ok("prepare", "out", &[]);
    assert_eq!(first, fs::read(task(&r.path("out")).join("manifest.json")).unwrap());

    let o = r.clan(&["prepare", "-c", "c.toml", "-o", "x", "--data", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let o = r.clan(&["prepare", "-c", "nope.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = r.clan(&["prepare", "-c", "c.toml", "--set", "train.tau=-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stages_compose_to_run_all() {
    let r = Run::new();
    r.ok("prepare", "a", &[]);
    let table = r.ok("cst", "a", &[]);
    assert!(table.contains("theta"), "{table}");
    for d in ["time", "frequency"] {
        let rep: serde_json::Value =
            serde_json::from_slice(&fs::read(task(&r.path("a")).join(format!("cst-report.{d}.json"))).unwrap()).unwrap();
        assert_eq!(rep["body"]["entries"].as_array().unwrap().len(), 10);
        assert!(rep["body"]["selected"].as_array().unwrap().len() >= 3);
    }

    // interrupted, then resumed
    r.ok("train", "a", &["--stop-after", "2"]);
    assert_eq!(read_train_log(&task(&r.path("a")).join("train-log.time.csv")).unwrap().len(), 2);
    r.ok("train", "a", &[]);
    r.ok("detect", "a", &[]);
    r.ok("eval", "a", &[]);

    r.ok("run-all", "b", &[]);
    let a = files(&r.path("a"));
    let b = files(&r.path("b"));
    assert_eq!(a.len(), b.len());
    for ((pa, ca), (pb, cb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(ca == cb, "{} differs", pa.display());
    }

    let t = task(&r.path("a"));
    for d in ["time", "frequency"] {
        let log = read_train_log(&t.join(format!("train-log.{d}.csv"))).unwrap();
        assert_eq!(log.len(), 4);
        let path = t.join(format!("tower.{d}.json"));
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.epochs_done, 4);
        let again = tempfile::NamedTempFile::new().unwrap();
        ck.save(again.path()).unwrap();
        assert_eq!(Checkpoint::load(again.path()).unwrap(), ck);
    }

    let m: Stamped<DatasetManifest> = read_json(&t.join("manifest.json")).unwrap();
    let scores = fs::read_to_string(t.join("scores.csv")).unwrap();
    let rows = scores.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, m.body.episodes_in(Split::Test).len());
    assert!(scores.contains(&format!("# config_hash: {}", m.config_hash)));

    // detection is idempotent
    r.ok("detect", "a", &[]);
    assert_eq!(scores, fs::read_to_string(t.join("scores.csv")).unwrap());

    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.path("a/report.json")).unwrap()).unwrap();
    let auroc = report["tasks"][0]["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
}

#[test]
fn later_stages_refuse_another_configuration() {
    let r = Run::new();
    r.ok("prepare", "a", &[]);
    let o = r.clan(&["cst", "-c", "c.toml", "-o", "a", "--epochs", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn protocols_emit_one_row_per_task() {
    let r = Run::new();
    let out = r.ok("run-all", "one", &["--protocol", "one-class", "--epochs", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.path("one/report.json")).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 4, "{out}");

    r.ok(
        "run-all",
        "multi",
        &["--protocol", "multi-class", "--set", "run.n_trials=3", "--epochs", "1"],
    );
    let report: serde_json::Value = serde_json::from_slice(&fs::read(r.path("multi/report.json")).unwrap()).unwrap();
    let tasks = report["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 3);
    for t in tasks {
        assert_eq!(t["known"].as_array().unwrap().len(), 2);
        for k in ["auroc", "auroc_time", "auroc_frequency", "balanced_accuracy"] {
            assert!((0.0..=1.0).contains(&t[k].as_f64().unwrap()));
        }
    }
    assert!(report["aggregate"]["auroc"]["std"].is_number());
}
