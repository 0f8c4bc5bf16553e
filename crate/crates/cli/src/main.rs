use std::path::PathBuf;
use std::process::ExitCode;

use clan_core::config::RunConfig;
use clan_core::pipeline::{self, TrainOptions};
use clan_core::{ClanError, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

/// New-activity detection on sensor episodes with contrastive towers.
#[derive(Parser)]
#[command(name = "clan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split, normalize and pad the data of every task.
    Prepare(Common),
    /// Score candidate transforms and select each tower's CST.
    Cst(Common),
    /// Train both towers, then build their representation banks.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop once this many epochs are done; a later `train` resumes.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Score the test split of every task.
    Detect(Common),
    /// Compute metrics from the scores and write the report.
    Eval(Common),
    /// prepare, cst, train, detect and eval in sequence.
    RunAll(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Dataset path (replaces any [synthetic] section).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset format: episode-jsonl or episode-csv-dir.
    #[arg(long)]
    format: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// fixed, one-class or multi-class.
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated known labels for the fixed protocol.
    #[arg(long, value_delimiter = ',')]
    known_labels: Option<Vec<i64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Worker threads for independent tasks.
    #[arg(long)]
    jobs: Option<usize>,
    /// FFT length of the frequency tower.
    #[arg(long)]
    fft_length: Option<usize>,
    /// Any other field as `section.key=value` (TOML value syntax).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ClanError::Config(format!("bad key `{path}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ClanError::Config(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words are strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut table: toml::Table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ClanError::io(p, e))?;
                toml::from_str(&text).map_err(|e| ClanError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let s = |v: &str| toml::Value::String(v.to_string());
        let ints = |v: &[u64]| toml::Value::Array(v.iter().map(|x| toml::Value::Integer(*x as i64)).collect());
        if let Some(d) = &self.data {
            table.remove("synthetic");
            set_path(&mut table, "data.path", s(&d.to_string_lossy()))?;
        }
        if let Some(v) = &self.format {
            set_path(&mut table, "data.format", s(v))?;
        }
        if let Some(v) = &self.seeds {
            set_path(&mut table, "run.seeds", ints(v))?;
        }
        if let Some(v) = &self.protocol {
            set_path(&mut table, "run.protocol", s(v))?;
        }
        if let Some(v) = &self.known_labels {
            let v = toml::Value::Array(v.iter().map(|x| toml::Value::Integer(*x)).collect());
            set_path(&mut table, "run.known_labels", v)?;
        }
        for (key, v) in [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("run.jobs", self.jobs),
            ("data.fft_length", self.fft_length),
        ] {
            if let Some(v) = v {
                set_path(&mut table, key, toml::Value::Integer(v as i64))?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ClanError::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let text = toml::to_string(&table).map_err(|e| ClanError::Config(e.to_string()))?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        if let Some(o) = &self.output_dir {
            cfg.run.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let tasks = pipeline::cmd_prepare(&c.resolve()?)?;
            for t in tasks {
                println!("{}\tknown={:?}", t.id, t.known);
            }
        }
        Command::Cst(c) => {
            for r in pipeline::cmd_cst(&c.resolve()?)? {
                println!("{}", r.table());
            }
        }
        Command::Train { common, stop_after } => {
            pipeline::cmd_train(&common.resolve()?, TrainOptions { stop_after })?;
        }
        Command::Detect(c) => pipeline::cmd_detect(&c.resolve()?)?,
        Command::Eval(c) => print!("{}", pipeline::cmd_eval(&c.resolve()?)?.table()),
        Command::RunAll(c) => print!("{}", pipeline::run_all(&c.resolve()?)?.table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
