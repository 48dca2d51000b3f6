use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use onevl::config::RunConfig;
use onevl::run::{self, EvalOptions, RunDir, StageSelection};
use onevl::train::{ReportLine, Variant};

#[derive(Parser)]
#[command(name = "onevl", version, about = "Latent-reasoning trajectory planner: data, codebook, staged training, evaluation")]
struct Cli {
    /// TOML run config; missing keys take preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base values before the config file is applied.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override one key, e.g. `--set model.d=64` or `--set train.clip_norm=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic driving dataset.
    BuildData,
    /// Fit the visual codebook and tokenize every split.
    TrainVq,
    /// Run the staged curriculum.
    Train {
        /// `all`, `smoke`, or a comma-separated run of stage names.
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long, default_value = "onevl", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Score checkpoints and write the report directory.
    Eval {
        #[arg(long)]
        allow_config_mismatch: bool,
        #[arg(long)]
        no_latency: bool,
        #[arg(long)]
        no_fidelity: bool,
    },
    /// Decode reasoning text and future frames for test samples.
    Explain {
        /// Test-split indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        #[arg(long, default_value = "onevl", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Train an ablation or baseline variant.
    Ablate {
        #[arg(value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Print the resolved config and its hash.
    Config,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: onevl::Error| e.to_string())
}

fn set_key(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in {key:?}"))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .with_context(|| format!("{p} in {key:?} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let base = RunConfig::preset(&cli.preset)?;
    let mut doc: toml::Table = toml::from_str(&base.to_toml()).expect("preset serializes");
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut doc, file);
    }
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {o:?}");
        };
        set_key(&mut doc, k.trim(), v.trim())?;
    }
    let text = toml::to_string(&doc).expect("table serializes");
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Ok(dir) = std::env::var("ONEVL_RUN_DIR") {
        cfg.run_dir = dir.into();
    }
    Ok(cfg)
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn log(v: serde_json::Value) {
    println!("{v}");
}

fn train_observer() -> onevl::train::Observer<'static> {
    Box::new(|line: &ReportLine| println!("{}", serde_json::to_string(line).expect("report line serializes")))
}

fn train_cmd(cfg: &RunConfig, dir: &RunDir, variant: Variant, stages: &str) -> Result<()> {
    let sel: StageSelection = stages.parse()?;
    let out = run::train(cfg, dir, variant, &sel, Some(train_observer()))?;
    let ckpts: Vec<String> = out.checkpoints.iter().map(|p| p.display().to_string()).collect();
    log(json!({"event": "trained", "variant": variant.name(), "checkpoints": ckpts}));
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let dir = RunDir::new(&cfg.run_dir);
    if !matches!(cli.cmd, Cmd::Config) {
        dir.echo_config(&cfg)?;
    }
    match cli.cmd {
        Cmd::Config => {
            println!("# config hash {}", cfg.hash());
            print!("{}", cfg.to_toml());
        }
        Cmd::BuildData => {
            let ds = run::build_data(&cfg, &dir)?;
            log(json!({"event": "build_data", "dir": dir.data(), "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len(), "config_hash": cfg.hash()}));
        }
        Cmd::TrainVq => {
            let s = run::train_vq(&cfg, &dir)?;
            log(json!({"event": "train_vq", "codebook": dir.codebook(), "k": s.k, "distinct_patches": s.distinct_patches, "val_cell_accuracy": s.val_cell_accuracy}));
        }
        Cmd::Train { stages, variant } => train_cmd(&cfg, &dir, variant, &stages)?,
        Cmd::Ablate { variant, stages } => train_cmd(&cfg, &dir, variant, &stages)?,
        Cmd::Eval {
            allow_config_mismatch,
            no_latency,
            no_fidelity,
        } => {
            let opts = EvalOptions {
                allow_config_mismatch,
                latency: !no_latency,
                fidelity: !no_fidelity,
            };
            let bench = run::evaluate(&cfg, &dir, &opts)?;
            print!("{}", onevl::eval::summary_text(&bench));
            log(json!({"event": "eval", "report": dir.report()}));
        }
        Cmd::Explain {
            samples,
            variant,
            allow_config_mismatch,
        } => {
            let files = run::explain(&cfg, &dir, variant, &samples, allow_config_mismatch)?;
            log(json!({"event": "explain", "files": files}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
