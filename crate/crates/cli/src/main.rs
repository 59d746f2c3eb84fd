use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use metaemb::data::{synth_generate, write_csv, SynthConfig};
use metaemb::experiment::{grad_check, run_stages, ExperimentConfig, GradCheckConfig, Stage};
use metaemb::Error;
use serde_json::Value;

const EXIT_VALIDATION: u8 = 1;
const EXIT_STAGE: u8 = 2;
const EXIT_GRAD_CHECK: u8 = 3;

/// Meta-Embedding cold-start experiments.
#[derive(Debug, Parser)]
#[command(name = "metaemb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV plus a JSON schema sidecar.
    SynthGen(SynthArgs),
    /// Pre-train base models on old ads and save checkpoints.
    Pretrain(RunArgs),
    /// Train generators over saved base checkpoints.
    MetaTrain(RunArgs),
    /// Cold-start and warm-up evaluation from saved checkpoints.
    Evaluate(RunArgs),
    /// Every step end to end.
    RunAll(RunArgs),
    /// Finite-difference checks of first- and second-order gradients.
    GradCheck(GradArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON). Defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Also write report.svg.
    #[arg(long)]
    svg: bool,
    /// Config overrides such as `--meta.alpha=0.2` or `models=deepfm,ipnn`.
    #[arg(value_name = "KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic-data config (JSON). Defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory for data.csv, schema.json and truth.json.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(value_name = "KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(value_name = "KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn read_json(path: Option<&Path>) -> anyhow::Result<Value> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::validation(format!("config {}", p.display()), e.to_string()).into())
        }
        None => Ok(Value::Object(Default::default())),
    }
}

fn experiment_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let base: ExperimentConfig = serde_json::from_value(read_json(args.config.as_deref())?)
        .map_err(|e| Error::validation("config", e.to_string()))?;
    let mut config = base.with_overrides(&args.overrides)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = Some(dir.clone());
    }
    config.deterministic |= args.deterministic;
    config.svg |= args.svg;
    Ok(config)
}

/// Applies `key=value` overrides to a plain serde value; used for the
/// configs that lack a dedicated override method.
fn override_value(mut root: Value, overrides: &[String]) -> anyhow::Result<Value> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::validation("override", format!("`{item}` is not key=value")))?;
        let obj = root.as_object_mut().expect("configs are JSON objects");
        let key = key.trim_start_matches("--");
        let old = obj
            .get(key)
            .cloned()
            .ok_or_else(|| Error::validation("override", format!("unknown config key `{key}`")))?;
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
        let value = match (&old, parsed) {
            (Value::Array(_), v @ Value::Array(_)) => v,
            (Value::Array(_), _) => Value::Array(
                raw.split(',')
                    .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.into())))
                    .collect(),
            ),
            (_, v) => v,
        };
        obj.insert(key.to_string(), value);
    }
    Ok(root)
}

fn typed<T: serde::de::DeserializeOwned + serde::Serialize + Default>(
    path: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<T> {
    let mut root = serde_json::to_value(T::default())?;
    if let (Value::Object(base), Value::Object(file)) = (&mut root, read_json(path)?) {
        base.extend(file);
    }
    let root = override_value(root, overrides)?;
    Ok(serde_json::from_value(root).map_err(|e| Error::validation("config", e.to_string()))?)
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let config: SynthConfig = typed(args.config.as_deref(), &args.overrides)?;
    let (data, truth) = synth_generate(&config)?;
    fs::create_dir_all(&args.out)?;
    write_csv(&data, &args.out.join("data.csv"), &args.out.join("schema.json"))?;
    fs::write(args.out.join("truth.json"), serde_json::to_string(&truth)?)?;
    println!(
        "wrote {} instances for {} ads to {} (positive rate {:.4})",
        data.len(),
        config.n_ads(),
        args.out.display(),
        data.positive_rate()
    );
    Ok(())
}

fn stages(args: &RunArgs, first: Stage, last: Stage) -> anyhow::Result<()> {
    let config = experiment_config(args)?;
    if let Some(report) = run_stages(&config, first, last)? {
        print!("{}", report.to_text());
    }
    if let Some(dir) = &config.output_dir {
        eprintln!("outputs in {}", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::SynthGen(args) => synth(&args)?,
        Command::Pretrain(args) => stages(&args, Stage::Pretrain, Stage::Pretrain)?,
        Command::MetaTrain(args) => stages(&args, Stage::MetaTrain, Stage::MetaTrain)?,
        Command::Evaluate(args) => stages(&args, Stage::Evaluate, Stage::Evaluate)?,
        Command::RunAll(args) => stages(&args, Stage::Pretrain, Stage::Evaluate)?,
        Command::GradCheck(args) => {
            let config: GradCheckConfig = typed(args.config.as_deref(), &args.overrides)?;
            let report = grad_check(&config)?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(EXIT_GRAD_CHECK));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Stage { .. }) => EXIT_STAGE,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            // Core errors already render their causes.
            if e.downcast_ref::<Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
