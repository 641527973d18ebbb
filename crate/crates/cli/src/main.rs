use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddpood::integrator::IntegratorMethod;
use ddpood::interpolation::{InterpolationMode, InterpolationRequest};
use ddpood::metrics::summarize;
use ddpood::toy::{write_function_csv, SearchBudget};
use ddpood_cli::commands::{
    default_sweep, detect_with_saved, detections_csv, interpolation_csv, invertibility_csv, invertibility_table,
    read_points_csv, toy_checks,
};
use ddpood_cli::error::{RunError, Stage};
use ddpood_cli::runner::{render_report, write_atomically, LockFile, SamplesFile};
use ddpood_cli::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ddpood", version, about = "Diffusion-denoising OOD detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: data, field, classifier, scoring, metrics.
    Run(RunArgs),
    /// Round-trip error table over methods and depths.
    Invertibility(InvertibilityArgs),
    /// Interpolation sweep between two points.
    Interpolate(InterpolateArgs),
    /// Score a points file against the models of a finished run.
    Detect(DetectArgs),
    /// Annihilator checks for the restricted-detector toy problem.
    Toy(ToyArgs),
    /// Recompute report rows from a samples file.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, conflicts_with = "lock")]
    config: Option<PathBuf>,
    /// Rerun a lockfile written by an earlier run.
    #[arg(long)]
    lock: Option<PathBuf>,
    /// Override a top-level config key; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertibilityArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.6, 0.8, 1.0])]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = IntegratorMethod::DETERMINISTIC)]
    methods: Vec<IntegratorMethod>,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x1: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x2: Vec<f64>,
    #[arg(long, value_parser = parse_mode, default_value = "asymmetric")]
    mode: InterpolationMode,
    /// Rates (symmetric) or steps (asymmetric); defaults to an even sweep.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, default_value_t = IntegratorMethod::Pndm)]
    method: IntegratorMethod,
    #[arg(long, default_value_t = 20)]
    stride: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Output directory of a finished run.
    #[arg(long)]
    model: PathBuf,
    /// CSV with columns x0, x1, ...
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = ddpood::toy::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2000)]
    candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for witness functions, one CSV per operator set that has one.
    #[arg(long)]
    witness_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print per-method mean and standard deviation across OOD sets.
    #[arg(long)]
    summary: bool,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn parse_mode(s: &str) -> Result<InterpolationMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|e| e.to_string())
}

/// Writes `text` to `out` atomically, or to stdout.
fn emit(text: &str, out: Option<&Path>) -> Result<(), RunError> {
    match out {
        Some(path) => {
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| RunError::new(Stage::Output, ddpood::Error::Input("bad output path".into())))?;
            write_atomically(dir, &[(name, text.as_bytes().to_vec())])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::new(stage, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::new(stage, e))
}

fn run(args: RunArgs) -> Result<(), RunError> {
    let mut config = match &args.lock {
        Some(lock) => {
            if !args.overrides.is_empty() {
                return Err(RunError::new(
                    Stage::Config,
                    ddpood::Error::Config("a lockfile run takes no overrides".into()),
                ));
            }
            LockFile::read(lock)?.into_config()?
        }
        None => {
            let text = match &args.config {
                Some(p) => Some(fs::read_to_string(p).map_err(|e| RunError::new(Stage::Config, e))?),
                None => None,
            };
            ExperimentConfig::from_json_with_overrides(text.as_deref(), &args.overrides)?
        }
    };
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let dir = config.output_dir.clone();
    let outputs = run_experiment(config)?;
    for row in &outputs.rows {
        println!("{:<24} {:<12} auroc {:.4}  fpr95 {:.4}", row.method, row.ood_set, row.auroc, row.fpr95);
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Invertibility(a) => {
            let config = ExperimentConfig::default();
            let schedule = config.schedule.build().map_err(|e| RunError::new(Stage::Config, e))?;
            let rows = invertibility_table(
                &config.benchmark.ind,
                &schedule,
                &a.methods,
                &a.fractions,
                a.steps,
                a.points,
                a.seed,
            )?;
            emit(&invertibility_csv(&rows), a.out.as_deref())
        }
        Command::Interpolate(a) => {
            let config = ExperimentConfig::default();
            let schedule = config.schedule.build().map_err(|e| RunError::new(Stage::Config, e))?;
            let values = a
                .values
                .unwrap_or_else(|| default_sweep(a.mode, schedule.max_step(), a.stride));
            let template = InterpolationRequest {
                x1: a.x1,
                x2: a.x2,
                mode: a.mode,
                parameter: 0.0,
                method: a.method,
                stride: a.stride,
            };
            let csv = interpolation_csv(&config.benchmark.ind, &schedule, &template, &values)?;
            emit(&csv, a.out.as_deref())
        }
        Command::Detect(a) => {
            let points = read_points_csv(&a.input)?;
            let results = detect_with_saved(&a.model, &points)?;
            emit(&detections_csv(&results), a.out.as_deref())
        }
        Command::Toy(a) => {
            let budget = SearchBudget {
                random_candidates: a.candidates,
                seed: a.seed,
            };
            let reports = toy_checks(a.resolution, a.sigma, &budget)?;
            let mut files = Vec::new();
            for (name, r) in &reports {
                println!(
                    "{name:<9} annihilator {}  fully covered {}  candidates {}",
                    if r.empty { "empty" } else { "found" },
                    r.fully_covered,
                    r.candidates_tried
                );
                if let Some(w) = &r.witness {
                    let mut buf = Vec::new();
                    write_function_csv(w, &mut buf).map_err(|e| RunError::new(Stage::Output, e))?;
                    files.push((format!("witness_{name}.csv"), buf));
                }
            }
            if let Some(dir) = a.witness_dir {
                let named: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
                write_atomically(&dir, &named)?;
            }
            Ok(())
        }
        Command::Metrics(a) => {
            let samples: SamplesFile = read_json(&a.samples, Stage::Metrics)?;
            let (csv, rows) = render_report(&samples)?;
            if a.summary {
                for s in summarize(&rows).map_err(|e| RunError::new(Stage::Metrics, e))? {
                    eprintln!(
                        "{:<24} sets {}  auroc {:.4} +- {:.4}  fpr95 {:.4} +- {:.4}",
                        s.method, s.sets, s.auroc_mean, s.auroc_std, s.fpr95_mean, s.fpr95_std
                    );
                }
            }
            emit(&csv, a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
