//! The smaller subcommands: invertibility tables, interpolation sweeps, toy
//! checks, scoring of saved models and metric recomputation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ddpood::classifier::Classifier;
use ddpood::detector::{ddp_score, decide, Decision};
use ddpood::integrator::{reconstruction_error, IntegratorMethod};
use ddpood::interpolation::{sweep, InterpolationMode, InterpolationRequest};
use ddpood::rng::SeedTree;
use ddpood::schedule::NoiseSchedule;
use ddpood::scorefield::{Conditioned, GaussianMixture, ScoreField, TrainedDenoiser};
use ddpood::toy::{
    annihilator_empty, dyadic_mixing_operators, moving_operators, AnnihilatorReport, SearchBudget, SupportMask,
    ToyOperator,
};
use ddpood::Error;

use crate::config::FieldSource;
use crate::error::{AtStage, RunError, Stage};
use crate::runner::{LockFile, SamplesFile, CLASSIFIER_FILE, DENOISER_FILE, LOCK_FILE, SAMPLES_FILE};

/// One cell of the invertibility table.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibilityRow {
    pub method: IntegratorMethod,
    pub t_max: usize,
    pub mean_error: f64,
}

/// Mean round-trip error of `points` draws from `mixture` for each method and
/// depth. The stride is fixed at `T / steps`; depths are `fraction * T`
/// rounded to the stride.
pub fn invertibility_table(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    methods: &[IntegratorMethod],
    fractions: &[f64],
    steps: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<InvertibilityRow>, RunError> {
    let t_max_all = schedule.max_step();
    if steps == 0 || steps > t_max_all {
        return Err(RunError::new(Stage::Config, Error::Config(format!("steps must lie in 1..={t_max_all}"))));
    }
    let stride = t_max_all / steps;
    let (xs, _) = mixture.sample(points, &mut SeedTree::new(seed).stream("invertibility"));
    let field = Conditioned::unconditional(mixture, schedule);
    let mut rows = Vec::new();
    for &method in methods {
        for &f in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(RunError::new(Stage::Config, Error::Config(format!("fraction {f} outside (0, 1]"))));
            }
            let t_max = (((f * t_max_all as f64) / stride as f64).round() as usize).max(1) * stride;
            let total = xs
                .iter()
                .map(|x| reconstruction_error(&field, x, t_max, stride, method))
                .sum::<ddpood::Result<f64>>()
                .at(Stage::Scoring)?;
            rows.push(InvertibilityRow {
                method,
                t_max,
                mean_error: total / xs.len() as f64,
            });
        }
    }
    Ok(rows)
}

pub fn invertibility_csv(rows: &[InvertibilityRow]) -> String {
    let mut out = String::from("method,t_max,mean_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.16e}", r.method, r.t_max, r.mean_error);
    }
    out
}

/// Interpolation sweep on the unconditional field of `mixture`, as CSV.
pub fn interpolation_csv(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    template: &InterpolationRequest,
    parameters: &[f64],
) -> Result<String, RunError> {
    let field = Conditioned::unconditional(mixture, schedule);
    let rows = sweep(&field, template, parameters).at(Stage::Scoring)?;
    let mut buf = Vec::new();
    ddpood::interpolation::write_sweep_csv(&rows, &mut buf).at(Stage::Output)?;
    Ok(String::from_utf8(buf).expect("CSV output is ASCII"))
}

/// Default parameter list for a sweep: 11 rates, or every tenth of `T` rounded to `stride`.
pub fn default_sweep(mode: InterpolationMode, max_step: usize, stride: usize) -> Vec<f64> {
    match mode {
        InterpolationMode::Symmetric => (0..=10).map(|i| i as f64 / 10.0).collect(),
        InterpolationMode::Asymmetric => (0..=10)
            .map(|i| ((i * max_step / 10) / stride * stride) as f64)
            .collect(),
    }
}

/// Annihilator searches for the identity, moving and dyadic operator sets.
pub fn toy_checks(resolution: usize, sigma: f64, budget: &SearchBudget) -> Result<Vec<(String, AnnihilatorReport)>, RunError> {
    let mask = SupportMask::default_mask(resolution).at(Stage::Config)?;
    let sets: Vec<(&str, Vec<ToyOperator>)> = vec![
        ("identity", vec![ToyOperator::identity()]),
        ("moving", moving_operators()),
        ("dyadic", dyadic_mixing_operators(resolution).at(Stage::Config)?),
    ];
    sets.into_iter()
        .map(|(name, ops)| {
            let report = annihilator_empty(sigma, &mask, &ops, budget).at(Stage::Scoring)?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Reads `x0,x1,...` columns of a points CSV; other columns are ignored.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>, RunError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| RunError::new(Stage::Data, Error::Input(e.to_string())))?;
    let headers = reader
        .headers()
        .map_err(|e| RunError::new(Stage::Data, Error::Input(e.to_string())))?
        .clone();
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()).map(|d| (d, i)))
        .collect();
    cols.sort_unstable();
    if cols.is_empty() || cols.iter().enumerate().any(|(k, &(d, _))| k != d) {
        return Err(RunError::new(Stage::Data, Error::Input("expected columns x0, x1, ...".into())));
    }
    let mut points = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| RunError::new(Stage::Data, Error::Input(e.to_string())))?;
        let p = cols
            .iter()
            .map(|&(_, i)| {
                rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| {
                    RunError::new(Stage::Data, Error::Input(format!("bad number on data row {}", line + 1)))
                })
            })
            .collect::<Result<Vec<f64>, RunError>>()?;
        points.push(p);
    }
    Ok(points)
}

/// Scores `points` with the classifier, field and detector of a finished run.
/// Sample `i` uses the substreams under `detect/sample-i`.
pub fn detect_with_saved(model_dir: &Path, points: &[Vec<f64>]) -> Result<Vec<(f64, Decision)>, RunError> {
    let config = LockFile::read(&model_dir.join(LOCK_FILE))?.into_config()?;
    let schedule = config.schedule.build().at(Stage::Config)?;
    let classifier: Classifier =
        serde_json::from_str(&fs::read_to_string(model_dir.join(CLASSIFIER_FILE)).at(Stage::Classifier)?)
            .at(Stage::Classifier)?;
    let samples: SamplesFile =
        serde_json::from_str(&fs::read_to_string(model_dir.join(SAMPLES_FILE)).at(Stage::Data)?).at(Stage::Data)?;
    let denoiser = match &config.field {
        FieldSource::Analytic => None,
        FieldSource::Trained { .. } => Some(TrainedDenoiser::load(&model_dir.join(DENOISER_FILE), &schedule).at(Stage::Field)?),
    };
    let field: &dyn ScoreField = match &denoiser {
        Some(d) => d,
        None => &config.benchmark.ind,
    };
    let threshold = samples.thresholds.get("ddp").copied().unwrap_or(config.detector.threshold);
    let seeds = SeedTree::new(config.seed).child("detect");
    points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d = ddp_score(x, &config.detector, field, &classifier, &schedule, &seeds.child(&format!("sample-{i}")))
                .at(Stage::Scoring)?;
            Ok((d.score, decide(d.score, threshold)))
        })
        .collect()
}

pub fn detections_csv(results: &[(f64, Decision)]) -> String {
    let mut out = String::from("index,score,decision\n");
    for (i, (s, d)) in results.iter().enumerate() {
        let label = match d {
            Decision::InDistribution => "ind",
            Decision::OutOfDistribution => "ood",
        };
        let _ = writeln!(out, "{i},{s:.16e},{label}");
    }
    out
}
