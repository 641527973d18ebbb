use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ddpood::classifier::Classifier;
use ddpood::detector::{
    baseline_score, ddp_score_batch, BaselineMethod, DetectionReport, Decision, KnnReference, SampleRecord,
};
use ddpood::metrics::MetricRow;
use ddpood::rng::SeedTree;
use ddpood::scorefield::{ScoreField, TrainedDenoiser};
use ddpood::synthdata::{make_adversarial_ood, sample_dataset, DatasetSpec};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, FieldSource};
use crate::error::{AtStage, RunError, Stage};

pub const IND_SET: &str = "ind";
pub const REPORT_FILE: &str = "report.csv";
pub const SAMPLES_FILE: &str = "samples.json";
pub const LOCK_FILE: &str = "config.lock.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const DENOISER_FILE: &str = "denoiser.bin";

/// Per-sample detail of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesFile {
    pub ind_set: String,
    /// Decision threshold used for each method.
    pub thresholds: BTreeMap<String, f64>,
    pub records: Vec<SampleRecord>,
}

/// Resolved configuration plus what is needed to check a rerun against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockFile {
    pub config: ExperimentConfig,
    pub schedule_fingerprint: String,
    pub versions: BTreeMap<String, String>,
    /// Substream labels under the master seed, by purpose.
    pub streams: BTreeMap<String, String>,
}

impl LockFile {
    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).at(Stage::Config)?;
        serde_json::from_str(&text).at(Stage::Config)
    }

    /// The locked config, after checking that it still builds the same schedule.
    pub fn into_config(self) -> Result<ExperimentConfig, RunError> {
        let (config, schedule) = self.config.resolve()?;
        let fp = hex(&schedule.fingerprint());
        if fp != self.schedule_fingerprint {
            return Err(RunError::new(
                Stage::Config,
                ddpood::Error::Config(format!(
                    "lockfile records schedule {}, config builds {fp}",
                    self.schedule_fingerprint
                )),
            ));
        }
        Ok(config)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every output file of a run, rendered in memory.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub files: Vec<(&'static str, Vec<u8>)>,
    pub rows: Vec<MetricRow>,
}

impl RunOutputs {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| *n == name).map(|(_, b)| b.as_slice())
    }
}

/// Threshold accepting at least a fraction `q` of `ind` under `score > threshold`.
pub fn quantile_threshold(ind: &[f64], q: f64) -> f64 {
    let mut s = ind.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

fn stream_labels() -> BTreeMap<String, String> {
    [
        ("training data", "data/train"),
        ("in-distribution evaluation set", "data/ind"),
        ("OOD set <name>", "data/ood/<name>"),
        ("classifier", "classifier"),
        ("denoiser", "denoiser"),
        ("detector noise", "detector/<set>/sample-<i>/repeat-<r>"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Runs the whole pipeline without touching the file system.
pub fn execute(config: ExperimentConfig) -> Result<RunOutputs, RunError> {
    let (config, schedule) = config.resolve()?;
    let seeds = SeedTree::new(config.seed);
    let bench = &config.benchmark;

    info!("sampling data");
    let ind_spec = DatasetSpec::Mixture { mixture: bench.ind.clone() };
    let train = sample_dataset(&ind_spec, config.n_train, &mut seeds.stream("data/train")).at(Stage::Data)?;
    let train_labels = train.labels.clone().expect("mixture samples carry labels");
    let ind_eval = sample_dataset(&ind_spec, config.n_eval, &mut seeds.stream("data/ind")).at(Stage::Data)?;

    let denoiser = match &config.field {
        FieldSource::Analytic => None,
        FieldSource::Trained { denoiser } => {
            info!("training denoiser");
            let d = TrainedDenoiser::train(&train.points, Some(&train_labels), &schedule, denoiser.clone())
                .at(Stage::Field)?;
            Some(d)
        }
    };
    let field: &dyn ScoreField = match &denoiser {
        Some(d) => d,
        None => &bench.ind,
    };

    info!("training classifier");
    let classifier =
        Classifier::train(&train.points, &train_labels, config.classifier.clone()).at(Stage::Classifier)?;

    let mut sets: Vec<(String, Vec<Vec<f64>>)> = vec![(IND_SET.to_string(), ind_eval.points)];
    for (name, spec) in &bench.ood {
        let stream = format!("data/ood/{name}");
        let points = match spec {
            DatasetSpec::Adversarial { budget } => {
                info!("searching adversarial points");
                make_adversarial_ood(&classifier, &bench.ind, &train.points, config.n_eval, budget, &mut seeds.stream(&stream))
                    .at(Stage::Adversarial)?
            }
            other => sample_dataset(other, config.n_eval, &mut seeds.stream(&stream)).at(Stage::Data)?.points,
        };
        sets.push((name.clone(), points));
    }

    info!("scoring");
    let mut report = DetectionReport::new(config.detector.clone());
    let mut thresholds = BTreeMap::new();
    let quantile_rule = config.threshold_quantile.filter(|_| !matches!(config.ablation, Ablation::Threshold(_)));
    let detector_seeds = seeds.child("detector");
    for (name, cfg) in config.ablation.variants(&config.detector) {
        let per_set = sets
            .iter()
            .map(|(set, points)| ddp_score_batch(points, &cfg, field, &classifier, &schedule, &detector_seeds.child(set)))
            .collect::<ddpood::Result<Vec<_>>>()
            .at(Stage::Scoring)?;
        let threshold = match quantile_rule {
            Some(q) => quantile_threshold(&per_set[0].iter().map(|d| d.score).collect::<Vec<_>>(), q),
            None => cfg.threshold,
        };
        for ((set, _), details) in sets.iter().zip(&per_set) {
            report.push_scores(&name, set, details, threshold);
        }
        thresholds.insert(name, threshold);
    }

    let knn = if config.baselines.contains(&BaselineMethod::Knn) {
        Some(KnnReference::build(&classifier, &train.points, config.knn_k).at(Stage::Scoring)?)
    } else {
        None
    };
    let clip = classifier.quantile_clip(&train.points, config.react_quantile).at(Stage::Scoring)?;
    for &method in &config.baselines {
        let per_set = sets
            .iter()
            .map(|(_, points)| {
                points
                    .par_iter()
                    .map(|x| baseline_score(method, x, &classifier, knn.as_ref(), Some(&clip)))
                    .collect::<ddpood::Result<Vec<f64>>>()
            })
            .collect::<ddpood::Result<Vec<_>>>()
            .at(Stage::Scoring)?;
        let threshold = quantile_threshold(&per_set[0], config.threshold_quantile.unwrap_or(0.95));
        for ((set, _), scores) in sets.iter().zip(&per_set) {
            report.push_plain_scores(method.name(), set, scores, threshold);
        }
        thresholds.insert(method.name().to_string(), threshold);
    }

    let samples = SamplesFile {
        ind_set: IND_SET.to_string(),
        thresholds,
        records: report.samples,
    };
    let (report_csv, rows) = render_report(&samples)?;

    let lock = LockFile {
        config: config.clone(),
        schedule_fingerprint: hex(&schedule.fingerprint()),
        versions: [
            // both crates take the workspace version
            ("ddpood".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("ddpood-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]
        .into_iter()
        .collect(),
        streams: stream_labels(),
    };
    let mut files = vec![
        (REPORT_FILE, report_csv.into_bytes()),
        (SAMPLES_FILE, to_json(&samples)?),
        (LOCK_FILE, to_json(&lock)?),
        (CLASSIFIER_FILE, to_json(&classifier)?),
    ];
    if let Some(d) = &denoiser {
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).at(Stage::Output)?;
        files.push((DENOISER_FILE, bytes));
    }
    Ok(RunOutputs { files, rows })
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, RunError> {
    let mut bytes = serde_json::to_vec_pretty(v).at(Stage::Output)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn rate(records: &[&SampleRecord], decision: Decision) -> f64 {
    records.iter().filter(|r| r.decision == decision).count() as f64 / records.len() as f64
}

/// `report.csv` contents and rows, computed from per-sample records alone.
pub fn render_report(samples: &SamplesFile) -> Result<(String, Vec<MetricRow>), RunError> {
    let rows = DetectionReport::compute_rows(&samples.records, &samples.ind_set).at(Stage::Metrics)?;
    let mut out = String::from("method,ood_set,auroc,fpr95,ind_accept,ood_flagged\n");
    for row in &rows {
        let of = |set: &str| -> Vec<&SampleRecord> {
            samples.records.iter().filter(|r| r.method == row.method && r.set == set).collect()
        };
        let ind_accept = rate(&of(&samples.ind_set), Decision::InDistribution);
        let ood_flagged = rate(&of(&row.ood_set), Decision::OutOfDistribution);
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            row.method, row.ood_set, row.auroc, row.fpr95, ind_accept, ood_flagged
        ));
    }
    Ok((out, rows))
}

/// Writes every file to a temporary name in `dir`, then renames them all.
/// On failure nothing written by this call is left behind.
pub fn write_atomically(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), RunError> {
    fs::create_dir_all(dir).at(Stage::Output)?;
    let temp = |name: &str| dir.join(format!(".{name}.tmp"));
    let mut staged: Vec<PathBuf> = Vec::new();
    for (name, bytes) in files {
        let path = temp(name);
        if let Err(e) = fs::write(&path, bytes) {
            staged.iter().chain([&path]).for_each(|p| {
                let _ = fs::remove_file(p);
            });
            return Err(RunError::new(Stage::Output, e));
        }
        staged.push(path);
    }
    let mut placed: Vec<PathBuf> = Vec::new();
    for (name, _) in files {
        let target = dir.join(name);
        if let Err(e) = fs::rename(temp(name), &target) {
            placed.iter().for_each(|p| {
                let _ = fs::remove_file(p);
            });
            staged.iter().for_each(|p| {
                let _ = fs::remove_file(p);
            });
            return Err(RunError::new(Stage::Output, e));
        }
        placed.push(target);
    }
    Ok(())
}

/// Runs the pipeline and writes its files under `config.output_dir`.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunOutputs, RunError> {
    let dir = config.output_dir.clone();
    let outputs = execute(config)?;
    write_atomically(&dir, &outputs.files)?;
    Ok(outputs)
}
