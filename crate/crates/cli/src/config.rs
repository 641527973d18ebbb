use std::path::PathBuf;

use ddpood::classifier::{ClassifierConfig, DetectSpace};
use ddpood::detector::{BaselineMethod, DetectorConfig};
use ddpood::rng::SeedTree;
use ddpood::schedule::{NoiseSchedule, ScheduleParams};
use ddpood::scorefield::DenoiserConfig;
use ddpood::synthdata::Benchmark;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{RunError, Stage};

/// Where the score field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum FieldSource {
    /// Closed-form scores of the benchmark's in-distribution mixture.
    Analytic,
    /// A denoiser trained on the training split.
    Trained {
        #[serde(default)]
        denoiser: DenoiserConfig,
    },
}

/// One detector setting swept over a list of values; every other piece of
/// state is shared between the runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    DetectSpace(Vec<DetectSpace>),
    Omega(Vec<f64>),
    Timestep(Vec<usize>),
    Repeat(Vec<usize>),
    /// Absolute decision thresholds; these replace the quantile rule.
    Threshold(Vec<f64>),
}

impl Ablation {
    pub fn axis(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::DetectSpace(_) => "detect_space",
            Ablation::Omega(_) => "omega",
            Ablation::Timestep(_) => "timestep",
            Ablation::Repeat(_) => "repeat",
            Ablation::Threshold(_) => "threshold",
        }
    }

    /// `(method name, detector config)` for every value on the axis.
    pub fn variants(&self, base: &DetectorConfig) -> Vec<(String, DetectorConfig)> {
        let named = |v: String, cfg: DetectorConfig| (format!("ddp[{}={v}]", self.axis()), cfg);
        match self {
            Ablation::None => vec![("ddp".to_string(), base.clone())],
            Ablation::DetectSpace(vs) => vs
                .iter()
                .map(|&s| {
                    let clip = if s == DetectSpace::Feature { base.clip.clone() } else { None };
                    named(s.name().to_string(), DetectorConfig { detect_space: s, clip, ..base.clone() })
                })
                .collect(),
            Ablation::Omega(vs) => vs
                .iter()
                .map(|&omega| named(omega.to_string(), DetectorConfig { omega, ..base.clone() }))
                .collect(),
            Ablation::Timestep(vs) => vs
                .iter()
                .map(|&t| named(t.to_string(), DetectorConfig { t, ..base.clone() }))
                .collect(),
            Ablation::Repeat(vs) => vs
                .iter()
                .map(|&repeat| named(repeat.to_string(), DetectorConfig { repeat, ..base.clone() }))
                .collect(),
            Ablation::Threshold(vs) => vs
                .iter()
                .map(|&threshold| named(threshold.to_string(), DetectorConfig { threshold, ..base.clone() }))
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Ablation::None => false,
            Ablation::DetectSpace(v) => v.is_empty(),
            Ablation::Omega(v) | Ablation::Threshold(v) => v.is_empty(),
            Ablation::Timestep(v) | Ablation::Repeat(v) => v.is_empty(),
        }
    }
}

/// A complete experiment. Sub-seeds of the classifier, the denoiser and the
/// adversarial search are derived from `seed` during resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub benchmark: Benchmark,
    pub n_train: usize,
    /// Points per evaluation set, in-distribution and each OOD set.
    pub n_eval: usize,
    pub field: FieldSource,
    pub classifier: ClassifierConfig,
    pub detector: DetectorConfig,
    /// When set, each method's threshold is this quantile of its
    /// in-distribution scores. Ignored for DDP under a threshold ablation.
    pub threshold_quantile: Option<f64>,
    pub baselines: Vec<BaselineMethod>,
    pub knn_k: usize,
    /// Feature quantile used as the clipping level of the clipped-energy baseline.
    pub react_quantile: f64,
    pub ablation: Ablation,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = ScheduleParams::default();
        Self {
            seed: 0,
            schedule,
            benchmark: Benchmark::canonical(),
            n_train: 2000,
            n_eval: 500,
            field: FieldSource::Analytic,
            classifier: ClassifierConfig::default(),
            detector: DetectorConfig::benchmark(schedule.max_step),
            threshold_quantile: Some(0.95),
            baselines: BaselineMethod::ALL.to_vec(),
            knn_k: 10,
            react_quantile: 0.9,
            ablation: Ablation::None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> RunError {
    RunError::new(Stage::Config, ddpood::Error::Config(msg.into()))
}

impl ExperimentConfig {
    /// Parses a JSON document after replacing top-level keys with `overrides`.
    /// Override values are read as JSON, falling back to a plain string.
    pub fn from_json_with_overrides(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self, RunError> {
        let mut doc: Map<String, Value> = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| config_err(format!("config is not a JSON object: {e}")))?,
            None => Map::new(),
        };
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            doc.insert(key.clone(), value);
        }
        serde_json::from_value(Value::Object(doc)).map_err(|e| config_err(e.to_string()))
    }

    /// Checks invariants and fills derived sub-seeds.
    pub fn resolve(mut self) -> Result<(Self, NoiseSchedule), RunError> {
        let schedule = self.schedule.build().map_err(|e| RunError::new(Stage::Config, e))?;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(config_err("n_train and n_eval must be positive"));
        }
        if let Some(q) = self.threshold_quantile {
            if !(q > 0.0 && q < 1.0) {
                return Err(config_err(format!("threshold quantile {q} outside (0, 1)")));
            }
        }
        if !(self.react_quantile > 0.0 && self.react_quantile <= 1.0) {
            return Err(config_err("react_quantile must lie in (0, 1]"));
        }
        if self.knn_k == 0 || self.knn_k > self.n_train {
            return Err(config_err(format!("knn_k {} must lie in 1..={}", self.knn_k, self.n_train)));
        }
        if self.ablation.is_empty() {
            return Err(config_err(format!("ablation axis {} has no values", self.ablation.axis())));
        }
        for (name, cfg) in self.ablation.variants(&self.detector) {
            cfg.validate(&schedule)
                .map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        if self.benchmark.ind.labels().is_empty() {
            return Err(config_err("the in-distribution mixture needs class labels"));
        }
        let seeds = SeedTree::new(self.seed);
        self.classifier.seed = seeds.child("classifier").master();
        if let FieldSource::Trained { denoiser } = &mut self.field {
            denoiser.seed = seeds.child("denoiser").master();
            denoiser.num_classes = Some(self.benchmark.ind.labels().len());
        }
        Ok((self, schedule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_top_level_keys() {
        let cfg = ExperimentConfig::from_json_with_overrides(
            Some(r#"{"seed": 3, "n_eval": 10}"#),
            &[("seed".into(), "9".into()), ("output_dir".into(), "runs/a".into())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.n_eval, 10);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/a"));
        assert!(ExperimentConfig::from_json_with_overrides(None, &[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn ablation_values_are_validated() {
        let cfg = ExperimentConfig {
            ablation: Ablation::Timestep(vec![100, 300, 1100]),
            ..Default::default()
        };
        assert!(cfg.resolve().is_err());
        let cfg = ExperimentConfig {
            ablation: Ablation::Repeat(vec![]),
            ..Default::default()
        };
        assert!(cfg.resolve().is_err());
        let cfg = ExperimentConfig {
            ablation: Ablation::Repeat(vec![1, 2, 4, 8]),
            ..Default::default()
        };
        let (resolved, _) = cfg.resolve().unwrap();
        let names: Vec<String> = resolved.ablation.variants(&resolved.detector).into_iter().map(|v| v.0).collect();
        assert_eq!(names, ["ddp[repeat=1]", "ddp[repeat=2]", "ddp[repeat=4]", "ddp[repeat=8]"]);
    }

    #[test]
    fn ablation_json_shape() {
        let a: Ablation = serde_json::from_str(r#"{"axis": "omega", "values": [0, 1, 3]}"#).unwrap();
        assert_eq!(a, Ablation::Omega(vec![0.0, 1.0, 3.0]));
        let none: Ablation = serde_json::from_str(r#"{"axis": "none"}"#).unwrap();
        assert_eq!(none, Ablation::None);
    }

    #[test]
    fn resolution_is_idempotent() {
        let cfg = ExperimentConfig {
            field: FieldSource::Trained { denoiser: DenoiserConfig::default() },
            ..Default::default()
        };
        let (once, _) = cfg.resolve().unwrap();
        let (twice, _) = once.clone().resolve().unwrap();
        assert_eq!(once, twice);
    }
}
