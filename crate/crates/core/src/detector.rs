//! Reconstruction-based OOD scoring: noise an input, denoise it guided by
//! its predicted class, and measure how far the classifier's view of it moved.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClipRule, DetectSpace};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{forward_diffuse, run_ddp, IntegratorMethod, Sampler};
use crate::metrics::MetricRow;
use crate::rng::{standard_normal_vec, SeedTree};
use crate::schedule::NoiseSchedule;
use crate::scorefield::{Conditioned, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    #[default]
    L1,
    L2,
}

impl FeatureNorm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            FeatureNorm::L1 => diffs.sum(),
            FeatureNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Noising depth.
    pub t: usize,
    pub omega: f64,
    pub repeat: usize,
    pub detect_space: DetectSpace,
    pub clip: Option<ClipRule>,
    pub method: IntegratorMethod,
    /// Fixed stride of the denoising grid; `t` must be a multiple of it.
    pub step_size: usize,
    pub threshold: f64,
    pub norm: FeatureNorm,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            t: 300,
            omega: 3.0,
            repeat: 4,
            detect_space: DetectSpace::Logit,
            clip: None,
            method: IntegratorMethod::Pndm,
            step_size: 20,
            threshold: 0.0,
            norm: FeatureNorm::L1,
        }
    }
}

impl DetectorConfig {
    /// Defaults scaled to `max_step`: a stride of `max_step / 50` and the
    /// depth at 30% of `max_step`, rounded to the stride.
    pub fn for_schedule(max_step: usize) -> Self {
        let base = Self::default();
        let stride = (max_step / 50).max(1);
        let t = ((max_step as f64 * 0.3 / stride as f64).round() as usize).max(1) * stride;
        Self {
            t: t.min(max_step),
            step_size: stride,
            ..base
        }
    }

    /// Setting used on the planar benchmark: feature space, full-depth
    /// noising and plain conditional guidance. The logits of a small
    /// classifier saturate away from the data, so logit-space changes carry
    /// little signal there.
    pub fn benchmark(max_step: usize) -> Self {
        Self {
            t: max_step,
            omega: 1.0,
            detect_space: DetectSpace::Feature,
            step_size: (max_step / 50).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let t_max = schedule.max_step();
        if self.t == 0 || self.t > t_max {
            return Err(Error::Config(format!("detector depth {} outside (0, {t_max}]", self.t)));
        }
        if self.repeat == 0 {
            return Err(Error::Config("repeat count must be at least 1".into()));
        }
        if self.step_size == 0 || self.t % self.step_size != 0 {
            return Err(Error::Config(format!(
                "depth {} is not a multiple of the step size {}",
                self.t, self.step_size
            )));
        }
        if !self.threshold.is_finite() || !self.omega.is_finite() {
            return Err(Error::Config("threshold and omega must be finite".into()));
        }
        if !self.method.is_deterministic() {
            return Err(Error::Config("the detector needs a deterministic integrator".into()));
        }
        if self.clip.is_some() && self.detect_space != DetectSpace::Feature {
            return Err(Error::Config("clipping is only defined in feature space".into()));
        }
        Ok(())
    }
}

/// Noises `x` to depth `cfg.t` and denoises it guided toward `label`.
pub fn conditional_reconstruct(
    x: &[f64],
    label: usize,
    cfg: &DetectorConfig,
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if !field.is_conditional() {
        return Err(Error::Unconditional);
    }
    check_dim(field.dim(), x.len())?;
    let noise = standard_normal_vec(rng, x.len());
    let noised = forward_diffuse(x, cfg.t, &noise, schedule)?;
    let guided = Conditioned::guided(field, schedule, label, cfg.omega);
    let sampler = Sampler::new(cfg.method);
    Ok(run_ddp(&guided, &noised, cfg.t, 0, cfg.step_size, &sampler, None)?.into_end())
}

/// Score of one sample with its per-repeat parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDetail {
    pub score: f64,
    pub per_repeat: Vec<f64>,
    pub pseudo_label: usize,
}

/// Mean over repeats of the feature-space distance between `x` and its
/// conditional reconstruction. Repeat `r` draws its noise from the
/// substream `repeat-r` of `seeds`.
pub fn ddp_score(
    x: &[f64],
    cfg: &DetectorConfig,
    field: &dyn ScoreField,
    classifier: &Classifier,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
) -> Result<ScoreDetail> {
    cfg.validate(schedule)?;
    let label = classifier.predict(x)?;
    let reference = classifier.extract_features(x, cfg.detect_space, cfg.clip.as_ref())?;
    let per_repeat = (0..cfg.repeat)
        .map(|r| {
            let mut rng = seeds.stream(&format!("repeat-{r}"));
            let recon = conditional_reconstruct(x, label, cfg, field, schedule, &mut rng)?;
            let f = classifier.extract_features(&recon, cfg.detect_space, cfg.clip.as_ref())?;
            Ok(cfg.norm.distance(&reference, &f))
        })
        .collect::<Result<Vec<f64>>>()?;
    let score = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    Ok(ScoreDetail {
        score,
        per_repeat,
        pseudo_label: label,
    })
}

/// Scores a batch in parallel; sample `i` uses the substream tree `sample-i` of `seeds`.
pub fn ddp_score_batch(
    xs: &[Vec<f64>],
    cfg: &DetectorConfig,
    field: &dyn ScoreField,
    classifier: &Classifier,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
) -> Result<Vec<ScoreDetail>> {
    cfg.validate(schedule)?;
    xs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            ddp_score(x, cfg, field, classifier, schedule, &seeds.child(&format!("sample-{i}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    /// Negative maximum logit.
    Mls,
    /// Negative log-sum-exp of the logits.
    Ebo,
    /// Distance to the k-th nearest normalized training feature.
    Knn,
    /// Energy of the logits recomputed from clipped features.
    React,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::Mls, Self::Ebo, Self::Knn, Self::React];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mls => "mls",
            Self::Ebo => "ebo",
            Self::Knn => "knn",
            Self::React => "react",
        }
    }
}

/// Reference features for nearest-neighbour scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReference {
    features: Vec<Vec<f64>>,
    pub k: usize,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl KnnReference {
    pub fn build(classifier: &Classifier, data: &[Vec<f64>], k: usize) -> Result<Self> {
        if k == 0 || k > data.len() {
            return Err(Error::Config(format!("k = {k} needs 1 <= k <= {}", data.len())));
        }
        let features = data
            .iter()
            .map(|x| classifier.features(x).map(unit))
            .collect::<Result<_>>()?;
        Ok(Self { features, k })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Post-hoc classifier score; larger means more likely OOD.
pub fn baseline_score(
    method: BaselineMethod,
    x: &[f64],
    classifier: &Classifier,
    knn: Option<&KnnReference>,
    clip: Option<&ClipRule>,
) -> Result<f64> {
    match method {
        BaselineMethod::Mls => {
            let l = classifier.logits(x)?;
            Ok(-l.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        BaselineMethod::Ebo => Ok(-log_sum_exp(&classifier.logits(x)?)),
        BaselineMethod::React => {
            let default = ClipRule::Absolute(ClipRule::DEFAULT_THRESHOLD);
            let l = classifier.clipped_logits(x, clip.unwrap_or(&default))?;
            Ok(-log_sum_exp(&l))
        }
        BaselineMethod::Knn => {
            let reference = knn.ok_or_else(|| {
                Error::Input("nearest-neighbour scoring needs reference features".into())
            })?;
            let f = unit(classifier.features(x)?);
            let mut d: Vec<f64> = reference
                .features
                .iter()
                .map(|r| FeatureNorm::L2.distance(r, &f))
                .collect();
            let k = reference.k - 1;
            d.select_nth_unstable_by(k, f64::total_cmp);
            Ok(d[k])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

/// Out-of-distribution iff `score > threshold`.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::OutOfDistribution
    } else {
        Decision::InDistribution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub set: String,
    pub index: usize,
    pub method: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_repeat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<usize>,
    pub decision: Decision,
}

/// Per-sample records and per-(method, OOD set) metric rows. Each push
/// carries its own threshold, since score scales differ between methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: DetectorConfig,
    pub samples: Vec<SampleRecord>,
    pub rows: Vec<MetricRow>,
}

impl DetectionReport {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            samples: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Adds every sample of one (method, set) score list.
    pub fn push_scores(&mut self, method: &str, set: &str, details: &[ScoreDetail], threshold: f64) {
        for (index, d) in details.iter().enumerate() {
            self.samples.push(SampleRecord {
                set: set.to_string(),
                index,
                method: method.to_string(),
                score: d.score,
                per_repeat: d.per_repeat.clone(),
                pseudo_label: Some(d.pseudo_label),
                decision: decide(d.score, threshold),
            });
        }
    }

    pub fn push_plain_scores(&mut self, method: &str, set: &str, scores: &[f64], threshold: f64) {
        for (index, &score) in scores.iter().enumerate() {
            self.samples.push(SampleRecord {
                set: set.to_string(),
                index,
                method: method.to_string(),
                score,
                per_repeat: Vec::new(),
                pseudo_label: None,
                decision: decide(score, threshold),
            });
        }
    }

    /// Scores of one (method, set) pair in index order.
    pub fn scores(&self, method: &str, set: &str) -> Vec<f64> {
        let mut recs: Vec<&SampleRecord> = self
            .samples
            .iter()
            .filter(|r| r.method == method && r.set == set)
            .collect();
        recs.sort_by_key(|r| r.index);
        recs.iter().map(|r| r.score).collect()
    }

    /// Metric rows for every method against every OOD set, in first-seen order.
    pub fn compute_rows(samples: &[SampleRecord], ind_set: &str) -> Result<Vec<MetricRow>> {
        let mut methods: Vec<&str> = Vec::new();
        let mut sets: Vec<&str> = Vec::new();
        for r in samples {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
            if r.set != ind_set && !sets.contains(&r.set.as_str()) {
                sets.push(&r.set);
            }
        }
        let collect = |m: &str, s: &str| -> Vec<f64> {
            let mut recs: Vec<&SampleRecord> =
                samples.iter().filter(|r| r.method == m && r.set == s).collect();
            recs.sort_by_key(|r| r.index);
            recs.iter().map(|r| r.score).collect()
        };
        let mut rows = Vec::new();
        for m in &methods {
            let ind = collect(m, ind_set);
            for s in &sets {
                let ood = collect(m, s);
                if ind.is_empty() || ood.is_empty() {
                    continue;
                }
                rows.push(MetricRow::evaluate(m, s, &ind, &ood)?);
            }
        }
        Ok(rows)
    }

    pub fn finalize(&mut self, ind_set: &str) -> Result<()> {
        self.rows = Self::compute_rows(&self.samples, ind_set)?;
        Ok(())
    }
}
