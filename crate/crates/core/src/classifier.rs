//! Frozen random-Fourier-feature extractor with a trained softmax head.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::SeedTree;

/// Representation a detector compares: raw input, standardized features, or logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectSpace {
    Input,
    Feature,
    #[default]
    Logit,
}

impl DetectSpace {
    pub const ALL: [DetectSpace; 3] = [Self::Input, Self::Feature, Self::Logit];

    pub fn level(self) -> usize {
        match self {
            Self::Input => 0,
            Self::Feature => 1,
            Self::Logit => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Feature => "feature",
            Self::Logit => "logit",
        }
    }
}

impl std::str::FromStr for DetectSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" | "0" => Ok(Self::Input),
            "feature" | "1" => Ok(Self::Feature),
            "logit" | "2" => Ok(Self::Logit),
            other => Err(Error::Config(format!("unknown detect space `{other}`"))),
        }
    }
}

/// Elementwise cap `min(v, threshold)` on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRule {
    Absolute(f64),
    PerCoordinate(Vec<f64>),
}

impl ClipRule {
    pub const DEFAULT_THRESHOLD: f64 = 0.3;

    fn validate(&self, m: usize) -> Result<()> {
        let ok = |t: f64| t > 0.0 && !t.is_nan();
        match self {
            ClipRule::Absolute(t) if ok(*t) => Ok(()),
            ClipRule::PerCoordinate(ts) if ts.len() == m && ts.iter().all(|&t| ok(t)) => Ok(()),
            _ => Err(Error::Config("clip thresholds must be positive, one per feature".into())),
        }
    }

    pub fn apply(&self, v: &mut [f64]) {
        match self {
            ClipRule::Absolute(t) => v.iter_mut().for_each(|x| *x = x.min(*t)),
            ClipRule::PerCoordinate(ts) => v.iter_mut().zip(ts).for_each(|(x, t)| *x = x.min(*t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub features: usize,
    /// Length scale of the feature map; frequencies are drawn from N(0, 1/bandwidth^2).
    pub bandwidth: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            features: 256,
            bandwidth: 1.0,
            learning_rate: 0.05,
            epochs: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    config: ClassifierConfig,
    dim: usize,
    classes: usize,
    /// `features x dim`, row-major.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    /// `classes x features`, row-major.
    head: Vec<f64>,
    bias: Vec<f64>,
    training_accuracy: f64,
}

impl Classifier {
    /// Fits the head by full-batch Adam on softmax cross-entropy. The head
    /// starts at zero.
    pub fn train(data: &[Vec<f64>], labels: &[usize], config: ClassifierConfig) -> Result<Self> {
        let Some(first) = data.first() else {
            return Err(Error::Input("classifier training data is empty".into()));
        };
        if labels.len() != data.len() {
            return Err(Error::Input("one label per sample required".into()));
        }
        if config.features == 0 || !(config.bandwidth > 0.0) || !(config.learning_rate > 0.0) {
            return Err(Error::Config(
                "features, bandwidth and learning rate must be positive".into(),
            ));
        }
        let dim = first.len();
        for x in data {
            check_dim(dim, x.len())?;
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut present = vec![false; classes];
        labels.iter().for_each(|&l| present[l] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::Input("classifier training needs at least two classes".into()));
        }

        let m = config.features;
        let mut rng = SeedTree::new(config.seed).stream("classifier/features");
        let frequencies: Vec<f64> = (0..m * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / config.bandwidth)
            .collect();
        let phases: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut model = Self {
            config,
            dim,
            classes,
            frequencies,
            phases,
            feature_mean: vec![0.0; m],
            feature_std: vec![1.0; m],
            head: vec![0.0; classes * m],
            bias: vec![0.0; classes],
            training_accuracy: 0.0,
        };
        let raw: Vec<Vec<f64>> = data.iter().map(|x| model.raw_features(x)).collect();
        let n = raw.len() as f64;
        for j in 0..m {
            let mean = raw.iter().map(|f| f[j]).sum::<f64>() / n;
            let var = raw.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n;
            model.feature_mean[j] = mean;
            model.feature_std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        let feats: Vec<Vec<f64>> = raw.iter().map(|f| model.standardize(f)).collect();

        let mut adam_m = vec![0.0; classes * (m + 1)];
        let mut adam_v = vec![0.0; classes * (m + 1)];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for epoch in 0..model.config.epochs {
            let (loss, gw, gb) = model.loss_and_grad(&feats, labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let step = (epoch + 1) as i32;
            let (c1, c2) = (1.0 - f64::powi(b1, step), 1.0 - f64::powi(b2, step));
            let lr = model.config.learning_rate;
            let params = model.head.iter_mut().chain(model.bias.iter_mut());
            let grads = gw.iter().chain(gb.iter());
            for (((p, g), mo), ve) in params.zip(grads).zip(&mut adam_m).zip(&mut adam_v) {
                *mo = b1 * *mo + (1.0 - b1) * g;
                *ve = b2 * *ve + (1.0 - b2) * g * g;
                *p -= lr * (*mo / c1) / ((*ve / c2).sqrt() + eps);
            }
        }
        let correct = feats
            .iter()
            .zip(labels)
            .filter(|(f, &l)| argmax(&model.logits_from_features(f)) == l)
            .count();
        model.training_accuracy = correct as f64 / n;
        log::debug!("classifier training accuracy {:.4}", model.training_accuracy);
        Ok(model)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_count(&self) -> usize {
        self.config.features
    }

    pub fn training_accuracy(&self) -> f64 {
        self.training_accuracy
    }

    fn raw_features(&self, x: &[f64]) -> Vec<f64> {
        let m = self.config.features;
        let scale = (2.0 / m as f64).sqrt();
        (0..m)
            .map(|j| {
                let w = &self.frequencies[j * self.dim..(j + 1) * self.dim];
                let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.phases[j];
                scale * z.cos()
            })
            .collect()
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Logits of an already-extracted (possibly clipped) feature vector.
    pub fn logits_from_features(&self, f: &[f64]) -> Vec<f64> {
        let m = self.config.features;
        (0..self.classes)
            .map(|c| {
                let row = &self.head[c * m..(c + 1) * m];
                row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + self.bias[c]
            })
            .collect()
    }

    /// Standardized feature vector.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(self.standardize(&self.raw_features(x)))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_from_features(&self.features(x)?))
    }

    /// The representation at `space`. Clipping is only defined on features.
    pub fn extract_features(&self, x: &[f64], space: DetectSpace, clip: Option<&ClipRule>) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        if clip.is_some() && space != DetectSpace::Feature {
            return Err(Error::Config(format!(
                "clipping applies to the feature level, not `{}`",
                space.name()
            )));
        }
        match space {
            DetectSpace::Input => Ok(x.to_vec()),
            DetectSpace::Feature => {
                let mut f = self.features(x)?;
                if let Some(rule) = clip {
                    rule.validate(self.config.features)?;
                    rule.apply(&mut f);
                }
                Ok(f)
            }
            DetectSpace::Logit => self.logits(x),
        }
    }

    /// Logits after clipping the features; the basis of rectified-activation scores.
    pub fn clipped_logits(&self, x: &[f64], clip: &ClipRule) -> Result<Vec<f64>> {
        let f = self.extract_features(x, DetectSpace::Feature, Some(clip))?;
        Ok(self.logits_from_features(&f))
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Per-coordinate clip thresholds at quantile `q` of the standardized
    /// features of `reference`.
    pub fn quantile_clip(&self, reference: &[Vec<f64>], q: f64) -> Result<ClipRule> {
        if reference.is_empty() || !(0.0..=1.0).contains(&q) {
            return Err(Error::Input("quantile clip needs data and q in [0, 1]".into()));
        }
        let feats: Vec<Vec<f64>> = reference.iter().map(|x| self.features(x)).collect::<Result<_>>()?;
        let m = self.config.features;
        let thresholds = (0..m)
            .map(|j| {
                let mut col: Vec<f64> = feats.iter().map(|f| f[j]).collect();
                col.sort_by(f64::total_cmp);
                let idx = ((col.len() - 1) as f64 * q).round() as usize;
                col[idx].max(f64::MIN_POSITIVE)
            })
            .collect();
        Ok(ClipRule::PerCoordinate(thresholds))
    }

    /// Mean softmax cross-entropy and its gradient with respect to head
    /// weights (row-major, `classes x features`) and biases.
    fn loss_and_grad(&self, feats: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let m = self.config.features;
        let n = feats.len() as f64;
        let mut gw = vec![0.0; self.classes * m];
        let mut gb = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (f, &y) in feats.iter().zip(labels) {
            let logits = self.logits_from_features(f);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - logits[y];
            for c in 0..self.classes {
                let d = exps[c] / z - if c == y { 1.0 } else { 0.0 };
                gb[c] += d / n;
                for (g, v) in gw[c * m..(c + 1) * m].iter_mut().zip(f) {
                    *g += d * v / n;
                }
            }
        }
        (loss / n, gw, gb)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let cx = if c == 0 { 3.0 } else { -3.0 };
            x.push(vec![
                cx + 0.5 * rng.sample::<f64, _>(StandardNormal),
                0.5 * rng.sample::<f64, _>(StandardNormal),
            ]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = two_blobs(400, 1);
        let c = Classifier::train(&x, &y, ClassifierConfig::default()).unwrap();
        assert!(c.training_accuracy() >= 0.99);
        assert_eq!(c.predict(&[3.0, 0.0]).unwrap(), 0);
        assert_eq!(c.predict(&[-3.0, 0.0]).unwrap(), 1);
    }

    #[test]
    fn zero_epochs_keeps_zero_head() {
        let (x, y) = two_blobs(50, 2);
        let cfg = ClassifierConfig { epochs: 0, ..Default::default() };
        let c = Classifier::train(&x, &y, cfg).unwrap();
        assert!(c.head.iter().all(|&w| w == 0.0) && c.bias.iter().all(|&b| b == 0.0));
        // all logits tie, so the lowest index wins
        assert_eq!(c.predict(&[-3.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn label_permutation_permutes_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..90)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let y: Vec<usize> = x.iter().map(|p| if p[0] > 1.0 { 0 } else if p[1] > 0.0 { 1 } else { 2 }).collect();
        let perm = [2, 0, 1];
        let y2: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
        let cfg = ClassifierConfig { epochs: 50, features: 64, ..Default::default() };
        let a = Classifier::train(&x, &y, cfg.clone()).unwrap();
        let b = Classifier::train(&x, &y2, cfg).unwrap();
        for p in [[0.5, 0.5], [2.0, -1.0], [-2.0, -2.0]] {
            let la = a.logits(&p).unwrap();
            let lb = b.logits(&p).unwrap();
            for c in 0..3 {
                assert!((la[c] - lb[perm[c]]).abs() < 1e-9, "{la:?} vs {lb:?}");
            }
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let (x, y) = two_blobs(30, 4);
        let cfg = ClassifierConfig { epochs: 20, features: 16, ..Default::default() };
        let c = Classifier::train(&x, &y, cfg).unwrap();
        let feats: Vec<Vec<f64>> = x.iter().map(|p| c.features(p).unwrap()).collect();
        let (_, gw, gb) = c.loss_and_grad(&feats, &y);
        let h = 1e-6;
        for k in 0..gw.len() + gb.len() {
            let eval = |delta: f64| {
                let mut m = c.clone();
                if k < gw.len() {
                    m.head[k] += delta;
                } else {
                    m.bias[k - gw.len()] += delta;
                }
                m.loss_and_grad(&feats, &y).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = if k < gw.len() { gw[k] } else { gb[k - gw.len()] };
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn feature_levels_and_clipping() {
        let (x, y) = two_blobs(100, 5);
        let c = Classifier::train(&x, &y, ClassifierConfig { epochs: 10, ..Default::default() }).unwrap();
        let p = [0.4, -1.2];
        assert_eq!(c.extract_features(&p, DetectSpace::Input, None).unwrap(), p.to_vec());
        let f = c.extract_features(&p, DetectSpace::Feature, None).unwrap();
        let inf = c.extract_features(&p, DetectSpace::Feature, Some(&ClipRule::Absolute(f64::INFINITY))).unwrap();
        assert_eq!(f, inf);
        let rule = ClipRule::Absolute(0.3);
        let clipped = c.extract_features(&p, DetectSpace::Feature, Some(&rule)).unwrap();
        assert!(clipped.iter().all(|&v| v <= 0.3));
        let mut twice = clipped.clone();
        rule.apply(&mut twice);
        assert_eq!(twice, clipped);
        assert!(c.extract_features(&p, DetectSpace::Logit, Some(&rule)).is_err());
        assert_eq!(c.extract_features(&p, DetectSpace::Logit, None).unwrap().len(), 2);
        let q = c.quantile_clip(&x, 0.9).unwrap();
        assert!(c.extract_features(&p, DetectSpace::Feature, Some(&q)).is_ok());
        assert!(c.extract_features(&p, DetectSpace::Feature, Some(&ClipRule::Absolute(0.0))).is_err());
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let (x, y) = two_blobs(100, 6);
        let mut c = Classifier::train(&x, &y, ClassifierConfig { epochs: 30, ..Default::default() }).unwrap();
        let before: Vec<usize> = x.iter().map(|p| c.predict(p).unwrap()).collect();
        c.bias.iter_mut().for_each(|b| *b += 7.5);
        let after: Vec<usize> = x.iter().map(|p| c.predict(p).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn determinism_and_rejections() {
        let (x, y) = two_blobs(60, 7);
        let cfg = ClassifierConfig { epochs: 5, ..Default::default() };
        let a = Classifier::train(&x, &y, cfg.clone()).unwrap();
        let b = Classifier::train(&x, &y, cfg.clone()).unwrap();
        assert_eq!(a, b);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Classifier>(&text).unwrap(), a);
        assert!(Classifier::train(&x, &vec![1; x.len()], cfg.clone()).is_err());
        assert!(Classifier::train(&[], &[], cfg).is_err());
    }
}
