//! Synthetic in-distribution and OOD point sets, including an adversarial set
//! that the classifier is overconfident on.

use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::scorefield::{GaussianMixture, ScoreField};

/// How to draw one point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Mixture {
        mixture: GaussianMixture,
    },
    TranslatedMixture {
        mixture: GaussianMixture,
        shift: Vec<f64>,
    },
    /// Independent uniform coordinates on `[low, high]`.
    IsotropicUniform {
        dim: usize,
        low: f64,
        high: f64,
    },
    /// Uniform angle on a planar circle, radial Gaussian jitter.
    Ring {
        radius: f64,
        #[serde(default = "default_ring_width")]
        width: f64,
    },
    /// Needs a trained classifier; built by [`make_adversarial_ood`].
    Adversarial {
        #[serde(default)]
        budget: AdversarialBudget,
    },
}

fn default_ring_width() -> f64 {
    0.25
}

/// Points with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn unlabeled(points: Vec<Vec<f64>>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `n` points. Mixture labels are the generating components' classes.
pub fn sample_dataset<R: Rng + ?Sized>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    match spec {
        DatasetSpec::Mixture { mixture } => {
            let (points, comps) = mixture.sample(n, rng);
            let labels = comps.iter().map(|&k| mixture.class_of(k)).collect();
            Ok(Dataset {
                points,
                labels: Some(labels),
            })
        }
        DatasetSpec::TranslatedMixture { mixture, shift } => {
            let shifted = mixture.translated(shift)?;
            sample_dataset(&DatasetSpec::Mixture { mixture: shifted }, n, rng)
        }
        DatasetSpec::IsotropicUniform { dim, low, high } => {
            if *dim == 0 || !(low < high) || !low.is_finite() || !high.is_finite() {
                return Err(Error::Config(format!("bad uniform box [{low}, {high}]^{dim}")));
            }
            let u = Uniform::new_inclusive(*low, *high).map_err(|e| Error::Config(e.to_string()))?;
            let points = (0..n).map(|_| (0..*dim).map(|_| u.sample(rng)).collect()).collect();
            Ok(Dataset::unlabeled(points))
        }
        DatasetSpec::Ring { radius, width } => {
            if !(*radius > 0.0) || !(*width >= 0.0) {
                return Err(Error::Config(format!("bad ring radius {radius} width {width}")));
            }
            let angle = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
            let points = (0..n)
                .map(|_| {
                    let a = angle.sample(rng);
                    let z: f64 = rng.sample(StandardNormal);
                    let r = radius + width * z;
                    vec![r * a.cos(), r * a.sin()]
                })
                .collect();
            Ok(Dataset::unlabeled(points))
        }
        DatasetSpec::Adversarial { .. } => Err(Error::Unsupported(
            "adversarial sets depend on a trained classifier; use make_adversarial_ood".into(),
        )),
    }
}

/// Limits of the adversarial search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialBudget {
    /// Total classifier evaluations allowed.
    pub evaluations: usize,
    /// Random-search steps per starting point.
    pub steps_per_start: usize,
    /// Minimum Mahalanobis distance from every component.
    pub margin: f64,
    /// Starting points are uniform in `[-half_width, half_width]^d`.
    pub half_width: f64,
    pub step_scale: f64,
}

impl Default for AdversarialBudget {
    fn default() -> Self {
        Self {
            evaluations: 400_000,
            steps_per_start: 40,
            margin: 4.0,
            half_width: 8.0,
            step_scale: 0.5,
        }
    }
}

fn max_logit(classifier: &Classifier, x: &[f64]) -> Result<f64> {
    Ok(classifier.logits(x)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Pushes `x` radially out of every component's margin ellipsoid.
fn project_out(mixture: &GaussianMixture, x: &mut [f64], margin: f64) -> Result<()> {
    // a push away from one component can land inside another
    for _ in 0..8 {
        let mut moved = false;
        for (k, c) in mixture.components().iter().enumerate() {
            let m = mixture.mahalanobis(x, k)?;
            if m < margin {
                let scale = if m > 1e-12 { margin * (1.0 + 1e-9) / m } else { 0.0 };
                for (i, xi) in x.iter_mut().enumerate() {
                    let d = *xi - c.mean[i];
                    *xi = if scale > 0.0 {
                        c.mean[i] + d * scale
                    } else {
                        c.mean[i] + if i == 0 { margin * 1.01 * c.covariance[(0, 0)].sqrt() } else { 0.0 }
                    };
                }
                moved = true;
            }
        }
        if !moved {
            return Ok(());
        }
    }
    Ok(())
}

fn is_far(mixture: &GaussianMixture, x: &[f64], margin: f64) -> Result<bool> {
    for k in 0..mixture.components().len() {
        if mixture.mahalanobis(x, k)? < margin {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Points at least `margin` Mahalanobis units from every component whose
/// maximum logit is at least the median maximum logit on `ind_data`.
///
/// Each start is a uniform point that is improved by projected random search
/// on the maximum logit. Returns fewer than `n` points, with a warning, when
/// the evaluation budget runs out.
pub fn make_adversarial_ood<R: Rng + ?Sized>(
    classifier: &Classifier,
    mixture: &GaussianMixture,
    ind_data: &[Vec<f64>],
    n: usize,
    budget: &AdversarialBudget,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if ind_data.is_empty() {
        return Err(Error::Input("adversarial search needs in-distribution data".into()));
    }
    let dim = mixture.dim();
    let mut ind_max: Vec<f64> = ind_data
        .iter()
        .map(|x| max_logit(classifier, x))
        .collect::<Result<_>>()?;
    ind_max.sort_by(f64::total_cmp);
    let median = ind_max[ind_max.len() / 2];

    let start_dist =
        Uniform::new_inclusive(-budget.half_width, budget.half_width).map_err(|e| Error::Config(e.to_string()))?;
    let mut found = Vec::with_capacity(n);
    let mut used = 0usize;
    while found.len() < n && used < budget.evaluations {
        let mut x: Vec<f64> = (0..dim).map(|_| start_dist.sample(rng)).collect();
        project_out(mixture, &mut x, budget.margin)?;
        let mut best = max_logit(classifier, &x)?;
        used += 1;
        for _ in 0..budget.steps_per_start {
            if best >= median || used >= budget.evaluations {
                break;
            }
            let mut cand: Vec<f64> = x
                .iter()
                .map(|v| v + budget.step_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            project_out(mixture, &mut cand, budget.margin)?;
            let v = max_logit(classifier, &cand)?;
            used += 1;
            if v > best {
                best = v;
                x = cand;
            }
        }
        if best >= median && is_far(mixture, &x, budget.margin)? {
            found.push(x);
        }
    }
    if found.len() < n {
        warn!(
            "adversarial search found {} of {n} points within {} evaluations",
            found.len(),
            budget.evaluations
        );
    }
    Ok(found)
}

/// Writes `x0..x{d-1},label,split` rows; missing labels are left empty.
pub fn write_datasets_csv<W: Write>(out: &mut W, sets: &[(&str, &Dataset)]) -> Result<()> {
    let dim = sets
        .iter()
        .find_map(|(_, d)| d.points.first().map(Vec::len))
        .unwrap_or(0);
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},label,split", header.join(","))?;
    for (split, d) in sets {
        for (i, p) in d.points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: p.len(),
                });
            }
            let coords: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
            let label = d
                .labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default();
            writeln!(out, "{},{label},{split}", coords.join(","))?;
        }
    }
    Ok(())
}

/// The standard two-class planar benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub ind: GaussianMixture,
    pub ood: Vec<(String, DatasetSpec)>,
}

impl Benchmark {
    /// Classes at `(+-2, 0)` with unit covariance; OOD sets are the mixture
    /// shifted by `(0, 4)`, the uniform box `[-6, 6]^2`, a ring of radius 5
    /// and an adversarial set.
    pub fn canonical() -> Self {
        let ind = GaussianMixture::isotropic(&[vec![2.0, 0.0], vec![-2.0, 0.0]], &[0.5, 0.5], 1.0, true)
            .expect("valid mixture");
        let ood = vec![
            (
                "shift".to_string(),
                DatasetSpec::TranslatedMixture {
                    mixture: ind.clone(),
                    shift: vec![0.0, 4.0],
                },
            ),
            (
                "uniform".to_string(),
                DatasetSpec::IsotropicUniform {
                    dim: 2,
                    low: -6.0,
                    high: 6.0,
                },
            ),
            (
                "ring".to_string(),
                DatasetSpec::Ring {
                    radius: 5.0,
                    width: default_ring_width(),
                },
            ),
            (
                "adversarial".to_string(),
                DatasetSpec::Adversarial {
                    budget: AdversarialBudget::default(),
                },
            ),
        ];
        Self { ind, ood }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::rng::SeedTree;

    fn three_class() -> GaussianMixture {
        GaussianMixture::isotropic(
            &[vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]],
            &[0.2, 0.3, 0.5],
            1.0,
            true,
        )
        .unwrap()
    }

    #[test]
    fn label_proportions_match_weights() {
        let m = three_class();
        let n = 20_000;
        let d = sample_dataset(&DatasetSpec::Mixture { mixture: m }, n, &mut SeedTree::new(4).stream("d")).unwrap();
        let labels = d.labels.unwrap();
        for (k, w) in [0.2, 0.3, 0.5].into_iter().enumerate() {
            let p = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            let se = (w * (1.0 - w) / n as f64).sqrt();
            assert!((p - w).abs() <= 3.0 * se, "class {k}: {p} vs {w}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let b = Benchmark::canonical();
        let render = |seed| {
            let seeds = SeedTree::new(seed);
            let mut buf = Vec::new();
            let sets: Vec<(String, Dataset)> = b
                .ood
                .iter()
                .filter(|(_, s)| !matches!(s, DatasetSpec::Adversarial { .. }))
                .map(|(name, s)| (name.clone(), sample_dataset(s, 50, &mut seeds.stream(name)).unwrap()))
                .collect();
            let refs: Vec<(&str, &Dataset)> = sets.iter().map(|(n, d)| (n.as_str(), d)).collect();
            write_datasets_csv(&mut buf, &refs).unwrap();
            buf
        };
        assert_eq!(render(9), render(9));
        assert_ne!(render(9), render(10));
    }

    #[test]
    fn zero_shift_reproduces_the_mixture() {
        let m = three_class();
        let a = sample_dataset(&DatasetSpec::Mixture { mixture: m.clone() }, 100, &mut SeedTree::new(1).stream("s")).unwrap();
        let b = sample_dataset(
            &DatasetSpec::TranslatedMixture {
                mixture: m,
                shift: vec![0.0, 0.0],
            },
            100,
            &mut SeedTree::new(1).stream("s"),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_and_ring_geometry() {
        let mut rng = SeedTree::new(2).stream("g");
        let u = sample_dataset(&DatasetSpec::IsotropicUniform { dim: 3, low: -6.0, high: 6.0 }, 500, &mut rng).unwrap();
        assert!(u.points.iter().flatten().all(|v| (-6.0..=6.0).contains(v)));
        assert!(u.labels.is_none());
        let r = sample_dataset(&DatasetSpec::Ring { radius: 5.0, width: 0.0 }, 100, &mut rng).unwrap();
        assert!(r.points.iter().all(|p| ((p[0].hypot(p[1])) - 5.0).abs() < 1e-12));
        assert!(sample_dataset(&DatasetSpec::Ring { radius: -1.0, width: 0.1 }, 1, &mut rng).is_err());
        assert!(sample_dataset(&DatasetSpec::Adversarial { budget: Default::default() }, 1, &mut rng).is_err());
    }

    #[test]
    fn adversarial_points_are_far_and_confident() {
        let b = Benchmark::canonical();
        let seeds = SeedTree::new(3);
        let ind = sample_dataset(&DatasetSpec::Mixture { mixture: b.ind.clone() }, 400, &mut seeds.stream("ind")).unwrap();
        let clf = Classifier::train(
            &ind.points,
            ind.labels.as_ref().unwrap(),
            ClassifierConfig { epochs: 100, features: 64, ..Default::default() },
        )
        .unwrap();
        let budget = AdversarialBudget::default();
        let adv = make_adversarial_ood(&clf, &b.ind, &ind.points, 50, &budget, &mut seeds.stream("adv")).unwrap();
        assert_eq!(adv.len(), 50);
        let mut ind_max: Vec<f64> = ind.points.iter().map(|x| max_logit(&clf, x).unwrap()).collect();
        ind_max.sort_by(f64::total_cmp);
        let median = ind_max[ind_max.len() / 2];
        for x in &adv {
            assert!(is_far(&b.ind, x, 4.0).unwrap());
            assert!(max_logit(&clf, x).unwrap() >= median);
        }
        let none = AdversarialBudget { evaluations: 0, ..budget };
        assert!(make_adversarial_ood(&clf, &b.ind, &ind.points, 5, &none, &mut seeds.stream("x")).unwrap().is_empty());
    }

    #[test]
    fn spec_json_round_trip() {
        let b = Benchmark::canonical();
        let text = serde_json::to_string(&b).unwrap();
        let back: Benchmark = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(text.contains("\"kind\":\"isotropic-uniform\""));
    }
}
