use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ScoreField;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

/// Plain-data form of a mixture, used for configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One row-major `d x d` matrix per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub label: Option<usize>,
    // lower factor of `covariance`, for sampling and Mahalanobis distances
    chol: DMatrix<f64>,
}

/// Weighted Gaussian components in `R^d`, with closed-form time marginals
/// `p_t = sum_k w_k N(sqrt(ab) mu_k, ab Sigma_k + (1 - ab) I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<MixtureComponent>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::from_spec(&spec)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(m: GaussianMixture) -> Self {
        m.to_spec()
    }
}

impl GaussianMixture {
    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let k = spec.weights.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if spec.means.len() != k || spec.covariances.len() != k {
            return Err(Error::Config(
                "weights, means and covariances must have equal length".into(),
            ));
        }
        if let Some(labels) = &spec.labels {
            if labels.len() != k {
                return Err(Error::Config("one label per component required".into()));
            }
        }
        if spec.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = spec.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = spec.means[0].len();
        if dim == 0 {
            return Err(Error::Config("zero-dimensional mixture".into()));
        }
        let mut components = Vec::with_capacity(k);
        for i in 0..k {
            check_dim(dim, spec.means[i].len())?;
            let rows = &spec.covariances[i];
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::Config(format!("covariance {i} is not {dim}x{dim}")));
            }
            let cov = DMatrix::from_fn(dim, dim, |r, c| rows[r][c]);
            for r in 0..dim {
                for c in 0..r {
                    let (a, b) = (cov[(r, c)], cov[(c, r)]);
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::Config(format!("covariance {i} is not symmetric")));
                    }
                }
            }
            let chol = Cholesky::new(cov.clone())
                .ok_or_else(|| {
                    Error::Config(format!("covariance {i} is not positive definite"))
                })?
                .l();
            components.push(MixtureComponent {
                weight: spec.weights[i],
                mean: DVector::from_column_slice(&spec.means[i]),
                covariance: cov,
                label: spec.labels.as_ref().map(|l| l[i]),
                chol,
            });
        }
        Ok(Self { dim, components })
    }

    /// Components sharing the covariance `std^2 I`. When `labeled`, each
    /// component's label is its index.
    pub fn isotropic(means: &[Vec<f64>], weights: &[f64], std: f64, labeled: bool) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let cov: Vec<Vec<f64>> = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { std * std } else { 0.0 }).collect())
            .collect();
        Self::from_spec(&MixtureSpec {
            weights: weights.to_vec(),
            means: means.to_vec(),
            covariances: vec![cov; means.len()],
            labels: labeled.then(|| (0..means.len()).collect()),
        })
    }

    pub fn to_spec(&self) -> MixtureSpec {
        let labeled = self.components.iter().all(|c| c.label.is_some());
        MixtureSpec {
            weights: self.components.iter().map(|c| c.weight).collect(),
            means: self.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| {
                    (0..self.dim)
                        .map(|r| (0..self.dim).map(|k| c.covariance[(r, k)]).collect())
                        .collect()
                })
                .collect(),
            labels: labeled.then(|| self.components.iter().map(|c| c.label.unwrap()).collect()),
        }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.components.iter().filter_map(|c| c.label).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// The mixture restricted to one label, weights renormalized.
    pub fn conditional(&self, label: usize) -> Result<Self> {
        let picked = self.component_indices(Some(label))?;
        let total: f64 = picked.iter().map(|&i| self.components[i].weight).sum();
        let components = picked
            .iter()
            .map(|&i| {
                let mut c = self.components[i].clone();
                c.weight /= total;
                c
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            components,
        })
    }

    /// Every component mean shifted by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        check_dim(self.dim, shift.len())?;
        let delta = DVector::from_column_slice(shift);
        let mut out = self.clone();
        for c in &mut out.components {
            c.mean += &delta;
        }
        Ok(out)
    }

    /// Mahalanobis distance of `x` from component `k` under its own covariance.
    pub fn mahalanobis(&self, x: &[f64], k: usize) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let c = &self.components[k];
        let diff = DVector::from_column_slice(x) - &c.mean;
        let z = c
            .chol
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Input("singular covariance".into()))?;
        Ok(z.norm())
    }

    /// Draws `n` points; returns them with the index of the generating component.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>) {
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .expect("weights validated at construction");
        let mut points = Vec::with_capacity(n);
        let mut which = Vec::with_capacity(n);
        for _ in 0..n {
            let k = picker.sample(rng);
            let c = &self.components[k];
            let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &c.mean + &c.chol * z;
            points.push(x.iter().copied().collect());
            which.push(k);
        }
        (points, which)
    }

    /// Class of component `k`: its label when present, otherwise its index.
    pub fn class_of(&self, k: usize) -> usize {
        self.components[k].label.unwrap_or(k)
    }

    /// `log p_t(x)`, optionally restricted to one label.
    pub fn log_density(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<f64> {
        Ok(self.evaluate(schedule, x, t, condition)?.0)
    }

    fn component_indices(&self, condition: Option<usize>) -> Result<Vec<usize>> {
        match condition {
            None => Ok((0..self.components.len()).collect()),
            Some(label) => {
                if self.components.iter().any(|c| c.label.is_none()) {
                    return Err(Error::Unconditional);
                }
                let picked: Vec<usize> = (0..self.components.len())
                    .filter(|&i| self.components[i].label == Some(label))
                    .collect();
                if picked.is_empty() {
                    return Err(Error::UnknownLabel(label));
                }
                Ok(picked)
            }
        }
    }

    // (log p_t(x), grad log p_t(x))
    fn evaluate(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, x.len())?;
        let ab = schedule.alpha_bar_at(t)?;
        let picked = self.component_indices(condition)?;
        let total_weight: f64 = picked.iter().map(|&i| self.components[i].weight).sum();
        let xv = DVector::from_column_slice(x);
        let d = self.dim as f64;
        let identity = DMatrix::<f64>::identity(self.dim, self.dim);

        let mut log_terms = Vec::with_capacity(picked.len());
        let mut grads = Vec::with_capacity(picked.len());
        for &i in &picked {
            let c = &self.components[i];
            let cov_t = &c.covariance * ab + &identity * (1.0 - ab);
            let chol = Cholesky::new(cov_t).ok_or_else(|| Error::Integration {
                step: t,
                reason: "marginal covariance lost definiteness".into(),
            })?;
            let diff = &xv - &c.mean * ab.sqrt();
            let prec_diff = chol.solve(&diff);
            let quad = diff.dot(&prec_diff);
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_norm = -0.5 * (quad + log_det + d * (2.0 * std::f64::consts::PI).ln());
            log_terms.push((c.weight / total_weight).ln() + log_norm);
            grads.push(-prec_diff);
        }
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
        let log_p = max + sum.ln();
        let mut grad = DVector::<f64>::zeros(self.dim);
        for (l, g) in log_terms.iter().zip(&grads) {
            grad += g * (l - log_p).exp();
        }
        Ok((log_p, grad.iter().copied().collect()))
    }
}

impl ScoreField for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn is_conditional(&self) -> bool {
        self.components.iter().all(|c| c.label.is_some())
    }

    /// `eps = -sqrt(1 - ab_t) grad log p_t`.
    fn eps(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        let (_, grad) = self.evaluate(schedule, x, t, condition)?;
        let scale = (1.0 - schedule.alpha_bar_at(t)?).sqrt();
        Ok(grad.iter().map(|g| -scale * g).collect())
    }

    /// Exact, including at `t = 0` where `eps` carries no information.
    fn score(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        Ok(self.evaluate(schedule, x, t, condition)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;
    use crate::scorefield::eps_to_score;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    // Independent 2-D mixture log density via explicit 2x2 inverse.
    fn log_pt_2d(weights: &[f64], means: &[[f64; 2]], covs: &[[[f64; 2]; 2]], ab: f64, x: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for k in 0..weights.len() {
            let a = ab * covs[k][0][0] + 1.0 - ab;
            let b = ab * covs[k][0][1];
            let d = ab * covs[k][1][1] + 1.0 - ab;
            let det = a * d - b * b;
            let u = x[0] - ab.sqrt() * means[k][0];
            let v = x[1] - ab.sqrt() * means[k][1];
            let quad = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
            acc += weights[k] * (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        }
        acc.ln()
    }

    #[test]
    fn standard_normal_eps_is_scaled_identity() {
        let s = sched();
        let m = GaussianMixture::isotropic(&[vec![0.0, 0.0]], &[1.0], 1.0, false).unwrap();
        for t in [1.0, 100.0, 500.0, 1000.0] {
            let x = [0.7, -1.3];
            let e = m.eps(&s, &x, t, None).unwrap();
            let scale = (1.0 - s.alpha_bar_at(t).unwrap()).sqrt();
            for i in 0..2 {
                assert!((e[i] - scale * x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eps_vanishes_at_marginal_mode() {
        let s = sched();
        let mu = vec![1.5, -2.0];
        let m = GaussianMixture::isotropic(&[mu.clone()], &[1.0], 1.0, false).unwrap();
        let ab = s.alpha_bar(300).unwrap();
        let x: Vec<f64> = mu.iter().map(|v| ab.sqrt() * v).collect();
        let e = m.eps(&s, &x, 300.0, None).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn score_matches_finite_differences_of_independent_density() {
        let s = sched();
        let weights = [0.35, 0.65];
        let means = [[2.0, 0.5], [-1.0, -1.5]];
        let covs = [[[1.0, 0.3], [0.3, 0.5]], [[0.4, -0.1], [-0.1, 0.8]]];
        let m = GaussianMixture::from_spec(&MixtureSpec {
            weights: weights.to_vec(),
            means: means.iter().map(|v| v.to_vec()).collect(),
            covariances: covs.iter().map(|c| c.iter().map(|r| r.to_vec()).collect()).collect(),
            labels: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let t = 300.0;
            let ab = s.alpha_bar(300).unwrap();
            let h = 1e-5;
            let eps = m.eps(&s, &x, t, None).unwrap();
            let sc = eps_to_score(&eps, t, &s).unwrap();
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (log_pt_2d(&weights, &means, &covs, ab, xp)
                    - log_pt_2d(&weights, &means, &covs, ab, xm))
                    / (2.0 * h);
                assert!(
                    (fd - sc[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "x = {x:?}, fd = {fd}, score = {}",
                    sc[i]
                );
            }
            let lp = m.log_density(&s, &x, t, None).unwrap();
            assert!((lp - log_pt_2d(&weights, &means, &covs, ab, x)).abs() < 1e-10);
        }
    }

    #[test]
    fn conditioning_equals_restricted_mixture() {
        let s = sched();
        let full = GaussianMixture::from_spec(&MixtureSpec {
            weights: vec![0.2, 0.3, 0.5],
            means: vec![vec![1.0, 0.0], vec![-1.0, 2.0], vec![0.0, -2.0]],
            covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 3],
            labels: Some(vec![0, 1, 0]),
        })
        .unwrap();
        let only0 = GaussianMixture::from_spec(&MixtureSpec {
            weights: vec![0.2 / 0.7, 0.5 / 0.7],
            means: vec![vec![1.0, 0.0], vec![0.0, -2.0]],
            covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2],
            labels: None,
        })
        .unwrap();
        let x = [0.4, -0.9];
        let a = full.eps(&s, &x, 200.0, Some(0)).unwrap();
        let b = only0.eps(&s, &x, 200.0, None).unwrap();
        let c = full.conditional(0).unwrap().eps(&s, &x, 200.0, None).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-12);
            assert!((a[i] - c[i]).abs() < 1e-12);
        }
        assert!(matches!(full.eps(&s, &x, 200.0, Some(7)), Err(Error::UnknownLabel(7))));
        assert!(matches!(only0.eps(&s, &x, 200.0, Some(0)), Err(Error::Unconditional)));
    }

    #[test]
    fn out_of_range_steps_rejected() {
        let s = sched();
        let m = GaussianMixture::isotropic(&[vec![0.0]], &[1.0], 1.0, false).unwrap();
        assert!(m.eps(&s, &[0.0], 1001.0, None).is_err());
        assert!(m.eps(&s, &[0.0], -1.0, None).is_err());
        assert!(m.eps(&s, &[0.0, 1.0], 5.0, None).is_err());
    }

    #[test]
    fn score_defined_at_step_zero() {
        let s = sched();
        let m = GaussianMixture::isotropic(&[vec![1.0]], &[1.0], 0.5, false).unwrap();
        let sc = m.score(&s, &[2.0], 0.0, None).unwrap();
        assert!((sc[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let bad_weights = MixtureSpec {
            weights: vec![0.5, 0.6],
            means: vec![vec![0.0], vec![1.0]],
            covariances: vec![vec![vec![1.0]]; 2],
            labels: None,
        };
        assert!(GaussianMixture::from_spec(&bad_weights).is_err());
        let not_pd = MixtureSpec {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![vec![vec![1.0, 2.0], vec![2.0, 1.0]]],
            labels: None,
        };
        assert!(GaussianMixture::from_spec(&not_pd).is_err());
        let asym = MixtureSpec {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![vec![vec![1.0, 0.2], vec![0.1, 1.0]]],
            labels: None,
        };
        assert!(GaussianMixture::from_spec(&asym).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let m = GaussianMixture::isotropic(&[vec![2.0, 0.0], vec![-2.0, 0.0]], &[0.5, 0.5], 1.0, true)
            .unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: GaussianMixture = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_spec(), m.to_spec());
    }

    #[test]
    fn mahalanobis_and_translation() {
        let m = GaussianMixture::isotropic(&[vec![2.0, 0.0]], &[1.0], 2.0, false).unwrap();
        assert!((m.mahalanobis(&[2.0, 4.0], 0).unwrap() - 2.0).abs() < 1e-12);
        let moved = m.translated(&[0.0, 4.0]).unwrap();
        assert!(moved.mahalanobis(&[2.0, 4.0], 0).unwrap() < 1e-12);
    }
}
