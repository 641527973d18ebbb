//! Noise-prediction fields `eps(x, t, c)` and their score equivalents.

mod denoiser;
mod mixture;

pub use denoiser::{DenoiserConfig, LossWeighting, TrainedDenoiser, TrainingRecord};
pub use mixture::{GaussianMixture, MixtureComponent, MixtureSpec};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

/// A noise predictor over `R^d`.
///
/// Implementations must be deterministic in `(x, t, condition)` and return a
/// vector of the input's dimension. Steps are real-valued so that integrators
/// can evaluate between grid nodes.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Whether `condition = Some(label)` is accepted.
    fn is_conditional(&self) -> bool;

    fn eps(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>>;

    /// `grad_x log p_t(x)`. The default converts `eps`, which is undefined
    /// at `t = 0`; fields with a closed form override it.
    fn score(
        &self,
        schedule: &NoiseSchedule,
        x: &[f64],
        t: f64,
        condition: Option<usize>,
    ) -> Result<Vec<f64>> {
        let eps = self.eps(schedule, x, t, condition)?;
        eps_to_score(&eps, t, schedule)
    }
}

/// `s = -eps / sqrt(1 - alpha_bar_t)`.
pub fn eps_to_score(eps: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::StepOutOfRange {
            step: t,
            lo: f64::MIN_POSITIVE,
            hi: schedule.max_step() as f64,
        });
    }
    let scale = (1.0 - schedule.alpha_bar_at(t)?).sqrt();
    Ok(eps.iter().map(|e| -e / scale).collect())
}

/// Inverse of [`eps_to_score`].
pub fn score_to_eps(score: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let scale = (1.0 - schedule.alpha_bar_at(t)?).sqrt();
    Ok(score.iter().map(|s| -s * scale).collect())
}

/// Classifier-free guidance: `eps_uncond + omega * (eps_cond - eps_uncond)`.
pub fn guided_eps(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    condition: usize,
    omega: f64,
) -> Result<Vec<f64>> {
    if !field.is_conditional() {
        return Err(Error::Unconditional);
    }
    let uncond = field.eps(schedule, x, t, None)?;
    let cond = field.eps(schedule, x, t, Some(condition))?;
    Ok(combine(&uncond, &cond, omega))
}

/// Guidance applied to scores. Equal to converting [`guided_eps`], since the
/// conversion is linear.
pub fn guided_score(
    field: &dyn ScoreField,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
    condition: usize,
    omega: f64,
) -> Result<Vec<f64>> {
    if !field.is_conditional() {
        return Err(Error::Unconditional);
    }
    let uncond = field.score(schedule, x, t, None)?;
    let cond = field.score(schedule, x, t, Some(condition))?;
    Ok(combine(&uncond, &cond, omega))
}

fn combine(uncond: &[f64], cond: &[f64], omega: f64) -> Vec<f64> {
    uncond
        .iter()
        .zip(cond)
        .map(|(u, c)| u + omega * (c - u))
        .collect()
}

/// A field bound to an optional condition and guidance weight; the form
/// integrators consume.
#[derive(Clone, Copy)]
pub struct Conditioned<'a> {
    pub field: &'a dyn ScoreField,
    pub schedule: &'a NoiseSchedule,
    pub condition: Option<usize>,
    pub omega: f64,
}

impl<'a> Conditioned<'a> {
    pub fn unconditional(field: &'a dyn ScoreField, schedule: &'a NoiseSchedule) -> Self {
        Self {
            field,
            schedule,
            condition: None,
            omega: 1.0,
        }
    }

    pub fn guided(
        field: &'a dyn ScoreField,
        schedule: &'a NoiseSchedule,
        condition: usize,
        omega: f64,
    ) -> Self {
        Self {
            field,
            schedule,
            condition: Some(condition),
            omega,
        }
    }

    pub fn eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.field.dim(), x.len())?;
        let out = match self.condition {
            Some(c) => guided_eps(self.field, self.schedule, x, t, c, self.omega)?,
            None => self.field.eps(self.schedule, x, t, None)?,
        };
        check_dim(x.len(), out.len())?;
        Ok(out)
    }

    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.field.dim(), x.len())?;
        match self.condition {
            Some(c) => guided_score(self.field, self.schedule, x, t, c, self.omega),
            None => self.field.score(self.schedule, x, t, None),
        }
    }
}
