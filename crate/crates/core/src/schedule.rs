//! Discrete noise schedules and fixed-stride time grids.
//!
//! Steps are 1-based: `beta(t)` is defined for `1 <= t <= T`, while
//! `alpha_bar(0) = 1` so that step 0 is the clean sample.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default linear range for a 1000-step schedule.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_MAX_STEP: usize = 1000;

/// Parameters of a linear schedule, as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub max_step: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// The 1000-step range rescaled by `1000 / max_step`, which keeps the
    /// total noise (and so `alpha_bar(T)`) roughly independent of `T`.
    pub fn scaled_default(max_step: usize) -> Self {
        let scale = DEFAULT_MAX_STEP as f64 / max_step.max(1) as f64;
        Self {
            max_step,
            beta_start: DEFAULT_BETA_START * scale,
            beta_end: DEFAULT_BETA_END * scale,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.max_step, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::scaled_default(DEFAULT_MAX_STEP)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // index t in 0..=T
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas evenly spaced from `beta_start` to `beta_end` over `max_step` steps.
    pub fn linear(max_step: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if max_step == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if max_step == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (max_step - 1) as f64;
            (0..max_step).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let t_max = betas.len();
        let mut log_alpha_bars = Vec::with_capacity(t_max + 1);
        log_alpha_bars.push(0.0);
        let mut acc = 0.0;
        for b in &betas {
            acc += (-b).ln_1p();
            log_alpha_bars.push(acc);
        }
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        let mut posterior_variances = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            posterior_variances[t] =
                (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1];
        }
        Ok(Self {
            betas,
            alpha_bars,
            log_alpha_bars,
            posterior_variances,
        })
    }

    pub fn max_step(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar` for steps `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_forward_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(self.range_error(t as f64, 0.0))
    }

    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_forward_step(t)?;
        Ok(self.posterior_variances[t])
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 * x0 + ct * xt`.
    pub fn posterior_mean_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_forward_step(t)?;
        let beta = self.betas[t - 1];
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((coef_x0, coef_xt))
    }

    /// `alpha_bar` at a possibly fractional step.
    ///
    /// Integer steps return the stored product exactly. Between integers the
    /// log of `alpha_bar` is interpolated with a four-point cubic Lagrange
    /// stencil; for linear betas the log sequence is almost exactly quadratic,
    /// so the interpolant is smooth to rounding level.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        let t_max = self.max_step();
        if !(0.0..=t_max as f64).contains(&t) {
            return Err(self.range_error(t, 0.0));
        }
        let floor = t.floor();
        if floor == t {
            return Ok(self.alpha_bars[t as usize]);
        }
        let n = self.log_alpha_bars.len();
        if n < 4 {
            // too few nodes for a cubic stencil
            let i = floor as usize;
            let f = t - floor;
            let l = self.log_alpha_bars[i] * (1.0 - f) + self.log_alpha_bars[i + 1] * f;
            return Ok(l.exp());
        }
        let lo = (floor as usize).saturating_sub(1).min(n - 4);
        let nodes: [f64; 4] = std::array::from_fn(|k| (lo + k) as f64);
        let mut acc = 0.0;
        for j in 0..4 {
            let mut w = 1.0;
            for k in 0..4 {
                if k != j {
                    w *= (t - nodes[k]) / (nodes[j] - nodes[k]);
                }
            }
            acc += w * self.log_alpha_bars[lo + j];
        }
        Ok(acc.exp())
    }

    /// `beta` at a possibly fractional step, linearly interpolated between
    /// the discrete values. Below step 1 the first segment is extended.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        let t_max = self.max_step();
        if !(0.0..=t_max as f64).contains(&t) {
            return Err(self.range_error(t, 0.0));
        }
        let b = &self.betas;
        if b.len() == 1 {
            return Ok(b[0]);
        }
        // node i sits at step i + 1
        let pos = (t - 1.0).max(-1.0);
        let i = (pos.floor().max(0.0) as usize).min(b.len() - 2);
        let f = pos - i as f64;
        Ok((b[i] + (b[i + 1] - b[i]) * f).max(0.0))
    }

    /// Digest over the beta sequence; used to tie saved models to a schedule.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.betas.len() as u64).to_le_bytes());
        for b in &self.betas {
            hasher.update(b.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }

    fn check_forward_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.max_step() {
            return Err(self.range_error(t as f64, 1.0));
        }
        Ok(())
    }

    fn range_error(&self, step: f64, lo: f64) -> Error {
        Error::StepOutOfRange {
            step,
            lo,
            hi: self.max_step() as f64,
        }
    }
}

/// Evenly spaced integer steps with a fixed stride, running from `start` to
/// `end` in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    start: usize,
    end: usize,
    stride: usize,
}

impl TimeGrid {
    /// A decreasing grid from `t_start` to `t_end` in `num_steps` equal strides.
    pub fn new(t_start: usize, t_end: usize, num_steps: usize) -> Result<Self> {
        if t_start <= t_end {
            return Err(Error::Config(format!(
                "grid must decrease: start {t_start} <= end {t_end}"
            )));
        }
        if num_steps == 0 || (t_start - t_end) % num_steps != 0 {
            return Err(Error::Config(format!(
                "span {} is not divisible into {num_steps} fixed steps",
                t_start - t_end
            )));
        }
        Ok(Self {
            start: t_start,
            end: t_end,
            stride: (t_start - t_end) / num_steps,
        })
    }

    /// A decreasing grid from `t_start` to `t_end` with the given stride.
    pub fn with_stride(t_start: usize, t_end: usize, stride: usize) -> Result<Self> {
        if stride == 0 || t_start <= t_end || (t_start - t_end) % stride != 0 {
            return Err(Error::Config(format!(
                "stride {stride} does not evenly cover [{t_end}, {t_start}]"
            )));
        }
        Self::new(t_start, t_end, (t_start - t_end) / stride)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn num_steps(&self) -> usize {
        self.start.abs_diff(self.end) / self.stride
    }

    pub fn is_decreasing(&self) -> bool {
        self.start > self.end
    }

    pub fn reversed(&self) -> Self {
        Self {
            start: self.end,
            end: self.start,
            stride: self.stride,
        }
    }

    /// Steps at which an update starts: every node except the last.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut nodes = self.nodes();
        nodes.pop();
        nodes
    }

    /// All nodes including both endpoints.
    pub fn nodes(&self) -> Vec<usize> {
        let n = self.num_steps();
        (0..=n)
            .map(|k| {
                if self.is_decreasing() {
                    self.start - k * self.stride
                } else {
                    self.start + k * self.stride
                }
            })
            .collect()
    }

    pub fn contains(&self, t: usize) -> bool {
        let (lo, hi) = (self.start.min(self.end), self.start.max(self.end));
        (lo..=hi).contains(&t) && (t - lo) % self.stride == 0
    }

    pub fn check_within(&self, schedule: &NoiseSchedule) -> Result<()> {
        let hi = self.start.max(self.end);
        if hi > schedule.max_step() {
            return Err(Error::StepOutOfRange {
                step: hi as f64,
                lo: 0.0,
                hi: schedule.max_step() as f64,
            });
        }
        Ok(())
    }
}
