//! Forward noising, reverse-process integrators and round-trip measurement.

use std::io::Write;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::scorefield::Conditioned;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorMethod {
    /// Stochastic ancestral sampling.
    Ddpm,
    /// First-order deterministic transfer.
    Ddim,
    /// Four-step linear multistep on the noise estimate.
    Pndm,
    /// Fixed-step classical Runge-Kutta on the probability-flow ODE.
    Pf,
}

impl IntegratorMethod {
    pub const ALL: [IntegratorMethod; 4] = [Self::Ddpm, Self::Ddim, Self::Pndm, Self::Pf];
    pub const DETERMINISTIC: [IntegratorMethod; 3] = [Self::Ddim, Self::Pndm, Self::Pf];

    pub fn is_deterministic(self) -> bool {
        self != Self::Ddpm
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
            Self::Pndm => "pndm",
            Self::Pf => "pf",
        }
    }
}

impl std::fmt::Display for IntegratorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for IntegratorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            "pndm" => Ok(Self::Pndm),
            "pf" | "pf-rk4" => Ok(Self::Pf),
            other => Err(Error::Config(format!("unknown integrator method `{other}`"))),
        }
    }
}

/// States visited by one integration run, in integration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: IntegratorMethod,
    pub stride: usize,
    pub points: Vec<(usize, Vec<f64>)>,
}

impl Trajectory {
    pub fn start(&self) -> &[f64] {
        &self.points[0].1
    }

    pub fn end(&self) -> &[f64] {
        &self.points[self.points.len() - 1].1
    }

    pub fn into_end(mut self) -> Vec<f64> {
        self.points.pop().expect("trajectory is never empty").1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Writes trajectories as CSV with columns `sample_id,t,x0,x1,...`.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], mut w: W) -> Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.start().len());
    let mut header = String::from("sample_id,t");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}")?;
    for (id, traj) in trajectories.iter().enumerate() {
        for (t, x) in &traj.points {
            check_dim(dim, x.len())?;
            let mut line = format!("{id},{t}");
            for v in x {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x0.len(), noise.len())?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse update from `t` to `t - delta` with noise scale `sigma_t`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    x_t: &[f64],
    eps: &[f64],
    t: usize,
    delta: usize,
    sigma_t: f64,
    noise: Option<&[f64]>,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps.len())?;
    let s = t.checked_sub(delta).ok_or(Error::StepOutOfRange {
        step: t as f64 - delta as f64,
        lo: 0.0,
        hi: schedule.max_step() as f64,
    })?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_s = schedule.alpha_bar(s)?;
    let limit = 1.0 - ab_s;
    let sigma2 = sigma_t * sigma_t;
    if sigma2 > limit || !sigma_t.is_finite() {
        return Err(Error::InvalidVariance { sigma2, limit });
    }
    let noise = match (sigma_t != 0.0, noise) {
        (true, Some(n)) => {
            check_dim(x_t.len(), n.len())?;
            Some(n)
        }
        (true, None) => {
            return Err(Error::Input("a noise vector is required when sigma_t > 0".into()))
        }
        (false, _) => None,
    };
    let c_eps_in = (1.0 - ab_t).sqrt();
    let c_dir = (limit - sigma2).sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let x0_hat = (x_t[i] - c_eps_in * eps[i]) / ab_t.sqrt();
        let mut v = ab_s.sqrt() * x0_hat + c_dir * eps[i];
        if let Some(n) = noise {
            v += sigma_t * n[i];
        }
        out.push(v);
    }
    Ok(out)
}

/// Deterministic transfer `phi(x, eps, t, s)` from step `t` to step `s`.
/// Works in either direction, so `s > t` inverts.
pub fn transfer(
    x: &[f64],
    eps: &[f64],
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim(x.len(), eps.len())?;
    let b = schedule.alpha_bar(t)?;
    let a = schedule.alpha_bar(s)?;
    let ratio = (a / b).sqrt();
    let coef = (a - b) / (b.sqrt() * (((1.0 - a) * b).sqrt() + ((1.0 - b) * a).sqrt()));
    Ok(x.iter().zip(eps).map(|(x, e)| ratio * x - coef * e).collect())
}

/// Fourth-order Adams-Bashforth combination of the last four noise
/// estimates, newest first.
pub fn pndm_combine(history: &[Vec<f64>]) -> Result<Vec<f64>> {
    if history.len() < 4 {
        return Err(Error::Input(format!(
            "multistep needs 4 history entries, got {}",
            history.len()
        )));
    }
    let d = history[0].len();
    for h in &history[1..4] {
        check_dim(d, h.len())?;
    }
    Ok((0..d)
        .map(|i| {
            (55.0 * history[0][i] - 59.0 * history[1][i] + 37.0 * history[2][i]
                - 9.0 * history[3][i])
                / 24.0
        })
        .collect())
}

/// Multistep update from `t` to `s` using the combined noise estimate.
pub fn pndm_step(
    x_t: &[f64],
    history: &[Vec<f64>],
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eps = pndm_combine(history)?;
    transfer(x_t, &eps, t, s, schedule)
}

/// Right-hand side of the probability-flow ODE in step units.
fn pf_drift(field: &Conditioned, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let beta = field.schedule.beta_at(t)?;
    let score = field.score(x, t)?;
    let a = (1.0 - beta).sqrt() - 1.0;
    Ok(x.iter().zip(&score).map(|(x, s)| a * x - 0.5 * beta * s).collect())
}

/// One classical Runge-Kutta step of the probability-flow ODE from `t` to `s`.
pub fn pf_rk4_step(field: &Conditioned, x: &[f64], t: f64, s: f64) -> Result<Vec<f64>> {
    let h = s - t;
    let axpy = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + c * k).collect() };
    let k1 = pf_drift(field, x, t)?;
    let k2 = pf_drift(field, &axpy(&k1, 0.5 * h), t + 0.5 * h)?;
    let k3 = pf_drift(field, &axpy(&k2, 0.5 * h), t + 0.5 * h)?;
    let k4 = pf_drift(field, &axpy(&k3, h), s)?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    ensure_finite(&out, t)?;
    Ok(out)
}

fn ensure_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step: t,
            reason: "non-finite state".into(),
        })
    }
}

/// Posterior standard deviation for a jump from `t` to `s < t`.
pub fn posterior_sigma(t: usize, s: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let ab_t = schedule.alpha_bar(t)?;
    let ab_s = schedule.alpha_bar(s)?;
    Ok(((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s)).max(0.0).sqrt())
}

/// Integrator choice plus the stochastic-sampler noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub method: IntegratorMethod,
    /// Multiplier on the posterior standard deviation used by the stochastic
    /// sampler; 1 gives ancestral sampling, 0 reduces it to the first-order
    /// deterministic transfer.
    #[serde(default = "one")]
    pub eta: f64,
}

fn one() -> f64 {
    1.0
}

impl Sampler {
    pub fn new(method: IntegratorMethod) -> Self {
        Self { method, eta: 1.0 }
    }

    /// Integrates along `grid`. Decreasing grids denoise, increasing grids
    /// invert; only deterministic methods may invert. `rng` must be supplied
    /// iff the method is stochastic.
    pub fn run(
        &self,
        field: &Conditioned,
        x: &[f64],
        grid: &TimeGrid,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Trajectory> {
        check_dim(field.field.dim(), x.len())?;
        grid.check_within(field.schedule)?;
        let nodes = grid.nodes();
        let mut points = Vec::with_capacity(nodes.len());
        points.push((nodes[0], x.to_vec()));
        let mut cur = x.to_vec();
        match self.method {
            IntegratorMethod::Ddpm => {
                if !grid.is_decreasing() {
                    return Err(Error::Unsupported(
                        "stochastic sampling cannot run in the inversion direction".into(),
                    ));
                }
                let Some(rng) = rng else {
                    return Err(Error::Input("the stochastic sampler needs a random source".into()));
                };
                if !(0.0..=1.0).contains(&self.eta) {
                    return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
                }
                for w in nodes.windows(2) {
                    let (t, s) = (w[0], w[1]);
                    let eps = field.eps(&cur, t as f64)?;
                    let sigma = self.eta * posterior_sigma(t, s, field.schedule)?;
                    let noise: Vec<f64> =
                        (0..cur.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
                    cur = reverse_step(&cur, &eps, t, t - s, sigma, Some(&noise), field.schedule)?;
                    ensure_finite(&cur, s as f64)?;
                    points.push((s, cur.clone()));
                }
            }
            IntegratorMethod::Ddim => {
                for w in nodes.windows(2) {
                    let eps = field.eps(&cur, w[0] as f64)?;
                    cur = transfer(&cur, &eps, w[0], w[1], field.schedule)?;
                    ensure_finite(&cur, w[1] as f64)?;
                    points.push((w[1], cur.clone()));
                }
            }
            IntegratorMethod::Pndm => {
                let mut history: Vec<Vec<f64>> = Vec::with_capacity(4);
                for w in nodes.windows(2) {
                    let eps = field.eps(&cur, w[0] as f64)?;
                    history.insert(0, eps);
                    history.truncate(4);
                    cur = if history.len() < 4 {
                        transfer(&cur, &history[0], w[0], w[1], field.schedule)?
                    } else {
                        pndm_step(&cur, &history, w[0], w[1], field.schedule)?
                    };
                    ensure_finite(&cur, w[1] as f64)?;
                    points.push((w[1], cur.clone()));
                }
            }
            IntegratorMethod::Pf => {
                for w in nodes.windows(2) {
                    cur = pf_rk4_step(field, &cur, w[0] as f64, w[1] as f64)?;
                    points.push((w[1], cur.clone()));
                }
            }
        }
        Ok(Trajectory {
            method: self.method,
            stride: grid.stride(),
            points,
        })
    }
}

/// Runs the process from `t_from` to `t_to` with a fixed `stride`. Equal
/// endpoints give a one-point trajectory.
pub fn run_ddp(
    field: &Conditioned,
    x: &[f64],
    t_from: usize,
    t_to: usize,
    stride: usize,
    sampler: &Sampler,
    rng: Option<&mut dyn RngCore>,
) -> Result<Trajectory> {
    check_dim(field.field.dim(), x.len())?;
    if t_from == t_to {
        let max = field.schedule.max_step();
        if t_from > max {
            return Err(Error::StepOutOfRange {
                step: t_from as f64,
                lo: 0.0,
                hi: max as f64,
            });
        }
        return Ok(Trajectory {
            method: sampler.method,
            stride,
            points: vec![(t_from, x.to_vec())],
        });
    }
    let grid = if t_from > t_to {
        TimeGrid::with_stride(t_from, t_to, stride)?
    } else {
        TimeGrid::with_stride(t_to, t_from, stride)?.reversed()
    };
    sampler.run(field, x, &grid, rng)
}

/// Mean absolute coordinate difference between `x0` and its round trip
/// through steps `0 -> t_max -> 0`.
pub fn reconstruction_error(
    field: &Conditioned,
    x0: &[f64],
    t_max: usize,
    stride: usize,
    method: IntegratorMethod,
) -> Result<f64> {
    let back = round_trip(field, x0, t_max, stride, method)?;
    Ok(mean_abs_diff(x0, &back))
}

/// `Phi(Phi(x0, 0, t_max), t_max, 0)` with a deterministic method.
pub fn round_trip(
    field: &Conditioned,
    x0: &[f64],
    t_max: usize,
    stride: usize,
    method: IntegratorMethod,
) -> Result<Vec<f64>> {
    if !method.is_deterministic() {
        return Err(Error::Unsupported(
            "round trips need a deterministic integrator".into(),
        ));
    }
    let sampler = Sampler::new(method);
    let noised = run_ddp(field, x0, 0, t_max, stride, &sampler, None)?.into_end();
    Ok(run_ddp(field, &noised, t_max, 0, stride, &sampler, None)?.into_end())
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
