//! Spherical and noise-injection interpolation on top of the invertible process.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrator::{run_ddp, IntegratorMethod, Sampler};
use crate::scorefield::Conditioned;

/// Angle below which slerp degrades to linear interpolation.
pub const SLERP_LINEAR_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    /// Slerp between the inverted noises of both inputs; parameter is the rate in [0, 1].
    Symmetric,
    /// Noise `x1` to depth `t` with the inverted noise of `x2`; parameter is `t`.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRequest {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub mode: InterpolationMode,
    pub parameter: f64,
    pub method: IntegratorMethod,
    pub stride: usize,
}

impl InterpolationRequest {
    pub fn run(&self, field: &Conditioned) -> Result<Vec<f64>> {
        match self.mode {
            InterpolationMode::Symmetric => symmetric_interpolate(
                field,
                &self.x1,
                &self.x2,
                self.parameter,
                self.method,
                self.stride,
            ),
            InterpolationMode::Asymmetric => {
                let t = self.parameter;
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "asymmetric interpolation needs an integer step, got {t}"
                    )));
                }
                asymmetric_interpolate(field, &self.x1, &self.x2, t as usize, self.method, self.stride)
            }
        }
    }
}

/// Spherical linear interpolation from `a` (sigma = 0) to `b` (sigma = 1).
pub fn slerp(a: &[f64], b: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Input(format!("interpolation rate {sigma} outside [0, 1]")));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("slerp of a zero vector has no angle".into()));
    }
    if sigma == 0.0 {
        return Ok(a.to_vec());
    }
    if sigma == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let (wa, wb) = if theta < SLERP_LINEAR_BELOW {
        (1.0 - sigma, sigma)
    } else {
        let s = theta.sin();
        (((1.0 - sigma) * theta).sin() / s, (sigma * theta).sin() / s)
    };
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

fn deterministic(method: IntegratorMethod) -> Result<Sampler> {
    if !method.is_deterministic() {
        return Err(Error::Unsupported(
            "interpolation needs a deterministic integrator".into(),
        ));
    }
    Ok(Sampler::new(method))
}

/// Inverts both inputs to the final step, slerps the noises and denoises.
pub fn symmetric_interpolate(
    field: &Conditioned,
    x1: &[f64],
    x2: &[f64],
    sigma: f64,
    method: IntegratorMethod,
    stride: usize,
) -> Result<Vec<f64>> {
    check_dim(x1.len(), x2.len())?;
    let sampler = deterministic(method)?;
    let t_max = field.schedule.max_step();
    let e1 = run_ddp(field, x1, 0, t_max, stride, &sampler, None)?.into_end();
    let e2 = run_ddp(field, x2, 0, t_max, stride, &sampler, None)?.into_end();
    let mixed = slerp(&e1, &e2, sigma)?;
    Ok(run_ddp(field, &mixed, t_max, 0, stride, &sampler, None)?.into_end())
}

/// Noises `x1` to step `t` using the inverted noise of `x2`, then denoises.
/// At `t = 0` this is `x1` itself and nothing is integrated.
pub fn asymmetric_interpolate(
    field: &Conditioned,
    x1: &[f64],
    x2: &[f64],
    t: usize,
    method: IntegratorMethod,
    stride: usize,
) -> Result<Vec<f64>> {
    check_dim(x1.len(), x2.len())?;
    check_dim(field.field.dim(), x1.len())?;
    let sampler = deterministic(method)?;
    let t_max = field.schedule.max_step();
    if t > t_max {
        return Err(Error::StepOutOfRange {
            step: t as f64,
            lo: 0.0,
            hi: t_max as f64,
        });
    }
    if stride == 0 || t % stride != 0 || t_max % stride != 0 {
        return Err(Error::Config(format!(
            "step {t} is not on the stride-{stride} grid over [0, {t_max}]"
        )));
    }
    if t == 0 {
        return Ok(x1.to_vec());
    }
    let e2 = run_ddp(field, x2, 0, t_max, stride, &sampler, None)?.into_end();
    let ab = field.schedule.alpha_bar(t)?;
    let mixed: Vec<f64> = x1
        .iter()
        .zip(&e2)
        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
        .collect();
    Ok(run_ddp(field, &mixed, t, 0, stride, &sampler, None)?.into_end())
}

/// Outputs of one request template over a list of parameters
/// (rates for symmetric mode, steps for asymmetric mode).
pub fn sweep(
    field: &Conditioned,
    template: &InterpolationRequest,
    parameters: &[f64],
) -> Result<Vec<(f64, Vec<f64>)>> {
    parameters
        .iter()
        .map(|&p| {
            let req = InterpolationRequest {
                parameter: p,
                ..template.clone()
            };
            Ok((p, req.run(field)?))
        })
        .collect()
}

/// CSV with columns `parameter,x0,x1,...`.
pub fn write_sweep_csv<W: Write>(rows: &[(f64, Vec<f64>)], mut w: W) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut header = String::from("parameter");
    for i in 0..dim {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}")?;
    for (p, x) in rows {
        check_dim(dim, x.len())?;
        let mut line = format!("{p:.16e}");
        for v in x {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
