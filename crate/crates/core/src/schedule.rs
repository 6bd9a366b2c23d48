//! Linear DDPM variance schedule and the closed-form forward/reverse
//! quantities shared by both diffusion stages. Timesteps are 1-based.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::nn::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("diffusion needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(z0: &Mat, t: usize, eps: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    shape_match(z0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Forward marginal with an individual timestep per row.
pub fn q_sample_rows(z0: &Mat, ts: &[usize], eps: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    shape_match(z0, eps)?;
    if ts.len() != z0.nrows() {
        return Err(Error::Shape(format!("{} timesteps for {} rows", ts.len(), z0.nrows())));
    }
    let mut out = z0.clone();
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        sched.check_step(ts[r])?;
        let ab = sched.alpha_bar(ts[r]);
        row *= ab.sqrt();
        row.scaled_add((1.0 - ab).sqrt(), &eps.row(r));
    }
    Ok(out)
}

/// Reverse-step mean `(z_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t)`.
pub fn posterior_mean(z_t: &Mat, t: usize, eps_hat: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    shape_match(z_t, eps_hat)?;
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok((z_t - &(eps_hat * coef)) / a.sqrt())
}

fn shape_match(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())))
    } else {
        Ok(())
    }
}
