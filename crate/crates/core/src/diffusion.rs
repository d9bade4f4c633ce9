//! Denoiser-agnostic diffusion math: linear beta schedules, the closed-form
//! forward corruption, the epsilon-prediction training loss, and DDPM/DDIM
//! reverse steps.
//!
//! Step indexing convention: `t` runs over `1..=T` and `alpha_bar(0) == 1`.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable schedule description, stored inside checkpoints so
/// sampling always uses the schedule the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.beta_start, self.beta_end, self.steps)
    }
}

/// Beta sequence with derived alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative signal retention `alpha_bar_t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidConfig(format!(
                "step index {} outside 1..={}",
                t,
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule with `betas[1] = beta_start` and `betas[T] = beta_end`.
pub fn make_linear_schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        // Lerp form so both endpoints are reproduced bit-exactly.
        (0..steps)
            .map(|i| {
                let f = i as f64 / (steps - 1) as f64;
                beta_start * (1.0 - f) + beta_end * f
            })
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

fn check_same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Closed-form forward corruption:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(x0: &ArrayD<f64>, t: usize, eps: &ArrayD<f64>, sched: &NoiseSchedule) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x0, eps, "q_sample x0 vs eps")?;
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0 * sa + eps * sn)
}

/// Algebraic inverse of `q_sample` given a noise estimate:
/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0(x_t: &ArrayD<f64>, eps_hat: &ArrayD<f64>, t: usize, sched: &NoiseSchedule) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_hat, "predict_x0 x_t vs eps_hat")?;
    let ab = sched.alpha_bar(t);
    Ok((x_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// One DDIM update from step `t` down to `t_prev` (`0 <= t_prev < t`).
/// Deterministic when `eta == 0`; `noise` is ignored in that case.
pub fn ddim_step(
    x_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidConfig(format!("require t_prev < t, got {t_prev} >= {t}")));
    }
    if eta < 0.0 {
        return Err(Error::InvalidConfig(format!("eta must be >= 0, got {eta}")));
    }
    check_same_shape(x_t, eps_hat, "ddim_step x_t vs eps_hat")?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0_hat = predict_x0(x_t, eps_hat, t, sched)?;
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_hat * ab_prev.sqrt() + eps_hat * dir_coeff;
    if eta > 0.0 && sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidConfig("ddim_step with eta > 0 requires a noise tensor".into())
        })?;
        check_same_shape(x_t, noise, "ddim_step x_t vs noise")?;
        out = out + &(noise * sigma);
    }
    Ok(out)
}

/// One ancestral DDPM update with fixed variance `beta_t`:
/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`,
/// plus `sqrt(beta_t) * noise` for `t > 1`. At `t == 1` the mean is returned.
pub fn ddpm_step(
    x_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_hat, "ddpm_step x_t vs eps_hat")?;
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let coeff = beta / (1.0 - ab).sqrt();
    let mu = (x_t - &(eps_hat * coeff)) / sched.alpha(t).sqrt();
    if t == 1 {
        return Ok(mu);
    }
    let noise = noise
        .ok_or_else(|| Error::InvalidConfig("ddpm_step requires noise for t > 1".into()))?;
    check_same_shape(x_t, noise, "ddpm_step x_t vs noise")?;
    Ok(mu + &(noise * beta.sqrt()))
}

/// Mean squared error between the drawn noise and its prediction.
pub fn training_loss(eps: &ArrayD<f64>, eps_hat: &ArrayD<f64>) -> Result<f64> {
    check_same_shape(eps, eps_hat, "training_loss eps vs eps_hat")?;
    let n = eps.len() as f64;
    let sum: f64 = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Evenly spaced decreasing DDIM sub-sequence `T = t_1 > t_2 > ... > t_k`,
/// to be consumed pairwise with a final hop to 0.
pub fn ddim_timesteps(total_steps: usize, sample_steps: usize) -> Result<Vec<usize>> {
    if sample_steps == 0 || sample_steps > total_steps {
        return Err(Error::InvalidConfig(format!(
            "sample_steps must lie in 1..={total_steps}, got {sample_steps}"
        )));
    }
    // k evenly spaced values ending at T; consecutive duplicates collapse.
    let mut ts = Vec::with_capacity(sample_steps);
    for i in 0..sample_steps {
        let frac = (i + 1) as f64 / sample_steps as f64;
        let t = (frac * total_steps as f64).round() as usize;
        ts.push(t.max(1));
    }
    ts.dedup();
    ts.reverse();
    Ok(ts)
}
