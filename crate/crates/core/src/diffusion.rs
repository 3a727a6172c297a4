//! DDPM noise schedule, forward noising and the respaced ancestral sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wm_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Linear-beta schedule with `alpha_bar[0] = 1` so timesteps run `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "bad schedule: {steps} steps, betas {beta_start}..{beta_end}"
            )));
        }
        let mut betas = vec![0.0];
        for i in 0..steps {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            betas.push(beta_start + f * (beta_end - beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Input(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `count` descending timesteps from `steps` down to at least 1.
    pub fn respaced(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps {
            return Err(Error::Config(format!("cannot respace {} steps to {count}", self.steps)));
        }
        let mut ts: Vec<usize> = (0..count).map(|i| self.steps - (i * self.steps) / count).collect();
        ts.dedup();
        Ok(ts)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("default schedule")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `z_t = sqrt(ab_t)·z0 + sqrt(1 - ab_t)·noise`.
pub fn q_sample<T: Element>(s: &NoiseSchedule, z0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    Ok(z0.zip_map(noise, |z, n| a * z + b * n)?)
}

pub fn randn_like<T: Element, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

/// Anything that predicts the injected noise for `z_t` at timestep `t`.
pub trait Denoiser<T: Element> {
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Element, F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>> Denoiser<T> for F {
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z_t, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub deterministic: bool,
    /// Clamp the running x0 estimate to [-clip, clip]; `None` disables.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            deterministic: true,
            clip: Some(1.0),
        }
    }
}

pub fn predict_x0<T: Element>(s: &NoiseSchedule, z_t: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let ab = s.alpha_bar[t];
    let (c, d) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt());
    Ok(z_t.zip_map(eps, |z, e| T::from_f64_lossy(c * z.as_f64() - d * e.as_f64()))?)
}

/// One ancestral step from `t` to `t_prev < t` given a predicted noise.
/// `noise = None` returns the posterior mean.
pub fn step_from_eps<T: Element>(
    s: &NoiseSchedule,
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    clip: Option<f64>,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Input(format!("t_prev {t_prev} must be below t {t}")));
    }
    let mut x0 = predict_x0(s, z_t, eps, t)?;
    if let Some(c) = clip {
        x0 = x0.map(|v| T::from_f64_lossy(v.as_f64().clamp(-c, c)));
    }
    let (ab_t, ab_p) = (s.alpha_bar[t], s.alpha_bar[t_prev]);
    let beta = 1.0 - ab_t / ab_p;
    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let ct = (ab_t / ab_p).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let mean = x0.zip_map(z_t, |a, b| T::from_f64_lossy(c0 * a.as_f64() + ct * b.as_f64()))?;
    match noise {
        Some(n) if t_prev > 0 => {
            let sd = (beta * (1.0 - ab_p) / (1.0 - ab_t)).sqrt();
            Ok(mean.zip_map(n, |m, e| T::from_f64_lossy(m.as_f64() + sd * e.as_f64()))?)
        }
        _ => Ok(mean),
    }
}

pub fn denoise_step<T: Element, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    s: &NoiseSchedule,
    model: &D,
    z_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps = model.predict_eps(z_t, t)?;
    if !eps.is_finite() {
        return Err(Error::Input(format!("non-finite noise prediction at t={t}")));
    }
    let noise = (!cfg.deterministic).then(|| randn_like(z_t.dims(), rng));
    step_from_eps(s, z_t, &eps, t, t_prev, cfg.clip, noise.as_ref())
}

/// Runs the full respaced chain from pure noise.
pub fn sample_loop<T: Element, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    s: &NoiseSchedule,
    model: &D,
    dims: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let ts = s.respaced(cfg.steps)?;
    let mut z = randn_like(dims, rng);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        z = denoise_step(s, model, &z, t, prev, cfg, rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar.len(), 101);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!((s.betas[1] - 1e-4).abs() < 1e-15 && (s.betas[100] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        let ts = s.respaced(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (100, 2));
        assert!(s.check_t(0).is_err() && s.check_t(101).is_err());
    }

    #[test]
    fn final_deterministic_step_is_x0_estimate() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z1 = randn_like::<f64, _>(&[5], &mut rng);
        let eps = randn_like::<f64, _>(&[5], &mut rng);
        let out = step_from_eps(&s, &z1, &eps, 1, 0, None, None).unwrap();
        let ab = s.alpha_bar[1];
        for i in 0..5 {
            let want = (z1.data()[i] - (1.0 - ab).sqrt() * eps.data()[i]) / ab.sqrt();
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }
}
