//! Independent reference implementations shared by several test targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wm_core::eval::{SSIM_SIGMA, SSIM_WINDOW};
use wm_core::modalities::FeatureExtractor;
use wm_core::Result;
use wm_tensor::Tensor;

/// Direct per-window SSIM with an explicit 2D Gaussian weight.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let c = (k as f64 - 1.0) / 2.0;
    let mut wts = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            wts[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y0 + i) * w + x0 + j;
                    ma += wts[i * k + j] * a[p];
                    mb += wts[i * k + j] * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y0 + i) * w + x0 + j;
                    va += wts[i * k + j] * (a[p] - ma).powi(2);
                    vb += wts[i * k + j] * (b[p] - mb).powi(2);
                    cov += wts[i * k + j] * (a[p] - ma) * (b[p] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Fusion computed patch by patch with explicit loops.
pub fn fuse_oracle(pyr: &[Tensor<f64>], scores: &Tensor<f64>) -> Tensor<f64> {
    let d = pyr[0].dims().to_vec();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let mut out = Tensor::zeros(&d);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    let mut acc = 0.0;
                    for (m, p) in pyr.iter().enumerate() {
                        acc += scores.get(&[b, m, y, x]) * p.get(&[b, k, y, x]);
                    }
                    out.set(&[b, k, y, x], acc);
                }
            }
        }
    }
    out
}

/// Features are the frame itself, optionally with a per-pixel positive
/// scale or a channel permutation.
pub struct Raw {
    pub scale: Option<Vec<f64>>,
    pub perm: Option<[usize; 3]>,
}

impl FeatureExtractor<f64> for Raw {
    fn channels(&self) -> usize {
        3
    }

    fn extract(&self, _: usize, frame: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, w) = (frame.dims()[1], frame.dims()[2]);
        let plane = h * w;
        Ok(Tensor::from_fn(frame.dims(), |i| {
            let (c, p) = (i / plane, i % plane);
            let src = self.perm.map_or(c, |q| q[c]);
            frame.data()[src * plane + p] * self.scale.as_ref().map_or(1.0, |s| s[p])
        }))
    }
}

pub fn raw() -> Raw {
    Raw {
        scale: None,
        perm: None,
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> Vec<Tensor<f64>> {
    (0..t)
        .map(|_| Tensor::from_fn(&[3, h, w], |_| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Straight per-pixel evaluation of the mask definition.
pub fn mask_oracle(frames: &[Tensor<f64>]) -> Vec<f64> {
    let (h, w) = (frames[0].dims()[1], frames[0].dims()[2]);
    let plane = h * w;
    let feat = |t: usize, p: usize| -> [f64; 3] { [0, 1, 2].map(|c| frames[t].data()[c * plane + p]) };
    (0..plane)
        .map(|p| {
            let a = feat(0, p);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut s = 0.0;
            for t in 1..frames.len() {
                let b = feat(t, p);
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                };
                s += 1.0 - cos.clamp(0.0, 1.0);
            }
            s / (frames.len() - 1) as f64
        })
        .collect()
}
