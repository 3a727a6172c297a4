//! Video metrics (PSNR, SSIM, block-matching flow error) and experiment
//! orchestration over trained checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wm_tensor::Tensor;

use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::pipeline::{load_checkpoint, sample_with_texts, Prepared, TextMode};
use wm_tensor::ParamStore;

pub const PSNR_CAP: f64 = 99.0;

fn frames_of(v: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match v.dims() {
        [t, c, h, w] => Ok((*t, *c, *h, *w)),
        d => Err(Error::Input(format!("video must be [T, C, H, W], got {d:?}"))),
    }
}

fn same_dims(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    let d = frames_of(a)?;
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "video dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(generated: &Tensor<f32>, reference: &Tensor<f32>) -> Result<Psnr> {
    let (t, c, h, w) = same_dims(generated, reference)?;
    let n = c * h * w;
    let per_frame: Vec<f64> = (0..t)
        .map(|i| {
            let a = &generated.data()[i * n..(i + 1) * n];
            let b = &reference.data()[i * n..(i + 1) * n];
            let mse = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                / n as f64;
            psnr_from_mse(mse)
        })
        .collect();
    let mean = per_frame.iter().sum::<f64>() / t.max(1) as f64;
    Ok(Psnr { per_frame, mean })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Luma plane of frame `i` of a `[T, 3, H, W]` video.
pub fn luma(v: &Tensor<f32>, i: usize) -> Result<Vec<f64>> {
    let (_, c, h, w) = frames_of(v)?;
    let plane = h * w;
    let base = i * c * plane;
    let d = v.data();
    Ok(match c {
        3 => (0..plane)
            .map(|p| {
                0.299 * d[base + p] as f64 + 0.587 * d[base + plane + p] as f64 + 0.114 * d[base + 2 * plane + p] as f64
            })
            .collect(),
        1 => d[base..base + plane].iter().map(|&x| x as f64).collect(),
        _ => return Err(Error::Input(format!("ssim needs 1 or 3 channels, got {c}"))),
    })
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps.iter().enumerate().map(|(j, t)| t * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of two planes over all fully-inside window positions.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "frame {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..h * w).map(f).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &taps);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean SSIM over frames, on luma.
pub fn ssim(generated: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    let (t, _, h, w) = same_dims(generated, reference)?;
    let mut s = 0.0;
    for i in 0..t {
        s += ssim_plane(&luma(generated, i)?, &luma(reference, i)?, h, w)?;
    }
    Ok(s / t.max(1) as f64)
}

pub const FLOW_BLOCK: usize = 4;
pub const FLOW_RADIUS: i32 = 4;

/// Candidate displacements ordered by squared length, then (dy, dx).
fn displacement_order(radius: i32) -> Vec<(i32, i32)> {
    let mut d: Vec<(i32, i32)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .collect();
    d.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    d
}

/// Exhaustive block matching from `a` to `b` (both `[C, H, W]`): for each
/// `FLOW_BLOCK` block of `a`, the in-bounds displacement with minimal SSD.
/// Returns `(dx, dy)` per block in row-major block order.
pub fn block_flow(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> Vec<(i32, i32)> {
    let bs = FLOW_BLOCK;
    let order = displacement_order(FLOW_RADIUS);
    let mut out = Vec::with_capacity((h / bs) * (w / bs));
    for by in 0..h / bs {
        for bx in 0..w / bs {
            let (y0, x0) = ((by * bs) as i32, (bx * bs) as i32);
            let mut best = (0, 0);
            let mut best_cost = f64::INFINITY;
            for &(dx, dy) in &order {
                let (ty, tx) = (y0 + dy, x0 + dx);
                if ty < 0 || tx < 0 || ty + bs as i32 > h as i32 || tx + bs as i32 > w as i32 {
                    continue;
                }
                let mut cost = 0.0;
                for ch in 0..c {
                    let base = ch * h * w;
                    for yy in 0..bs {
                        for xx in 0..bs {
                            let pa = a[base + (y0 as usize + yy) * w + x0 as usize + xx] as f64;
                            let pb = b[base + (ty as usize + yy) * w + tx as usize + xx] as f64;
                            cost += (pa - pb) * (pa - pb);
                        }
                    }
                }
                if cost < best_cost {
                    best_cost = cost;
                    best = (dx, dy);
                }
            }
            out.push(best);
        }
    }
    out
}

/// Block flows for each adjacent frame pair of a `[T, C, H, W]` video.
pub fn video_flow(v: &Tensor<f32>) -> Result<Vec<Vec<(i32, i32)>>> {
    let (t, c, h, w) = frames_of(v)?;
    if t < 2 {
        return Err(Error::Input(format!("flow needs at least 2 frames, got {t}")));
    }
    let n = c * h * w;
    Ok((0..t - 1)
        .map(|i| {
            block_flow(
                &v.data()[i * n..(i + 1) * n],
                &v.data()[(i + 1) * n..(i + 2) * n],
                c,
                h,
                w,
            )
        })
        .collect())
}

/// Mean endpoint distance between the block flows of two videos.
pub fn flow_error(generated: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    same_dims(generated, reference)?;
    let fa = video_flow(generated)?;
    let fb = video_flow(reference)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in fa.iter().zip(&fb) {
        for (&(ax, ay), &(bx, by)) in pa.iter().zip(pb) {
            total += (((ax - bx).pow(2) + (ay - by).pow(2)) as f64).sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub task_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub flow_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub split: String,
    pub fingerprint: String,
    pub mode: TextMode,
    pub episodes: Vec<EpisodeMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub flow_error: f64,
    /// Network evaluations per denoising step, averaged over episodes.
    pub forwards_per_step: f64,
    /// Reserved for feature-network metrics; always null here.
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

impl MetricsReport {
    pub fn from_episodes(
        variant: &str,
        split: &str,
        fingerprint: &str,
        mode: TextMode,
        episodes: Vec<EpisodeMetrics>,
        forwards_per_step: f64,
    ) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        Self {
            variant: variant.to_string(),
            split: split.to_string(),
            fingerprint: fingerprint.to_string(),
            mode,
            psnr: mean(|e| e.psnr),
            ssim: mean(|e| e.ssim),
            flow_error: mean(|e| e.flow_error),
            episodes,
            forwards_per_step,
            fid: None,
            lpips: None,
        }
    }
}

/// `[F+1, 3, H, W]` reference clip of a prepared episode, frame 0 included.
pub fn reference_video(p: &Prepared, patch: usize) -> Result<Tensor<f32>> {
    let d = p.first.dims();
    let f = p.target.dims()[0] / d[0];
    let mut frames = vec![crate::pipeline::from_latent(&p.first, patch)?];
    for i in 0..f {
        let z = p.target.narrow(0, i * d[0], d[0])?;
        frames.push(crate::pipeline::from_latent(&z, patch)?);
    }
    Ok(Tensor::stack(&frames)?)
}

/// Prepends the observed frame 0 to a generated `[F, 3, H, W]` clip.
pub fn with_first_frame(first: &Tensor<f32>, generated: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut frames = vec![first.clone()];
    for i in 0..generated.dims()[0] {
        frames.push(generated.index_first(i));
    }
    Ok(Tensor::stack(&frames)?)
}

/// Scores one generated clip: PSNR and SSIM on the predicted frames, flow
/// error on the clip with frame 0 prepended.
pub fn score_clip(generated: &Tensor<f32>, reference_full: &Tensor<f32>) -> Result<(f64, f64, f64)> {
    let t = reference_full.dims()[0];
    let target = reference_full.narrow(0, 1, t - 1)?;
    let p = psnr(generated, &target)?.mean;
    let s = ssim(generated, &target)?;
    let gen_full = with_first_frame(&reference_full.index_first(0), generated)?;
    let fe = flow_error(&gen_full, reference_full)?;
    Ok((p, s, fe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub max_episodes: Option<usize>,
    pub seed: u64,
}

/// Samples every episode and scores it against its reference clip.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    variant: &str,
    split: &str,
    model: &WorldModel,
    store: &ParamStore<f32>,
    data: &[Prepared],
    mode: TextMode,
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let take = cfg.max_episodes.unwrap_or(data.len()).min(data.len());
    let patch = model.config.patch;
    let mods = model.modalities().to_vec();
    let mut episodes = Vec::with_capacity(take);
    let mut forwards = 0usize;
    for (i, p) in data.iter().take(take).enumerate() {
        let conds: Vec<Tensor<f32>> = p.conds_for(&mods).into_iter().cloned().collect();
        let before = model.forward_count();
        let gen = sample_with_texts(
            model,
            store,
            &p.first,
            &conds,
            &p.rows(mode),
            sched,
            &cfg.sampler,
            cfg.seed + i as u64,
        )?;
        forwards += model.forward_count() - before;
        let (ps, ss, fe) = score_clip(&gen, &reference_video(p, patch)?)?;
        episodes.push(EpisodeMetrics {
            task_id: p.task_id.clone(),
            psnr: ps,
            ssim: ss,
            flow_error: fe,
        });
    }
    let steps = sched.respaced(cfg.sampler.steps)?.len() * take.max(1);
    let fp = fingerprint(&serde_json::to_string(&(&model.config, mode, cfg))?);
    Ok(MetricsReport::from_episodes(
        variant,
        split,
        &fp,
        mode,
        episodes,
        forwards as f64 / steps as f64,
    ))
}

/// Stable FNV-1a fingerprint of a config document.
pub fn fingerprint(doc: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in doc.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Tab-separated comparison: one row per variant, metrics × split columns.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut splits: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<String, &MetricsReport>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        if !splits.contains(&r.split) {
            splits.push(r.split.clone());
        }
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
        rows.entry(r.variant.clone()).or_default().insert(r.split.clone(), r);
    }
    let mut out = String::from("variant");
    for s in &splits {
        out.push_str(&format!("\tpsnr_{s}\tssim_{s}\tflow_{s}"));
    }
    out.push_str("\tforwards_per_step\n");
    for v in &order {
        out.push_str(v);
        let row = &rows[v];
        let mut fwd = 0.0;
        for s in &splits {
            match row.get(s) {
                Some(r) => {
                    out.push_str(&format!("\t{:.4}\t{:.4}\t{:.4}", r.psnr, r.ssim, r.flow_error));
                    fwd = r.forwards_per_step;
                }
                None => out.push_str("\t-\t-\t-"),
            }
        }
        out.push_str(&format!("\t{fwd:.2}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub checkpoint: PathBuf,
    /// Overrides the text mode stored in the checkpoint.
    #[serde(default)]
    pub mode: Option<TextMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    #[serde(default = "default_splits")]
    pub splits: Vec<String>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_splits() -> Vec<String> {
    vec!["seen".into(), "unseen".into()]
}

/// Evaluates every variant on every configured split. `data` maps split
/// names to prepared episodes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &BTreeMap<String, Vec<Prepared>>,
    sched: &NoiseSchedule,
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for v in &cfg.variants {
        let loaded = load_checkpoint(&v.checkpoint).map_err(|e| match e {
            Error::MissingCheckpoint { path, .. } => Error::MissingCheckpoint {
                variant: v.name.clone(),
                path,
            },
            other => other,
        })?;
        let mode = v.mode.unwrap_or(loaded.meta.mode);
        for split in &cfg.splits {
            let eps = data
                .get(split)
                .ok_or_else(|| Error::Input(format!("no episodes for split `{split}`")))?;
            reports.push(evaluate_model(
                &v.name,
                split,
                &loaded.model,
                &loaded.store,
                eps,
                mode,
                sched,
                &cfg.eval,
            )?);
        }
    }
    Ok(reports)
}

/// Writes `<variant>_<split>.json` per report plus `comparison.tsv`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in reports {
        fs::write(
            dir.join(format!("{}_{}.json", r.variant, r.split)),
            serde_json::to_vec_pretty(r)?,
        )?;
    }
    fs::write(dir.join("comparison.tsv"), comparison_table(reports))?;
    Ok(())
}
