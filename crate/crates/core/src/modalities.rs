//! First-frame visual conditions: normalized depth, semantic features, RGB
//! and the dynamic mask computed from feature similarity over time.

use std::path::PathBuf;

use wm_tensor::{io, Element, Tensor};

use crate::error::{Error, Result};
use crate::spriteworld::{frame_name, NUM_CLASSES, PALETTE};

/// Maps a `[3, H, W]` frame to `[C, H, W]` features.
pub trait FeatureExtractor<T: Element> {
    fn channels(&self) -> usize;
    /// `index` is the frame's position in its episode.
    fn extract(&self, index: usize, frame: &Tensor<T>) -> Result<Tensor<T>>;
}

fn check_frame<T: Element>(frame: &Tensor<T>) -> Result<(usize, usize)> {
    match frame.dims() {
        [3, h, w] => Ok((*h, *w)),
        d => Err(Error::Input(format!("frame must be [3, H, W], got {d:?}"))),
    }
}

/// Nearest-palette one-hot classes, smoothed with a 3×3 box filter
/// (averaged over in-bounds neighbours).
#[derive(Clone, Debug)]
pub struct SyntheticExtractor {
    palette: Vec<[f64; 3]>,
}

impl Default for SyntheticExtractor {
    fn default() -> Self {
        Self::new(PALETTE.iter().map(|c| c.map(f64::from)).collect())
    }
}

impl SyntheticExtractor {
    pub fn new(palette: Vec<[f64; 3]>) -> Self {
        Self { palette }
    }

    pub fn classify<T: Element>(&self, frame: &Tensor<T>) -> Result<Vec<usize>> {
        let (h, w) = check_frame(frame)?;
        let plane = h * w;
        let d = frame.data();
        Ok((0..plane)
            .map(|i| {
                let px = [d[i].as_f64(), d[plane + i].as_f64(), d[2 * plane + i].as_f64()];
                let dist = |c: &[f64; 3]| (0..3).map(|k| (px[k] - c[k]).powi(2)).sum::<f64>();
                (0..self.palette.len())
                    .min_by(|&a, &b| dist(&self.palette[a]).total_cmp(&dist(&self.palette[b])))
                    .unwrap()
            })
            .collect())
    }
}

impl<T: Element> FeatureExtractor<T> for SyntheticExtractor {
    fn channels(&self) -> usize {
        self.palette.len()
    }

    fn extract(&self, _index: usize, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = check_frame(frame)?;
        let classes = self.classify(frame)?;
        let c = self.palette.len();
        let mut out = vec![T::zero(); c * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut count = 0.0;
                let mut acc = vec![0.0f64; c];
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc[classes[yy * w + xx]] += 1.0;
                        count += 1.0;
                    }
                }
                for k in 0..c {
                    out[(k * h + y) * w + x] = T::from_f64_lossy(acc[k] / count);
                }
            }
        }
        Ok(Tensor::new(&[c, h, w], out)?)
    }
}

/// Loads precomputed features named like the frames (`frame_XXXX.mdtn`).
#[derive(Clone, Debug)]
pub struct FileExtractor {
    pub dir: PathBuf,
    pub channels: usize,
}

impl FileExtractor {
    /// Reads channel count from the first feature file.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let first: Tensor<f64> = io::read(dir.join(frame_name(0)))?;
        if first.ndim() != 3 {
            return Err(Error::Input(format!(
                "features must be [C, H, W], got {:?}",
                first.dims()
            )));
        }
        Ok(Self {
            channels: first.dims()[0],
            dir,
        })
    }
}

impl<T: Element> FeatureExtractor<T> for FileExtractor {
    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, index: usize, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = check_frame(frame)?;
        let f: Tensor<T> = io::read(self.dir.join(frame_name(index)))?;
        f.expect_dims("file features", &[self.channels, h, w])?;
        Ok(f)
    }
}

/// Min-max normalization to [0, 1]; a constant map becomes 0.5.
pub fn normalize_depth<T: Element>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.ndim() != 3 || raw.dims()[0] != 1 {
        return Err(Error::Input(format!("depth must be [1, H, W], got {:?}", raw.dims())));
    }
    if !raw.is_finite() {
        return Err(Error::Input("depth contains NaN or infinite values".into()));
    }
    let lo = raw.data().iter().fold(T::infinity(), |a, &b| a.min(b));
    let hi = raw.data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if hi > lo {
        let range = hi - lo;
        Ok(raw.map(|x| (x - lo) / range))
    } else {
        Ok(Tensor::full(raw.dims(), T::from_f64_lossy(0.5)))
    }
}

/// Mean over t of `1 − max(0, cos(F₀, F_t))` per pixel; zero-norm features
/// count as unchanged.
pub fn dynamic_mask<T: Element>(frames: &[Tensor<T>], extractor: &dyn FeatureExtractor<T>) -> Result<Tensor<T>> {
    if frames.len() < 2 {
        return Err(Error::Input(format!(
            "dynamic mask needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let dims = frames[0].dims().to_vec();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims.as_slice()) {
        return Err(Error::Input(format!("frame dims differ: {:?} vs {dims:?}", f.dims())));
    }
    let f0 = extractor.extract(0, &frames[0])?;
    let (c, h, w) = match f0.dims() {
        [c, h, w] => (*c, *h, *w),
        d => return Err(Error::Input(format!("features must be [C, H, W], got {d:?}"))),
    };
    let plane = h * w;
    let norm0: Vec<f64> = (0..plane)
        .map(|p| {
            (0..c)
                .map(|k| f0.data()[k * plane + p].as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut acc = vec![0.0f64; plane];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let ft = extractor.extract(t, frame)?;
        ft.expect_dims("dynamic_mask features", f0.dims())?;
        for p in 0..plane {
            let nt = (0..c)
                .map(|k| ft.data()[k * plane + p].as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm0[p] == 0.0 || nt == 0.0 {
                continue;
            }
            // 1 − cos = ½‖â − b̂‖², exact zero for identical features
            let half_sq: f64 = (0..c)
                .map(|k| {
                    (f0.data()[k * plane + p].as_f64() / norm0[p] - ft.data()[k * plane + p].as_f64() / nt).powi(2)
                })
                .sum::<f64>()
                / 2.0;
            acc[p] += half_sq.min(1.0);
        }
    }
    let steps = (frames.len() - 1) as f64;
    Ok(Tensor::new(
        &[1, h, w],
        acc.into_iter().map(|m| T::from_f64_lossy(m / steps)).collect(),
    )?)
}

/// First-frame condition bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObservation<T: Element = f32> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub semantic: Tensor<T>,
    pub dyn_mask: Tensor<T>,
}

impl<T: Element> SceneObservation<T> {
    pub fn size(&self) -> (usize, usize) {
        (self.rgb.dims()[1], self.rgb.dims()[2])
    }
}

pub fn observe<T: Element>(
    frames: &[Tensor<T>],
    raw_depth: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<SceneObservation<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("observe needs at least one frame".into()))?;
    let (h, w) = check_frame(first)?;
    raw_depth.expect_dims("observe depth", &[1, h, w])?;
    Ok(SceneObservation {
        rgb: first.clone(),
        depth: normalize_depth(raw_depth)?,
        semantic: extractor.extract(0, first)?,
        dyn_mask: dynamic_mask(frames, extractor)?,
    })
}

/// Inference-time observation: only frame 0 exists, so the mask comes from
/// a supplied prior.
pub fn observe_first_frame<T: Element>(
    frame0: &Tensor<T>,
    raw_depth: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    mask_prior: &Tensor<T>,
) -> Result<SceneObservation<T>> {
    let (h, w) = check_frame(frame0)?;
    raw_depth.expect_dims("observe depth", &[1, h, w])?;
    mask_prior.expect_dims("mask prior", &[1, h, w])?;
    Ok(SceneObservation {
        rgb: frame0.clone(),
        depth: normalize_depth(raw_depth)?,
        semantic: extractor.extract(0, frame0)?,
        dyn_mask: mask_prior.map(|m| m.max(T::zero()).min(T::one())),
    })
}

/// Values above this count as nonzero when binarizing a soft mask.
pub const MASK_THRESHOLD: f64 = 1e-6;

/// Binary dilation with a (2r+1)² square; with r = 1 this is the set of
/// pixels whose 3×3 extractor window overlaps the input support.
pub fn dilate<T: Element>(mask: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    let (h, w) = match mask.dims() {
        [1, h, w] => (*h, *w),
        d => return Err(Error::Input(format!("mask must be [1, H, W], got {d:?}"))),
    };
    let on = |y: usize, x: usize| mask.data()[y * w + x].as_f64() > 0.5;
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let hit = (y.saturating_sub(radius)..(y + radius + 1).min(h))
            .any(|yy| (x.saturating_sub(radius)..(x + radius + 1).min(w)).any(|xx| on(yy, xx)));
        if hit {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// IoU between `mask > threshold` and a binary reference (`> 0.5`).
pub fn mask_iou<T: Element>(mask: &Tensor<T>, reference: &Tensor<T>, threshold: f64) -> Result<f64> {
    mask.expect_dims("mask_iou", reference.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &r) in mask.data().iter().zip(reference.data()) {
        let (a, b) = (m.as_f64() > threshold, r.as_f64() > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Number of semantic channels produced by the default extractor.
pub const SEMANTIC_CHANNELS: usize = NUM_CLASSES;

#[cfg(test)]
mod tests {
    use super::*;

    /// Frames are their own features.
    struct Identity;
    impl FeatureExtractor<f64> for Identity {
        fn channels(&self) -> usize {
            3
        }
        fn extract(&self, _: usize, frame: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(frame.clone())
        }
    }

    fn px(v: [f64; 3]) -> Tensor<f64> {
        Tensor::new(&[3, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn depth_normalization() {
        let raw = Tensor::<f64>::new(&[1, 1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(normalize_depth(&raw).unwrap().data(), &[0.0, 0.5, 1.0]);
        let flat = Tensor::<f64>::full(&[1, 2, 2], 3.0);
        assert!(normalize_depth(&flat).unwrap().data().iter().all(|&x| x == 0.5));
        let bad = Tensor::<f64>::new(&[1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(normalize_depth(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn mask_closed_forms() {
        let m = dynamic_mask(&[px([1.0, 0.0, 0.0]), px([0.0, 1.0, 0.0])], &Identity).unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-15);
        let r = 1.0 / 2f64.sqrt();
        let m = dynamic_mask(&[px([1.0, 0.0, 0.0]), px([r, r, 0.0])], &Identity).unwrap();
        assert!((m.data()[0] - 0.29289321881345254).abs() < 1e-12);
        // zero-norm features count as unchanged
        let m = dynamic_mask(&[px([0.0; 3]), px([1.0, 0.0, 0.0])], &Identity).unwrap();
        assert_eq!(m.data()[0], 0.0);
        // anti-correlated features clamp at similarity 0
        let m = dynamic_mask(&[px([1.0, 0.0, 0.0]), px([-1.0, 0.0, 0.0])], &Identity).unwrap();
        assert_eq!(m.data()[0], 1.0);
        assert!(matches!(dynamic_mask(&[px([1.0; 3])], &Identity), Err(Error::Input(_))));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn synthetic_extractor_blurs_one_hot() {
        let ex = SyntheticExtractor::default();
        let mut frame = Tensor::<f64>::zeros(&[3, 3, 3]);
        for i in 0..9 {
            for c in 0..3 {
                frame.data_mut()[c * 9 + i] = PALETTE[0][c] as f64;
            }
        }
        for c in 0..3 {
            frame.data_mut()[c * 9 + 4] = PALETTE[5][c] as f64;
        }
        let f: Tensor<f64> = ex.extract(0, &frame).unwrap();
        assert_eq!(f.dims(), &[NUM_CLASSES, 3, 3]);
        assert!((f.get(&[5, 1, 1]) - 1.0 / 9.0).abs() < 1e-15);
        assert!((f.get(&[5, 0, 0]) - 1.0 / 4.0).abs() < 1e-15);
        for p in 0..9 {
            let s: f64 = (0..NUM_CLASSES).map(|k| f.data()[k * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
