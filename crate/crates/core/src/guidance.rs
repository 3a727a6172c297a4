//! Per-modality 2D control branches, the patch-level router and weighted
//! fusion of the resulting feature pyramids.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::{Element, Graph, ParamStore, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{space_to_depth, Builder, Conv, Init, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Semantic,
    Rgb,
    Mask,
}

pub const ALL_MODALITIES: [Modality; 4] = [Modality::Depth, Modality::Semantic, Modality::Rgb, Modality::Mask];

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Semantic => "semantic",
            Modality::Rgb => "rgb",
            Modality::Mask => "mask",
        }
    }
}

/// One encoder stage: `SiLU(GN(conv(in_proj(x))))`, read out through a
/// zero-initialized `out_proj`.
#[derive(Clone, Debug)]
pub struct BranchStage {
    pub in_proj: Conv,
    pub conv: Conv,
    pub norm: Norm,
    pub out_proj: Conv,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub modality: Modality,
    pub in_channels: usize,
    pub stages: Vec<BranchStage>,
}

impl ControlBranch {
    /// Stage `l` has `channels[l]` channels and stride 2 for `l > 0`.
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        modality: Modality,
        in_channels: usize,
        channels: &[usize],
    ) -> Self {
        b.scope(&format!("branch.{}", modality.name()), |b| {
            let mut prev = in_channels;
            let stages = channels
                .iter()
                .enumerate()
                .map(|(l, &c)| {
                    let stage = b.scope(&format!("stage{l}"), |b| BranchStage {
                        in_proj: Conv::k1(b, "in_proj", prev, c, Init::Fan(1.0)),
                        conv: Conv::new(b, "conv", c, c, (3, 3), if l == 0 { 1 } else { 2 }, Init::Fan(1.0)),
                        norm: Norm::new(b, "norm", c),
                        out_proj: Conv::k1(b, "out_proj", c, c, Init::Zero),
                        channels: c,
                    });
                    prev = c;
                    stage
                })
                .collect();
            Self {
                modality,
                in_channels,
                stages,
            }
        })
    }

    /// `x: [N, C_cond, H, W]` → one `[N, C_l, H/2^l, W/2^l]` tensor per stage.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1] != self.in_channels {
            return Err(TensorError::Axis {
                op: "branch_forward",
                axis: 1,
                expected: self.in_channels,
                got: d.get(1).copied().unwrap_or(0),
            }
            .into());
        }
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let p = st.in_proj.forward(g, s, h)?;
            let c = st.conv.forward(g, s, p)?;
            let n = st.norm.forward(g, s, c)?;
            h = g.silu(n);
            out.push(st.out_proj.forward(g, s, h)?);
        }
        Ok(out)
    }

    /// Pyramid for a single `[C_cond, H, W]` condition.
    pub fn pyramid<T: Element>(&self, s: &ParamStore<T>, condition: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut dims = vec![1];
        dims.extend_from_slice(condition.dims());
        let mut g = Graph::new();
        let x = g.input(condition.reshape(&dims)?);
        let levels = self.forward(&mut g, s, x)?;
        levels
            .into_iter()
            .map(|v| {
                let d = g.dims(v)[1..].to_vec();
                Ok(g.value(v).reshape(&d)?)
            })
            .collect()
    }
}

/// Per-patch scoring network: a hidden 1×1 layer over the concatenated
/// modality features, then one learned query per modality plus a bias.
#[derive(Clone, Debug)]
pub struct Router {
    pub hidden: Conv,
    pub query: Conv,
    pub modalities: usize,
    pub patch: usize,
}

impl Router {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        modalities: usize,
        channels: usize,
        hidden: usize,
        patch: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            hidden: Conv::k1(
                b,
                "hidden",
                modalities * channels * patch * patch,
                hidden,
                Init::Fan(1.0),
            ),
            query: Conv::k1(b, "query", hidden, modalities, Init::Fan(1.0)),
            modalities,
            patch,
        })
    }

    fn check<T: Element>(&self, g: &Graph<T>, levels: &[Var]) -> Result<()> {
        if levels.len() != self.modalities {
            return Err(Error::Input(format!(
                "router expects {} pyramids, got {}",
                self.modalities,
                levels.len()
            )));
        }
        let d0 = g.dims(levels[0]).to_vec();
        for &l in levels {
            if g.dims(l) != d0.as_slice() {
                return Err(TensorError::Shape {
                    op: "route",
                    msg: format!("misaligned pyramids {:?} vs {d0:?}", g.dims(l)),
                }
                .into());
            }
        }
        if !d0[2].is_multiple_of(self.patch) || !d0[3].is_multiple_of(self.patch) {
            return Err(Error::Input(format!(
                "level {}×{} not divisible by patch {}",
                d0[2], d0[3], self.patch
            )));
        }
        Ok(())
    }

    /// Per-patch logits `[N, M, h/p, w/p]`.
    pub fn logits<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, levels: &[Var]) -> Result<Var> {
        self.check(g, levels)?;
        let cat = g.concat(levels, 1)?;
        let patches = space_to_depth(g, cat, self.patch)?;
        let h = self.hidden.forward(g, s, patches)?;
        let h = g.silu(h);
        self.query.forward(g, s, h)
    }

    /// Scores `[N, M, h, w]`: softmax over modalities, constant within a patch.
    pub fn route<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, levels: &[Var]) -> Result<Var> {
        let logits = self.logits(g, s, levels)?;
        let scores = softmax_modalities(g, logits)?;
        if self.patch == 1 {
            Ok(scores)
        } else {
            Ok(g.upsample_nearest(scores, self.patch)?)
        }
    }
}

/// Softmax over axis 1 of `[N, M, h, w]`.
pub fn softmax_modalities<T: Element>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let p = g.permute(logits, &[0, 2, 3, 1])?;
    let sm = g.softmax(p);
    Ok(g.permute(sm, &[0, 3, 1, 2])?)
}

/// `Σ_m scores[:, m] ⊙ P_m` for one level.
pub fn fuse<T: Element>(g: &mut Graph<T>, levels: &[Var], scores: Var) -> Result<Var> {
    let m = levels.len();
    let sd = g.dims(scores).to_vec();
    if sd.len() != 4 || sd[1] != m {
        return Err(TensorError::Axis {
            op: "fuse",
            axis: 1,
            expected: m,
            got: sd.get(1).copied().unwrap_or(0),
        }
        .into());
    }
    let mut acc: Option<Var> = None;
    for (i, &p) in levels.iter().enumerate() {
        let w = g.narrow(scores, 1, i, 1)?;
        let term = g.mul(w, p)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Input("fuse needs at least one pyramid".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub modalities: Vec<Modality>,
    pub router_hidden: usize,
    pub patch: usize,
    pub shared_router: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            modalities: ALL_MODALITIES.to_vec(),
            router_hidden: 16,
            patch: 1,
            shared_router: false,
        }
    }
}

/// Branches for the configured modalities plus routers.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub config: GuidanceConfig,
    pub branches: Vec<ControlBranch>,
    pub routers: Vec<Router>,
    pub level_channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GuidanceOutput {
    /// `pyramids[m][l]`.
    pub pyramids: Vec<Vec<Var>>,
    pub scores: Vec<Var>,
    pub fused: Vec<Var>,
}

impl Guidance {
    /// `in_channels[m]` is the condition channel count of `config.modalities[m]`.
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        config: GuidanceConfig,
        in_channels: &[usize],
        level_channels: &[usize],
    ) -> Result<Self> {
        let m = config.modalities.len();
        if m == 0 || in_channels.len() != m {
            return Err(Error::Config(
                "guidance needs one input channel count per modality".into(),
            ));
        }
        if config.shared_router && level_channels.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config(
                "a shared router needs equal channels at every level".into(),
            ));
        }
        b.scope("guidance", |b| {
            let branches = config
                .modalities
                .iter()
                .zip(in_channels)
                .map(|(&md, &c)| ControlBranch::new(b, md, c, level_channels))
                .collect();
            let n_routers = if config.shared_router { 1 } else { level_channels.len() };
            let routers = (0..n_routers)
                .map(|l| {
                    Router::new(
                        b,
                        &format!("router{l}"),
                        m,
                        level_channels[l],
                        config.router_hidden,
                        config.patch,
                    )
                })
                .collect();
            Ok(Self {
                config,
                branches,
                routers,
                level_channels: level_channels.to_vec(),
            })
        })
    }

    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    pub fn router(&self, level: usize) -> &Router {
        &self.routers[level.min(self.routers.len() - 1)]
    }

    /// `conds[m]: [N, C_m, H, W]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, conds: &[Var]) -> Result<GuidanceOutput> {
        if conds.len() != self.branches.len() {
            return Err(Error::Input(format!(
                "expected {} conditions, got {}",
                self.branches.len(),
                conds.len()
            )));
        }
        let pyramids = self
            .branches
            .iter()
            .zip(conds)
            .map(|(br, &c)| br.forward(g, s, c))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::new();
        let mut fused = Vec::new();
        for l in 0..self.levels() {
            let level: Vec<Var> = pyramids.iter().map(|p| p[l]).collect();
            let sc = self.router(l).route(g, s, &level)?;
            fused.push(fuse(g, &level, sc)?);
            scores.push(sc);
        }
        Ok(GuidanceOutput {
            pyramids,
            scores,
            fused,
        })
    }
}

/// Mean router scores per level, plus the per-pass patch means they average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub modalities: Vec<Modality>,
    /// `levels[l][m]`.
    pub levels: Vec<Vec<f64>>,
    /// `passes[n][l][m]`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub passes: Vec<Vec<Vec<f64>>>,
}

/// Patch-mean of a `[N, M, h, w]` score tensor, per modality (N = 1).
pub fn patch_mean<T: Element>(scores: &Tensor<T>) -> Vec<f64> {
    let d = scores.dims();
    let (m, hw) = (d[1], d[2] * d[3]);
    let n = d[0];
    (0..m)
        .map(|k| {
            let mut s = 0.0;
            for b in 0..n {
                s += scores.data()[(b * m + k) * hw..(b * m + k + 1) * hw]
                    .iter()
                    .map(|x| x.as_f64())
                    .sum::<f64>();
            }
            s / (n * hw) as f64
        })
        .collect()
}

/// One forward per observation; `inputs[n][m]` is a `[C_m, H, W]` condition.
pub fn weight_report<T: Element>(
    guidance: &Guidance,
    s: &ParamStore<T>,
    inputs: &[Vec<Tensor<T>>],
) -> Result<WeightReport> {
    if inputs.is_empty() {
        return Err(Error::Input("weight report needs at least one observation".into()));
    }
    let mut passes = Vec::with_capacity(inputs.len());
    for obs in inputs {
        let mut g = Graph::new();
        let conds = obs
            .iter()
            .map(|c| {
                let mut d = vec![1];
                d.extend_from_slice(c.dims());
                Ok(g.input(c.reshape(&d)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = guidance.forward(&mut g, s, &conds)?;
        passes.push(out.scores.iter().map(|&v| patch_mean(g.value(v))).collect::<Vec<_>>());
    }
    let levels = (0..guidance.levels())
        .map(|l| {
            (0..guidance.branches.len())
                .map(|m| passes.iter().map(|p: &Vec<Vec<f64>>| p[l][m]).sum::<f64>() / passes.len() as f64)
                .collect()
        })
        .collect();
    Ok(WeightReport {
        modalities: guidance.config.modalities.clone(),
        levels,
        passes,
    })
}
