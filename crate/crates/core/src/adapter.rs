//! Spatial-temporal adapter over time-replicated fused guidance, the two
//! injection strategies and the decoder injection schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{
    add_per_frame, from_clip_tokens, from_spatial_tokens, from_temporal_tokens, to_clip_tokens, to_spatial_tokens,
    to_temporal_tokens, Attention, Builder, Conv, Init,
};

/// `[C, h, w]` → `[T, C, h, w]` with every slice equal to the input.
pub fn replicate_temporal<T: Element>(fused: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    if frames == 0 {
        return Err(Error::Input("frame count must be positive".into()));
    }
    let mut dims = vec![frames];
    dims.extend_from_slice(fused.dims());
    let mut data = Vec::with_capacity(fused.numel() * frames);
    for _ in 0..frames {
        data.extend_from_slice(fused.data());
    }
    Ok(Tensor::new(&dims, data)?)
}

/// Graph form: `[B, C, h, w]` → `[B·T, C, h, w]`.
pub fn replicate_frames<T: Element>(g: &mut Graph<T>, x: Var, frames: usize) -> Result<Var> {
    if frames == 0 {
        return Err(Error::Input("frame count must be positive".into()));
    }
    let d = g.dims(x).to_vec();
    let flat = g.reshape(x, &[d[0], 1, d[1] * d[2] * d[3]])?;
    let reps = vec![flat; frames];
    let cat = g.concat(&reps, 1)?;
    Ok(g.reshape(cat, &[d[0] * frames, d[1], d[2], d[3]])?)
}

/// Four stages: per-frame 3×3 conv, per-pixel temporal conv (replicate
/// padding), per-frame spatial self-attention, per-pixel temporal
/// self-attention on inputs with learned frame embeddings.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub spatial: Conv,
    pub temporal: Conv,
    pub spatial_attn: Attention,
    pub temporal_attn: Attention,
    pub pos: Option<ParamId>,
    pub frames: usize,
    pub out_channels: usize,
}

impl Adapter {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        frames: usize,
        pos_embed: bool,
    ) -> Self {
        b.scope(name, |b| {
            let mut temporal = Conv::new(b, "temporal_conv", c_out, c_out, (3, 1), 1, Init::Fan(1.0));
            temporal.pad = (0, 0);
            let pos = pos_embed.then(|| b.param("pos", &[frames, c_out], Init::Fan(1.0), 1));
            Self {
                spatial: Conv::k3(b, "spatial_conv", c_in, c_out, Init::Fan(1.0)),
                temporal,
                spatial_attn: Attention::new(b, "spatial_attn", c_out, c_out, Init::Fan(1.0)),
                temporal_attn: Attention::new(b, "temporal_attn", c_out, c_out, Init::Fan(1.0)),
                pos,
                frames,
                out_channels: c_out,
            }
        })
    }

    pub fn stage_spatial_conv<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        self.spatial.forward(g, s, x)
    }

    pub fn stage_temporal_conv<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        let (f, c, h, w) = (self.frames, d[1], d[2], d[3]);
        let b = d[0] / f;
        let r = g.reshape(x, &[b, f, c, h * w])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        let first = g.narrow(p, 2, 0, 1)?;
        let last = g.narrow(p, 2, f - 1, 1)?;
        let padded = g.concat(&[first, p, last], 2)?;
        let y = self.temporal.forward(g, s, padded)?;
        let back = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(back, &[b * f, c, h, w])?)
    }

    pub fn stage_spatial_attn<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        let t = to_spatial_tokens(g, x)?;
        let a = self.spatial_attn.forward(g, s, t, t)?;
        let a = from_spatial_tokens(g, a, d[2], d[3])?;
        Ok(g.add(x, a)?)
    }

    pub fn stage_temporal_attn<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = g.dims(x).to_vec();
        let x = match self.pos {
            Some(p) => {
                let pv = g.param(s, p);
                add_per_frame(g, x, pv, self.frames)?
            }
            None => x,
        };
        let t = to_temporal_tokens(g, x, self.frames)?;
        let a = self.temporal_attn.forward(g, s, t, t)?;
        let a = from_temporal_tokens(g, a, self.frames, d[2], d[3])?;
        Ok(g.add(x, a)?)
    }

    /// All four intermediate outputs, in order.
    pub fn stages<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<[Var; 4]> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || !d[0].is_multiple_of(self.frames) {
            return Err(Error::Input(format!(
                "adapter input {d:?} is not [B·{}, C, h, w]",
                self.frames
            )));
        }
        let f1 = self.stage_spatial_conv(g, s, x)?;
        let f2 = self.stage_temporal_conv(g, s, f1)?;
        let f3 = self.stage_spatial_attn(g, s, f2)?;
        let f4 = self.stage_temporal_attn(g, s, f3)?;
        Ok([f1, f2, f3, f4])
    }

    /// `[B·T, C, h, w]` → guidance features `[B·T, C', h, w]`.
    pub fn adapt<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.stages(g, s, x)?[3])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Additive,
    Xattn,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Additive => "additive",
            Fusion::Xattn => "xattn",
        }
    }
}

/// `hidden + residual + proj(g)` with a zero-initialized 1×1 projection.
#[derive(Clone, Debug)]
pub struct AdditiveInjection {
    pub proj: Conv,
}

impl AdditiveInjection {
    pub fn new<T: Element, R: Rng>(b: &mut Builder<T, R>, name: &str, c_guide: usize, c_hidden: usize) -> Self {
        Self {
            proj: b.scope(name, |b| Conv::k1(b, "proj", c_guide, c_hidden, Init::Zero)),
        }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        hidden: Var,
        residual: Option<Var>,
        guide: Var,
    ) -> Result<Var> {
        let h = match residual {
            Some(r) => g.add(hidden, r)?,
            None => hidden,
        };
        let p = self.proj.forward(g, s, guide)?;
        Ok(g.add(h, p)?)
    }
}

/// `hidden + CrossAttn(Q = decoder tokens, K = V = guidance tokens)` over
/// all T·h·w tokens of a clip; the output projection starts at zero.
#[derive(Clone, Debug)]
pub struct CrossAttnInjection {
    pub attn: Attention,
    pub frames: usize,
}

impl CrossAttnInjection {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        c_guide: usize,
        c_hidden: usize,
        frames: usize,
    ) -> Self {
        Self {
            attn: Attention::new(b, name, c_hidden, c_guide, Init::Zero),
            frames,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, hidden: Var, guide: Var) -> Result<Var> {
        let d = g.dims(hidden).to_vec();
        let gd = g.dims(guide).to_vec();
        if gd[0] != d[0] {
            return Err(Error::Input(format!(
                "guidance {gd:?} does not align with hidden {d:?}"
            )));
        }
        let q = to_clip_tokens(g, hidden, self.frames)?;
        let kv = to_clip_tokens(g, guide, self.frames)?;
        let a = self.attn.forward(g, s, q, kv)?;
        let a = from_clip_tokens(g, a, self.frames, d[2], d[3])?;
        Ok(g.add(hidden, a)?)
    }
}

#[derive(Clone, Debug)]
pub enum Injection {
    Additive(AdditiveInjection),
    Xattn(CrossAttnInjection),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionSchedule {
    pub decoder_layer_count: usize,
    pub inject_every: usize,
    pub fusion: Fusion,
    pub layer_override: Option<Vec<usize>>,
}

impl Default for InjectionSchedule {
    fn default() -> Self {
        Self {
            decoder_layer_count: 12,
            inject_every: 3,
            fusion: Fusion::Additive,
            layer_override: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSplit {
    /// Decoder layers next to the middle block.
    Upper,
    /// Decoder layers next to the output.
    Lower,
}

impl InjectionSchedule {
    pub fn new(decoder_layer_count: usize, inject_every: usize, fusion: Fusion) -> Self {
        Self {
            decoder_layer_count,
            inject_every,
            fusion,
            layer_override: None,
        }
    }

    /// Two injection points inside one half of the decoder.
    pub fn split(decoder_layer_count: usize, half: LayerSplit, fusion: Fusion) -> Self {
        let h = decoder_layer_count / 2;
        let (a, b) = ((h / 2).saturating_sub(1), h - 1);
        let offset = match half {
            LayerSplit::Upper => 0,
            LayerSplit::Lower => h,
        };
        Self {
            decoder_layer_count,
            inject_every: 3,
            fusion,
            layer_override: Some(vec![a + offset, b + offset]),
        }
    }
}

/// Injected decoder layers: every `inject_every`-th layer counted from the
/// decoder input (2, 5, 8, 11 for 12 layers), or the override.
pub fn schedule_layers(schedule: &InjectionSchedule) -> Result<Vec<usize>> {
    let n = schedule.decoder_layer_count;
    if let Some(layers) = &schedule.layer_override {
        let mut out = layers.clone();
        out.sort_unstable();
        out.dedup();
        if let Some(bad) = out.iter().find(|&&l| l >= n) {
            return Err(Error::Config(format!("injection layer {bad} outside 0..{n}")));
        }
        return Ok(out);
    }
    if schedule.inject_every == 0 {
        return Err(Error::Config("inject_every must be positive".into()));
    }
    Ok((schedule.inject_every - 1..n).step_by(schedule.inject_every).collect())
}
