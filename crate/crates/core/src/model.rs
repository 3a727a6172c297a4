//! The ε-prediction video UNet and the full conditioned world model:
//! first-frame concatenation, action-word cross-attention, multi-modal
//! guidance branches, adapters and decoder injections.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

use crate::adapter::{
    replicate_frames, schedule_layers, Adapter, AdditiveInjection, CrossAttnInjection, Fusion, Injection,
    InjectionSchedule,
};
use crate::error::{Error, Result};
use crate::guidance::{Guidance, GuidanceConfig, Modality};
use crate::modalities::SEMANTIC_CHANNELS;
use crate::nn::{
    add_per_frame, add_per_sample, from_clip_tokens, from_spatial_tokens, from_temporal_tokens, to_clip_tokens,
    to_spatial_tokens, to_temporal_tokens, Attention, Builder, Conv, Init, Linear, Norm,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub frames: usize,
    /// Pixel patch size of the fixed latent map.
    pub patch: usize,
    /// Channels per UNet level; level `l` runs at `latent / 2^l`.
    pub channels: Vec<usize>,
    pub decoder_layers: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub n_max: usize,
    pub vocab: usize,
    /// `None` builds the unguided base model.
    pub guidance: Option<GuidanceConfig>,
    pub injection: InjectionSchedule,
    pub temporal_pos: bool,
    /// Bound `c` of the static-scene noise base `c·tanh(r/c)`, where
    /// `r = (z_t - sqrt(ab)·z_first) / sqrt(1 - ab)`; `None` disables it.
    pub static_base: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            frames: 8,
            patch: 4,
            channels: vec![16, 32],
            decoder_layers: 6,
            time_dim: 64,
            embed_dim: 16,
            n_max: 2,
            vocab: 8,
            guidance: Some(GuidanceConfig::default()),
            injection: InjectionSchedule::new(6, 3, Fusion::Additive),
            temporal_pos: true,
            static_base: Some(3.0),
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn per_level(&self) -> usize {
        self.decoder_layers / self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 || self.frames == 0 || self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(
                "image size, patch, frames and channels must be positive and aligned".into(),
            ));
        }
        if !self.latent_size().is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Config(format!(
                "latent {} cannot be halved {} times",
                self.latent_size(),
                levels - 1
            )));
        }
        if self.decoder_layers == 0 || !self.decoder_layers.is_multiple_of(levels) || self.per_level() < 1 {
            return Err(Error::Config(format!(
                "decoder_layers {} must be a positive multiple of the {levels} levels",
                self.decoder_layers
            )));
        }
        if self.injection.decoder_layer_count != self.decoder_layers {
            return Err(Error::Config(format!(
                "injection schedule counts {} decoder layers, model has {}",
                self.injection.decoder_layer_count, self.decoder_layers
            )));
        }
        schedule_layers(&self.injection)?;
        if self.embed_dim == 0 || self.n_max == 0 || self.vocab == 0 {
            return Err(Error::Config(
                "text embedding needs positive dim, n_max and vocab".into(),
            ));
        }
        Ok(())
    }

    /// Level of decoder layer `j` (deepest level first).
    pub fn decoder_level(&self, j: usize) -> usize {
        self.channels.len() - 1 - j / self.per_level()
    }
}

/// Raw condition channels for a modality.
pub fn modality_channels(m: Modality) -> usize {
    match m {
        Modality::Depth | Modality::Mask => 1,
        Modality::Semantic => SEMANTIC_CHANNELS,
        Modality::Rgb => 3,
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    conv1: Conv,
    temb: Linear,
    norm2: Norm,
    conv2: Conv,
    sa_norm: Norm,
    sa: Attention,
    ta_norm: Norm,
    ta: Attention,
    text: Option<(Norm, Attention)>,
}

impl Block {
    fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        c: usize,
        time_dim: usize,
        text_dim: Option<usize>,
    ) -> Self {
        b.scope(name, |b| Self {
            norm1: Norm::new(b, "norm1", c),
            conv1: Conv::k3(b, "conv1", c, c, Init::Fan(1.0)),
            temb: Linear::new(b, "temb", time_dim, c, true, Init::Fan(1.0)),
            norm2: Norm::new(b, "norm2", c),
            conv2: Conv::k3(b, "conv2", c, c, Init::Fan(1.0)),
            sa_norm: Norm::new(b, "sa_norm", c),
            sa: Attention::new(b, "sa", c, c, Init::Fan(1.0)),
            ta_norm: Norm::new(b, "ta_norm", c),
            ta: Attention::new(b, "ta", c, c, Init::Fan(1.0)),
            text: text_dim.map(|d| {
                (
                    Norm::new(b, "text_norm", c),
                    Attention::new(b, "text", c, d, Init::Fan(1.0)),
                )
            }),
        })
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, h: Var, ctx: &Ctx) -> Result<Var> {
        let d = g.dims(h).to_vec();
        let (hh, ww) = (d[2], d[3]);
        let n = self.norm1.forward(g, s, h)?;
        let a = g.silu(n);
        let r = self.conv1.forward(g, s, a)?;
        let te = self.temb.forward(g, s, ctx.temb)?;
        let r = add_per_sample(g, r, te, ctx.frames)?;
        let n = self.norm2.forward(g, s, r)?;
        let a = g.silu(n);
        let r = self.conv2.forward(g, s, a)?;
        let mut h = g.add(h, r)?;

        let n = self.sa_norm.forward(g, s, h)?;
        let t = to_spatial_tokens(g, n)?;
        let a = self.sa.forward(g, s, t, t)?;
        let a = from_spatial_tokens(g, a, hh, ww)?;
        h = g.add(h, a)?;

        let n = self.ta_norm.forward(g, s, h)?;
        let t = to_temporal_tokens(g, n, ctx.frames)?;
        let a = self.ta.forward(g, s, t, t)?;
        let a = from_temporal_tokens(g, a, ctx.frames, hh, ww)?;
        h = g.add(h, a)?;

        if let Some((norm, attn)) = &self.text {
            let n = norm.forward(g, s, h)?;
            let q = to_clip_tokens(g, n, ctx.frames)?;
            let a = attn.forward(g, s, q, ctx.text)?;
            let a = from_clip_tokens(g, a, ctx.frames, hh, ww)?;
            h = g.add(h, a)?;
        }
        Ok(h)
    }
}

struct Ctx {
    temb: Var,
    text: Var,
    frames: usize,
}

/// One decoder injection point: an adapter over the replicated fused level
/// and the injection operator.
#[derive(Clone, Debug)]
pub struct InjectionPoint {
    pub layer: usize,
    pub level: usize,
    pub adapter: Adapter,
    pub injection: Injection,
}

/// Per-sample model inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Element> {
    /// `[B·F, Cz, h, w]`.
    pub z_t: Tensor<T>,
    /// One timestep per sample.
    pub t: Vec<usize>,
    /// Cumulative signal level at each sample's timestep.
    pub alpha_bar: Vec<f64>,
    /// Frame-0 latent `[B, Cz, h, w]`.
    pub first: Tensor<T>,
    /// Table rows per sample, `2·n_max` each.
    pub text: Vec<Vec<Option<usize>>>,
    /// Patchified conditions per configured modality, `[B, C_m·p², h, w]`.
    pub conds: Vec<Tensor<T>>,
}

#[derive(Debug)]
pub struct WorldModel {
    pub config: ModelConfig,
    conv_in: Conv,
    frame_emb: ParamId,
    time1: Linear,
    time2: Linear,
    text_table: ParamId,
    text_pos: ParamId,
    down: Vec<Conv>,
    encoder: Vec<Vec<Block>>,
    mid: [Block; 2],
    decoder: Vec<Block>,
    up: Vec<Conv>,
    out_norm: Norm,
    out_conv: Conv,
    pub guidance: Option<Guidance>,
    pub points: Vec<InjectionPoint>,
    pub mask_prior: ParamId,
    forwards: AtomicUsize,
}

impl Clone for WorldModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            conv_in: self.conv_in.clone(),
            frame_emb: self.frame_emb,
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            text_table: self.text_table,
            text_pos: self.text_pos,
            down: self.down.clone(),
            encoder: self.encoder.clone(),
            mid: self.mid.clone(),
            decoder: self.decoder.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            out_conv: self.out_conv.clone(),
            guidance: self.guidance.clone(),
            points: self.points.clone(),
            mask_prior: self.mask_prior,
            forwards: AtomicUsize::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

pub const TIME_FREQS: usize = 16;

/// Sinusoidal timestep features `[B, 2·TIME_FREQS]`.
pub fn time_features<T: Element>(ts: &[usize]) -> Tensor<T> {
    let w = 2 * TIME_FREQS;
    Tensor::from_fn(&[ts.len(), w], |i| {
        let (b, k) = (i / w, i % w);
        let f = (-(10000f64.ln()) * (k % TIME_FREQS) as f64 / TIME_FREQS as f64).exp();
        let x = ts[b] as f64 * f;
        T::from_f64_lossy(if k < TIME_FREQS { x.sin() } else { x.cos() })
    })
}

/// Noise that would be exact if every frame equalled frame 0, squashed to
/// `(-c, c)`: `c·tanh(r/c)` with `r = (z_t - sqrt(ab)·first) / sqrt(1 - ab)`.
pub fn static_base<T: Element>(
    z_t: &Tensor<T>,
    first: &Tensor<T>,
    alpha_bar: &[f64],
    frames: usize,
    c: f64,
) -> Result<Tensor<T>> {
    let per = first.numel() / alpha_bar.len().max(1);
    if z_t.numel() != per * frames * alpha_bar.len() {
        return Err(Error::Input(
            "static base: latent and first-frame sizes disagree".into(),
        ));
    }
    let mut out = Vec::with_capacity(z_t.numel());
    for (i, &z) in z_t.data().iter().enumerate() {
        let b = i / (per * frames);
        let ab = alpha_bar[b];
        let f0 = first.data()[b * per + i % per].as_f64();
        let r = (z.as_f64() - ab.sqrt() * f0) / (1.0 - ab).sqrt();
        out.push(T::from_f64_lossy(c * (r / c).tanh()));
    }
    Ok(Tensor::new(z_t.dims(), out)?)
}

impl WorldModel {
    /// Registers all parameters. Base UNet parameters are created first, so
    /// a guided and an unguided model built from the same seed share them.
    /// `text_init` seeds the trainable action-word table, `[vocab, embed_dim]`.
    pub fn new<T: Element, R: Rng>(
        config: ModelConfig,
        text_init: &Tensor<T>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        text_init.expect_dims("text table", &[config.vocab, config.embed_dim])?;
        let mut b = Builder::new(store, rng);
        let cz = config.latent_channels();
        let ch = config.channels.clone();
        let levels = ch.len();
        let per = config.per_level();
        let td = config.time_dim;
        let ed = config.embed_dim;

        let in_ch = if config.static_base.is_some() { 3 * cz } else { 2 * cz };
        let conv_in = Conv::k3(&mut b, "conv_in", in_ch, ch[0], Init::Fan(1.0));
        let frame_emb = b.param("frame_emb", &[config.frames, ch[0]], Init::Fan(1.0), ch[0]);
        let time1 = Linear::new(&mut b, "time1", 2 * TIME_FREQS, td, true, Init::Fan(1.0));
        let time2 = Linear::new(&mut b, "time2", td, td, true, Init::Fan(1.0));
        let text_table = b.add("text.table", text_init.clone());
        let text_pos = b.param("text.pos", &[2 * config.n_max, ed], Init::Fan(0.5), 1);
        let mut down = Vec::new();
        let mut encoder = Vec::new();
        for l in 0..levels {
            if l > 0 {
                down.push(Conv::new(
                    &mut b,
                    &format!("down{l}"),
                    ch[l - 1],
                    ch[l],
                    (3, 3),
                    2,
                    Init::Fan(1.0),
                ));
            }
            encoder.push(
                (0..per - 1)
                    .map(|i| Block::new(&mut b, &format!("enc{l}.{i}"), ch[l], td, None))
                    .collect(),
            );
        }
        let deep = ch[levels - 1];
        let mid = [
            Block::new(&mut b, "mid0", deep, td, Some(ed)),
            Block::new(&mut b, "mid1", deep, td, None),
        ];
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        for j in 0..config.decoder_layers {
            let l = config.decoder_level(j);
            decoder.push(Block::new(&mut b, &format!("dec{j}"), ch[l], td, Some(ed)));
            if (j + 1) % per == 0 && l > 0 {
                up.push(Conv::k3(&mut b, &format!("up{l}"), ch[l], ch[l - 1], Init::Fan(1.0)));
            }
        }
        let out_norm = Norm::new(&mut b, "out_norm", ch[0]);
        let out_conv = Conv::k3(&mut b, "out_conv", ch[0], cz, Init::Fan(1.0));
        let mask_prior = b.add("mask_prior", Tensor::zeros(&[1, config.image_size, config.image_size]));
        b.store.set_trainable(mask_prior, false);

        let (guidance, points) = match &config.guidance {
            None => (None, Vec::new()),
            Some(gc) => {
                let p2 = config.patch * config.patch;
                let in_ch: Vec<usize> = gc.modalities.iter().map(|&m| modality_channels(m) * p2).collect();
                let guidance = Guidance::new(&mut b, gc.clone(), &in_ch, &ch)?;
                let mut points = Vec::new();
                for layer in schedule_layers(&config.injection)? {
                    let level = config.decoder_level(layer);
                    let c = ch[level];
                    let name = format!("inject{layer}");
                    let adapter = Adapter::new(
                        &mut b,
                        &format!("{name}.adapter"),
                        c,
                        c,
                        config.frames,
                        config.temporal_pos,
                    );
                    let injection = match config.injection.fusion {
                        Fusion::Additive => Injection::Additive(AdditiveInjection::new(&mut b, &name, c, c)),
                        Fusion::Xattn => Injection::Xattn(CrossAttnInjection::new(
                            &mut b,
                            &format!("{name}.xattn"),
                            c,
                            c,
                            config.frames,
                        )),
                    };
                    points.push(InjectionPoint {
                        layer,
                        level,
                        adapter,
                        injection,
                    });
                }
                (Some(guidance), points)
            }
        };

        Ok(Self {
            config,
            conv_in,
            frame_emb,
            time1,
            time2,
            text_table,
            text_pos,
            down,
            encoder,
            mid,
            decoder,
            up,
            out_norm,
            out_conv,
            guidance,
            points,
            mask_prior,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        self.guidance
            .as_ref()
            .map(|g| g.config.modalities.as_slice())
            .unwrap_or(&[])
    }

    pub fn text_table(&self) -> ParamId {
        self.text_table
    }

    /// Number of network evaluations since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    fn check_input<T: Element>(&self, x: &ModelInput<T>) -> Result<usize> {
        let c = &self.config;
        let b = x.t.len();
        let (cz, hz) = (c.latent_channels(), c.latent_size());
        if b == 0 || x.alpha_bar.len() != b {
            return Err(Error::Input(
                "batch needs one timestep and one signal level per sample".into(),
            ));
        }
        x.z_t.expect_dims("z_t", &[b * c.frames, cz, hz, hz])?;
        x.first.expect_dims("first-frame latent", &[b, cz, hz, hz])?;
        if x.text.len() != b || x.text.iter().any(|r| r.len() != 2 * c.n_max) {
            return Err(Error::Input(format!("text rows must be {b} × {}", 2 * c.n_max)));
        }
        let mods = self.modalities();
        if x.conds.len() != mods.len() {
            return Err(Error::Input(format!(
                "expected {} conditions, got {}",
                mods.len(),
                x.conds.len()
            )));
        }
        for (m, t) in mods.iter().zip(&x.conds) {
            t.expect_dims("condition", &[b, modality_channels(*m) * c.patch * c.patch, hz, hz])?;
        }
        Ok(b)
    }

    /// Records the forward pass and returns predicted noise `[B·F, Cz, h, w]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: &ModelInput<T>) -> Result<Var> {
        let b = self.check_input(x)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let f = c.frames;

        let tf = g.constant(time_features(&x.t));
        let t1 = self.time1.forward(g, s, tf)?;
        let t1 = g.silu(t1);
        let t2 = self.time2.forward(g, s, t1)?;
        let temb = g.silu(t2);

        let table = g.param(s, self.text_table);
        let rows: Vec<Option<usize>> = x.text.iter().flatten().copied().collect();
        let tok = g.gather_rows(table, &rows)?;
        let tok = g.reshape(tok, &[b, 2 * c.n_max, c.embed_dim])?;
        let pos = g.param(s, self.text_pos);
        let text = g.add(tok, pos)?;
        let ctx = Ctx { temb, text, frames: f };

        let fused = match &self.guidance {
            Some(gd) => {
                let conds: Vec<Var> = x.conds.iter().map(|t| g.constant(t.clone())).collect();
                Some(gd.forward(g, s, &conds)?.fused)
            }
            None => None,
        };

        let z = g.input(x.z_t.clone());
        let first = g.constant(x.first.clone());
        let first = replicate_frames(g, first, f)?;
        let base = match self.config.static_base {
            Some(c) => Some(g.constant(static_base(&x.z_t, &x.first, &x.alpha_bar, f, c)?)),
            None => None,
        };
        let zin = match base {
            Some(bv) => g.concat(&[z, first, bv], 1)?,
            None => g.concat(&[z, first], 1)?,
        };
        let h0 = self.conv_in.forward(g, s, zin)?;
        let fe = g.param(s, self.frame_emb);
        let mut h = add_per_frame(g, h0, fe, f)?;

        let mut skips = Vec::new();
        for (l, blocks) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = self.down[l - 1].forward(g, s, h)?;
            }
            skips.push(h);
            for blk in blocks {
                h = blk.forward(g, s, h, &ctx)?;
                skips.push(h);
            }
        }
        for blk in &self.mid {
            h = blk.forward(g, s, h, &ctx)?;
        }
        let per = c.per_level();
        let mut up = self.up.iter();
        for (j, blk) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per decoder layer");
            let point = self.points.iter().find(|p| p.layer == j);
            let guide = match (point, &fused) {
                (Some(p), Some(fz)) => {
                    let rep = replicate_frames(g, fz[p.level], f)?;
                    Some((p, p.adapter.adapt(g, s, rep)?))
                }
                _ => None,
            };
            h = match &guide {
                Some((p, gv)) => match &p.injection {
                    Injection::Additive(inj) => inj.forward(g, s, h, Some(skip), *gv)?,
                    Injection::Xattn(_) => g.add(h, skip)?,
                },
                None => g.add(h, skip)?,
            };
            h = blk.forward(g, s, h, &ctx)?;
            if let Some((p, gv)) = &guide {
                if let Injection::Xattn(inj) = &p.injection {
                    h = inj.forward(g, s, h, *gv)?;
                }
            }
            let l = c.decoder_level(j);
            if (j + 1) % per == 0 && l > 0 {
                let u = g.upsample_nearest(h, 2)?;
                h = up.next().expect("one upsample per level").forward(g, s, u)?;
            }
        }
        let n = self.out_norm.forward(g, s, h)?;
        let a = g.silu(n);
        let out = self.out_conv.forward(g, s, a)?;
        match base {
            Some(bv) => Ok(g.add(out, bv)?),
            None => Ok(out),
        }
    }

    /// Forward without gradient bookkeeping beyond the throwaway graph.
    pub fn predict<T: Element>(&self, s: &ParamStore<T>, x: &ModelInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, s, x)?;
        Ok(g.value(out).clone())
    }

    /// Parameter ids belonging to the guidance path (branches, routers,
    /// adapters and injections).
    pub fn guidance_params<T: Element>(&self, s: &ParamStore<T>) -> Vec<ParamId> {
        s.iter()
            .filter(|(_, name, _)| name.starts_with("guidance.") || name.starts_with("inject"))
            .map(|(id, _, _)| id)
            .collect()
    }
}
