//! Parameterized layers over the autodiff graph.

use rand::Rng;
use wm_tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f64),
    Zero,
}

/// Registration context: parameter store, RNG and a name prefix.
pub struct Builder<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Element, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn param(&mut self, name: &str, dims: &[usize], init: Init, fan_in: usize) -> ParamId {
        let value = match init {
            Init::Zero => Tensor::zeros(dims),
            Init::Fan(gain) => Tensor::randn(dims, gain / (fan_in.max(1) as f64).sqrt(), self.rng),
        };
        self.add(name, value)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Conv {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        stride: usize,
        init: Init,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.param("weight", &[c_out, c_in, k.0, k.1], init, c_in * k.0 * k.1),
            bias: b.param("bias", &[c_out], Init::Zero, 1),
            stride,
            pad: (k.0 / 2, k.1 / 2),
        })
    }

    pub fn k3<T: Element, R: Rng>(b: &mut Builder<T, R>, name: &str, c_in: usize, c_out: usize, init: Init) -> Self {
        Self::new(b, name, c_in, c_out, (3, 3), 1, init)
    }

    pub fn k1<T: Element, R: Rng>(b: &mut Builder<T, R>, name: &str, c_in: usize, c_out: usize, init: Init) -> Self {
        Self::new(b, name, c_in, c_out, (1, 1), 1, init)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let bias = g.param(s, self.bias);
        Ok(g.conv2d(x, w, Some(bias), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.param("weight", &[d_in, d_out], init, d_in),
            bias: bias.then(|| b.param("bias", &[d_out], Init::Zero, 1)),
        })
    }

    /// `x: [..., d_in]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = self.bias.map(|b| g.param(s, b));
        Ok(g.linear(x, w, b)?)
    }
}

/// Largest group count ≤ 8 dividing `channels`.
pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels.is_multiple_of(*g)).unwrap()
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Element, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.add("gamma", Tensor::ones(&[channels])),
            beta: b.add("beta", Tensor::zeros(&[channels])),
            groups: groups_for(channels),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        Ok(g.group_norm(x, gamma, beta, self.groups, 1e-5)?)
    }
}

/// Single-head attention with learned projections; returns the projected
/// attention output without the residual.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<T: Element, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        out_init: Init,
    ) -> Self {
        b.scope(name, |b| Self {
            q: Linear::new(b, "q", dim, dim, false, Init::Fan(1.0)),
            k: Linear::new(b, "k", ctx_dim, dim, false, Init::Fan(1.0)),
            v: Linear::new(b, "v", ctx_dim, dim, false, Init::Fan(1.0)),
            o: Linear::new(b, "o", dim, dim, true, out_init),
        })
    }

    /// `x: [N, L, dim]`, `ctx: [N, M, ctx_dim]` → `[N, L, dim]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.forward(g, s, x)?;
        let k = self.k.forward(g, s, ctx)?;
        let v = self.v.forward(g, s, ctx)?;
        let a = g.attention(q, k, v)?;
        self.o.forward(g, s, a)
    }
}

/// `[B·F, C, h, w]` → `[B·F, h·w, C]`.
pub fn to_spatial_tokens<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let r = g.reshape(x, &[d[0], d[1], d[2] * d[3]])?;
    Ok(g.transpose(r)?)
}

pub fn from_spatial_tokens<T: Element>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.dims(t).to_vec();
    let r = g.transpose(t)?;
    Ok(g.reshape(r, &[d[0], d[2], h, w])?)
}

/// `[B·F, C, h, w]` → `[B·h·w, F, C]`.
pub fn to_temporal_tokens<T: Element>(g: &mut Graph<T>, x: Var, frames: usize) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let b = d[0] / frames;
    let hw = d[2] * d[3];
    let r = g.reshape(x, &[b, frames, d[1], hw])?;
    let p = g.permute(r, &[0, 3, 1, 2])?;
    Ok(g.reshape(p, &[b * hw, frames, d[1]])?)
}

pub fn from_temporal_tokens<T: Element>(g: &mut Graph<T>, t: Var, frames: usize, h: usize, w: usize) -> Result<Var> {
    let d = g.dims(t).to_vec();
    let b = d[0] / (h * w);
    let c = d[2];
    let r = g.reshape(t, &[b, h * w, frames, c])?;
    let p = g.permute(r, &[0, 2, 3, 1])?;
    Ok(g.reshape(p, &[b * frames, c, h, w])?)
}

/// `[B·F, C, h, w]` → `[B, F·h·w, C]`: every token of a clip.
pub fn to_clip_tokens<T: Element>(g: &mut Graph<T>, x: Var, frames: usize) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let b = d[0] / frames;
    let hw = d[2] * d[3];
    let r = g.reshape(x, &[b, frames, d[1], hw])?;
    let p = g.permute(r, &[0, 1, 3, 2])?;
    Ok(g.reshape(p, &[b, frames * hw, d[1]])?)
}

pub fn from_clip_tokens<T: Element>(g: &mut Graph<T>, t: Var, frames: usize, h: usize, w: usize) -> Result<Var> {
    let d = g.dims(t).to_vec();
    let c = d[2];
    let r = g.reshape(t, &[d[0], frames, h * w, c])?;
    let p = g.permute(r, &[0, 1, 3, 2])?;
    Ok(g.reshape(p, &[d[0] * frames, c, h, w])?)
}

/// Adds a per-sample vector `[B, C]` to `[B·F, C, h, w]`.
pub fn add_per_sample<T: Element>(g: &mut Graph<T>, x: Var, v: Var, frames: usize) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let b = d[0] / frames;
    let r = g.reshape(x, &[b, frames, d[1], d[2] * d[3]])?;
    let vv = g.reshape(v, &[b, 1, d[1], 1])?;
    let s = g.add(r, vv)?;
    Ok(g.reshape(s, &d)?)
}

/// Adds a per-frame vector `[F, C]` to `[B·F, C, h, w]`.
pub fn add_per_frame<T: Element>(g: &mut Graph<T>, x: Var, v: Var, frames: usize) -> Result<Var> {
    let d = g.dims(x).to_vec();
    let b = d[0] / frames;
    let r = g.reshape(x, &[b, frames, d[1], d[2] * d[3]])?;
    let vv = g.reshape(v, &[1, frames, d[1], 1])?;
    let s = g.add(r, vv)?;
    Ok(g.reshape(s, &d)?)
}

/// `[C, H, W]` → `[C·p², H/p, W/p]`, channel index `c·p² + dy·p + dx`.
pub fn patchify<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match x.dims() {
        [c, h, w] => (*c, *h, *w),
        d => return Err(crate::Error::Input(format!("patchify needs [C, H, W], got {d:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(crate::Error::Input(format!("{h}×{w} is not divisible by patch {p}")));
    }
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![T::zero(); x.numel()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let oc = ci * p * p + (y % p) * p + xx % p;
                out[(oc * ho + y / p) * wo + xx / p] = x.data()[(ci * h + y) * w + xx];
            }
        }
    }
    Ok(Tensor::new(&[c * p * p, ho, wo], out)?)
}

pub fn unpatchify<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (cp, ho, wo) = match x.dims() {
        [c, h, w] => (*c, *h, *w),
        d => return Err(crate::Error::Input(format!("unpatchify needs [C, h, w], got {d:?}"))),
    };
    if p == 0 || cp % (p * p) != 0 {
        return Err(crate::Error::Input(format!("{cp} channels not divisible by {}", p * p)));
    }
    let c = cp / (p * p);
    let (h, w) = (ho * p, wo * p);
    let mut out = vec![T::zero(); x.numel()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let oc = ci * p * p + (y % p) * p + xx % p;
                out[(ci * h + y) * w + xx] = x.data()[(oc * ho + y / p) * wo + xx / p];
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// Space-to-depth on the graph: `[N, C, h, w]` → `[N, C·p², h/p, w/p]`.
pub fn space_to_depth<T: Element>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    if p == 1 {
        return Ok(x);
    }
    let d = g.dims(x).to_vec();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let r = g.reshape(x, &[n * c, h / p, p, w / p, p])?;
    let q = g.permute(r, &[0, 2, 4, 1, 3])?;
    Ok(g.reshape(q, &[n, c * p * p, h / p, w / p])?)
}
