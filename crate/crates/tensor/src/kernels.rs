//! Slice-level numeric kernels.
//!
//! Everything here works on raw row-major buffers so the graph layer can call
//! the same code for forward and backward passes. Kernels never allocate more
//! than the scratch they need and are deterministic for identical inputs.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::{Element, Tensor};

/// `c[m,n] += A[m,k] · b[k,n]` where `A[i,p] = a[i·rs + p·cs]`, computed in
/// 4×8 register tiles.
#[allow(clippy::too_many_arguments)]
fn gemm_tiled<T: Element>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + p * cs];
                    for l in 0..NR {
                        row[l] = row[l] + av * bp[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cr = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for l in 0..NR {
                    cr[l] = cr[l] + row[l];
                }
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                for p in 0..k {
                    let av = a[r * rs + p * cs];
                    for jj in j..n {
                        c[r * n + jj] = c[r * n + jj] + av * b[p * n + jj];
                    }
                }
            }
        }
        i += MR;
    }
    for r in i..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * rs + p * cs];
            if av == T::zero() {
                continue;
            }
            for (cj, &bj) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj = *cj + av * bj;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_tiled(a, k, 1, b, c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_tiled(a, 1, m, b, c, m, k, n);
}

#[inline]
fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut s = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        s = s + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + s
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if k < 32 && m > 1 {
        // short reductions vectorize better as row updates over a transposed b
        let mut bt = vec![T::zero(); k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        gemm_nn(a, &bt, c, m, k, n);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let v = dot(arow, &b[j * k..(j + 1) * k]);
            c[i * n + j] = c[i * n + j] + v;
        }
    }
}

/// Geometry of a 2D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Validates input `[N, C_in, H, W]` and kernel `[C_out, C_in, kh, kw]` dims.
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<(usize, Self)> {
        if input.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be rank 4, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(shape_err("conv2d", format!("kernel must be rank 4, got {kernel:?}")));
        }
        if kernel[1] != input[1] {
            return Err(TensorError::Axis {
                op: "conv2d",
                axis: 1,
                expected: kernel[1],
                got: input[1],
            });
        }
        if kernel[2].is_multiple_of(2) || kernel[3].is_multiple_of(2) {
            return Err(shape_err(
                "conv2d",
                format!("kernel extents must be odd, got {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        if input[2] + 2 * pad_h < kernel[2] {
            return Err(TensorError::Axis {
                op: "conv2d",
                axis: 2,
                expected: kernel[2],
                got: input[2] + 2 * pad_h,
            });
        }
        if input[3] + 2 * pad_w < kernel[3] {
            return Err(TensorError::Axis {
                op: "conv2d",
                axis: 3,
                expected: kernel[3],
                got: input[3] + 2 * pad_w,
            });
        }
        Ok((
            input[0],
            ConvGeom {
                c_in: input[1],
                h: input[2],
                w: input[3],
                c_out: kernel[0],
                kh: kernel[2],
                kw: kernel[3],
                stride,
                pad_h,
                pad_w,
            },
        ))
    }
}

/// Writes the patch matrix of one image into columns `off..off+p` of a
/// row-major buffer with row length `ld`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Images per chunk so the batched patch matrix stays near 4M elements.
fn conv_chunk(g: &ConvGeom, n: usize) -> usize {
    let per = g.patch_len() * g.out_h() * g.out_w();
    ((1usize << 22) / per.max(1)).clamp(1, n.max(1))
}

/// Batched convolution forward: `x [N,C_in,H,W]`, `k [C_out,C_in,kh,kw]`.
/// Images are processed in chunks as one `[C_out, kl] × [kl, nb·p]` product.
pub fn conv2d_forward<T: Element>(x: &[T], k: &[T], bias: Option<&[T]>, n: usize, g: &ConvGeom) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let kl = g.patch_len();
    let in_sz = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * g.c_out * p];
    let chunk = conv_chunk(g, n);
    let mut cols = vec![T::zero(); kl * chunk * p];
    let mut prod = vec![T::zero(); g.c_out * chunk * p];
    let mut b0 = 0;
    while b0 < n {
        let nb = chunk.min(n - b0);
        let ld = nb * p;
        for i in 0..nb {
            let b = b0 + i;
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols, ld, i * p);
        }
        let prod = &mut prod[..g.c_out * ld];
        prod.iter_mut().for_each(|v| *v = T::zero());
        gemm_nn(k, &cols[..kl * ld], prod, g.c_out, kl, ld);
        for i in 0..nb {
            let ob = &mut out[(b0 + i) * g.c_out * p..(b0 + i + 1) * g.c_out * p];
            for co in 0..g.c_out {
                let bv = bias.map_or(T::zero(), |bs| bs[co]);
                let src = &prod[co * ld + i * p..co * ld + (i + 1) * p];
                for (o, &v) in ob[co * p..(co + 1) * p].iter_mut().zip(src) {
                    *o = v + bv;
                }
            }
        }
        b0 += nb;
    }
    out
}

/// Accumulates gradients of a batched convolution into the optional sinks.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    k: &[T],
    dout: &[T],
    n: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let p = g.out_h() * g.out_w();
    let kl = g.patch_len();
    let in_sz = g.c_in * g.h * g.w;
    if let Some(dbias) = dbias {
        for b in 0..n {
            let db = &dout[b * g.c_out * p..(b + 1) * g.c_out * p];
            for (co, acc) in dbias.iter_mut().enumerate() {
                *acc = *acc + db[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    let chunk = conv_chunk(g, n);
    let mut cols = vec![T::zero(); if dk.is_some() { kl * chunk * p } else { 0 }];
    let mut dcols = vec![T::zero(); if dx.is_some() { kl * chunk * p } else { 0 }];
    let mut dmat = vec![T::zero(); g.c_out * chunk * p];
    let mut b0 = 0;
    while b0 < n {
        let nb = chunk.min(n - b0);
        let ld = nb * p;
        // dout of the chunk as [C_out, nb·p]
        for i in 0..nb {
            let db = &dout[(b0 + i) * g.c_out * p..(b0 + i + 1) * g.c_out * p];
            for co in 0..g.c_out {
                dmat[co * ld + i * p..co * ld + (i + 1) * p].copy_from_slice(&db[co * p..(co + 1) * p]);
            }
        }
        let dm = &dmat[..g.c_out * ld];
        if let Some(dk) = dk.as_deref_mut() {
            for i in 0..nb {
                let b = b0 + i;
                im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols, ld, i * p);
            }
            gemm_nt(dm, &cols[..kl * ld], dk, g.c_out, ld, kl);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dc = &mut dcols[..kl * ld];
            dc.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(k, dm, dc, kl, g.c_out, ld);
            for i in 0..nb {
                let b = b0 + i;
                col2im(dc, g, &mut dx[b * in_sz..(b + 1) * in_sz], ld, i * p);
            }
        }
        b0 += nb;
    }
}

/// Single-image convolution: `input [C_in,H,W]`, `kernel [C_out,C_in,kh,kw]`.
pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    if input.ndim() != 3 {
        return Err(shape_err("conv2d", format!("expected [C,H,W], got {:?}", input.dims())));
    }
    let mut dims4 = vec![1];
    dims4.extend_from_slice(input.dims());
    let (_, g) = ConvGeom::infer(&dims4, kernel.dims(), stride, padding, padding)?;
    let out = conv2d_forward(input.data(), kernel.data(), None, 1, &g);
    Tensor::new(&[g.c_out, g.out_h(), g.out_w()], out)
}

/// Row softmax over the last axis of a `[rows, n]` buffer.
pub fn softmax_rows<T: Element>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

pub fn softmax_rows_backward<T: Element>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let s: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + yv * (g - s);
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.dims()),
        ));
    }
    let last = x.ndim() - 1;
    if axis == last {
        let n = x.dims()[last];
        return Tensor::new(x.dims(), softmax_rows(x.data(), n));
    }
    let mut perm: Vec<usize> = (0..x.ndim()).collect();
    perm.swap(axis, last);
    let moved = permute(x, &perm);
    let n = moved.dims()[last];
    let sm = Tensor::new(moved.dims(), softmax_rows(moved.data(), n))?;
    Ok(permute(&sm, &perm))
}

/// Saved statistics of a group normalization forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[N, C, S]` with per-channel affine parameters.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, GroupNormStats<T>) {
    let cg = c / groups;
    let m = T::from_usize(cg * s).unwrap();
    let eps = T::from_f64_lossy(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let base = (b * c + gi * cg) * s;
            let seg = &x[base..base + cg * s];
            let mu = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / m;
            let r = T::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = base + ci * s;
                for j in 0..s {
                    out[off + j] = (x[off + j] - mu) * r * ga + be;
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    (out, GroupNormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    stats: &GroupNormStats<T>,
    dy: &[T],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let cg = c / groups;
    let m = T::from_usize(cg * s).unwrap();
    for b in 0..n {
        for gi in 0..groups {
            let idx = b * groups + gi;
            let (mu, r) = (stats.mean[idx], stats.rstd[idx]);
            let base = (b * c + gi * cg) * s;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let off = base + ci * s;
                let mut dg = T::zero();
                let mut db = T::zero();
                for j in 0..s {
                    let xhat = (x[off + j] - mu) * r;
                    let g = dy[off + j];
                    dg = dg + g * xhat;
                    db = db + g;
                    let dxhat = g * gamma[ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
                if let Some(dgamma) = dgamma.as_deref_mut() {
                    dgamma[ch] = dgamma[ch] + dg;
                }
                if let Some(dbeta) = dbeta.as_deref_mut() {
                    dbeta[ch] = dbeta[ch] + db;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mean_d = sum_dxhat / m;
                let mean_dx = sum_dxhat_xhat / m;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = base + ci * s;
                    for j in 0..s {
                        let xhat = (x[off + j] - mu) * r;
                        let dxhat = dy[off + j] * gamma[ch];
                        dx[off + j] = dx[off + j] + r * (dxhat - mean_d - xhat * mean_dx);
                    }
                }
            }
        }
    }
}

/// `softmax(Q Kᵀ / √d) V` for `Q [Nq,d]`, `K [Nk,d]`, `V [Nk,dv]`.
pub fn scaled_dot_attention<T: Element>(query: &Tensor<T>, key: &Tensor<T>, value: &Tensor<T>) -> Result<Tensor<T>> {
    if query.ndim() != 2 || key.ndim() != 2 || value.ndim() != 2 {
        return Err(shape_err("attention", "query, key and value must be rank 2"));
    }
    let (nq, d) = (query.dims()[0], query.dims()[1]);
    let nk = key.dims()[0];
    if key.dims()[1] != d {
        return Err(TensorError::Axis {
            op: "attention",
            axis: 1,
            expected: d,
            got: key.dims()[1],
        });
    }
    if value.dims()[0] != nk {
        return Err(TensorError::Axis {
            op: "attention",
            axis: 0,
            expected: nk,
            got: value.dims()[0],
        });
    }
    let dv = value.dims()[1];
    let mut scores = vec![T::zero(); nq * nk];
    gemm_nt(query.data(), key.data(), &mut scores, nq, d, nk);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    scores.iter_mut().for_each(|v| *v = *v * scale);
    let probs = softmax_rows(&scores, nk);
    let mut out = vec![T::zero(); nq * dv];
    gemm_nn(&probs, value.data(), &mut out, nq, nk, dv);
    Tensor::new(&[nq, dv], out)
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let dims = x.dims();
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = gather_strided(x.data(), &out_dims, &src_strides);
    Tensor::from_parts(out_dims, data)
}

/// Reads `src` through `strides` in the row-major order of `dims`.
pub(crate) fn gather_strided<T: Element>(src: &[T], dims: &[usize], strides: &[usize]) -> Vec<T> {
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let nd = dims.len();
    if nd == 0 {
        return vec![src[0]];
    }
    let last = dims[nd - 1];
    let ls = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..last {
            out.push(src[base + j * ls]);
        }
        // advance odometer over all but the last axis
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            base -= strides[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

/// Adds `src` (row-major in `dims`) into `dst` addressed through `strides`.
pub(crate) fn scatter_add_strided<T: Element>(src: &[T], dims: &[usize], strides: &[usize], dst: &mut [T]) {
    let nd = dims.len();
    let last = dims[nd - 1];
    let ls = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut pos = 0usize;
    loop {
        for j in 0..last {
            let d = &mut dst[base + j * ls];
            *d = *d + src[pos + j];
        }
        pos += last;
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            base -= strides[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides for reading a tensor of `dims` as if broadcast to `out`.
pub(crate) fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(dims);
    let off = out.len() - dims.len();
    (0..out.len())
        .map(|i| if i < off || dims[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Nearest-neighbour upsampling of the two trailing axes by `factor`.
pub fn upsample_nearest<T: Element>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let row = &plane[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize, f: usize, dx: &mut [T]) {
    let (ho, wo) = (h * f, w * f);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let d = &mut dx[p * h * w + (oy / f) * w + ox / f];
                *d = *d + dy[p * ho * wo + oy * wo + ox];
            }
        }
    }
}
