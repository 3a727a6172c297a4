//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! in evaluation order and only ever reference earlier nodes, so walking the
//! tape backwards is a reverse topological order and visits each node once.
//! Trainable parameters enter the tape through [`Graph::param`] and their
//! gradients come back keyed by [`ParamId`].

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, GroupNormStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        r: usize,
        c: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        s: usize,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<Option<usize>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Upsample { .. } => "upsample",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Silu(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Transpose { x, .. } | Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::Upsample { x, .. } => {
                vec![*x]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of an [`Graph::input`] or [`Graph::param`] leaf, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    /// Parameter gradients, summed over every use of the parameter.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        let needs_grad = match op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any recorded node produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() == tb.dims() {
            return ta.zip_map(tb, f);
        }
        let out = kernels::broadcast_dims(ta.dims(), tb.dims())
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {:?} with {:?}", ta.dims(), tb.dims())))?;
        let xa = kernels::gather_strided(ta.data(), &out, &kernels::broadcast_strides(ta.dims(), &out));
        let xb = kernels::gather_strided(tb.data(), &out, &kernels::broadcast_strides(tb.dims(), &out));
        Ok(Tensor::from_parts(
            out,
            xa.into_iter().zip(xb).map(|(x, y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|a| a + s);
        self.push(v, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        self.push(v, Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    /// `a [..., m, k] · b [..., k, n]`; `b` may also be a shared `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() < 2 || db.len() < 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be rank ≥ 2, got {da:?} and {db:?}"),
            ));
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (kb, n) = (db[db.len() - 2], db[db.len() - 1]);
        if k != kb {
            return Err(TensorError::Axis {
                op: "matmul",
                axis: db.len() - 2,
                expected: k,
                got: kb,
            });
        }
        let batch: usize = da[..da.len() - 2].iter().product();
        let shared_rhs = db.len() == 2;
        if !shared_rhs && da[..da.len() - 2] != db[..db.len() - 2] {
            return Err(shape_err("matmul", format!("batch dims differ: {da:?} vs {db:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                kernels::gemm_nn(va, vb, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::gemm_nn(
                        &va[i * m * k..(i + 1) * m * k],
                        &vb[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut dims = da[..da.len() - 2].to_vec();
        dims.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 {
            return Err(shape_err("transpose", "rank must be ≥ 2"));
        }
        let (r, c) = (d[d.len() - 2], d[d.len() - 1]);
        let batch: usize = d[..d.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..batch {
            let blk = &src[bi * r * c..(bi + 1) * r * c];
            for j in 0..c {
                for i in 0..r {
                    out.push(blk[i * c + j]);
                }
            }
        }
        let mut dims = d[..d.len() - 2].to_vec();
        dims.extend([c, r]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Transpose { x, batch, r, c }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.dims(x).len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of {nd} axes"),
            ));
        }
        let v = kernels::permute(self.value(x), perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.dims().last().unwrap();
        let v = Tensor::from_parts(t.dims().to_vec(), kernels::softmax_rows(t.data(), n));
        self.push(v, Op::Softmax(x))
    }

    /// Batched 2D convolution, `x [N,C,H,W]`, `w [C_out,C_in,kh,kw]`, optional `b [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: (usize, usize)) -> Result<Var> {
        let (n, geom) = ConvGeom::infer(self.dims(x), self.dims(w), stride, padding.0, padding.1)?;
        if let Some(b) = b {
            self.value(b).expect_dims("conv2d bias", &[geom.c_out])?;
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            &geom,
        );
        let dims = vec![n, geom.c_out, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::from_parts(dims, out), Op::Conv2d { x, w, b, n, geom }))
    }

    /// Group normalization of `x [N, C, ...]` with affine `gamma, beta [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 {
            return Err(shape_err("group_norm", "input must be rank ≥ 2"));
        }
        let (n, c) = (d[0], d[1]);
        let s: usize = d[2..].iter().product();
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        self.value(gamma).expect_dims("group_norm gamma", &[c])?;
        self.value(beta).expect_dims("group_norm beta", &[c])?;
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            s,
            groups,
            eps,
        );
        Ok(self.push(
            Tensor::from_parts(d, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                s,
                groups,
                stats,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::concat(&ts, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() < 2 || factor == 0 {
            return Err(shape_err("upsample", "need rank ≥ 2 and factor ≥ 1"));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        let planes = self.value(x).numel() / (h * w);
        let out = kernels::upsample_nearest(self.value(x).data(), planes, h, w, factor);
        let mut dims = d.clone();
        let nd = dims.len();
        dims[nd - 2] *= factor;
        dims[nd - 1] *= factor;
        Ok(self.push(Tensor::from_parts(dims, out), Op::Upsample { x, factor }))
    }

    /// Selects rows of `table [V, d]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let d = self.dims(table).to_vec();
        if d.len() != 2 || rows.is_empty() {
            return Err(shape_err("gather_rows", "table must be [V, d] and rows non-empty"));
        }
        let (v, w) = (d[0], d[1]);
        let src = self.value(table).data();
        let mut out = vec![T::zero(); rows.len() * w];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= v {
                    return Err(shape_err("gather_rows", format!("row {r} out of range for {v} rows")));
                }
                out[i * w..(i + 1) * w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), w], out),
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `x · w + b` over the last axis of `x`, with `w [in, out]` and `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// `softmax(Q Kᵀ/√d) V` on batched `[B, N, d]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.dims(q).last().unwrap();
        let kd = *self.dims(k).last().unwrap();
        if d != kd {
            return Err(TensorError::Axis {
                op: "attention",
                axis: self.dims(k).len() - 1,
                expected: d,
                got: kd,
            });
        }
        let kt = self.transpose(k)?;
        let s = self.matmul(q, kt)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt());
        let p = self.softmax(s);
        self.matmul(p, v)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(shape_err("backward", "graph references a later node (cycle)"));
                }
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.leaves.insert(i, Tensor::from_parts(node.value.dims().to_vec(), g));
                }
                Op::Param(id) => {
                    let t = Tensor::from_parts(node.value.dims().to_vec(), g);
                    out.leaves.insert(i, t.clone());
                    match out.params.iter_mut().find(|(p, _)| p == id) {
                        Some((_, acc)) => add_into(acc.data_mut(), t.data()),
                        None => out.params.push((*id, t)),
                    }
                }
                _ => self.backprop(i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn sink<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Sums a gradient of broadcast shape `out` back onto operand `v`.
    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], out: &[usize]) {
        let dims = self.dims(v).to_vec();
        let dst = self.sink(grads, v);
        if dims == out {
            add_into(dst, g);
        } else {
            kernels::scatter_add_strided(g, out, &kernels::broadcast_strides(&dims, out), dst);
        }
    }

    fn broadcast_value(&self, v: Var, out: &[usize]) -> Vec<T> {
        let t = self.value(v);
        if t.dims() == out {
            t.data().to_vec()
        } else {
            kernels::gather_strided(t.data(), out, &kernels::broadcast_strides(t.dims(), out))
        }
    }

    fn unary_backward(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], f: impl Fn(T, T) -> T) {
        let xs = self.value(x).data();
        let dst = self.sink(grads, x);
        for ((d, &a), &gv) in dst.iter_mut().zip(xs).zip(g) {
            *d = *d + f(a, gv);
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_dims = node.value.dims();
        match &node.op {
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        self.accumulate_broadcast(grads, v, g, out_dims);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate_broadcast(grads, *a, g, out_dims);
                }
                if self.needs(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.accumulate_broadcast(grads, *b, &neg, out_dims);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.broadcast_value(*b, out_dims);
                    let ga: Vec<T> = g.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate_broadcast(grads, *a, &ga, out_dims);
                }
                if self.needs(*b) {
                    let av = self.broadcast_value(*a, out_dims);
                    let gb: Vec<T> = g.iter().zip(&av).map(|(&x, &y)| x * y).collect();
                    self.accumulate_broadcast(grads, *b, &gb, out_dims);
                }
            }
            Op::Scale(x, s) => {
                let dst = self.sink(grads, *x);
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d = *d + gv * *s;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_into(self.sink(grads, *x), g),
            Op::Silu(x) => self.unary_backward(grads, *x, g, |a, gv| {
                let s = T::one() / (T::one() + (-a).exp());
                gv * s * (T::one() + a * (T::one() - s))
            }),
            Op::Relu(x) => self.unary_backward(grads, *x, g, |a, gv| if a > T::zero() { gv } else { T::zero() }),
            Op::Tanh(x) => {
                let y = node.value.data();
                let dst = self.sink(grads, *x);
                for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                    *d = *d + gv * (T::one() - yv * yv);
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let dst = self.sink(grads, *x);
                for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                    *d = *d + gv * yv;
                }
            }
            Op::Square(x) => {
                let two = T::one() + T::one();
                self.unary_backward(grads, *x, g, |a, gv| gv * two * a)
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let da = self.sink(grads, *a);
                    if *shared_rhs {
                        kernels::gemm_nt(g, &bv, da, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data().to_vec();
                    let db = self.sink(grads, *b);
                    if *shared_rhs {
                        kernels::gemm_tn(&av, g, db, k, batch * m, n);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_tn(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose { x, batch, r, c } => {
                let (r, c) = (*r, *c);
                let dst = self.sink(grads, *x);
                for bi in 0..*batch {
                    let gb = &g[bi * r * c..(bi + 1) * r * c];
                    let db = &mut dst[bi * r * c..(bi + 1) * r * c];
                    for j in 0..c {
                        for ii in 0..r {
                            db[ii * c + j] = db[ii * c + j] + gb[j * r + ii];
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let in_dims = self.dims(*x).to_vec();
                let in_strides = kernels::strides(&in_dims);
                let dst_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let dst = self.sink(grads, *x);
                kernels::scatter_add_strided(g, out_dims, &dst_strides, dst);
            }
            Op::Softmax(x) => {
                let n = *out_dims.last().unwrap();
                let y = node.value.data();
                let dst = self.sink(grads, *x);
                kernels::softmax_rows_backward(y, g, n, dst);
            }
            Op::Conv2d { x, w, b, n, geom } => {
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let mut dx = self.needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.needs(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(
                    &xv,
                    &wv,
                    g,
                    *n,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(self.sink(grads, *x), &dx);
                }
                if let Some(dw) = dw {
                    add_into(self.sink(grads, *w), &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    add_into(self.sink(grads, *b), &db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                s,
                groups,
                stats,
            } => {
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                let mut dx = self.needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dg = self.needs(*gamma).then(|| vec![T::zero(); *c]);
                let mut dbt = self.needs(*beta).then(|| vec![T::zero(); *c]);
                kernels::group_norm_backward(
                    &xv,
                    &gv,
                    stats,
                    g,
                    *n,
                    *c,
                    *s,
                    *groups,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbt.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(self.sink(grads, *x), &dx);
                }
                if let Some(dg) = dg {
                    add_into(self.sink(grads, *gamma), &dg);
                }
                if let Some(dbt) = dbt {
                    add_into(self.sink(grads, *beta), &dbt);
                }
            }
            Op::Sum(x) => {
                let dst = self.sink(grads, *x);
                dst.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::Mean(x) => {
                let dst = self.sink(grads, *x);
                let gv = g[0] / T::from_usize(dst.len()).unwrap();
                dst.iter_mut().for_each(|d| *d = *d + gv);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let total = out_dims[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let span = self.dims(v)[*axis] * inner;
                    if self.needs(v) {
                        let dst = self.sink(grads, v);
                        for o in 0..outer {
                            add_into(
                                &mut dst[o * span..(o + 1) * span],
                                &g[o * total + off..o * total + off + span],
                            );
                        }
                    }
                    off += span;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_dims = self.dims(*x).to_vec();
                let outer: usize = in_dims[..*axis].iter().product();
                let inner: usize = in_dims[axis + 1..].iter().product();
                let span_in = in_dims[*axis] * inner;
                let span_out = out_dims[*axis] * inner;
                let dst = self.sink(grads, *x);
                for o in 0..outer {
                    let base = o * span_in + start * inner;
                    add_into(&mut dst[base..base + span_out], &g[o * span_out..(o + 1) * span_out]);
                }
            }
            Op::Upsample { x, factor } => {
                let d = self.dims(*x).to_vec();
                let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
                let planes = self.value(*x).numel() / (h * w);
                let dst = self.sink(grads, *x);
                kernels::upsample_nearest_backward(g, planes, h, w, *factor, dst);
            }
            Op::GatherRows { table, rows } => {
                let w = self.dims(*table)[1];
                let dst = self.sink(grads, *table);
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = *r {
                        add_into(&mut dst[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::Constant | Op::Input | Op::Param(_) => unreachable!("leaves handled by caller"),
        }
    }
}
