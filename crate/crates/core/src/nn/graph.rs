//! Recorded tape with reverse-mode accumulation over a fixed set of ops.
//!
//! A `Graph` lives for one forward pass. Every op appends a node holding its
//! output value; `backward` walks the tape in reverse and pushes gradients to
//! the op inputs, accumulating into the `ParamStore` for parameter leaves.

use std::collections::HashMap;

use super::linalg::gemm;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride and zero padding along the two spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        ConvGeom { stride, pad }
    }

    /// Stride 1 with padding that keeps the extents of an odd kernel.
    pub fn same(ka: usize, kb: usize) -> Self {
        ConvGeom {
            stride: (1, 1),
            pad: ((ka - 1) / 2, (kb - 1) / 2),
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    a: usize,
    b: usize,
    f: usize,
    ka: usize,
    kb: usize,
    sa: usize,
    sb: usize,
    pa: usize,
    pb: usize,
    oa: usize,
    ob: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c * self.ka * self.kb
    }

    fn p(&self) -> usize {
        self.oa * self.ob
    }

    /// Unfolds sample `x` (`[c, a, b]`) into `[c*ka*kb, oa*ob]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.p();
        for ci in 0..self.c {
            let plane = &x[ci * self.a * self.b..(ci + 1) * self.a * self.b];
            for i in 0..self.ka {
                for j in 0..self.kb {
                    let row = ((ci * self.ka + i) * self.kb + j) * p;
                    let dst = &mut col[row..row + p];
                    for oa in 0..self.oa {
                        let out = &mut dst[oa * self.ob..(oa + 1) * self.ob];
                        let ia = (oa * self.sa + i) as isize - self.pa as isize;
                        if ia < 0 || ia >= self.a as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[ia as usize * self.b..(ia as usize + 1) * self.b];
                        for (ob, o) in out.iter_mut().enumerate() {
                            let ib = (ob * self.sb + j) as isize - self.pb as isize;
                            *o = if ib < 0 || ib >= self.b as isize {
                                0.0
                            } else {
                                src[ib as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters `col` back onto `dx`.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.a * self.b..(ci + 1) * self.a * self.b];
            for i in 0..self.ka {
                for j in 0..self.kb {
                    let row = ((ci * self.ka + i) * self.kb + j) * p;
                    let src = &col[row..row + p];
                    for oa in 0..self.oa {
                        let ia = (oa * self.sa + i) as isize - self.pa as isize;
                        if ia < 0 || ia >= self.a as isize {
                            continue;
                        }
                        let dst = &mut plane[ia as usize * self.b..(ia as usize + 1) * self.b];
                        for ob in 0..self.ob {
                            let ib = (ob * self.sb + j) as isize - self.pb as isize;
                            if ib >= 0 && ib < self.b as isize {
                                dst[ib as usize] += src[oa * self.ob + ob];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        weight: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of every recorded node with respect to the backward root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is tracked (for sensitivity checks).
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Cross-correlation over `[n, c, a, b]` (or `[c, a, b]`) with kernel
    /// `[f, c, ka, kb]` and optional bias `[f]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batched, n, c, a, bb) = match xs[..] {
            [c, a, b] => (false, 1, c, a, b),
            [n, c, a, b] => (true, n, c, a, b),
            _ => return Err(Error::shape("conv2d", format!("input rank {:?}", xs))),
        };
        let [f, wc, ka, kb] = ws[..] else {
            return Err(Error::shape("conv2d", format!("kernel shape {ws:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        let oa = conv_out_len(a, ka, geom.stride.0, geom.pad.0);
        let ob = conv_out_len(bb, kb, geom.stride.1, geom.pad.1);
        let (Some(oa), Some(ob)) = (oa, ob) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ka}x{kb} does not fit input {a}x{bb} with {geom:?}"),
            ));
        };
        let out_shape = if batched {
            vec![n, f, oa, ob]
        } else {
            vec![f, oa, ob]
        };
        let dims = ConvDims {
            n,
            c,
            a,
            b: bb,
            f,
            ka,
            kb,
            sa: geom.stride.0,
            sb: geom.stride.1,
            pa: geom.pad.0,
            pb: geom.pad.1,
            oa,
            ob,
        };
        self.conv_raw(x, w, b, dims, out_shape)
    }

    /// 1D cross-correlation over `[n, c, l]` (or `[c, l]`) with kernel `[f, c, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batched, n, c, l) = match xs[..] {
            [c, l] => (false, 1, c, l),
            [n, c, l] => (true, n, c, l),
            _ => return Err(Error::shape("conv1d", format!("input rank {:?}", xs))),
        };
        let [f, wc, k] = ws[..] else {
            return Err(Error::shape("conv1d", format!("kernel shape {ws:?}")));
        };
        if wc != c {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        let Some(ol) = conv_out_len(l, k, stride, pad) else {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} does not fit length {l} (stride {stride}, pad {pad})"),
            ));
        };
        let out_shape = if batched { vec![n, f, ol] } else { vec![f, ol] };
        let dims = ConvDims {
            n,
            c,
            a: l,
            b: 1,
            f,
            ka: k,
            kb: 1,
            sa: stride,
            sb: 1,
            pa: pad,
            pb: 0,
            oa: ol,
            ob: 1,
        };
        self.conv_raw(x, w, b, dims, out_shape)
    }

    fn conv_raw(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.value(b).len() != dims.f {
                return Err(Error::shape(
                    "conv",
                    format!("bias has {} values for {} filters", self.value(b).len(), dims.f),
                ));
            }
        }
        let (k, p) = (dims.k(), dims.p());
        let mut out = vec![0.0; dims.n * dims.f * p];
        let mut col = vec![0.0; k * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_len = dims.c * dims.a * dims.b;
            for ni in 0..dims.n {
                dims.im2col(&xv[ni * in_len..(ni + 1) * in_len], &mut col);
                let dst = &mut out[ni * dims.f * p..(ni + 1) * dims.f * p];
                gemm(dims.f, k, p, wv, false, &col, false, dst, false);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (fi, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[fi]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Conv { x, w, b, dims }, rg))
    }

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m, k] x b^T` with `b` stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{br}x{bc}]{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Adds `b [d]` to every row of `x [.., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        if self.value(b).len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias {} vs width {d}", self.value(b).len()),
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    /// `x [1, d_in] . w [d_in, d_out] + b [d_out]`, also row-wise for `[t, d_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o += v);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = last_dim(&out);
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalizes each row of `x [.., d]`, then applies `gain` and `shift` (`[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let d = last_dim(self.value(x));
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return Err(Error::shape("layer_norm", format!("gain/shift vs width {d}")));
        }
        let xv = self.value(x);
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Mean over rows: `[t, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if t == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for row in src.chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), rg))
    }

    /// `weight * -log softmax(logits)[label]` as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, label: usize, weight: f64) -> Result<Var> {
        let lv = self.value(logits).data().to_vec();
        if label >= lv.len() {
            return Err(Error::InvalidLabel(label));
        }
        let mut probs = lv.clone();
        softmax_in_place(&mut probs);
        let loss = weight * (log_sum_exp(&lv) - lv[label]);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                label,
                weight,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `root`, seeded with `seed`. Parameter
    /// gradients are added to `store`.
    pub fn backward(&self, root: Var, seed: f64, store: &mut ParamStore) -> Result<Gradients> {
        let Some(node) = self.nodes.get(root.0) else {
            return Err(Error::GraphNotRecorded(root.0));
        };
        if node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![seed]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Conv { x, w, b, dims } => {
                let (k, p) = (dims.k(), dims.p());
                let in_len = dims.c * dims.a * dims.b;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut col = vec![0.0; k * p];
                let mut dcol = vec![0.0; if need_x { k * p } else { 0 }];
                let mut dw = vec![0.0; if need_w { dims.f * k } else { 0 }];
                let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
                for ni in 0..dims.n {
                    let gout = &g[ni * dims.f * p..(ni + 1) * dims.f * p];
                    if need_w {
                        dims.im2col(&xv[ni * in_len..(ni + 1) * in_len], &mut col);
                        gemm(dims.f, p, k, gout, false, &col, true, &mut dw, true);
                    }
                    if need_x {
                        gemm(k, dims.f, p, wv, true, gout, false, &mut dcol, false);
                        dims.col2im(&dcol, &mut dx[ni * in_len..(ni + 1) * in_len]);
                    }
                }
                if need_w {
                    self.send(grads, *w, |s| add_into(s, &dw));
                }
                if need_x {
                    self.send(grads, *x, |s| add_into(s, &dx));
                }
                if let Some(b) = b {
                    self.send(grads, *b, |s| {
                        for ni in 0..dims.n {
                            let gout = &g[ni * dims.f * p..(ni + 1) * dims.f * p];
                            for (fi, row) in gout.chunks(p).enumerate() {
                                s[fi] += row.iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().expect("matmul lhs");
                let n = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G . op(B)^T
                self.send(grads, *a, |s| gemm(m, n, k, g, false, bv, !*trans_b, s, true));
                self.send(grads, *b, |s| {
                    if *trans_b {
                        // B is [n, k]: dB = G^T . A
                        gemm(n, m, k, g, true, av, false, s, true)
                    } else {
                        gemm(k, m, n, av, true, g, false, s, true)
                    }
                });
            }
            Op::AddBias { x, b } => {
                let d = self.value(*b).len();
                self.send(grads, *x, |s| add_into(s, g));
                self.send(grads, *b, |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.send(grads, *a, |s| add_into(s, g));
                self.send(grads, *b, |s| add_into(s, g));
            }
            Op::Scale(x, f) => self.send(grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g)
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.send(grads, *x, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = last_dim(&node.value);
                self.send(grads, *x, |s| {
                    for ((s, g), y) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for j in 0..d {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.send(grads, *gain, |s| {
                    for (gr, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * h[j];
                        }
                    }
                });
                self.send(grads, *shift, |s| {
                    for gr in g.chunks(d) {
                        add_into(s, gr);
                    }
                });
                self.send(grads, *x, |s| {
                    let mut dh = vec![0.0; d];
                    for (r, ((s, gr), h)) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).shape()[*axis] * inner;
                    self.send(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut s[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => self.send(grads, *x, |s| add_into(s, g)),
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("transpose input");
                self.send(grads, *x, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::MeanRows(x) => {
                let (t, d) = self.value(*x).dims2().expect("mean_rows input");
                self.send(grads, *x, |s| {
                    for row in s.chunks_mut(d) {
                        for j in 0..d {
                            row[j] += g[j] / t as f64;
                        }
                    }
                })
            }
            Op::CrossEntropy {
                logits,
                label,
                weight,
                probs,
            } => self.send(grads, *logits, |s| {
                for (j, p) in probs.iter().enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    s[j] += g[0] * weight * (p - onehot);
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable softmax; subtracts the row maximum first.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
