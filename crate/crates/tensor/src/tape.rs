//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Tape::backward`] walks the record in reverse and
//! returns a [`Gradients`] table for every node that requires a gradient.
//! A tape belongs to one thread and one forward/backward pass; tensors it
//! produces can be moved anywhere.

use crate::error::{check_shape, Result, TensorError};
use crate::kernels::{col2im, gemm, im2col, sigmoid, ConvGeom, View};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ExpandChannels(Var),
    MeanSpatial(Var),
    EmbedMean {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::InvalidArgument(format!(
            "{op}: expected a 4-d tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(TensorError::InvalidArgument(format!(
            "{op}: expected a 2-d tensor, got {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every dense and convolution op recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient when reachable from the loss.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_shape(name, ta.shape(), tb.shape())?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = dims2("linear", self.value(x))?;
        let (o, wi) = dims2("linear", self.value(w))?;
        check_shape("linear", &[o, i], &[o, wi])?;
        if let Some(b) = b {
            check_shape("linear bias", &[o], self.value(b).shape())?;
        }
        let mut out = vec![0.0f32; n * o];
        gemm(
            n,
            i,
            o,
            View::rows(self.value(x).data(), i),
            View::t(self.value(w).data(), i),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        self.macs += (n * i * o) as u64;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, o], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// 2-d convolution of `x [n, cin, h, w]` with `w [cout, cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = dims4("conv2d", self.value(x))?;
        let (cout, wcin, k, k2) = dims4("conv2d", self.value(w))?;
        if wcin != cin || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, k, k],
                got: self.value(w).shape().to_vec(),
            });
        }
        if let Some(b) = b {
            check_shape("conv2d bias", &[cout], self.value(b).shape())?;
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad).ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"
            ))
        })?;
        let (kk, p) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0f32; kk * p];
        let mut out = vec![0.0f32; n * cout * p];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for s in 0..n {
            im2col(
                &xs[s * cin * h * wd..(s + 1) * cin * h * wd],
                &geom,
                &mut cols,
            );
            gemm(
                cout,
                kk,
                p,
                View::rows(ws, kk),
                View::rows(&cols, p),
                0.0,
                &mut out[s * cout * p..(s + 1) * cout * p],
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for plane in out.chunks_mut(p).enumerate() {
                let bb = bias[plane.0 % cout];
                plane.1.iter_mut().for_each(|v| *v += bb);
            }
        }
        self.macs += (n * cout * kk * p) as u64;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Feature-wise affine modulation: `x * (1 + scale[n, c]) + shift[n, c]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("film", self.value(x))?;
        check_shape("film scale", &[n, c], self.value(scale).shape())?;
        check_shape("film shift", &[n, c], self.value(shift).shape())?;
        let hw = h * w;
        let xs = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = Vec::with_capacity(xs.len());
        for (plane, chunk) in xs.chunks(hw).enumerate() {
            let (g, b) = (1.0 + sc[plane], sh[plane]);
            out.extend(chunk.iter().map(|&v| v * g + b));
        }
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Film { x, scale, shift },
            rg,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample2x", self.value(x))?;
        let xs = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * h2 * w2];
        for (plane, src) in xs.chunks(h * w).enumerate() {
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h2, w2], out),
            Op::Upsample2x(x),
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4("concat_channels", self.value(a))?;
        let (nb, cb, hb, wb) = dims4("concat_channels", self.value(b))?;
        check_shape("concat_channels", &[n, h, w], &[nb, hb, wb])?;
        let (sa, sb) = (ca * h * w, cb * h * w);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&da[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&db[s * sb..(s + 1) * sb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, ca + cb, h, w], out),
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    /// Broadcast a single-channel `[n, 1, h, w]` field over `channels`.
    pub fn expand_channels(&mut self, m: Var, channels: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("expand_channels", self.value(m))?;
        if c != 1 || channels == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "expand_channels: need one input channel and a positive target, got {c} -> {channels}"
            )));
        }
        let hw = h * w;
        let ms = self.value(m).data();
        let mut out = Vec::with_capacity(n * channels * hw);
        for s in 0..n {
            for _ in 0..channels {
                out.extend_from_slice(&ms[s * hw..(s + 1) * hw]);
            }
        }
        let rg = self.rg(&[m]);
        Ok(self.push(
            Tensor::from_parts(vec![n, channels, h, w], out),
            Op::ExpandChannels(m),
            rg,
        ))
    }

    /// Global average pool: `[n, c, h, w] -> [n, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("mean_spatial", self.value(x))?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::MeanSpatial(x), rg))
    }

    /// Mean of embedding rows per sample. Empty id lists give a zero row.
    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let (vocab, dim) = dims2("embed_mean", self.value(table))?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument(
                "embed_mean: empty batch".into(),
            ));
        }
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= vocab) {
            return Err(TensorError::InvalidArgument(format!(
                "embed_mean: id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let tab = self.value(table).data();
        let mut out = vec![0.0f32; ids.len() * dim];
        for (row, seq) in out.chunks_mut(dim).zip(&ids) {
            if seq.is_empty() {
                continue;
            }
            let inv = 1.0 / seq.len() as f32;
            for &id in seq {
                for (o, t) in row.iter_mut().zip(&tab[id * dim..(id + 1) * dim]) {
                    *o += t * inv;
                }
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::EmbedMean { table, ids },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared error over all elements (accumulated in f64).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_shape("mse", ta.shape(), tb.shape())?;
        let acc: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let v = (acc / ta.numel() as f64) as f32;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |buf| add_into(buf, g));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |buf| add_into(buf, g));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |buf| add_into(buf, g));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &gi)| *o -= gi)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |buf| {
                        for ((o, &gi), &y) in buf.iter_mut().zip(g).zip(vb) {
                            *o += gi * y;
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |buf| {
                        for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                            *o += gi * x;
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, *a, g.len(), |buf| add_into(buf, g));
            }
            Op::MulScalar(a, s) => {
                accumulate(grads, *a, g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * s)
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xi);
                        *o += gi * s * (1.0 + xi * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.len(), |buf| {
                    for ((o, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    accumulate(grads, *x, n * i, |buf| {
                        gemm(n, o, i, View::rows(g, o), View::rows(wv, i), 1.0, buf)
                    });
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    accumulate(grads, *w, o * i, |buf| {
                        gemm(o, n, i, View::t(g, o), View::rows(xv, i), 1.0, buf)
                    });
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, o, |buf| {
                        for row in g.chunks(o) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::Film { x, scale, shift } => {
                let hw = {
                    let s = self.value(*x).shape();
                    s[2] * s[3]
                };
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let sc = self.value(*scale).data();
                    accumulate(grads, *x, g.len(), |buf| {
                        for (plane, (o, gi)) in buf.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                            let f = 1.0 + sc[plane];
                            o.iter_mut().zip(gi).for_each(|(o, &gv)| *o += gv * f);
                        }
                    });
                }
                let planes = g.len() / hw;
                if self.wants(*scale) {
                    accumulate(grads, *scale, planes, |buf| {
                        for (p, o) in buf.iter_mut().enumerate() {
                            let s: f32 = g[p * hw..(p + 1) * hw]
                                .iter()
                                .zip(&xv[p * hw..(p + 1) * hw])
                                .map(|(a, b)| a * b)
                                .sum();
                            *o += s;
                        }
                    });
                }
                if self.wants(*shift) {
                    accumulate(grads, *shift, planes, |buf| {
                        for (p, o) in buf.iter_mut().enumerate() {
                            *o += g[p * hw..(p + 1) * hw].iter().sum::<f32>();
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (h2, w2) = (2 * h, 2 * w);
                accumulate(grads, *x, self.value(*x).numel(), |buf| {
                    for (dst, src) in buf.chunks_mut(h * w).zip(g.chunks(h2 * w2)) {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let n = node.value.shape()[0];
                let (sa, sb) = (self.value(*a).numel() / n, self.value(*b).numel() / n);
                if self.wants(*a) {
                    accumulate(grads, *a, n * sa, |buf| {
                        for s in 0..n {
                            add_into(
                                &mut buf[s * sa..(s + 1) * sa],
                                &g[s * (sa + sb)..s * (sa + sb) + sa],
                            );
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, n * sb, |buf| {
                        for s in 0..n {
                            add_into(
                                &mut buf[s * sb..(s + 1) * sb],
                                &g[s * (sa + sb) + sa..(s + 1) * (sa + sb)],
                            );
                        }
                    });
                }
            }
            Op::ExpandChannels(m) => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                accumulate(grads, *m, n * hw, |buf| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            add_into(&mut buf[s * hw..(s + 1) * hw], &g[off..off + hw]);
                        }
                    }
                });
            }
            Op::MeanSpatial(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                accumulate(grads, *x, self.value(*x).numel(), |buf| {
                    for (plane, o) in buf.chunks_mut(hw).enumerate() {
                        let gv = g[plane] * inv;
                        o.iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::EmbedMean { table, ids } => {
                let dim = self.value(*table).shape()[1];
                accumulate(grads, *table, self.value(*table).numel(), |buf| {
                    for (row, seq) in g.chunks(dim).zip(ids) {
                        if seq.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / seq.len() as f32;
                        for &id in seq {
                            for (o, &gv) in buf[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                                *o += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, n, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g[0] / n as f32;
                accumulate(grads, *a, n, |buf| buf.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / va.len() as f32;
                if self.wants(*a) {
                    accumulate(grads, *a, va.len(), |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                            *o += scale * (x - y);
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, va.len(), |buf| {
                        for ((o, &x), &y) in buf.iter_mut().zip(va).zip(vb) {
                            *o -= scale * (x - y);
                        }
                    });
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let n = self.value(x).shape()[0];
        let cout = self.value(w).shape()[0];
        let (kk, p) = (geom.patch_len(), geom.out_len());
        let in_len = geom.cin * geom.h * geom.w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut cols = vec![0.0f32; kk * p];
        let mut dw = if want_w {
            vec![0.0f32; cout * kk]
        } else {
            Vec::new()
        };
        let mut dx = if want_x {
            vec![0.0f32; n * in_len]
        } else {
            Vec::new()
        };
        for s in 0..n {
            let gs = &g[s * cout * p..(s + 1) * cout * p];
            if want_w {
                im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut cols);
                gemm(
                    cout,
                    p,
                    kk,
                    View::rows(gs, p),
                    View::t(&cols, p),
                    1.0,
                    &mut dw,
                );
            }
            if want_x {
                gemm(
                    kk,
                    cout,
                    p,
                    View::t(wv, kk),
                    View::rows(gs, p),
                    0.0,
                    &mut cols,
                );
                col2im(&cols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        if want_w {
            accumulate(grads, w, dw.len(), |buf| add_into(buf, &dw));
        }
        if want_x {
            accumulate(grads, x, dx.len(), |buf| add_into(buf, &dx));
        }
        if let Some(b) = b.filter(|b| self.wants(*b)) {
            accumulate(grads, b, cout, |buf| {
                for (plane, chunk) in g.chunks(p).enumerate() {
                    buf[plane % cout] += chunk.iter().sum::<f32>();
                }
            });
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, len: usize, f: impl FnOnce(&mut Vec<f32>)) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 3, 4], 0.7));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3, 4]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.mul_scalar(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unreachable_params_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[3]));
        let c = tape.constant(Tensor::ones(&[3]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.add(x, x).unwrap();
        let b = tape.mul(a, x).unwrap(); // 2x^2
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn conv_counts_macs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 8, 8]));
        let w = tape.param(Tensor::ones(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
        assert_eq!(tape.macs(), (2 * 4 * 27 * 16) as u64);
    }
}
