//! Reverse-mode automatic differentiation on a linear (Wengert) tape.
//!
//! Every op appends one node holding its forward value; nodes are created in
//! topological order, so the backward sweep is a single reverse pass over the tape.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour switch for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddSuffix(a, b) | MulSuffix(a, b) | MatMul(a, b)
            | Bmm(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | MulConst(x, _) | TransposeLast2(x) | Reshape(x)
            | Gelu(x) | Tanh(x) | Sigmoid(x) | Abs(x) | Softmax(x) | AvgPool2(x)
            | GlobalAvgPool(x) | Sum(x) | Mean(x) => vec![*x],
            SliceLast { x, .. } => vec![*x],
            Concat(parts) => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Bce { p, .. } => vec![*p],
        }
    }
}

/// Ordered record of executed operations together with their values and adjoints.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient accumulator of `v`; `None` iff `v` does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Zeroes every accumulator and re-arms [`Tape::backward`].
    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().fill(0.0);
        }
        self.backward_done = false;
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.ops.push(op);
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.grads.push(grad);
        Var(self.ops.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.requires_grad[v.0]);
        debug_assert!(
            !inputs.iter().all(|v| self.values[v.0].all_finite()) || value.all_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        self.push_raw(op, value, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn check_suffix(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(dim_err(op, xs, bs));
        }
        Ok(self.value(b).numel())
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s (bias rows, per-position maps).
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("add_suffix", x, b)?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_exact_mut(inner) {
            for (o, &bb) in chunk.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddSuffix(x, b), v))
    }

    /// `x ⊙ w` where `w`'s shape is a trailing suffix of `x`'s.
    pub fn mul_suffix(&mut self, x: Var, w: Var) -> Result<Var> {
        let inner = self.check_suffix("mul_suffix", x, w)?;
        let wv = self.value(w).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_exact_mut(inner) {
            for (o, &ww) in chunk.iter_mut().zip(&wv) {
                *o *= ww;
            }
        }
        Ok(self.push(Op::MulSuffix(x, w), v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(Op::AddScalar(x), v)
    }

    /// Multiplies by a constant (non-differentiable) tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        if self.shape(x) != factor.shape() {
            return Err(dim_err("mul_const", self.shape(x), factor.shape()));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, b)| a * b)
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::MulConst(x, factor.data().to_vec()), v))
    }

    /// Matrix product `a · b` with `a: [.., m, k]` (leading axes flattened) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(dim_err("matmul", &ash, &bsh));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Batched product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(dim_err("bmm", &ash, &bsh));
        }
        let (bn, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; bn * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            kernels::gemm_acc(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let v = Tensor::new(vec![bn, m, n], out)?;
        Ok(self.push(Op::Bmm(a, b), v))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return Err(dim_err("transpose_last2", &sh, &[]));
        }
        let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (o, s) in out.chunks_exact_mut(m * n).zip(src.chunks_exact(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    o[j * m + i] = s[i * n + j];
                }
            }
        }
        let mut shape = sh.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::TransposeLast2(x), v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Concatenation along the last axis (⊕).
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let w = *sh.last().ok_or_else(|| dim_err("slice_last", &sh, &[]))?;
        if len == 0 || start + len > w {
            return Err(dim_err("slice_last", &sh, &[start, len]));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sh;
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::SliceLast { x, start }, v))
    }

    /// Exact GELU, `x·Φ(x)` with Φ computed through `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * kernels::norm_cdf(e));
        self.push(Op::Gelu(x), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), v)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let w = *sh.last().ok_or_else(|| dim_err("softmax_last", &sh, &[]))?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(w) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        Ok(self.push(Op::Softmax(x), v))
    }

    /// Standardises each last-axis slice (population variance) then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let w = *sh.last().ok_or_else(|| dim_err("layer_norm", &sh, &[]))?;
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(dim_err("layer_norm", &sh, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / w;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let xh = (row[j] - mean) * is;
                xhat[r * w + j] = xh;
                out[r * w + j] = xh * gv[j] + bv[j];
            }
        }
        let v = Tensor::new(sh, out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            v,
        ))
    }

    /// Inverted dropout: identity in eval mode, otherwise zero with probability `p`
    /// and scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(self.shape(x).to_vec(), mask)?;
        self.mul_const(x, &mask)
    }

    /// Same-padded 3D cross-correlation.
    /// `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]` with odd `k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] {
            return Err(dim_err("conv3d", &xs, &ws));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k {
            return Err(Error::Parameter(format!(
                "conv3d kernels must be cubic, got {ws:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv3d kernel size must be odd, got {k}"
            )));
        }
        if self.shape(b) != [ws[0]] {
            return Err(dim_err("conv3d bias", &ws, self.shape(b)));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            k,
        };
        let shape = vec![xs[0], ws[0], xs[2], xs[3], xs[4]];
        let mut out = vec![0.0; shape.iter().product()];
        kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        let v = Tensor::new(shape, out)?;
        Ok(self.push(Op::Conv3d { x, w, b, geom }, v))
    }

    /// 2× average downsampling over the three spatial axes of `[B, C, D, H, W]`.
    pub fn avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[2..].iter().any(|e| e % 2 != 0) {
            return Err(Error::Parameter(format!(
                "avg_pool3d needs [B, C, D, H, W] with even spatial extents, got {xs:?}"
            )));
        }
        let out = kernels::avg_pool2_forward(
            self.value(x).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            xs[4],
        );
        let v = Tensor::new(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2], out)?;
        Ok(self.push(Op::AvgPool2(x), v))
    }

    /// Mean over the spatial axes: `[B, C, D, H, W] -> [B, C]`.
    pub fn global_avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(dim_err("global_avg_pool3d", &xs, &[]));
        }
        let vol: usize = xs[2..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(vol)
            .map(|c| c.iter().sum::<f64>() / vol as f64)
            .collect();
        let v = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(x), v)
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to `[eps, 1-eps]`).
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        if self.value(p).numel() != labels.len() {
            return Err(dim_err("bce", self.shape(p), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label(bad));
        }
        let n = labels.len() as f64;
        let loss = -self
            .value(p)
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(eps, 1.0 - eps);
                y * q.ln() + (1.0 - y) * (1.0 - q).ln()
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Gradients accumulate with `+=`, so a value used twice receives both contributions.
    /// A second call needs [`Tape::reset_grads`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad[loss.0] {
            return Err(Error::Contract(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        self.backward_done = true;
        if let Some(g) = self.grads[loss.0].as_mut() {
            g.data_mut()[0] += 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let g = self.grads[i].take().expect("grad present iff requires_grad");
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let Tape {
            ops,
            values,
            requires_grad,
            grads,
            ..
        } = self;
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if requires_grad[v.0] {
                f(grads[v.0].as_mut().expect("grad present").data_mut());
            }
        };
        let val = |v: Var| values[v.0].data();
        let out = values[i].data();
        match &ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, gd, 1.0));
                acc(*b, &mut |gb| axpy(gb, gd, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, gd, 1.0));
                acc(*b, &mut |gb| axpy(gb, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((d, &gg), &o) in ga.iter_mut().zip(gd).zip(bv) {
                        *d += gg * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &gg), &o) in gb.iter_mut().zip(gd).zip(av) {
                        *d += gg * o;
                    }
                });
            }
            Op::AddSuffix(x, b) => {
                acc(*x, &mut |gx| axpy(gx, gd, 1.0));
                let inner = values[b.0].numel();
                acc(*b, &mut |gb| {
                    for chunk in gd.chunks_exact(inner) {
                        axpy(gb, chunk, 1.0);
                    }
                });
            }
            Op::MulSuffix(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let inner = wv.len();
                acc(*x, &mut |gx| {
                    for (gchunk, dchunk) in gd.chunks_exact(inner).zip(gx.chunks_exact_mut(inner)) {
                        for ((d, &gg), &ww) in dchunk.iter_mut().zip(gchunk).zip(wv) {
                            *d += gg * ww;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (gchunk, xchunk) in gd.chunks_exact(inner).zip(xv.chunks_exact(inner)) {
                        for ((d, &gg), &xx) in gw.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += gg * xx;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| axpy(gx, gd, *c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| axpy(gx, gd, 1.0)),
            Op::MulConst(x, m) => acc(*x, &mut |gx| {
                for ((d, &gg), &mm) in gx.iter_mut().zip(gd).zip(m) {
                    *d += gg * mm;
                }
            }),
            Op::MatMul(a, b) => {
                let bs = values[b.0].shape();
                let (k, n) = (bs[0], bs[1]);
                let m = values[a.0].numel() / k;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm_nt_acc(gd, bv, ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_tn_acc(av, gd, gb, m, k, n));
            }
            Op::Bmm(a, b) => {
                let (ash, bsh) = (values[a.0].shape(), values[b.0].shape());
                let (bn, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for t in 0..bn {
                        kernels::gemm_nt_acc(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..bn {
                        kernels::gemm_tn_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::TransposeLast2(x) => {
                let sh = values[x.0].shape();
                let (m, n) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_exact_mut(m * n).zip(gd.chunks_exact(m * n)) {
                        for i in 0..m {
                            for j in 0..n {
                                dst[i * n + j] += src[j * m + i];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *values[i].shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = *values[p.0].shape().last().unwrap();
                    acc(p, &mut |gp| {
                        for (dst, src) in gp.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            axpy(dst, &src[offset..offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w = *values[x.0].shape().last().unwrap();
                let len = *values[i].shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_exact_mut(w).zip(gd.chunks_exact(len)) {
                        axpy(&mut dst[*start..*start + len], src, 1.0);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, &gg), &e) in gx.iter_mut().zip(gd).zip(xv) {
                        *d += gg * (kernels::norm_cdf(e) + e * kernels::norm_pdf(e));
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((d, &gg), &y) in gx.iter_mut().zip(gd).zip(out) {
                    *d += gg * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((d, &gg), &y) in gx.iter_mut().zip(gd).zip(out) {
                    *d += gg * y * (1.0 - y);
                }
            }),
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, &gg), &e) in gx.iter_mut().zip(gd).zip(xv) {
                        *d += if e > 0.0 {
                            gg
                        } else if e < 0.0 {
                            -gg
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Softmax(x) => {
                let w = *values[i].shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for ((dst, grow), yrow) in gx
                        .chunks_exact_mut(w)
                        .zip(gd.chunks_exact(w))
                        .zip(out.chunks_exact(w))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, &gg), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let w = gv.len();
                acc(*gain, &mut |gg| {
                    for (grow, hrow) in gd.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                        for ((d, &a), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += a * h;
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in gd.chunks_exact(w) {
                        axpy(gb, grow, 1.0);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gh = vec![0.0; w];
                    for (r, ((dst, grow), hrow)) in gx
                        .chunks_exact_mut(w)
                        .zip(gd.chunks_exact(w))
                        .zip(xhat.chunks_exact(w))
                        .enumerate()
                    {
                        for j in 0..w {
                            gh[j] = grow[j] * gv[j];
                        }
                        let m1 = gh.iter().sum::<f64>() / w as f64;
                        let m2 = gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            dst[j] += inv_std[r] * (gh[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = requires_grad[x.0].then(|| vec![0.0; xv.len()]);
                let mut gw = requires_grad[w.0].then(|| vec![0.0; wv.len()]);
                let mut gb = requires_grad[b.0].then(|| vec![0.0; geom.cout]);
                kernels::conv3d_backward(
                    geom,
                    xv,
                    wv,
                    gd,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(t) = gx {
                    acc(*x, &mut |d| axpy(d, &t, 1.0));
                }
                if let Some(t) = gw {
                    acc(*w, &mut |d| axpy(d, &t, 1.0));
                }
                if let Some(t) = gb {
                    acc(*b, &mut |d| axpy(d, &t, 1.0));
                }
            }
            Op::AvgPool2(x) => {
                let xs = values[x.0].shape();
                let (planes, d, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
                acc(*x, &mut |gx| kernels::avg_pool2_backward(gd, gx, planes, d, h, w));
            }
            Op::GlobalAvgPool(x) => {
                let vol: usize = values[x.0].shape()[2..].iter().product();
                acc(*x, &mut |gx| {
                    for (dst, &gg) in gx.chunks_exact_mut(vol).zip(gd) {
                        let s = gg / vol as f64;
                        dst.iter_mut().for_each(|e| *e += s);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|e| *e += gd[0])),
            Op::Mean(x) => {
                let n = values[x.0].numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|e| *e += gd[0] / n));
            }
            Op::Bce { p, labels, eps } => {
                let pv = val(*p);
                let n = labels.len() as f64;
                acc(*p, &mut |gp| {
                    for ((d, &q), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        if q > *eps && q < 1.0 - *eps {
                            *d += -gd[0] * (y / q - (1.0 - y) / (1.0 - q)) / n;
                        }
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
