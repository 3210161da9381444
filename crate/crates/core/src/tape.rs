//! Reverse-mode differentiation over a linear tape.
//!
//! Operations are appended in execution order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! Gradients of complex nodes use the convention `G = ∂L/∂re + i·∂L/∂im`.
//! With it, a holomorphic map `y = f(x)` has adjoint `G_x = conj(f'(x))·G_y`,
//! and a real input feeding a complex op receives `Re(G)`.

use std::collections::HashMap;
use std::ops::{AddAssign, Mul};

use num_complex::Complex64;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scan::{self, Mat2};
use crate::tensor::{DType, Storage, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    Recip,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Unary(Var, UnaryOp),
    MatMul(Var, Var),
    MakeComplex(Var, Var),
    Re(Var),
    Im(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Glu(Var, Var),
    MeanRows {
        x: Var,
        len: usize,
    },
    Sum(Var),
    ScanDiag {
        a: Var,
        b: Var,
    },
    ScanOsc {
        m: [Var; 4],
        drive: [Var; 2],
        states: Vec<[Complex64; 2]>,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn gemm<A, B, O>(a: &[A], b: &[B], m: usize, k: usize, n: usize) -> Vec<O>
where
    A: Copy + Mul<B, Output = O>,
    B: Copy,
    O: Copy + Zero + AddAssign,
{
    let mut out = vec![O::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Dense `[m,k] x [k,n]` product with real/complex promotion.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let shape = [m, n];
    match (a.storage(), b.storage()) {
        (Storage::Real(x), Storage::Real(y)) => Tensor::from_real(&shape, gemm(x, y, m, k, n)),
        (Storage::Real(x), Storage::Complex(y)) => {
            Tensor::from_complex(&shape, gemm(x, y, m, k, n))
        }
        (Storage::Complex(x), Storage::Real(y)) => {
            Tensor::from_complex(&shape, gemm(x, y, m, k, n))
        }
        (Storage::Complex(x), Storage::Complex(y)) => {
            Tensor::from_complex(&shape, gemm(x, y, m, k, n))
        }
    }
}

/// Conjugate transpose of a 2-D tensor.
fn adjoint(t: &Tensor) -> Tensor {
    let (r, cols) = (t.shape()[0], t.shape()[1]);
    match t.storage() {
        Storage::Real(v) => {
            let mut out = vec![0.0; v.len()];
            for i in 0..r {
                for j in 0..cols {
                    out[j * r + i] = v[i * cols + j];
                }
            }
            Tensor::from_real(&[cols, r], out).unwrap()
        }
        Storage::Complex(v) => {
            let mut out = vec![c(0.0); v.len()];
            for i in 0..r {
                for j in 0..cols {
                    out[j * r + i] = v[i * cols + j].conj();
                }
            }
            Tensor::from_complex(&[cols, r], out).unwrap()
        }
    }
}

fn zip_map(
    a: &Tensor,
    b: &Tensor,
    fr: impl Fn(f64, f64) -> f64,
    fc: impl Fn(Complex64, Complex64) -> Complex64,
) -> Tensor {
    match (a.storage(), b.storage()) {
        (Storage::Real(x), Storage::Real(y)) => Tensor::from_real(
            a.shape(),
            x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect(),
        )
        .unwrap(),
        _ => {
            let (x, y) = (a.to_complex(), b.to_complex());
            let data = x
                .complex()
                .iter()
                .zip(y.complex())
                .map(|(&p, &q)| fc(p, q))
                .collect();
            Tensor::from_complex(a.shape(), data).unwrap()
        }
    }
}

/// Apply `f(x[r, j], row[j])` over a `[R, C]` tensor and a `[C]` row.
fn row_map(
    x: &Tensor,
    row: &Tensor,
    fr: impl Fn(f64, f64) -> f64,
    fc: impl Fn(Complex64, Complex64) -> Complex64,
) -> Tensor {
    let cols = row.numel();
    match (x.storage(), row.storage()) {
        (Storage::Real(v), Storage::Real(r)) => Tensor::from_real(
            x.shape(),
            v.iter()
                .enumerate()
                .map(|(i, &p)| fr(p, r[i % cols]))
                .collect(),
        )
        .unwrap(),
        _ => {
            let (v, r) = (x.to_complex(), row.to_complex());
            let r = r.complex();
            Tensor::from_complex(
                x.shape(),
                v.complex()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| fc(p, r[i % cols]))
                    .collect(),
            )
            .unwrap()
        }
    }
}

/// Column sums of a `[R, C]` tensor (any leading extent), result `[C]`.
fn sum_rows(t: &Tensor, cols: usize) -> Tensor {
    match t.storage() {
        Storage::Real(v) => {
            let mut out = vec![0.0; cols];
            for (i, x) in v.iter().enumerate() {
                out[i % cols] += x;
            }
            Tensor::from_real(&[cols], out).unwrap()
        }
        Storage::Complex(v) => {
            let mut out = vec![c(0.0); cols];
            for (i, x) in v.iter().enumerate() {
                out[i % cols] += x;
            }
            Tensor::from_complex(&[cols], out).unwrap()
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return
    /// the same variable, so every use of a shared parameter accumulates
    /// into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    /// Same value, but gradients do not flow through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    fn check_row(&self, op: &str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.value(x).shape(), self.value(row).shape());
        if sx.is_empty() || sr.len() != 1 || sx[sx.len() - 1] != sr[0] {
            return Err(shape_err(op, sx, sr));
        }
        Ok(())
    }

    /// `x[.., j] + row[j]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", x, row)?;
        let v = row_map(self.value(x), self.value(row), |p, q| p + q, |p, q| p + q);
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    /// `x[.., j] * row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row)?;
        let v = row_map(self.value(x), self.value(row), |p, q| p * q, |p, q| p * q);
        Ok(self.push(v, Op::MulRow(x, row)))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut v = self.value(x).clone();
        match &mut v {
            t if !t.is_complex() => t
                .real_mut()
                .iter_mut()
                .for_each(|p| *p = scale * *p + shift),
            t => t
                .complex_mut()
                .iter_mut()
                .for_each(|p| *p = *p * scale + shift),
        }
        self.push(v, Op::Affine(x, scale))
    }

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let input = self.value(x);
        let v = match input.storage() {
            Storage::Real(data) => {
                let f: fn(f64) -> f64 = match op {
                    UnaryOp::Exp => f64::exp,
                    UnaryOp::Sin => f64::sin,
                    UnaryOp::Cos => f64::cos,
                    UnaryOp::Sqrt => f64::sqrt,
                    UnaryOp::Sigmoid => sigmoid,
                    UnaryOp::Tanh => f64::tanh,
                    UnaryOp::Relu => |p| p.max(0.0),
                    UnaryOp::Recip => f64::recip,
                };
                Tensor::from_real(input.shape(), data.iter().map(|&p| f(p)).collect())?
            }
            Storage::Complex(data) => {
                let f: fn(Complex64) -> Complex64 = match op {
                    UnaryOp::Exp => Complex64::exp,
                    UnaryOp::Recip => |z: Complex64| z.inv(),
                    other => {
                        return Err(Error::Contract(format!(
                            "{other:?} is only defined for real tensors"
                        )))
                    }
                };
                Tensor::from_complex(input.shape(), data.iter().map(|&p| f(p)).collect())?
            }
        };
        Ok(self.push(v, Op::Unary(x, op)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Tanh)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn make_complex(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape("make_complex", re, im)?;
        let (r, i) = (self.value(re), self.value(im));
        if r.is_complex() || i.is_complex() {
            return Err(Error::Contract("make_complex expects real parts".into()));
        }
        let data = r
            .real()
            .iter()
            .zip(i.real())
            .map(|(&x, &y)| Complex64::new(x, y))
            .collect();
        let v = Tensor::from_complex(r.shape(), data)?;
        Ok(self.push(v, Op::MakeComplex(re, im)))
    }

    pub fn re(&mut self, z: Var) -> Var {
        let v = self.value(z).re();
        self.push(v, Op::Re(z))
    }

    pub fn im(&mut self, z: Var) -> Var {
        let v = self.value(z).im();
        self.push(v, Op::Im(z))
    }

    /// Per-row layer normalization of a real `[R, C]` tensor.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let xv = self.value(x);
        if xv.is_complex() {
            return Err(Error::Contract("layer_norm expects a real tensor".into()));
        }
        let cols = *xv.shape().last().unwrap();
        let rows = xv.numel() / cols;
        let (g, b) = (self.value(gain).real(), self.value(bias).real());
        let mut normed = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.real()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let n = (row[j] - mean) * s;
                normed[r * cols + j] = n;
                out[r * cols + j] = n * g[j] + b[j];
            }
        }
        let v = Tensor::from_real(xv.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        ))
    }

    /// Gated linear unit `value · σ(gate)` on real tensors.
    pub fn glu(&mut self, value: Var, gate: Var) -> Result<Var> {
        self.same_shape("glu", value, gate)?;
        let (a, g) = (self.value(value), self.value(gate));
        if a.is_complex() || g.is_complex() {
            return Err(Error::Contract("glu expects real tensors".into()));
        }
        let data = a
            .real()
            .iter()
            .zip(g.real())
            .map(|(&p, &q)| p * sigmoid(q))
            .collect();
        let v = Tensor::from_real(a.shape(), data)?;
        Ok(self.push(v, Op::Glu(value, gate)))
    }

    /// Mean over the first `len` rows of a real `[R, C]` tensor, shaped `[1, C]`.
    pub fn mean_rows(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || xv.is_complex() {
            return Err(Error::Contract(
                "mean_rows expects a real 2-D tensor".into(),
            ));
        }
        if len == 0 || len > s[0] {
            return Err(Error::Contract(format!(
                "mean_rows over {len} of {} rows",
                s[0]
            )));
        }
        let cols = s[1];
        let mut out = vec![0.0; cols];
        for r in 0..len {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= len as f64);
        let v = Tensor::from_real(&[1, cols], out)?;
        Ok(self.push(v, Op::MeanRows { x, len }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = match self.value(x).storage() {
            Storage::Real(d) => Tensor::scalar(d.iter().sum()),
            Storage::Complex(d) => {
                Tensor::from_complex(&[], vec![d.iter().sum::<Complex64>()]).unwrap()
            }
        };
        self.push(v, Op::Sum(x))
    }

    /// Diagonal linear recurrence `x_t = a_t ⊙ x_{t-1} + b_t`, `x_0 = 0`.
    ///
    /// `b` is `[T, P]`; `a` is `[P]` (time-invariant) or `[T, P]`.
    pub fn scan_diag(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bs = bv.shape();
        if bs.len() != 2 {
            return Err(Error::Shape(format!(
                "scan drive must be [T, P], got {bs:?}"
            )));
        }
        let channels = bs[1];
        let v = if av.is_complex() || bv.is_complex() {
            let (ac, bc) = (av.to_complex(), bv.to_complex());
            let states = scan::scan_diag(ac.complex(), bc.complex(), channels)?;
            Tensor::from_complex(bs, states)?
        } else {
            let states = scan::scan_diag(av.real(), bv.real(), channels)?;
            Tensor::from_real(bs, states)?
        };
        Ok(self.push(v, Op::ScanDiag { a, b }))
    }

    /// Per-channel 2×2 recurrence on a `(velocity, position)` state pair.
    ///
    /// `m = [m00, m01, m10, m11]` are real `[P]` vectors forming the
    /// time-invariant matrix of each channel; `drive` holds the `[T, P]`
    /// forcing of each component. Returns the position component `[T, P]`.
    pub fn scan_oscillatory(&mut self, m: [Var; 4], drive: [Var; 2]) -> Result<Var> {
        let channels = self.value(m[0]).numel();
        for v in m {
            let t = self.value(v);
            if t.is_complex() || t.shape() != [channels] {
                return Err(Error::Shape(format!(
                    "oscillatory transition entries must be real [{channels}], got {:?}",
                    t.shape()
                )));
            }
        }
        self.same_shape("scan_oscillatory", drive[0], drive[1])?;
        let shape = self.value(drive[0]).shape().to_vec();
        if shape.len() != 2 || shape[1] != channels {
            return Err(Error::Shape(format!(
                "oscillatory drive must be [T, {channels}], got {shape:?}"
            )));
        }
        let mats: Vec<Mat2> = (0..channels)
            .map(|p| {
                let e = |i: usize| self.value(m[i]).real()[p];
                [[e(0), e(1)], [e(2), e(3)]]
            })
            .collect();
        let (d0, d1) = (
            self.value(drive[0]).to_complex(),
            self.value(drive[1]).to_complex(),
        );
        let b: Vec<[Complex64; 2]> = d0
            .complex()
            .iter()
            .zip(d1.complex())
            .map(|(&p, &q)| [p, q])
            .collect();
        let states = scan::scan_osc(&mats, &b)?;
        let out = Tensor::from_complex(&shape, states.iter().map(|s| s[1]).collect())?;
        Ok(self.push(out, Op::ScanOsc { m, drive, states }))
    }

    /// Softmax cross-entropy of a `C`-logit tensor against `label`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.is_complex() {
            return Err(Error::Contract("logits must be real".into()));
        }
        let z = lv.real();
        if label >= z.len() {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Backpropagate from a real scalar and collect parameter gradients.
    ///
    /// Every parameter registered on this tape gets an entry; parameters
    /// the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.is_complex() {
            return Err(Error::Contract(format!(
                "backward needs a real scalar loss, got shape {:?} ({:?})",
                lv.shape(),
                lv.dtype()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_real(lv.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        let mut any = false;
        for &id in &self.param_order {
            let v = self.params[&id];
            let value = self.value(v);
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(g) => {
                    any = true;
                    g
                }
                None => Tensor::zeros(value.shape(), value.dtype()),
            };
            out.insert(id, g);
        }
        if !any && !self.param_order.is_empty() {
            log::warn!("loss does not depend on any parameter; all gradients are zero");
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        let node = &self.nodes[target.0];
        if matches!(node.op, Op::Leaf | Op::Detach) {
            return;
        }
        let g = match (node.value.dtype(), g.dtype()) {
            (DType::Real, DType::Complex) => g.re(),
            (DType::Complex, DType::Real) => g.to_complex(),
            _ => g,
        };
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                self.accum(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, bv, |p, q| p * q, |p, q| p * q.conj());
                let gb = zip_map(g, av, |p, q| p * q, |p, q| p * q.conj());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let y = &node.value;
                let ga = zip_map(g, bv, |p, q| p / q, |p, q| p / q.conj());
                let ratio = zip_map(y, bv, |p, q| p / q, |p, q| p / q);
                let gb = zip_map(g, &ratio, |p, q| -p * q, |p, q| -p * q.conj());
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                self.accum(grads, *x, g.clone());
                let cols = self.value(*row).numel();
                self.accum(grads, *row, sum_rows(g, cols));
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let gx = row_map(g, rv, |p, q| p * q, |p, q| p * q.conj());
                let prod = zip_map(g, xv, |p, q| p * q, |p, q| p * q.conj());
                self.accum(grads, *x, gx);
                self.accum(grads, *row, sum_rows(&prod, rv.numel()));
            }
            Op::Affine(x, scale) => {
                let mut gx = g.clone();
                gx.scale(*scale);
                self.accum(grads, *x, gx);
            }
            Op::Unary(x, op) => {
                let xv = self.value(*x);
                let y = &node.value;
                let gx = match (xv.storage(), y.storage(), g.storage()) {
                    (Storage::Real(xs), Storage::Real(ys), Storage::Real(gs)) => {
                        let d: Vec<f64> = xs
                            .iter()
                            .zip(ys)
                            .zip(gs)
                            .map(|((&x, &y), &g)| {
                                g * match op {
                                    UnaryOp::Exp => y,
                                    UnaryOp::Sin => x.cos(),
                                    UnaryOp::Cos => -x.sin(),
                                    UnaryOp::Sqrt => 0.5 / y,
                                    UnaryOp::Sigmoid => y * (1.0 - y),
                                    UnaryOp::Tanh => 1.0 - y * y,
                                    UnaryOp::Relu => {
                                        if x > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    UnaryOp::Recip => -y * y,
                                }
                            })
                            .collect();
                        Tensor::from_real(xv.shape(), d)?
                    }
                    (_, Storage::Complex(ys), _) => {
                        let gc = g.to_complex();
                        let d: Vec<Complex64> = ys
                            .iter()
                            .zip(gc.complex())
                            .map(|(&y, &g)| {
                                let deriv = match op {
                                    UnaryOp::Exp => y,
                                    UnaryOp::Recip => -y * y,
                                    _ => unreachable!("rejected at construction"),
                                };
                                g * deriv.conj()
                            })
                            .collect();
                        Tensor::from_complex(xv.shape(), d)?
                    }
                    _ => unreachable!("unary ops preserve dtype"),
                };
                self.accum(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = matmul_values(g, &adjoint(bv))?;
                let gb = matmul_values(&adjoint(av), g)?;
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::MakeComplex(re, im) => {
                self.accum(grads, *re, g.re());
                self.accum(grads, *im, g.im());
            }
            Op::Re(z) => self.accum(grads, *z, g.to_complex()),
            Op::Im(z) => {
                let data = g.real().iter().map(|&p| Complex64::new(0.0, p)).collect();
                self.accum(grads, *z, Tensor::from_complex(g.shape(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gv = self.value(*gain).real();
                let cols = gv.len();
                let gs = g.real();
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; gs.len()];
                let mut dn = vec![0.0; cols];
                for (r, &rs) in rstd.iter().enumerate() {
                    let off = r * cols;
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for j in 0..cols {
                        let gj = gs[off + j];
                        dgain[j] += gj * normed[off + j];
                        dbias[j] += gj;
                        dn[j] = gj * gv[j];
                        mean_dn += dn[j];
                        mean_dn_n += dn[j] * normed[off + j];
                    }
                    mean_dn /= cols as f64;
                    mean_dn_n /= cols as f64;
                    for j in 0..cols {
                        dx[off + j] = rs * (dn[j] - mean_dn - normed[off + j] * mean_dn_n);
                    }
                }
                self.accum(grads, *x, Tensor::from_real(g.shape(), dx)?);
                self.accum(grads, *gain, Tensor::from_real(&[cols], dgain)?);
                self.accum(grads, *bias, Tensor::from_real(&[cols], dbias)?);
            }
            Op::Glu(value, gate) => {
                let (a, q) = (self.value(*value).real(), self.value(*gate).real());
                let gs = g.real();
                let mut da = vec![0.0; gs.len()];
                let mut dq = vec![0.0; gs.len()];
                for k in 0..gs.len() {
                    let s = sigmoid(q[k]);
                    da[k] = gs[k] * s;
                    dq[k] = gs[k] * a[k] * s * (1.0 - s);
                }
                self.accum(grads, *value, Tensor::from_real(g.shape(), da)?);
                self.accum(grads, *gate, Tensor::from_real(g.shape(), dq)?);
            }
            Op::MeanRows { x, len } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let gs = g.real();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*len {
                    for j in 0..cols {
                        dx[r * cols + j] = gs[j] / *len as f64;
                    }
                }
                self.accum(grads, *x, Tensor::from_real(xv.shape(), dx)?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let gx = match g.storage() {
                    Storage::Real(s) => Tensor::from_real(xv.shape(), vec![s[0]; xv.numel()])?,
                    Storage::Complex(s) => {
                        Tensor::from_complex(xv.shape(), vec![s[0]; xv.numel()])?
                    }
                };
                self.accum(grads, *x, gx);
            }
            Op::ScanDiag { a, b } => self.backprop_scan_diag(*a, *b, &node.value, g, grads)?,
            Op::ScanOsc { m, drive, states } => {
                self.backprop_scan_osc(m, drive, states, g, grads)?
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                let s = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                d[*label] -= s;
                let shape = self.value(*logits).shape().to_vec();
                self.accum(grads, *logits, Tensor::from_real(&shape, d)?);
            }
        }
        Ok(())
    }

    fn backprop_scan_diag(
        &self,
        a: Var,
        b: Var,
        states: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let av = self.value(a);
        let shape = states.shape();
        let (steps, channels) = (shape[0], shape[1]);
        let broadcast = av.numel() == channels;
        let coef = |t: usize, p: usize| if broadcast { p } else { t * channels + p };

        // Adjoint recurrence λ_t = G_t + conj(a_{t+1}) λ_{t+1}, run as a
        // forward scan over the reversed sequence.
        let rev = |t: usize| steps - 1 - t;
        if states.is_complex() {
            let ac = av.to_complex();
            let ac = ac.complex();
            let gc = g.to_complex();
            let gc = gc.complex();
            let mut ra = vec![c(0.0); steps * channels];
            let mut rb = vec![c(0.0); steps * channels];
            for s in 0..steps {
                let t = rev(s);
                for p in 0..channels {
                    if t + 1 < steps {
                        ra[s * channels + p] = ac[coef(t + 1, p)].conj();
                    }
                    rb[s * channels + p] = gc[t * channels + p];
                }
            }
            let lam_rev = scan::scan_diag(&ra, &rb, channels)?;
            let x = states.complex();
            let mut gb = vec![c(0.0); steps * channels];
            let mut ga = vec![c(0.0); av.numel()];
            for t in 0..steps {
                for p in 0..channels {
                    let lam = lam_rev[rev(t) * channels + p];
                    gb[t * channels + p] = lam;
                    if t > 0 {
                        ga[coef(t, p)] += x[(t - 1) * channels + p].conj() * lam;
                    }
                }
            }
            self.accum(grads, b, Tensor::from_complex(shape, gb)?);
            self.accum(grads, a, Tensor::from_complex(av.shape(), ga)?);
        } else {
            let ar = av.real();
            let gr = g.real();
            let mut ra = vec![0.0; steps * channels];
            let mut rb = vec![0.0; steps * channels];
            for s in 0..steps {
                let t = rev(s);
                for p in 0..channels {
                    if t + 1 < steps {
                        ra[s * channels + p] = ar[coef(t + 1, p)];
                    }
                    rb[s * channels + p] = gr[t * channels + p];
                }
            }
            let lam_rev = scan::scan_diag(&ra, &rb, channels)?;
            let x = states.real();
            let mut gb = vec![0.0; steps * channels];
            let mut ga = vec![0.0; av.numel()];
            for t in 0..steps {
                for p in 0..channels {
                    let lam = lam_rev[rev(t) * channels + p];
                    gb[t * channels + p] = lam;
                    if t > 0 {
                        ga[coef(t, p)] += x[(t - 1) * channels + p] * lam;
                    }
                }
            }
            self.accum(grads, b, Tensor::from_real(shape, gb)?);
            self.accum(grads, a, Tensor::from_real(av.shape(), ga)?);
        }
        Ok(())
    }

    fn backprop_scan_osc(
        &self,
        m: &[Var; 4],
        drive: &[Var; 2],
        states: &[[Complex64; 2]],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let channels = self.value(m[0]).numel();
        let steps = states.len() / channels;
        let mats_t: Vec<Mat2> = (0..channels)
            .map(|p| {
                let e = |i: usize| self.value(m[i]).real()[p];
                scan::mat2_transpose(&[[e(0), e(1)], [e(2), e(3)]])
            })
            .collect();
        let gc = g.to_complex();
        let gc = gc.complex();
        let zero = c(0.0);
        let mut rb = vec![[zero; 2]; steps * channels];
        for s in 0..steps {
            let t = steps - 1 - s;
            for p in 0..channels {
                rb[s * channels + p] = [zero, gc[t * channels + p]];
            }
        }
        let lam_rev = scan::scan_osc(&mats_t, &rb)?;

        let mut g_drive = [vec![zero; steps * channels], vec![zero; steps * channels]];
        let mut g_m = [
            vec![0.0; channels],
            vec![0.0; channels],
            vec![0.0; channels],
            vec![0.0; channels],
        ];
        for t in 0..steps {
            for p in 0..channels {
                let lam = lam_rev[(steps - 1 - t) * channels + p];
                g_drive[0][t * channels + p] = lam[0];
                g_drive[1][t * channels + p] = lam[1];
                if t > 0 {
                    let prev = states[(t - 1) * channels + p];
                    for i in 0..2 {
                        for j in 0..2 {
                            g_m[2 * i + j][p] += (lam[i] * prev[j].conj()).re;
                        }
                    }
                }
            }
        }
        let shape = [steps, channels];
        let [d0, d1] = g_drive;
        self.accum(grads, drive[0], Tensor::from_complex(&shape, d0)?);
        self.accum(grads, drive[1], Tensor::from_complex(&shape, d1)?);
        for (var, gm) in m.iter().zip(g_m) {
            self.accum(grads, *var, Tensor::from_real(&[channels], gm)?);
        }
        Ok(())
    }
}
