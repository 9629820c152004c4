//! Reverse-mode tape. Every op appends a node holding its value; `backward`
//! walks the nodes in reverse and pushes gradients to the inputs of each op.
//!
//! Batched activations use `[batch, time, channels]` row-major layout.

use std::rc::Rc;

use crate::attention::{self, AttnGeom, AttnMask};
use crate::conv::{self, Conv1dSpec, ConvGeom};
use crate::error::{Result, TensorError};
use crate::norm::{self, NormCache, NormGeom, NormMode};
use crate::real::Real;
use crate::tensor::{check_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Bce,
    Mse,
}

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, bias: Option<Var>, rows: usize, din: usize, dout: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Conv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, geom: NormGeom, cache: NormCache<T> },
    Attn { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Loss { pred: Var, kind: LossKind, target: Rc<[T]>, mask: Rc<[bool]>, count: usize },
    PairAdd { a: Var, c: Var, batch: usize, m: usize, n: usize, h: usize },
    AddRows { x: Var, u: Var, batch: usize, rows: usize, h: usize },
    AddTime { x: Var, p: Var, batch: usize, time: usize, c: usize },
    AddBias { x: Var, bias: Var, c: usize },
    Reduce { x: Var, lengths: Rc<[usize]>, mean: bool, batch: usize, m: usize, r: usize },
    Concat { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    Reshape(Var),
    WeightedSum { x: Var, weights: Rc<[T]> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    /// Whether any trainable leaf feeds this node.
    tracked: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated on push")
    }

    /// Attention weights `[batch, heads, rows, keys]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attn { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap()
    }

    /// Adds a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        check_shape("constant", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        check_shape("variable", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::config("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// `x[..., din] @ w[din, dout] + bias[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let din = self.last_dim(x);
        if sw.len() != 2 || sw[0] != din {
            return Err(TensorError::config(
                "linear",
                format!("input width {din} does not match weight {sw:?}"),
            ));
        }
        let dout = sw[1];
        if let Some(bv) = bias {
            if self.shape(bv) != [dout] {
                return Err(TensorError::config("linear", format!("bias must be [{dout}]")));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(bv) = bias {
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(self.value(bv));
            }
        }
        T::gemm(rows, din, dout, self.value(x), false, self.value(w), false, &mut out, true);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = dout;
        let tracked = self.tracked(&[x, w]) || bias.is_some_and(|b| self.tracked(&[b]));
        Ok(self.push(shape, out, Op::Linear { x, w, bias, rows, din, dout }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::config(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, node, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), tracked)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Relu => |v: T| v.max(T::zero()),
            Activation::Tanh => |v: T| v.tanh(),
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Act(x, kind), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    /// Convolution over `x[batch, time, in_channels]` with weights
    /// `[out, in, kernel]`. With `lengths`, inputs past each sample's length
    /// read as zero.
    pub fn conv1d(
        &mut self,
        x: Var,
        spec: &Conv1dSpec,
        w: Var,
        bias: Option<Var>,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        if spec.kernel_size == 0 || spec.dilation == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(TensorError::config("conv1d", format!("degenerate spec {spec:?}")));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(TensorError::config(
                "conv1d",
                format!("weights {:?} do not match spec {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [spec.out_channels] {
                return Err(TensorError::config("conv1d", format!("bias must be [{}]", spec.out_channels)));
            }
        }
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[2] != spec.in_channels {
            return Err(TensorError::config(
                "conv1d",
                format!("input {sx:?} is not [batch, time, {}]", spec.in_channels),
            ));
        }
        let (batch, time) = (sx[0], sx[1]);
        if time == 0 {
            return Err(TensorError::EmptyInput { op: "conv1d" });
        }
        if let Some(l) = &lengths {
            if l.len() != batch {
                return Err(TensorError::config("conv1d", "one length per sample required"));
            }
        }
        let geom = ConvGeom {
            batch,
            time,
            spec: *spec,
            lengths,
        };
        let out = conv::forward(&geom, self.value(x), self.value(w), bias.map(|b| self.value(b)));
        let tracked = self.tracked(&[x, w]) || bias.is_some_and(|b| self.tracked(&[b]));
        Ok(self.push(vec![batch, time, spec.out_channels], out, Op::Conv { x, w, bias, geom }, tracked))
    }

    /// Instance norm of `x[batch, time, channels]` with affine `gamma`/`beta`.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: NormMode,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::config("instance_norm", format!("input {sx:?} is not 3-d")));
        }
        let (batch, time, channels) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(TensorError::config("instance_norm", format!("gamma/beta must be [{channels}]")));
        }
        if let Some(l) = &lengths {
            if l.len() != batch {
                return Err(TensorError::config("instance_norm", "one length per sample required"));
            }
        }
        let geom = NormGeom {
            batch,
            time,
            channels,
            mode,
            lengths,
        };
        let (out, cache) = norm::forward(&geom, self.value(x), self.value(gamma), self.value(beta), eps);
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(sx, out, Op::Norm { x, gamma, beta, geom, cache }, tracked))
    }

    /// `softmax(q k^T / sqrt(d_head)) v` per head over `q[batch, rows, dk]`,
    /// `k[batch, keys, dk]`, `v[batch, keys, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: AttnMask, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(TensorError::config("attention", "q, k, v must be [batch, rows, dim]"));
        }
        if sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
            return Err(TensorError::config(
                "attention",
                format!("incompatible q {sq:?}, k {sk:?}, v {sv:?}"),
            ));
        }
        if heads == 0 || sq[2] % heads != 0 || sv[2] % heads != 0 {
            return Err(TensorError::config(
                "attention",
                format!("{heads} heads do not divide key width {} and value width {}", sq[2], sv[2]),
            ));
        }
        let (batch, rows, keys) = (sq[0], sq[1], sk[1]);
        match &mask {
            AttnMask::KeyLengths(l) | AttnMask::CausalKeyLengths(l) if l.len() != batch => {
                return Err(TensorError::config("attention", "one key length per sample required"));
            }
            AttnMask::Explicit(a) if a.len() != batch * rows * keys => {
                return Err(TensorError::config("attention", "mask must be [batch, rows, keys]"));
            }
            _ => {}
        }
        let geom = AttnGeom {
            batch,
            rows,
            keys,
            dk: sq[2],
            dv: sv[2],
            heads,
            mask,
        };
        let (out, probs) = attention::forward(&geom, self.value(q), self.value(k), self.value(v))?;
        let tracked = self.tracked(&[q, k, v]);
        Ok(self.push(vec![batch, rows, geom.dv], out, Op::Attn { q, k, v, geom, probs }, tracked))
    }

    /// Mean loss over the elements where `mask` is true.
    pub fn loss(&mut self, kind: LossKind, pred: Var, target: Rc<[T]>, mask: Rc<[bool]>) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(TensorError::config(
                "loss",
                format!("pred has {n} values, target {}, mask {}", target.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: "loss" });
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let mut total = T::zero();
        for ((&p, &y), &m) in self.value(pred).iter().zip(target.iter()).zip(mask.iter()) {
            if !m {
                continue;
            }
            total += match kind {
                LossKind::Bce => {
                    let p = p.max(eps).min(T::one() - eps);
                    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
                }
                LossKind::Mse => (p - y) * (p - y),
            };
        }
        let value = total / T::from_usize(count).unwrap();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        let tracked = self.tracked(&[pred]);
        Ok(self.push(vec![1], vec![value], Op::Loss { pred, kind, target, mask, count }, tracked))
    }

    /// All-pairs sum: `out[b, m, n, :] = a[b, m, :] + c[b, n, :]`.
    pub fn pair_add(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a).to_vec(), self.shape(c).to_vec());
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[2] {
            return Err(TensorError::config("pair_add", format!("incompatible {sa:?} and {sc:?}")));
        }
        let (batch, m, n, h) = (sa[0], sa[1], sc[1], sa[2]);
        let mut out = vec![T::zero(); batch * m * n * h];
        let (va, vc) = (self.value(a), self.value(c));
        for b in 0..batch {
            for i in 0..m {
                let ar = &va[(b * m + i) * h..][..h];
                for j in 0..n {
                    let cr = &vc[(b * n + j) * h..][..h];
                    let o = &mut out[((b * m + i) * n + j) * h..][..h];
                    for ((o, &x), &y) in o.iter_mut().zip(ar).zip(cr) {
                        *o = x + y;
                    }
                }
            }
        }
        let tracked = self.tracked(&[a, c]);
        Ok(self.push(vec![batch, m, n, h], out, Op::PairAdd { a, c, batch, m, n, h }, tracked))
    }

    /// `x[b, i, :] + u[b, :]` for every row `i`.
    pub fn add_rows(&mut self, x: Var, u: Var) -> Result<Var> {
        let (sx, su) = (self.shape(x).to_vec(), self.shape(u).to_vec());
        if sx.len() != 3 || su.len() != 2 || sx[0] != su[0] || sx[2] != su[1] {
            return Err(TensorError::config("add_rows", format!("incompatible {sx:?} and {su:?}")));
        }
        let (batch, rows, h) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).to_vec();
        let vu = self.value(u);
        for b in 0..batch {
            for i in 0..rows {
                add_into(&mut out[(b * rows + i) * h..][..h], &vu[b * h..][..h]);
            }
        }
        let tracked = self.tracked(&[x, u]);
        Ok(self.push(sx, out, Op::AddRows { x, u, batch, rows, h }, tracked))
    }

    /// Adds `p[t, :]` to every sample's step `t`; `p` may cover more steps
    /// than `x` has.
    pub fn add_time(&mut self, x: Var, p: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(p).to_vec());
        if sx.len() != 3 || sp.len() != 2 || sp[1] != sx[2] || sp[0] < sx[1] {
            return Err(TensorError::config("add_time", format!("incompatible {sx:?} and {sp:?}")));
        }
        let (batch, time, c) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).to_vec();
        let vp = self.value(p);
        for row in out.chunks_exact_mut(time * c) {
            add_into(row, &vp[..time * c]);
        }
        let tracked = self.tracked(&[x, p]);
        Ok(self.push(sx, out, Op::AddTime { x, p, batch, time, c }, tracked))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.last_dim(x);
        if self.shape(bias) != [c] {
            return Err(TensorError::config("add_bias", format!("bias must be [{c}]")));
        }
        let mut out = self.value(x).to_vec();
        let vb = self.value(bias);
        for row in out.chunks_exact_mut(c) {
            add_into(row, vb);
        }
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias, c }, tracked))
    }

    /// Sums (or averages) `x[batch, m, r]` over the first `lengths[b]` rows.
    pub fn masked_reduce(&mut self, x: Var, lengths: Rc<[usize]>, mean: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || lengths.len() != sx[0] {
            return Err(TensorError::config("masked_reduce", format!("input {sx:?} with {} lengths", lengths.len())));
        }
        let (batch, m, r) = (sx[0], sx[1], sx[2]);
        if lengths.iter().any(|&l| l > m || (mean && l == 0)) {
            return Err(TensorError::config("masked_reduce", "lengths must lie in 1..=rows"));
        }
        let vx = self.value(x);
        let mut out = vec![T::zero(); batch * r];
        for b in 0..batch {
            let o = &mut out[b * r..][..r];
            for i in 0..lengths[b] {
                add_into(o, &vx[(b * m + i) * r..][..r]);
            }
            if mean {
                let inv = T::from_usize(lengths[b]).unwrap().recip();
                o.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![batch, r], out, Op::Reduce { x, lengths, mean, batch, m, r }, tracked))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::config("concat", format!("incompatible {sa:?} and {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..rows {
            out.extend_from_slice(&va[i * ca..][..ca]);
            out.extend_from_slice(&vb[i * cb..][..cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Concat { a, b, rows, ca, cb }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape("reshape", &shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), tracked))
    }

    /// `sum_i x_i * weights_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Rc<[T]>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(TensorError::config("weighted_sum", "weights must match input length"));
        }
        let s = self.value(x).iter().zip(weights.iter()).map(|(&a, &b)| a * b).sum();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, tracked))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, g: Vec<T>) {
        if !self.nodes[to.0].tracked {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => add_into(acc, &g),
            slot => *slot = Some(g),
        }
    }

    fn send_with(&self, grads: &mut [Option<Vec<T>>], to: Var, f: impl FnOnce() -> Vec<T>) {
        if self.nodes[to.0].tracked {
            self.send(grads, to, f());
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.send_with(grads, a, || {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, val(b), true, &mut da, false);
                    da
                });
                self.send_with(grads, b, || {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(a), true, g, false, &mut db, false);
                    db
                });
            }
            &Op::Linear { x, w, bias, rows, din, dout } => {
                self.send_with(grads, x, || {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(rows, dout, din, g, false, val(w), true, &mut dx, false);
                    dx
                });
                self.send_with(grads, w, || {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, rows, dout, val(x), true, g, false, &mut dw, false);
                    dw
                });
                if let Some(bv) = bias {
                    self.send_with(grads, bv, || column_sums(g, dout));
                }
            }
            &Op::Add(a, b) => {
                self.send_with(grads, a, || g.to_vec());
                self.send_with(grads, b, || g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.send_with(grads, a, || g.to_vec());
                self.send_with(grads, b, || g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                self.send_with(grads, a, || g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect());
                self.send_with(grads, b, || g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
            }
            &Op::Scale(x, c) => self.send_with(grads, x, || g.iter().map(|&d| d * c).collect()),
            &Op::Act(x, kind) => self.send_with(grads, x, || {
                let y = &node.value;
                let xs = val(x);
                (0..g.len())
                    .map(|i| {
                        let local = match kind {
                            Activation::Sigmoid => y[i] * (T::one() - y[i]),
                            Activation::Relu => {
                                if xs[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Tanh => T::one() - y[i] * y[i],
                        };
                        g[i] * local
                    })
                    .collect()
            }),
            Op::Conv { x, w, bias, geom } => {
                let (dx, dw, db) = conv::backward(geom, val(*x), val(*w), g);
                self.send(grads, *x, dx);
                self.send(grads, *w, dw);
                if let Some(bv) = bias {
                    self.send(grads, *bv, db);
                }
            }
            Op::Norm { x, gamma, beta, geom, cache } => {
                let (dx, dgamma, dbeta) = norm::backward(geom, val(*x), val(*gamma), cache, g);
                self.send(grads, *x, dx);
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Attn { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention::backward(geom, val(*q), val(*k), val(*v), probs, g);
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::Loss {
                pred,
                kind,
                target,
                mask,
                count,
            } => self.send_with(grads, *pred, || {
                let scale = g[0] / T::from_usize(*count).unwrap();
                let eps = T::from_f64_lossy(BCE_EPS);
                let two = T::one() + T::one();
                val(*pred)
                    .iter()
                    .zip(target.iter())
                    .zip(mask.iter())
                    .map(|((&p, &y), &m)| {
                        if !m {
                            return T::zero();
                        }
                        match kind {
                            LossKind::Bce => {
                                if p < eps || p > T::one() - eps {
                                    T::zero()
                                } else {
                                    scale * ((T::one() - y) / (T::one() - p) - y / p)
                                }
                            }
                            LossKind::Mse => scale * two * (p - y),
                        }
                    })
                    .collect()
            }),
            &Op::PairAdd { a, c, batch, m, n, h } => {
                let mut da = vec![T::zero(); batch * m * h];
                let mut dc = vec![T::zero(); batch * n * h];
                for b in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            let gr = &g[((b * m + i) * n + j) * h..][..h];
                            add_into(&mut da[(b * m + i) * h..][..h], gr);
                            add_into(&mut dc[(b * n + j) * h..][..h], gr);
                        }
                    }
                }
                self.send(grads, a, da);
                self.send(grads, c, dc);
            }
            &Op::AddRows { x, u, batch, rows, h } => {
                self.send_with(grads, x, || g.to_vec());
                self.send_with(grads, u, || {
                    let mut du = vec![T::zero(); batch * h];
                    for b in 0..batch {
                        for i in 0..rows {
                            add_into(&mut du[b * h..][..h], &g[(b * rows + i) * h..][..h]);
                        }
                    }
                    du
                });
            }
            &Op::AddTime { x, p, batch, time, c } => {
                self.send_with(grads, x, || g.to_vec());
                self.send_with(grads, p, || {
                    let mut dp = vec![T::zero(); val(p).len()];
                    for b in 0..batch {
                        add_into(&mut dp[..time * c], &g[b * time * c..][..time * c]);
                    }
                    dp
                });
            }
            &Op::AddBias { x, bias, c } => {
                self.send_with(grads, x, || g.to_vec());
                self.send_with(grads, bias, || column_sums(g, c));
            }
            Op::Reduce {
                x,
                lengths,
                mean,
                batch,
                m,
                r,
            } => self.send_with(grads, *x, || {
                let (batch, m, r) = (*batch, *m, *r);
                let mut dx = vec![T::zero(); batch * m * r];
                for b in 0..batch {
                    let mut gb = g[b * r..][..r].to_vec();
                    if *mean {
                        let inv = T::from_usize(lengths[b]).unwrap().recip();
                        gb.iter_mut().for_each(|v| *v *= inv);
                    }
                    for i in 0..lengths[b] {
                        dx[(b * m + i) * r..][..r].copy_from_slice(&gb);
                    }
                }
                dx
            }),
            &Op::Concat { a, b, rows, ca, cb } => {
                self.send_with(grads, a, || (0..rows).flat_map(|i| g[i * (ca + cb)..][..ca].iter().copied()).collect());
                self.send_with(grads, b, || {
                    (0..rows).flat_map(|i| g[i * (ca + cb) + ca..][..cb].iter().copied()).collect()
                });
            }
            &Op::Reshape(x) => self.send_with(grads, x, || g.to_vec()),
            Op::WeightedSum { x, weights } => {
                self.send_with(grads, *x, || weights.iter().map(|&w| w * g[0]).collect())
            }
        }
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        add_into(&mut out, row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = tape();
        let x = t.variable(vec![1], vec![0.0]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.value(y), &[0.5]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut t = tape();
        let x = t.constant(vec![3], vec![0.0, -2.0, 0.0]).unwrap();
        let s = t.sigmoid(x);
        let r = t.relu(x);
        let h = t.tanh(x);
        assert_eq!(t.value(s)[0], 0.5);
        assert_eq!(t.value(r)[1], 0.0);
        assert_eq!(t.value(h)[2], 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut t = tape();
        let x = t.constant(vec![2], vec![-800.0, 800.0]).unwrap();
        let s = t.sigmoid(x);
        assert_eq!(t.value(s), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = tape();
        let x = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = tape();
        let a = t.constant(vec![1], vec![3.0]).unwrap();
        let b = t.variable(vec![1], vec![2.0]).unwrap();
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[3.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let mut t = tape();
        let x = t.variable(vec![1], vec![3.0]).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn loss_values() {
        let mut t = tape();
        let p = t.constant(vec![2], vec![0.5, 0.9]).unwrap();
        let half = t.loss(LossKind::Bce, p, Rc::from(vec![1.0, 0.0]), Rc::from(vec![true, false])).unwrap();
        assert!((t.value(half)[0] - 2f64.ln()).abs() < 1e-12);
        let hit = t.loss(LossKind::Bce, p, Rc::from(vec![0.0, 1.0]), Rc::from(vec![false, true])).unwrap();
        assert!((t.value(hit)[0] - 0.105_360_515_657_826_3).abs() < 1e-12);
        let perfect = t.loss(LossKind::Mse, p, Rc::from(vec![0.5, 0.9]), Rc::from(vec![true, true])).unwrap();
        assert_eq!(t.value(perfect)[0], 0.0);
        let empty = t.loss(LossKind::Mse, p, Rc::from(vec![0.5, 0.9]), Rc::from(vec![false, false]));
        assert!(matches!(empty, Err(TensorError::EmptyMask { .. })));
    }

    #[test]
    fn bce_clamps_extreme_predictions() {
        let mut t = tape();
        let p = t.constant(vec![2], vec![0.0, 1.0]).unwrap();
        let l = t.loss(LossKind::Bce, p, Rc::from(vec![1.0, 0.0]), Rc::from(vec![true, true])).unwrap();
        let want = -(BCE_EPS.ln());
        assert!((t.value(l)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn masked_loss_ignores_masked_gradients() {
        let mut t = tape();
        let p = t.variable(vec![3], vec![0.2, 0.4, 0.6]).unwrap();
        let l = t.loss(LossKind::Mse, p, Rc::from(vec![0.0; 3]), Rc::from(vec![true, false, true])).unwrap();
        let g = t.backward(l).unwrap();
        let gp = g.get(p).unwrap();
        assert_eq!(gp[1], 0.0);
        assert!((gp[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pair_add_layout() {
        let mut t = tape();
        let a = t.constant(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let c = t.constant(vec![1, 3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let p = t.pair_add(a, c).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 3, 1]);
        assert_eq!(t.value(p), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn masked_reduce_respects_lengths() {
        let mut t = tape();
        let x = t.constant(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.masked_reduce(x, Rc::from(vec![2, 3]), false).unwrap();
        assert_eq!(t.value(s), &[3.0, 15.0]);
        let m = t.masked_reduce(x, Rc::from(vec![2, 3]), true).unwrap();
        assert_eq!(t.value(m), &[1.5, 5.0]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut t = tape();
        let x = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let w = t.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(t.linear(x, w, None), Err(TensorError::Config { .. })));
    }
}
