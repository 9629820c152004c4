//! One-shot evaluation of single primitives on unbatched tensors.
//!
//! Sequences here are `[channels, time]`, matching how convolution layers are
//! usually described; the batched tape ops use `[batch, time, channels]`.

use std::rc::Rc;

use crate::attention::AttnMask;
use crate::conv::Conv1dSpec;
use crate::error::{Result, TensorError};
use crate::nn::{glu, highway, GateKind};
use crate::norm::NormMode;
use crate::real::Real;
use crate::tape::{Activation, LossKind, Tape};
use crate::tensor::Tensor;

fn channels_time<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [c, t] => Ok((c, t)),
        _ => Err(TensorError::config(op, format!("expected [channels, time], got {:?}", x.shape()))),
    }
}

fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn to_batched<T: Real>(tape: &mut Tape<T>, x: &Tensor<T>, c: usize, t: usize) -> Result<crate::Var> {
    tape.constant(vec![1, t, c], transpose(c, t, x.data()))
}

fn from_batched<T: Real>(tape: &Tape<T>, v: crate::Var, c: usize, t: usize) -> Result<Tensor<T>> {
    Tensor::new(vec![c, t], transpose(t, c, tape.value(v)))
}

/// `input[C_in, T]`, `weights[C_out, C_in, k]`, `bias[C_out]` -> `[C_out, T]`.
pub fn conv1d<T: Real>(
    input: &Tensor<T>,
    spec: &Conv1dSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.shape().len() == 2 && input.shape()[1] == 0 {
        return Err(TensorError::EmptyInput { op: "conv1d" });
    }
    let (c, t) = channels_time("conv1d", input)?;
    let mut tape = Tape::new();
    let x = to_batched(&mut tape, input, c, t)?;
    let w = tape.leaf(weights);
    let b = tape.leaf(bias);
    let y = tape.conv1d(x, spec, w, Some(b), None)?;
    from_batched(&tape, y, spec.out_channels, t)
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.activation(kind, v);
    tape.to_tensor(y)
}

/// Whole-sequence instance norm of `x[C, T]`.
pub fn instance_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (c, t) = channels_time("instance_norm", x)?;
    let mut tape = Tape::new();
    let xv = to_batched(&mut tape, x, c, t)?;
    let g = tape.leaf(gamma);
    let b = tape.leaf(beta);
    let y = tape.instance_norm(xv, g, b, eps, NormMode::Full, None)?;
    from_batched(&tape, y, c, t)
}

/// Weights of one gated block. `transform` computes `h(x) = relu(conv(x))`
/// for highway and the linear path `A(x)` for GLU; `gate` computes the
/// sigmoid logits.
#[derive(Clone, Debug)]
pub struct GatedParams<T> {
    pub spec: Conv1dSpec,
    pub transform_w: Tensor<T>,
    pub transform_b: Tensor<T>,
    pub gate_w: Tensor<T>,
    pub gate_b: Tensor<T>,
}

pub fn gated_block<T: Real>(kind: GateKind, x: &Tensor<T>, params: &GatedParams<T>) -> Result<Tensor<T>> {
    let (c, t) = channels_time("gated_block", x)?;
    if c != params.spec.in_channels || (kind == GateKind::Highway && c != params.spec.out_channels) {
        return Err(TensorError::config(
            "gated_block",
            format!(
                "input has {c} channels, block maps {} -> {}",
                params.spec.in_channels, params.spec.out_channels
            ),
        ));
    }
    let mut tape = Tape::new();
    let xv = to_batched(&mut tape, x, c, t)?;
    let tw = tape.leaf(&params.transform_w);
    let tb = tape.leaf(&params.transform_b);
    let gw = tape.leaf(&params.gate_w);
    let gb = tape.leaf(&params.gate_b);
    let a = tape.conv1d(xv, &params.spec, tw, Some(tb), None)?;
    let g = tape.conv1d(xv, &params.spec, gw, Some(gb), None)?;
    let y = match kind {
        GateKind::Highway => {
            let h = tape.relu(a);
            highway(&mut tape, xv, h, g)?
        }
        GateKind::Glu => glu(&mut tape, a, g)?,
    };
    from_batched(&tape, y, params.spec.out_channels, t)
}

/// Unbatched attention: `q[N, dk]`, `k[M, dk]`, `v[M, dv]`, optional
/// `mask[N, M]` with `true` marking visible keys.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Tensor<T>> {
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        Tensor::new(shape, t.data().to_vec())
    };
    let mut tape = Tape::new();
    let qv = tape.leaf(&lift(q)?);
    let kv = tape.leaf(&lift(k)?);
    let vv = tape.leaf(&lift(v)?);
    let mask = match mask {
        Some(m) => AttnMask::Explicit(Rc::from(m)),
        None => AttnMask::None,
    };
    let y = tape.attention(qv, kv, vv, mask, heads)?;
    let out = tape.value(y).to_vec();
    Tensor::new(vec![q.shape()[0], v.shape()[1]], out)
}

/// Masked mean loss as a plain number.
pub fn loss<T: Real>(kind: LossKind, pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(TensorError::config("loss", "pred and target shapes differ"));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let l = tape.loss(kind, p, Rc::from(target.data()), Rc::from(mask))?;
    Ok(tape.value(l)[0])
}
