//! Parameterized layers built on [`Tape`] ops.
//!
//! Weights use fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! and biases start at zero, except the highway gate bias which starts at
//! [`HIGHWAY_GATE_BIAS`].

use std::rc::Rc;

use rand::Rng;

use crate::conv::{Conv1dSpec, Padding};
use crate::error::{Result, TensorError};
use crate::norm::NormMode;
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HIGHWAY_GATE_BIAS: f64 = -1.0;
pub const NORM_EPS: f64 = 1e-5;

pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape product matches generated length")
}

pub fn filled<T: Real>(shape: Vec<usize>, v: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, vec![T::from_f64_lossy(v); n]).expect("shape product matches length")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), uniform_fan_in(rng, vec![din, dout], din))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![dout]))?)
        } else {
            None
        };
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub spec: Conv1dSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv1dSpec,
        bias_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel_size;
        let w = store.add(format!("{name}.w"), uniform_fan_in(rng, spec.weight_shape().to_vec(), fan_in))?;
        let b = store.add(format!("{name}.b"), filled(vec![spec.out_channels], bias_init))?;
        Ok(Conv1d { spec, w, b })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        tape.conv1d(x, &self.spec, p.var(self.w), Some(p.var(self.b)), lengths)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mode: NormMode,
}

impl InstanceNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, mode: NormMode) -> Result<Self> {
        Ok(InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), filled(vec![channels], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            mode,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(NORM_EPS);
        tape.instance_norm(x, p.var(self.gamma), p.var(self.beta), eps, self.mode, lengths)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    Highway,
    Glu,
}

/// `T(x) * h(x) + (1 - T(x)) * x` with `T = sigmoid(gate_logits)`.
pub fn highway<T: Real>(tape: &mut Tape<T>, x: Var, transformed: Var, gate_logits: Var) -> Result<Var> {
    let gate = tape.sigmoid(gate_logits);
    let delta = tape.sub(transformed, x)?;
    let moved = tape.mul(gate, delta)?;
    tape.add(x, moved)
}

/// `a * sigmoid(b)`.
pub fn glu<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let gate = tape.sigmoid(b);
    tape.mul(a, gate)
}

/// Dilated convolution followed by a highway or GLU activation. The highway
/// transform path is `relu(norm(conv(x)))` when a norm is attached.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub kind: GateKind,
    pub transform: Conv1d,
    pub gate: Conv1d,
    pub norm: Option<InstanceNorm>,
}

impl GatedConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: GateKind,
        spec: Conv1dSpec,
        with_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kind == GateKind::Highway && spec.in_channels != spec.out_channels {
            return Err(TensorError::config(
                "gated_block",
                format!("highway needs in == out channels, got {} -> {}", spec.in_channels, spec.out_channels),
            ));
        }
        let transform = Conv1d::new(store, &format!("{name}.transform"), spec, 0.0, rng)?;
        let gate_bias = match kind {
            GateKind::Highway => HIGHWAY_GATE_BIAS,
            GateKind::Glu => 0.0,
        };
        let gate = Conv1d::new(store, &format!("{name}.gate"), spec, gate_bias, rng)?;
        let norm = if with_norm {
            let mode = match spec.padding {
                Padding::Causal => NormMode::Causal,
                Padding::Same => NormMode::Full,
            };
            Some(InstanceNorm::new(store, &format!("{name}.norm"), spec.out_channels, mode)?)
        } else {
            None
        };
        Ok(GatedConv {
            kind,
            transform,
            gate,
            norm,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        let channels = *tape.shape(x).last().unwrap();
        if channels != self.transform.spec.in_channels {
            return Err(TensorError::config(
                "gated_block",
                format!("input has {channels} channels, block expects {}", self.transform.spec.in_channels),
            ));
        }
        let mut t = self.transform.forward(tape, p, x, lengths.clone())?;
        let g = self.gate.forward(tape, p, x, lengths.clone())?;
        match self.kind {
            GateKind::Highway => {
                if let Some(norm) = &self.norm {
                    t = norm.forward(tape, p, t, lengths)?;
                }
                let h = tape.relu(t);
                highway(tape, x, h, g)
            }
            GateKind::Glu => {
                if let Some(norm) = &self.norm {
                    t = norm.forward(tape, p, t, lengths)?;
                }
                glu(tape, t, g)
            }
        }
    }
}

/// A stack of same-width gated convolutions, one per dilation.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<GatedConv>,
}

impl ConvStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        dilations: &[usize],
        kernels: &[usize],
        padding: Padding,
        kind: GateKind,
        with_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dilations.len() != kernels.len() || dilations.is_empty() {
            return Err(TensorError::config(
                "conv_stack",
                format!("{} dilations for {} kernel sizes", dilations.len(), kernels.len()),
            ));
        }
        let layers = dilations
            .iter()
            .zip(kernels)
            .enumerate()
            .map(|(i, (&d, &k))| {
                let spec = Conv1dSpec {
                    in_channels: width,
                    out_channels: width,
                    kernel_size: k,
                    dilation: d,
                    padding,
                };
                GatedConv::new(store, &format!("{name}.layer{i}"), kind, spec, with_norm, rng)
            })
            .collect::<Result<_>>()?;
        Ok(ConvStack { layers })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mut x: Var,
        lengths: Option<Rc<[usize]>>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, p, x, lengths.clone())?;
        }
        Ok(x)
    }

    /// Steps of history (including the current one) visible to an output
    /// through the convolutions. Instance norm statistics span the whole
    /// valid prefix, so a normalized stack depends on older steps too.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .layers
            .iter()
            .map(|l| l.transform.spec.receptive_field() - 1)
            .sum::<usize>()
    }
}
