//! Central finite-difference checks of the tape's analytic gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnMask;
use crate::conv::{Conv1dSpec, Padding};
use crate::error::Result;
use crate::nn::{glu, highway};
use crate::norm::NormMode;
use crate::tape::{LossKind, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both are negligible.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences, returning the relative error over all input elements.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.variable(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let (tp, _, op) = eval(&work)?;
            let plus = tp.value(op)[0];
            work[i].data_mut()[j] = orig - FD_STEP;
            let (tm, _, om) = eval(&work)?;
            let minus = tm.value(om)[0];
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let w: Rc<[f64]> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, w)
}

type CaseBuilder = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn conv_case(rng: &mut ChaCha8Rng, seed: u64, padding: Padding, dilation: usize, masked: bool) -> Result<f64> {
    let (b, t) = (rng.random_range(1..=2), rng.random_range(3..=7));
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = if padding == Padding::Same { 3 } else { 2 };
    let spec = Conv1dSpec {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        dilation,
        padding,
    };
    let lengths: Option<Rc<[usize]>> = masked.then(|| (0..b).map(|_| rng.random_range(1..=t)).collect());
    let inputs = [
        rand_tensor(rng, vec![b, t, cin], -1.0, 1.0),
        rand_tensor(rng, spec.weight_shape().to_vec(), -1.0, 1.0),
        rand_tensor(rng, vec![cout], -1.0, 1.0),
    ];
    check(&inputs, |tape, v| {
        let y = tape.conv1d(v[0], &spec, v[1], Some(v[2]), lengths.clone())?;
        project(tape, y, seed)
    })
}

fn norm_case(rng: &mut ChaCha8Rng, seed: u64, mode: NormMode, masked: bool) -> Result<f64> {
    let (b, t, c) = (rng.random_range(1..=2), rng.random_range(2..=7), rng.random_range(1..=3));
    let lengths: Option<Rc<[usize]>> = masked.then(|| (0..b).map(|_| rng.random_range(2..=t)).collect());
    let inputs = [
        rand_tensor(rng, vec![b, t, c], -1.0, 1.0),
        rand_tensor(rng, vec![c], 0.5, 1.5),
        rand_tensor(rng, vec![c], -0.5, 0.5),
    ];
    check(&inputs, |tape, v| {
        let y = tape.instance_norm(v[0], v[1], v[2], 1e-5, mode, lengths.clone())?;
        project(tape, y, seed)
    })
}

fn gated_case(rng: &mut ChaCha8Rng, seed: u64, is_highway: bool) -> Result<f64> {
    let (b, t, c) = (rng.random_range(1..=2), rng.random_range(2..=6), rng.random_range(1..=3));
    let spec = Conv1dSpec::causal(c, c, 2, rng.random_range(1..=2));
    let inputs = [
        rand_tensor(rng, vec![b, t, c], -1.0, 1.0),
        rand_tensor(rng, spec.weight_shape().to_vec(), -1.0, 1.0),
        rand_tensor(rng, vec![c], -0.5, 0.5),
        rand_tensor(rng, spec.weight_shape().to_vec(), -1.0, 1.0),
        rand_tensor(rng, vec![c], -0.5, 0.5),
        rand_tensor(rng, vec![c], 0.5, 1.5),
        rand_tensor(rng, vec![c], -0.5, 0.5),
    ];
    check(&inputs, |tape, v| {
        let a = tape.conv1d(v[0], &spec, v[1], Some(v[2]), None)?;
        let g = tape.conv1d(v[0], &spec, v[3], Some(v[4]), None)?;
        let y = if is_highway {
            let n = tape.instance_norm(a, v[5], v[6], 1e-5, NormMode::Causal, None)?;
            let h = tape.relu(n);
            highway(tape, v[0], h, g)?
        } else {
            glu(tape, a, g)?
        };
        project(tape, y, seed)
    })
}

fn attention_case(rng: &mut ChaCha8Rng, seed: u64, heads: usize, causal: bool) -> Result<f64> {
    let b = rng.random_range(1..=2);
    let n = rng.random_range(1..=4);
    let m = if causal { n } else { rng.random_range(1..=4) };
    let dk = heads * rng.random_range(1..=2);
    let dv = heads * rng.random_range(1..=2);
    let inputs = [
        rand_tensor(rng, vec![b, n, dk], -1.0, 1.0),
        rand_tensor(rng, vec![b, m, dk], -1.0, 1.0),
        rand_tensor(rng, vec![b, m, dv], -1.0, 1.0),
    ];
    let mask = if causal { AttnMask::Causal } else { AttnMask::None };
    check(&inputs, |tape, v| {
        let y = tape.attention(v[0], v[1], v[2], mask.clone(), heads)?;
        project(tape, y, seed)
    })
}

fn loss_case(rng: &mut ChaCha8Rng, kind: LossKind) -> Result<f64> {
    let n = rng.random_range(2..=8);
    let pred = rand_tensor(rng, vec![n], 0.05, 0.95);
    let target: Rc<[f64]> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    let mask: Rc<[bool]> = mask.into();
    check(&[pred], |tape, v| tape.loss(kind, v[0], target.clone(), mask.clone()))
}

fn cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("matmul", |rng, seed| {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let inputs = [rand_tensor(rng, vec![m, k], -1.0, 1.0), rand_tensor(rng, vec![k, n], -1.0, 1.0)];
            check(&inputs, |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                project(tape, y, seed)
            })
        }),
        ("linear", |rng, seed| {
            let (r, din, dout) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=4));
            let inputs = [
                rand_tensor(rng, vec![r, din], -1.0, 1.0),
                rand_tensor(rng, vec![din, dout], -1.0, 1.0),
                rand_tensor(rng, vec![dout], -1.0, 1.0),
            ];
            check(&inputs, |tape, v| {
                let y = tape.linear(v[0], v[1], Some(v[2]))?;
                project(tape, y, seed)
            })
        }),
        ("activations", |rng, seed| {
            let n = rng.random_range(1..=6);
            let inputs = [rand_tensor(rng, vec![n], -2.0, 2.0)];
            check(&inputs, |tape, v| {
                let s = tape.sigmoid(v[0]);
                let r = tape.relu(v[0]);
                let t = tape.tanh(v[0]);
                let sr = tape.mul(s, r)?;
                let y = tape.add(sr, t)?;
                project(tape, y, seed)
            })
        }),
        ("conv1d causal d=1", |rng, seed| conv_case(rng, seed, Padding::Causal, 1, false)),
        ("conv1d causal d=2", |rng, seed| conv_case(rng, seed, Padding::Causal, 2, false)),
        ("conv1d causal d=4", |rng, seed| conv_case(rng, seed, Padding::Causal, 4, false)),
        ("conv1d noncausal d=1", |rng, seed| conv_case(rng, seed, Padding::Same, 1, false)),
        ("conv1d noncausal d=2", |rng, seed| conv_case(rng, seed, Padding::Same, 2, false)),
        ("conv1d noncausal d=4", |rng, seed| conv_case(rng, seed, Padding::Same, 4, false)),
        ("conv1d noncausal masked", |rng, seed| conv_case(rng, seed, Padding::Same, 1, true)),
        ("instance_norm", |rng, seed| norm_case(rng, seed, NormMode::Full, false)),
        ("instance_norm masked", |rng, seed| norm_case(rng, seed, NormMode::Full, true)),
        ("instance_norm causal", |rng, seed| norm_case(rng, seed, NormMode::Causal, false)),
        ("highway", |rng, seed| gated_case(rng, seed, true)),
        ("glu", |rng, seed| gated_case(rng, seed, false)),
        ("attention 1-head", |rng, seed| attention_case(rng, seed, 1, false)),
        ("attention 8-head", |rng, seed| attention_case(rng, seed, 8, false)),
        ("attention causal", |rng, seed| attention_case(rng, seed, 2, true)),
        ("bce", |rng, _| loss_case(rng, LossKind::Bce)),
        ("mse", |rng, _| loss_case(rng, LossKind::Mse)),
        ("pair_add", |rng, seed| {
            let (b, m, n, h) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
            let inputs = [rand_tensor(rng, vec![b, m, h], -1.0, 1.0), rand_tensor(rng, vec![b, n, h], -1.0, 1.0)];
            check(&inputs, |tape, v| {
                let y = tape.pair_add(v[0], v[1])?;
                let y = tape.tanh(y);
                project(tape, y, seed)
            })
        }),
        ("broadcast adds", |rng, seed| {
            let (b, t, c) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=3));
            let inputs = [
                rand_tensor(rng, vec![b, t, c], -1.0, 1.0),
                rand_tensor(rng, vec![b, c], -1.0, 1.0),
                rand_tensor(rng, vec![t + 1, c], -1.0, 1.0),
                rand_tensor(rng, vec![c], -1.0, 1.0),
            ];
            check(&inputs, |tape, v| {
                let y = tape.add_rows(v[0], v[1])?;
                let y = tape.add_time(y, v[2])?;
                let y = tape.add_bias(y, v[3])?;
                let y = tape.tanh(y);
                project(tape, y, seed)
            })
        }),
        ("masked_reduce", |rng, seed| {
            let (b, m, r) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3));
            let lengths: Rc<[usize]> = (0..b).map(|_| rng.random_range(1..=m)).collect();
            let mean = rng.random_bool(0.5);
            let inputs = [rand_tensor(rng, vec![b, m, r], -1.0, 1.0)];
            check(&inputs, |tape, v| {
                let y = tape.masked_reduce(v[0], lengths.clone(), mean)?;
                let y = tape.tanh(y);
                project(tape, y, seed)
            })
        }),
        ("concat/reshape", |rng, seed| {
            let (r, ca, cb) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
            let inputs = [rand_tensor(rng, vec![r, ca], -1.0, 1.0), rand_tensor(rng, vec![r, cb], -1.0, 1.0)];
            check(&inputs, |tape, v| {
                let y = tape.concat(v[0], v[1])?;
                let y = tape.reshape(y, vec![r * (ca + cb)])?;
                let y = tape.sigmoid(y);
                let y = tape.scale(y, 1.5);
                project(tape, y, seed)
            })
        }),
    ]
}

/// Runs every primitive case `trials` times and reports the worst relative
/// error per case.
pub fn primitive_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let err = case(&mut rng, seed.wrapping_add(trial as u64))?;
            worst = worst.max(err);
        }
        out.push(GradCheckReport {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
