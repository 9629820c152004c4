//! Sequence models over the session timeline (supports, then queries).
//! Parameters of the dilated convolution stacks are named `stack*`.

use std::rc::Rc;

use rand::Rng;
use seqskip_tensor::nn::{uniform_fan_in, ConvStack, Linear};
use seqskip_tensor::{AttnMask, Bound, Padding, ParamId, ParamStore, Tape, Var};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::config::ModelConfig;

fn timeline(tape: &mut Tape<f32>, batch: &Batch) -> Result<Var> {
    Ok(tape.constant(vec![batch.size(), batch.max_len, batch.dim], batch.timeline.clone())?)
}

fn causal_stack<R: Rng>(store: &mut ParamStore<f32>, name: &str, c: &ModelConfig, rng: &mut R) -> Result<ConvStack> {
    Ok(ConvStack::new(
        store,
        name,
        c.width,
        &c.dilations,
        &c.kernels,
        Padding::Causal,
        c.gate.into(),
        c.instance_norm,
        rng,
    )?)
}

/// `seq1eH` (one stack), `seq1HL` and `teacher` (two stacks).
#[derive(Clone, Debug)]
pub(crate) struct ConvNet {
    input: Linear,
    stacks: Vec<ConvStack>,
    output: Linear,
}

impl ConvNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let input = Linear::new(store, "input", c.input_dim, c.width, true, rng)?;
        let stacks = (0..c.stack_count)
            .map(|i| causal_stack(store, &format!("stack{i}"), c, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(store, "output", c.width, 1, true, rng)?;
        Ok(ConvNet { input, stacks, output })
    }

    /// `[batch, max_len, 1]` skip probabilities at every step.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Var> {
        let x = timeline(tape, batch)?;
        let lengths: Rc<[usize]> = batch.lengths.clone().into();
        let mut h = self.input.forward(tape, p, x)?;
        for s in &self.stacks {
            h = s.forward(tape, p, h, Some(lengths.clone()))?;
        }
        let logits = self.output.forward(tape, p, h)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Non-causal support encoder and causal query encoder joined by
/// dot-product attention from queries to supports.
#[derive(Clone, Debug)]
pub(crate) struct AttPairNet {
    support_input: Linear,
    support_stack: ConvStack,
    query_input: Linear,
    query_stack: ConvStack,
    heads: usize,
    output: Linear,
}

impl AttPairNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let support_input = Linear::new(store, "support.input", c.input_dim, c.width, true, rng)?;
        let support_stack = ConvStack::new(
            store,
            "stack.support",
            c.width,
            &c.support_dilations,
            &c.support_kernels,
            Padding::Same,
            c.gate.into(),
            c.instance_norm,
            rng,
        )?;
        let query_input = Linear::new(store, "query.input", c.input_dim, c.width, true, rng)?;
        let query_stack = causal_stack(store, "stack.query", c, rng)?;
        let output = Linear::new(store, "output", 2 * c.width, 1, true, rng)?;
        Ok(AttPairNet {
            support_input,
            support_stack,
            query_input,
            query_stack,
            heads: c.heads,
            output,
        })
    }

    /// `[batch, max_query, 1]` skip probabilities.
    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Var> {
        let (b, d) = (batch.size(), batch.dim);
        let xs = tape.constant(vec![b, batch.max_support, d], batch.support.clone())?;
        let xq = tape.constant(vec![b, batch.max_query, d], batch.query.clone())?;
        let s_len: Rc<[usize]> = batch.support_lengths.clone().into();
        let q_len: Rc<[usize]> = batch.query_lengths.clone().into();
        let hs = self.support_input.forward(tape, p, xs)?;
        let hs = self.support_stack.forward(tape, p, hs, Some(s_len.clone()))?;
        let hq = self.query_input.forward(tape, p, xq)?;
        let hq = self.query_stack.forward(tape, p, hq, Some(q_len))?;
        let att = tape.attention(hq, hs, hs, AttnMask::KeyLengths(s_len), self.heads)?;
        let joined = tape.concat(hq, att)?;
        let logits = self.output.forward(tape, p, joined)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Causal multi-head self-attention with learned projections.
#[derive(Clone, Debug)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, din: usize, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), din, c.width, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), din, c.width, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), din, c.width, false, rng)?,
            heads: c.heads,
        })
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        Ok(tape.attention(q, k, v, AttnMask::Causal, self.heads)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attention: SelfAttention,
    mix: Linear,
    ff1: Linear,
    ff2: Linear,
}

/// Encoder-only transformer with a causal mask and learned positions.
#[derive(Clone, Debug)]
pub(crate) struct TransformerNet {
    input: Linear,
    positions: ParamId,
    max_len: usize,
    blocks: Vec<Block>,
    output: Linear,
}

impl TransformerNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = c.width;
        let input = Linear::new(store, "input", c.input_dim, w, true, rng)?;
        let positions = store.add("positions", uniform_fan_in(rng, vec![c.max_len, w], w))?;
        let blocks = (0..c.blocks)
            .map(|i| {
                let name = format!("block{i}");
                Ok(Block {
                    attention: SelfAttention::new(store, &format!("{name}.attention"), w, c, rng)?,
                    mix: Linear::new(store, &format!("{name}.mix"), w, w, true, rng)?,
                    ff1: Linear::new(store, &format!("{name}.ff1"), w, w, true, rng)?,
                    ff2: Linear::new(store, &format!("{name}.ff2"), w, w, true, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let output = Linear::new(store, "output", w, 1, true, rng)?;
        Ok(TransformerNet {
            input,
            positions,
            max_len: c.max_len,
            blocks,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Var> {
        if batch.max_len > self.max_len {
            return Err(Error::Config(format!(
                "timeline of {} steps exceeds the {} learned positions",
                batch.max_len, self.max_len
            )));
        }
        let x = timeline(tape, batch)?;
        let h = self.input.forward(tape, p, x)?;
        let mut h = tape.add_time(h, p.var(self.positions))?;
        for b in &self.blocks {
            let a = b.attention.forward(tape, p, h)?;
            let a = b.mix.forward(tape, p, a)?;
            h = tape.add(h, a)?;
            let f = b.ff1.forward(tape, p, h)?;
            let f = tape.relu(f);
            let f = b.ff2.forward(tape, p, f)?;
            h = tape.add(h, f)?;
        }
        let logits = self.output.forward(tape, p, h)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Attention over the raw rows first, then one causal dilated stack.
#[derive(Clone, Debug)]
pub(crate) struct SnailNet {
    attention: SelfAttention,
    mix: Linear,
    stack: ConvStack,
    output: Linear,
}

impl SnailNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let attention = SelfAttention::new(store, "attention", c.input_dim, c, rng)?;
        let mix = Linear::new(store, "mix", c.input_dim + c.width, c.width, true, rng)?;
        let stack = causal_stack(store, "stack0", c, rng)?;
        let output = Linear::new(store, "output", c.width, 1, true, rng)?;
        Ok(SnailNet {
            attention,
            mix,
            stack,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Var> {
        let x = timeline(tape, batch)?;
        let lengths: Rc<[usize]> = batch.lengths.clone().into();
        let a = self.attention.forward(tape, p, x)?;
        let joined = tape.concat(x, a)?;
        let h = self.mix.forward(tape, p, joined)?;
        let h = self.stack.forward(tape, p, h, Some(lengths))?;
        let logits = self.output.forward(tape, p, h)?;
        Ok(tape.sigmoid(logits))
    }
}
