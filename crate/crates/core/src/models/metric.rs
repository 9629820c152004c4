//! Relation-network models. Each item is embedded once by `f`, and every
//! (support, query) pair is scored by a two-layer perceptron over
//! `[f(support), support label, f(query)]`, optionally with a pooled user
//! embedding. The first perceptron layer is split into a support part and a
//! query part so that pairs are formed by broadcasting, not by copying.

use std::rc::Rc;

use rand::Rng;
use seqskip_tensor::nn::Linear;
use seqskip_tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

use crate::data::Batch;
use crate::error::Result;
use crate::models::config::{ModelConfig, ModelKind};

#[derive(Clone, Debug)]
pub(crate) struct MetricNet {
    embed1: Linear,
    embed2: Linear,
    rn_support: Linear,
    rn_query: Linear,
    user: Option<UserEmbedding>,
    rn_out: Linear,
    classifier: Option<Classifier>,
}

#[derive(Clone, Debug)]
struct UserEmbedding {
    rows: Linear,
    embed: Linear,
    into_pair: Linear,
}

/// Per-pair weights for the weighted relation sum.
#[derive(Clone, Debug)]
struct Classifier {
    weight: Linear,
    bias: ParamId,
}

pub(crate) struct MetricPass {
    /// `[batch, supports, queries, 1]`
    pub r: Var,
    /// `[batch, queries, 1]`, present for the weighted-sum classifier.
    pub p: Option<Var>,
    /// `[batch, width]`
    pub user: Option<Var>,
}

impl MetricNet {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = c.width;
        let embed1 = Linear::new(store, "embed.0", c.input_dim, w, true, rng)?;
        let embed2 = Linear::new(store, "embed.1", w, w, true, rng)?;
        let rn_support = Linear::new(store, "relation.support", w + 1, w, false, rng)?;
        let rn_query = Linear::new(store, "relation.query", w, w, true, rng)?;
        let user = if c.kind.has_user_embedding() {
            Some(UserEmbedding {
                rows: Linear::new(store, "user.rows", w + 1, w, true, rng)?,
                embed: Linear::new(store, "user.embed", w, w, true, rng)?,
                into_pair: Linear::new(store, "relation.user", w, w, false, rng)?,
            })
        } else {
            None
        };
        let rn_out = Linear::new(store, "relation.out", w, 1, true, rng)?;
        let classifier = if c.kind == ModelKind::Rnbc2Ue {
            Some(Classifier {
                weight: Linear::new(store, "classifier.weight", w, 1, true, rng)?,
                bias: store.add("classifier.bias", Tensor::zeros(vec![1]))?,
            })
        } else {
            None
        };
        Ok(MetricNet {
            embed1,
            embed2,
            rn_support,
            rn_query,
            user,
            rn_out,
            classifier,
        })
    }

    fn embed(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.embed1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.embed2.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<MetricPass> {
        let (b, s, q, d) = (batch.size(), batch.max_support, batch.max_query, batch.dim);
        let xs = tape.constant(vec![b, s, d], batch.support.clone())?;
        let xq = tape.constant(vec![b, q, d], batch.query.clone())?;
        let ys = tape.constant(vec![b, s, 1], batch.support_y.clone())?;
        let fs = self.embed(tape, p, xs)?;
        let fq = self.embed(tape, p, xq)?;
        let items = tape.concat(fs, ys)?;

        let a = self.rn_support.forward(tape, p, items)?;
        let mut c = self.rn_query.forward(tape, p, fq)?;
        let mut user = None;
        if let Some(ue) = &self.user {
            let lengths: Rc<[usize]> = batch.support_lengths.clone().into();
            let rows = ue.rows.forward(tape, p, items)?;
            let rows = tape.relu(rows);
            let pooled = tape.masked_reduce(rows, lengths, true)?;
            let u = ue.embed.forward(tape, p, pooled)?;
            let u = tape.relu(u);
            let term = ue.into_pair.forward(tape, p, u)?;
            c = tape.add_rows(c, term)?;
            user = Some(u);
        }
        let pre = tape.pair_add(a, c)?;
        let hidden = tape.relu(pre);
        let logits = self.rn_out.forward(tape, p, hidden)?;
        let r = tape.sigmoid(logits);

        let p_out = match &self.classifier {
            Some(cls) => {
                let wts = cls.weight.forward(tape, p, hidden)?;
                let weighted = tape.mul(wts, r)?;
                let weighted = tape.reshape(weighted, vec![b, s, q])?;
                let lengths: Rc<[usize]> = batch.support_lengths.clone().into();
                let summed = tape.masked_reduce(weighted, lengths, false)?;
                let summed = tape.reshape(summed, vec![b, q, 1])?;
                let logit = tape.add_bias(summed, p.var(cls.bias))?;
                Some(tape.sigmoid(logit))
            }
            None => None,
        };
        Ok(MetricPass { r, p: p_out, user })
    }
}

/// `p(skip_n) = sum_m [r_mn y_m + (1 - r_mn)(1 - y_m)] / T_s`, over one
/// sample's valid supports. `r` is row-major `[supports, queries]`.
pub fn vote(r: &[f32], support_y: &[u8], queries: usize) -> Vec<f32> {
    let ts = support_y.len();
    (0..queries)
        .map(|n| {
            let total: f64 = support_y
                .iter()
                .enumerate()
                .map(|(m, &y)| {
                    let r = r[m * queries + n] as f64;
                    if y == 1 {
                        r
                    } else {
                        1.0 - r
                    }
                })
                .sum();
            (total / ts as f64) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&[0.5; 6], &[1, 0, 1], 2), vec![0.5, 0.5]);
        // Perfect agreement scores reproduce the support majority per query.
        assert_eq!(vote(&[1.0, 0.0, 1.0, 0.0], &[1, 1], 2), vec![1.0, 0.0]);
        assert_eq!(vote(&[1.0, 1.0], &[0], 2), vec![0.0, 0.0]);
    }
}
