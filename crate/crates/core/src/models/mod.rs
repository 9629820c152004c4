//! The nine architectures, built from a [`ModelConfig`] and run on padded
//! [`Batch`]es. Every model produces all query predictions in one forward
//! pass; predictions are never fed back as inputs.

mod config;
mod metric;
mod sequence;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use seqskip_tensor::{Bound, Checkpoint, LossKind, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

pub use config::{Gate, ModelConfig, ModelKind};
pub use metric::vote;

use crate::data::Batch;
use crate::error::{Error, Result};
use metric::MetricNet;
use sequence::{AttPairNet, ConvNet, SnailNet, TransformerNet};

/// Metadata key holding the JSON model config inside a checkpoint.
pub const CONFIG_KEY: &str = "model_config";

/// Which labelled positions contribute to the BCE loss of timeline models.
/// Support rows carry their own label as input, so including them mostly
/// teaches the model to copy; query-only is the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    QueryOnly,
    SupportAndQuery,
}

#[derive(Clone, Debug)]
enum Net {
    Metric(MetricNet),
    Conv(ConvNet),
    AttPair(AttPairNet),
    Transformer(TransformerNet),
    Snail(SnailNet),
}

/// What one forward pass produced.
pub enum Output {
    /// Relation scores `[batch, supports, queries, 1]`, plus query
    /// probabilities `[batch, queries, 1]` for the weighted-sum classifier.
    Relation { r: Var, p: Option<Var>, user: Option<Var> },
    /// `[batch, queries, 1]`
    Queries(Var),
    /// `[batch, max_len, 1]` over the whole timeline.
    Timeline(Var),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore<f32>,
    net: Net,
}

/// `out[m][n] = 1` iff `support[m] == query[n]`, row-major.
pub fn target_similarity(support: &[u8], query: &[u8]) -> Result<Vec<u8>> {
    if support.iter().chain(query).any(|&y| y > 1) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    Ok(support
        .iter()
        .flat_map(|&s| query.iter().map(move |&q| (s == q) as u8))
        .collect())
}

pub fn build(config: &ModelConfig) -> Result<Model> {
    Model::new(config.clone())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(config.seed, "model.init");
        let mut params = ParamStore::new();
        let net = match config.kind {
            k if k.is_metric() => Net::Metric(MetricNet::new(&mut params, &config, &mut rng)?),
            ModelKind::Seq1eH | ModelKind::Seq1HL | ModelKind::Teacher => {
                Net::Conv(ConvNet::new(&mut params, &config, &mut rng)?)
            }
            ModelKind::AttPair => Net::AttPair(AttPairNet::new(&mut params, &config, &mut rng)?),
            ModelKind::Transformer => Net::Transformer(TransformerNet::new(&mut params, &config, &mut rng)?),
            ModelKind::Snail => Net::Snail(SnailNet::new(&mut params, &config, &mut rng)?),
            _ => unreachable!("every kind is covered"),
        };
        Ok(Model { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Values held by the dilated convolution stacks.
    pub fn stack_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("stack"))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim != self.config.input_dim {
            return Err(Error::Config(format!(
                "episodes have {} input columns, model expects {}",
                batch.dim, self.config.input_dim
            )));
        }
        if self.config.kind == ModelKind::Teacher && !batch.query_logs_visible {
            return Err(Error::Contract(
                "teacher needs episodes whose query log fields were kept".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch) -> Result<Output> {
        self.check_batch(batch)?;
        Ok(match &self.net {
            Net::Metric(m) => {
                let pass = m.forward(tape, p, batch)?;
                Output::Relation {
                    r: pass.r,
                    p: pass.p,
                    user: pass.user,
                }
            }
            Net::Conv(m) => Output::Timeline(m.forward(tape, p, batch)?),
            Net::AttPair(m) => Output::Queries(m.forward(tape, p, batch)?),
            Net::Transformer(m) => Output::Timeline(m.forward(tape, p, batch)?),
            Net::Snail(m) => Output::Timeline(m.forward(tape, p, batch)?),
        })
    }

    /// Mean training loss of `batch`: MSE against pairwise label agreement
    /// for `rnb1`/`rnb2_ue`, BCE against skip labels otherwise.
    pub fn loss(&self, tape: &mut Tape<f32>, p: &Bound, batch: &Batch, scope: LossScope) -> Result<Var> {
        let query_y = batch
            .query_y
            .as_ref()
            .ok_or_else(|| Error::Contract("training batches need query labels".into()))?;
        let out = self.forward(tape, p, batch)?;
        let (b, s, q) = (batch.size(), batch.max_support, batch.max_query);
        Ok(match out {
            Output::Relation { r, p: None, .. } => {
                let mut target = Vec::with_capacity(b * s * q);
                for i in 0..b {
                    for m in 0..s {
                        let ys = batch.support_y[i * s + m];
                        target.extend(query_y[i * q..][..q].iter().map(|&yq| (ys == yq) as u8 as f32));
                    }
                }
                tape.loss(LossKind::Mse, r, target.into(), batch.pair_mask().into())?
            }
            Output::Relation { p: Some(pred), .. } | Output::Queries(pred) => {
                tape.loss(LossKind::Bce, pred, Rc::from(query_y.as_slice()), batch.query_mask().into())?
            }
            Output::Timeline(pred) => {
                let l = batch.max_len;
                let mut target = vec![0f32; b * l];
                let mut mask = vec![false; b * l];
                for i in 0..b {
                    let ts = batch.support_lengths[i];
                    for m in 0..ts {
                        target[i * l + m] = batch.support_y[i * s + m];
                        mask[i * l + m] = scope == LossScope::SupportAndQuery;
                    }
                    for n in 0..batch.query_lengths[i] {
                        target[i * l + ts + n] = query_y[i * q + n];
                        mask[i * l + ts + n] = true;
                    }
                }
                tape.loss(LossKind::Bce, pred, target.into(), mask.into())?
            }
        })
    }

    /// Skip probability of every valid query step, per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, batch)?;
        let (s, q) = (batch.max_support, batch.max_query);
        let sizes = batch.support_lengths.iter().zip(&batch.query_lengths).enumerate();
        Ok(match out {
            Output::Relation { r, p: None, .. } => {
                let r = tape.value(r);
                sizes
                    .map(|(i, (&ts, &tq))| {
                        let ys: Vec<u8> = batch.support_y[i * s..][..ts].iter().map(|&y| y as u8).collect();
                        let block = &r[i * s * q..][..s * q];
                        let valid: Vec<f32> = (0..ts).flat_map(|m| block[m * q..][..tq].iter().copied()).collect();
                        vote(&valid, &ys, tq)
                    })
                    .collect()
            }
            Output::Relation { p: Some(v), .. } | Output::Queries(v) => {
                let v = tape.value(v);
                sizes.map(|(i, (_, &tq))| v[i * q..][..tq].to_vec()).collect()
            }
            Output::Timeline(v) => {
                let v = tape.value(v);
                let l = batch.max_len;
                sizes.map(|(i, (&ts, &tq))| v[i * l + ts..][..tq].to_vec()).collect()
            }
        })
    }

    /// Relation scores `[supports, queries]` (row-major) per sample.
    pub fn relation_scores(&self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        if !self.config.kind.is_metric() {
            return Err(Error::Contract(format!("{} does not score relation pairs", self.config.kind)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let Output::Relation { r, .. } = self.forward(&mut tape, &p, batch)? else {
            unreachable!("metric models return relation scores")
        };
        let r = tape.value(r);
        let (s, q) = (batch.max_support, batch.max_query);
        Ok((0..batch.size())
            .map(|i| {
                let (ts, tq) = (batch.support_lengths[i], batch.query_lengths[i]);
                (0..ts).flat_map(|m| r[(i * s + m) * q..][..tq].iter().copied()).collect()
            })
            .collect())
    }

    /// Pooled user embedding `[width]` per sample.
    pub fn user_embedding(&self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        if !self.config.kind.has_user_embedding() {
            return Err(Error::Contract(format!("{} has no user embedding", self.config.kind)));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let Output::Relation { user: Some(u), .. } = self.forward(&mut tape, &p, batch)? else {
            unreachable!("user-embedding models return one")
        };
        let w = self.config.width;
        Ok(tape.value(u).chunks(w).map(<[f32]>::to_vec).collect())
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        meta.insert(CONFIG_KEY.into(), cfg);
        Checkpoint::from_params(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let raw = ckpt
            .meta
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::Config("checkpoint carries no model config".into()))?;
        let config: ModelConfig =
            serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad model config in checkpoint: {e}")))?;
        let mut model = Model::new(config)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, String>) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_checkpoint(meta).write_to(std::io::BufWriter::new(f))?;
        Ok(())
    }

    /// The model and the checkpoint's metadata.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::read_from(std::io::BufReader::new(f))?;
        Ok((Model::from_checkpoint(&ckpt)?, ckpt.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xnor_targets() {
        assert_eq!(target_similarity(&[1], &[1]).unwrap(), vec![1]);
        assert_eq!(target_similarity(&[1], &[0]).unwrap(), vec![0]);
        assert_eq!(target_similarity(&[1, 1], &[1, 1, 1]).unwrap(), vec![1; 6]);
        assert_eq!(target_similarity(&[0, 1], &[0]).unwrap(), vec![1, 0]);
        assert!(target_similarity(&[2], &[0]).is_err());
    }
}
