//! Training protocol: session-level train/validation split, statistics
//! fitted on the training side, Adam with a per-epoch multiplicative
//! learning-rate decay, and best-validation model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use seqskip_tensor::{adam_step, AdamState, Tape, TensorError};
use serde::{Deserialize, Serialize};

use crate::data::{fit_stats, Batch, Dataset, Episode, PreprocessStats, SessionRecord};
use crate::error::{Error, Result};
use crate::eval::{episode_options, evaluate_episodes, EVAL_BATCH};
use crate::models::{LossScope, Model, ModelConfig};
use crate::rng::stream;

/// Checkpoint metadata key for the JSON preprocessing statistics.
pub const STATS_KEY: &str = "preprocess_stats";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `input_dim` is overwritten with the dataset's row width.
    pub model: ModelConfig,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub anneal_factor: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_scope: LossScope,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Where to write the best checkpoint as training goes.
    pub checkpoint: Option<PathBuf>,
    /// Assemble the next batches on a second thread.
    pub prefetch: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            model,
            train_fraction: 0.8,
            batch_size: 64,
            base_lr: 1e-3,
            anneal_factor: 0.7,
            max_epochs: 10,
            seed,
            loss_scope: LossScope::QueryOnly,
            clip_norm: None,
            checkpoint: None,
            prefetch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return bad("anneal_factor must lie in (0, 1)");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.anneal_factor.powi(epoch as i32 - 1)
    }
}

/// Session indices of the training and validation sides, each ascending.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 sessions to split, got {n}")));
    }
    let k = (n as f64 * fraction).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::Validation(format!(
            "fraction {fraction} of {n} sessions leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "trainer.split"));
    let (mut train, mut val) = (idx[..k].to_vec(), idx[k..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_train_val(
    sessions: &[SessionRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SessionRecord>, Vec<SessionRecord>)> {
    let (t, v) = split_indices(sessions.len(), fraction, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| sessions[i].clone()).collect();
    Ok((pick(&t), pick(&v)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_maa: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} val_maa={:.6} lr={:.6e}",
            self.epoch, self.train_loss, self.val_maa, self.lr
        )
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MAA.
    pub model: Model,
    pub stats: PreprocessStats,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_maa: f64,
    pub val_episodes: Vec<Episode>,
}

pub fn checkpoint_meta(stats: &PreprocessStats) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert(STATS_KEY.into(), serde_json::to_string(stats).expect("stats serialize"));
    meta
}

pub fn stats_from_meta(meta: &BTreeMap<String, String>) -> Result<PreprocessStats> {
    let raw = meta
        .get(STATS_KEY)
        .ok_or_else(|| Error::Config("checkpoint carries no preprocessing statistics".into()))?;
    serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad preprocessing statistics: {e}")))
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(config: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_s, val_s) = split_train_val(&data.sessions, config.train_fraction, config.seed)?;
    let stats = fit_stats(&train_s, &data.features, &data.schema)?;
    let opts = episode_options(config.model.kind);
    let train_eps = data.episodes(&train_s, &stats, opts, true)?;
    let val_eps = data.episodes(&val_s, &stats, opts, true)?;

    let mut model_cfg = config.model.clone();
    model_cfg.input_dim = data.layout().width();
    let mut model = Model::new(model_cfg)?;
    let mut adam = AdamState::new(model.params(), config.base_lr);
    let mut shuffle_rng = stream(config.seed, "trainer.shuffle");
    let mut order: Vec<usize> = (0..train_eps.len()).collect();

    let mut best = (0usize, f64::NEG_INFINITY);
    let mut best_params = model.params().clone();
    let mut log = Vec::with_capacity(config.max_epochs);
    for epoch in 1..=config.max_epochs {
        adam.lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let train_loss = run_epoch(config, &mut model, &mut adam, &train_eps, &order, epoch)?;
        let val_maa = evaluate_episodes(&model, &val_eps, EVAL_BATCH)?.maa;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_maa,
            lr: adam.lr,
        };
        on_epoch(&entry);
        log.push(entry);
        if val_maa > best.1 {
            best = (epoch, val_maa);
            best_params = model.params().clone();
            if let Some(path) = &config.checkpoint {
                model.save(path, checkpoint_meta(&stats))?;
            }
        }
    }
    model.params_mut().copy_values_from(&best_params)?;
    Ok(TrainOutcome {
        model,
        stats,
        log,
        best_epoch: best.0,
        best_val_maa: best.1,
        val_episodes: val_eps,
    })
}

fn batch_of(episodes: &[Episode], ids: &[usize]) -> Result<Batch> {
    Batch::new(&ids.iter().map(|&i| &episodes[i]).collect::<Vec<_>>())
}

/// One pass over `order`; returns the mean loss per session.
fn run_epoch(
    config: &TrainConfig,
    model: &mut Model,
    adam: &mut AdamState<f32>,
    episodes: &[Episode],
    order: &[usize],
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut step = |model: &mut Model, index: usize, batch: Batch| -> Result<()> {
        let diverged = || Error::NonFiniteLoss { epoch, batch: index };
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let loss = model
            .loss(&mut tape, &p, &batch, config.loss_scope)
            .map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => diverged(),
                other => other,
            })?;
        let value = tape.value(loss)[0] as f64;
        let grads = tape.backward(loss)?;
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate_grads(&p, &grads)?;
        let norm = params.grad_norm();
        if !norm.is_finite() {
            return Err(diverged());
        }
        if let Some(limit) = config.clip_norm.filter(|&c| norm > c) {
            let scale = (limit / norm) as f32;
            for t in params.tensors_mut() {
                if let Some(g) = t.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        adam_step(params, adam)?;
        total += value * batch.size() as f64;
        Ok(())
    };

    let chunks = order.chunks(config.batch_size);
    if config.prefetch {
        std::thread::scope(|scope| {
            let (tx, rx) = sync_channel::<Result<Batch>>(2);
            scope.spawn(move || {
                for ids in chunks {
                    if tx.send(batch_of(episodes, ids)).is_err() {
                        break;
                    }
                }
            });
            for (i, b) in rx.into_iter().enumerate() {
                step(model, i, b?)?;
            }
            Ok::<_, Error>(())
        })?;
    } else {
        for (i, ids) in chunks.enumerate() {
            step(model, i, batch_of(episodes, ids)?)?;
        }
    }
    Ok(total / order.len() as f64)
}
