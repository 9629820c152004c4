//! Batched inference and scoring of a trained model.

use rayon::prelude::*;

use crate::data::{Batch, Dataset, Episode, EpisodeOptions, PreprocessStats};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, binarize, mean_average_accuracy, PredictionSet};
use crate::models::{Model, ModelKind};

pub const EVAL_BATCH: usize = 256;

pub fn episode_options(kind: ModelKind) -> EpisodeOptions {
    EpisodeOptions {
        keep_query_logs: kind == ModelKind::Teacher,
    }
}

/// Query probabilities for every episode, in input order. Batches run in
/// parallel; results do not depend on the thread count.
pub fn predict_episodes(model: &Model, episodes: &[Episode], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let chunks: Vec<Vec<Vec<f32>>> = episodes
        .par_chunks(batch_size)
        .map(|c| model.predict(&Batch::new(&c.iter().collect::<Vec<_>>())?))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_session: Vec<(String, f64)>,
    pub maa: f64,
}

pub fn evaluate_episodes(model: &Model, episodes: &[Episode], batch_size: usize) -> Result<Evaluation> {
    let probs = predict_episodes(model, episodes, batch_size)?;
    let per_session = episodes
        .iter()
        .zip(&probs)
        .map(|(e, p)| {
            let truth = e
                .query_y
                .as_ref()
                .ok_or_else(|| Error::Evaluation(format!("session `{}` has no query labels", e.session_id)))?;
            let pred: Vec<u8> = p.iter().map(|&v| binarize(v)).collect();
            Ok((e.session_id.clone(), average_accuracy(&pred, truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let aa: Vec<f64> = per_session.iter().map(|(_, a)| *a).collect();
    Ok(Evaluation {
        maa: mean_average_accuracy(&aa)?,
        per_session,
    })
}

fn dataset_episodes(model: &Model, stats: &PreprocessStats, data: &Dataset, labels: bool) -> Result<Vec<Episode>> {
    data.episodes(&data.sessions, stats, episode_options(model.kind()), labels)
}

pub fn evaluate_dataset(model: &Model, stats: &PreprocessStats, data: &Dataset) -> Result<Evaluation> {
    evaluate_episodes(model, &dataset_episodes(model, stats, data, true)?, EVAL_BATCH)
}

pub fn predict_dataset(model: &Model, stats: &PreprocessStats, data: &Dataset) -> Result<PredictionSet> {
    let episodes = dataset_episodes(model, stats, data, false)?;
    let probs = predict_episodes(model, &episodes, EVAL_BATCH)?;
    Ok(PredictionSet {
        entries: episodes
            .iter()
            .zip(probs)
            .map(|(e, p)| (e.session_id.clone(), p.into_iter().map(binarize).collect()))
            .collect(),
    })
}

/// Scores a prediction file against the query labels of `data`.
pub fn score_predictions(predictions: &PredictionSet, data: &Dataset) -> Result<Evaluation> {
    let truth: std::collections::HashMap<&str, &[u8]> = data
        .sessions
        .iter()
        .map(|s| {
            let (_, query) = crate::data::split_session(s.len())?;
            Ok((s.session_id.as_str(), &s.skips[*query.start() - 1..]))
        })
        .collect::<Result<_>>()?;
    let per_session = predictions
        .entries
        .iter()
        .map(|(sid, bits)| {
            let t = truth
                .get(sid.as_str())
                .ok_or_else(|| Error::Evaluation(format!("session `{sid}` is not in the dataset")))?;
            Ok((sid.clone(), average_accuracy(bits, t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let aa: Vec<f64> = per_session.iter().map(|(_, a)| *a).collect();
    Ok(Evaluation {
        maa: mean_average_accuracy(&aa)?,
        per_session,
    })
}
