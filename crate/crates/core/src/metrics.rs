//! Average accuracy over query positions, its corpus mean, reference
//! baselines, and the prediction wire format (`session_id,01101`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::data::Episode;
use crate::error::{Error, Result};

/// Probabilities at or above this map to 1 (skipped).
pub const THRESHOLD: f32 = 0.5;

pub fn binarize(p: f32) -> u8 {
    (p >= THRESHOLD) as u8
}

/// `sum_i A(i) L(i) / T`, where `L(i)` marks a correct prediction at `i` and
/// `A(i)` is the accuracy over the first `i` predictions.
pub fn average_accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Evaluation("no positions to score".into()));
    }
    let mut correct = 0usize;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p == t {
            correct += 1;
            total += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(total / pred.len() as f64)
}

/// Unweighted mean, summed in input order.
pub fn mean_average_accuracy(per_session: &[f64]) -> Result<f64> {
    if per_session.is_empty() {
        return Err(Error::Evaluation("no sessions to score".into()));
    }
    Ok(per_session.iter().sum::<f64>() / per_session.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionPrediction {
    pub session_id: String,
    pub predicted: Vec<u8>,
    pub truth: Vec<u8>,
}

impl SessionPrediction {
    pub fn average_accuracy(&self) -> Result<f64> {
        average_accuracy(&self.predicted, &self.truth)
    }
}

pub fn score(predictions: &[SessionPrediction]) -> Result<f64> {
    let aa = predictions
        .iter()
        .map(SessionPrediction::average_accuracy)
        .collect::<Result<Vec<_>>>()?;
    mean_average_accuracy(&aa)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    AllSkip,
    AllNoSkip,
    CarryLastSupport,
}

pub fn baseline(kind: Baseline, episode: &Episode) -> Vec<u8> {
    let n = episode.query_len();
    match kind {
        Baseline::AllSkip => vec![1; n],
        Baseline::AllNoSkip => vec![0; n],
        Baseline::CarryLastSupport => vec![*episode.support_y.last().expect("supports are never empty"); n],
    }
}

/// MAA of a baseline over episodes that carry query labels.
pub fn baseline_maa(kind: Baseline, episodes: &[Episode]) -> Result<f64> {
    let aa = episodes
        .iter()
        .map(|e| {
            let truth = e
                .query_y
                .as_ref()
                .ok_or_else(|| Error::Evaluation(format!("session `{}` has no query labels", e.session_id)))?;
            average_accuracy(&baseline(kind, e), truth)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_average_accuracy(&aa)
}

/// Binary query predictions per session, in input-file session order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictionSet {
    pub entries: Vec<(String, Vec<u8>)>,
}

impl PredictionSet {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (sid, bits) in &self.entries {
            let s: String = bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
            writeln!(w, "{sid},{s}")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line.map_err(|e| Error::io("<predictions>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: &str| Error::parse("<predictions>", format!("line {}: {why}", i + 1));
            let (sid, bits) = line.rsplit_once(',').ok_or_else(|| bad("expected `session_id,bits`"))?;
            let bits = bits
                .trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(bad("predictions must be 0/1 characters")),
                })
                .collect::<Result<Vec<u8>>>()?;
            if sid.is_empty() || bits.is_empty() {
                return Err(bad("empty session id or prediction string"));
            }
            entries.push((sid.to_string(), bits));
        }
        Ok(PredictionSet { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f).map_err(|e| match e {
            Error::Parse { detail, .. } => Error::parse(path, detail),
            other => other,
        })
    }
}
