use std::ops::RangeInclusive;

use crate::data::preprocess::RowLayout;
use crate::data::session::{MAX_SESSION_LEN, MIN_SESSION_LEN};
use crate::error::{Error, Result};

/// 1-based support and query positions of a session of length `len`.
/// The support half takes the extra track when `len` is odd.
pub fn split_session(len: usize) -> Result<(RangeInclusive<usize>, RangeInclusive<usize>)> {
    if !(MIN_SESSION_LEN..=MAX_SESSION_LEN).contains(&len) {
        return Err(Error::Validation(format!(
            "session length {len} outside {MIN_SESSION_LEN}..={MAX_SESSION_LEN}"
        )));
    }
    let ts = len.div_ceil(2);
    Ok((1..=ts, ts + 1..=len))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeOptions {
    /// Leave query-side log fields in place (teacher input).
    pub keep_query_logs: bool,
}

/// One model-ready session. Row matrices are row-major `[steps, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub session_id: String,
    pub dim: usize,
    pub support_x: Vec<f32>,
    pub query_x: Vec<f32>,
    pub support_y: Vec<u8>,
    pub query_y: Option<Vec<u8>>,
    pub query_logs_visible: bool,
}

impl Episode {
    /// `rows` come from [`crate::data::transform`]; `labels` are the skip
    /// labels of every position. Query labels are kept for scoring only.
    pub fn new(
        session_id: impl Into<String>,
        rows: Vec<Vec<f32>>,
        labels: &[u8],
        layout: RowLayout,
        opts: EpisodeOptions,
        with_query_labels: bool,
    ) -> Result<Self> {
        let (support, _) = split_session(rows.len())?;
        let ts = *support.end();
        let dim = layout.width();
        if labels.len() != rows.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("episode rows do not match the row layout".into()));
        }
        let mut support_x = Vec::with_capacity(ts * dim);
        let mut query_x = Vec::with_capacity((rows.len() - ts) * dim);
        for (i, mut row) in rows.into_iter().enumerate() {
            if i < ts {
                support_x.extend_from_slice(&row);
                continue;
            }
            if !opts.keep_query_logs {
                row[..layout.log_width].iter_mut().for_each(|v| *v = 0.0);
            }
            row[layout.label_slot()] = 0.0;
            row[layout.indicator_slot()] = 1.0;
            query_x.extend_from_slice(&row);
        }
        Ok(Episode {
            session_id: session_id.into(),
            dim,
            support_x,
            query_x,
            support_y: labels[..ts].to_vec(),
            query_y: with_query_labels.then(|| labels[ts..].to_vec()),
            query_logs_visible: opts.keep_query_logs,
        })
    }

    pub fn support_len(&self) -> usize {
        self.support_y.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_x.len() / self.dim
    }

    pub fn len(&self) -> usize {
        self.support_len() + self.query_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query_row(&self, n: usize) -> &[f32] {
        &self.query_x[n * self.dim..][..self.dim]
    }
}

/// Episodes padded to common lengths. Padding sits after the valid steps.
/// The timeline holds support rows followed by query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub session_ids: Vec<String>,
    pub dim: usize,
    pub lengths: Vec<usize>,
    pub support_lengths: Vec<usize>,
    pub query_lengths: Vec<usize>,
    pub max_len: usize,
    pub max_support: usize,
    pub max_query: usize,
    /// `[batch, max_len, dim]`
    pub timeline: Vec<f32>,
    /// `[batch, max_support, dim]`
    pub support: Vec<f32>,
    /// `[batch, max_query, dim]`
    pub query: Vec<f32>,
    /// `[batch, max_support]`, zero where padded.
    pub support_y: Vec<f32>,
    /// `[batch, max_query]`, zero where padded.
    pub query_y: Option<Vec<f32>>,
    pub query_logs_visible: bool,
}

impl Batch {
    pub fn new(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Validation("cannot batch an empty episode list".into()))?;
        let dim = first.dim;
        if episodes.iter().any(|e| e.dim != dim) {
            return Err(Error::Validation("episodes in one batch have different widths".into()));
        }
        let n = episodes.len();
        let max_len = episodes.iter().map(|e| e.len()).max().unwrap();
        let max_support = episodes.iter().map(|e| e.support_len()).max().unwrap();
        let max_query = episodes.iter().map(|e| e.query_len()).max().unwrap();
        let with_labels = episodes.iter().all(|e| e.query_y.is_some());
        let mut b = Batch {
            session_ids: episodes.iter().map(|e| e.session_id.clone()).collect(),
            dim,
            lengths: episodes.iter().map(|e| e.len()).collect(),
            support_lengths: episodes.iter().map(|e| e.support_len()).collect(),
            query_lengths: episodes.iter().map(|e| e.query_len()).collect(),
            max_len,
            max_support,
            max_query,
            timeline: vec![0.0; n * max_len * dim],
            support: vec![0.0; n * max_support * dim],
            query: vec![0.0; n * max_query * dim],
            support_y: vec![0.0; n * max_support],
            query_y: with_labels.then(|| vec![0.0; n * max_query]),
            query_logs_visible: episodes.iter().all(|e| e.query_logs_visible),
        };
        for (i, e) in episodes.iter().enumerate() {
            let (s, q) = (e.support_x.len(), e.query_x.len());
            let t = &mut b.timeline[i * max_len * dim..];
            t[..s].copy_from_slice(&e.support_x);
            t[s..s + q].copy_from_slice(&e.query_x);
            b.support[i * max_support * dim..][..s].copy_from_slice(&e.support_x);
            b.query[i * max_query * dim..][..q].copy_from_slice(&e.query_x);
            for (m, &y) in e.support_y.iter().enumerate() {
                b.support_y[i * max_support + m] = y as f32;
            }
            if let (Some(dst), Some(src)) = (b.query_y.as_mut(), e.query_y.as_ref()) {
                for (k, &y) in src.iter().enumerate() {
                    dst[i * max_query + k] = y as f32;
                }
            }
        }
        Ok(b)
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// `[batch, max_query]`, true at real query steps.
    pub fn query_mask(&self) -> Vec<bool> {
        mask(&self.query_lengths, self.max_query)
    }

    /// `[batch, max_support]`, true at real support steps.
    pub fn support_mask(&self) -> Vec<bool> {
        mask(&self.support_lengths, self.max_support)
    }

    /// `[batch, max_support, max_query]`, true for real (support, query) pairs.
    pub fn pair_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size() * self.max_support * self.max_query);
        for (&s, &q) in self.support_lengths.iter().zip(&self.query_lengths) {
            for m in 0..self.max_support {
                out.extend((0..self.max_query).map(|n| m < s && n < q));
            }
        }
        out
    }

    /// Timeline index of query step `n` of sample `b`.
    pub fn query_step(&self, b: usize, n: usize) -> usize {
        self.support_lengths[b] + n
    }
}

fn mask(lengths: &[usize], max: usize) -> Vec<bool> {
    lengths.iter().flat_map(|&l| (0..max).map(move |i| i < l)).collect()
}

/// Consecutive batches of at most `batch_size` episodes.
pub fn make_batches(episodes: &[Episode], batch_size: usize) -> Result<Vec<Batch>> {
    if episodes.is_empty() {
        return Err(Error::Validation("cannot batch an empty episode list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    episodes
        .chunks(batch_size)
        .map(|c| Batch::new(&c.iter().collect::<Vec<_>>()))
        .collect()
}
