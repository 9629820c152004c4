use serde::{Deserialize, Serialize};

use crate::data::features::FeatureTable;
use crate::data::schema::{KindName, SchemaSpec};
use crate::data::session::{LogValue, SessionRecord};
use crate::error::{Error, Result};

/// Standard deviations below this are treated as a constant column.
const MIN_STD: f64 = 1e-12;

/// Bounds of `ln(1 + x)` for one count column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

impl LogRange {
    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            return 0.0;
        }
        ((x.ln_1p() - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

impl Moments {
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Moments {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Moments {
            mean,
            std,
            constant: std < MIN_STD,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }
}

/// Statistics fitted on a training corpus and reused unchanged for
/// validation and evaluation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    /// One entry per count column, in schema order.
    pub counts: Vec<LogRange>,
    /// One entry per real-valued log column, in schema order.
    pub reals: Vec<Moments>,
    /// One entry per acoustic dimension.
    pub acoustic: Vec<Moments>,
    pub log_width: usize,
}

/// Column offsets of a preprocessed row:
/// `[log block | acoustic block | skip label | query indicator]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLayout {
    pub log_width: usize,
    pub acoustic_dim: usize,
}

impl RowLayout {
    pub fn new(schema: &SchemaSpec, acoustic_dim: usize) -> Self {
        RowLayout {
            log_width: schema.log_width(),
            acoustic_dim,
        }
    }

    pub fn width(&self) -> usize {
        self.log_width + self.acoustic_dim + 2
    }

    pub fn acoustic(&self) -> std::ops::Range<usize> {
        self.log_width..self.log_width + self.acoustic_dim
    }

    pub fn label_slot(&self) -> usize {
        self.log_width + self.acoustic_dim
    }

    pub fn indicator_slot(&self) -> usize {
        self.label_slot() + 1
    }
}

/// Acoustic moments are taken over every position of the corpus, so a track
/// counts once per play.
pub fn fit_stats(sessions: &[SessionRecord], features: &FeatureTable, schema: &SchemaSpec) -> Result<PreprocessStats> {
    if sessions.is_empty() {
        return Err(Error::Validation("cannot fit preprocessing statistics on an empty corpus".into()));
    }
    let cols: Vec<_> = schema.log_columns().collect();
    let column = |j: usize| sessions.iter().flat_map(move |s| s.logs.iter().map(move |row| row[j]));

    let mut counts = Vec::new();
    let mut reals = Vec::new();
    for (j, c) in cols.iter().enumerate() {
        match c.kind {
            KindName::Count => {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in column(j) {
                    if let LogValue::Count(x) = v {
                        let l = x.ln_1p();
                        lo = lo.min(l);
                        hi = hi.max(l);
                    }
                }
                counts.push(LogRange {
                    min: lo,
                    max: hi,
                    constant: hi - lo < MIN_STD,
                });
            }
            KindName::Real => reals.push(Moments::fit(column(j).map(|v| match v {
                LogValue::Real(x) => x,
                _ => 0.0,
            }))),
            _ => {}
        }
    }

    let mut plays: Vec<&[f64]> = Vec::new();
    for s in sessions {
        for t in &s.track_ids {
            plays.push(features.get(t)?);
        }
    }
    let acoustic = (0..features.dim())
        .map(|d| Moments::fit(plays.iter().map(move |v| v[d])))
        .collect();

    Ok(PreprocessStats {
        counts,
        reals,
        acoustic,
        log_width: schema.log_width(),
    })
}

/// Full-width rows for every position of `record`, support-style: the label
/// slot holds the skip label and the query indicator is 0.
pub fn transform(
    record: &SessionRecord,
    features: &FeatureTable,
    stats: &PreprocessStats,
    schema: &SchemaSpec,
) -> Result<Vec<Vec<f32>>> {
    if stats.log_width != schema.log_width() || stats.acoustic.len() != features.dim() {
        return Err(Error::Config(
            "preprocessing statistics were fitted with a different schema or feature set".into(),
        ));
    }
    let layout = RowLayout::new(schema, features.dim());
    let cols: Vec<_> = schema.log_columns().collect();
    let mut out = Vec::with_capacity(record.len());
    for p in 0..record.len() {
        let mut row = vec![0f32; layout.width()];
        let (mut at, mut ci, mut ri) = (0, 0, 0);
        for (c, v) in cols.iter().zip(&record.logs[p]) {
            match *v {
                LogValue::Category(k) => row[at + k] = 1.0,
                LogValue::Count(x) => {
                    row[at] = stats.counts[ci].apply(x) as f32;
                    ci += 1;
                }
                LogValue::Bool(b) => row[at] = b as u8 as f32,
                LogValue::Real(x) => {
                    row[at] = stats.reals[ri].apply(x) as f32;
                    ri += 1;
                }
            }
            at += c.encoded_width();
        }
        let a = features.get(&record.track_ids[p])?;
        for (d, (&x, m)) in a.iter().zip(&stats.acoustic).enumerate() {
            row[layout.log_width + d] = m.apply(x) as f32;
        }
        row[layout.label_slot()] = record.skips[p] as f32;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> SchemaSpec {
        SchemaSpec::from_toml(
            r#"
session_id_column = "sid"
position_column = "pos"
track_id_column = "track"
skip_label_column = "skip"
feature_track_id_column = "track_id"
[[columns]]
name = "reason"
kind = "categorical"
vocabulary = ["a", "b", "c"]
[[columns]]
name = "n"
kind = "count"
[[columns]]
name = "zero"
kind = "count"
"#,
        )
        .unwrap()
    }

    fn session(counts: &[f64], tracks: &[&str]) -> SessionRecord {
        SessionRecord {
            session_id: "s".into(),
            track_ids: tracks.iter().map(|t| t.to_string()).collect(),
            logs: counts
                .iter()
                .map(|&n| vec![LogValue::Category(1), LogValue::Count(n), LogValue::Count(0.0)])
                .collect(),
            skips: vec![1; counts.len()],
        }
    }

    fn table() -> FeatureTable {
        let mut t = FeatureTable::new(vec!["f".into()]);
        t.insert("x", vec![1.0]).unwrap();
        t.insert("y", vec![3.0]).unwrap();
        t
    }

    #[test]
    fn fitted_bounds_and_moments() {
        let s = schema();
        let stats = fit_stats(&[session(&[0.0, 9.0], &["x", "y"])], &table(), &s).unwrap();
        assert_eq!(stats.counts[0].min, 0.0);
        assert!((stats.counts[0].max - 10f64.ln()).abs() < 1e-15);
        assert!(stats.counts[1].constant);
        assert_eq!((stats.counts[1].min, stats.counts[1].max), (0.0, 0.0));
        assert_eq!((stats.acoustic[0].mean, stats.acoustic[0].std), (2.0, 1.0));
    }

    #[test]
    fn rows_follow_the_layout() {
        let s = schema();
        let fit = session(&[0.0, 9.0], &["x", "y"]);
        let stats = fit_stats(std::slice::from_ref(&fit), &table(), &s).unwrap();
        let rows = transform(&session(&[0.0, 99.0], &["x", "y"]), &table(), &stats, &s).unwrap();
        let layout = RowLayout::new(&s, 1);
        assert_eq!(layout.width(), 3 + 2 + 1 + 2);
        assert_eq!(rows[0][..3], [0.0, 1.0, 0.0]);
        assert_eq!(rows[0][3], 0.0);
        assert_eq!(rows[1][3], 1.0, "counts above the fitted max clamp to 1");
        assert_eq!(rows[0][5], -1.0);
        assert_eq!(rows[1][5], 1.0);
        assert_eq!(rows[0][layout.label_slot()], 1.0);
        assert_eq!(rows[0][layout.indicator_slot()], 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(fit_stats(&[], &table(), &schema()).is_err());
    }
}
