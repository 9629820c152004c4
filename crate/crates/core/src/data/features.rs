use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::data::schema::SchemaSpec;
use crate::data::session::SessionRecord;
use crate::error::{Error, Result};

/// Acoustic feature vector per track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    vectors: HashMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(names: Vec<String>) -> Self {
        FeatureTable {
            names,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, track: impl Into<String>, v: Vec<f64>) -> Result<()> {
        let track = track.into();
        if v.len() != self.dim() {
            return Err(Error::Validation(format!(
                "track `{track}` has {} features, expected {}",
                v.len(),
                self.dim()
            )));
        }
        if self.vectors.insert(track.clone(), v).is_some() {
            return Err(Error::Validation(format!("track `{track}` listed twice")));
        }
        Ok(())
    }

    pub fn get(&self, track: &str) -> Result<&[f64]> {
        self.vectors
            .get(track)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownTrack(track.to_string()))
    }

    /// Fails on the first track referenced by `sessions` that has no row.
    pub fn check_coverage(&self, sessions: &[SessionRecord]) -> Result<()> {
        for s in sessions {
            for t in &s.track_ids {
                self.get(t)?;
            }
        }
        Ok(())
    }
}

pub fn load_features(path: &Path, schema: &SchemaSpec) -> Result<FeatureTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(file, schema).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::parse(path, detail),
        other => other,
    })
}

pub fn read_features<R: Read>(reader: R, schema: &SchemaSpec) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse("<features>", e))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h.trim() == schema.feature_track_id_column)
        .ok_or_else(|| Error::schema(&schema.feature_track_id_column, "column missing from feature file"))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::schema("<features>", "feature file has no acoustic columns"));
    }
    let mut table = FeatureTable::new(names);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse("<features>", e))?;
        let mut v = Vec::with_capacity(table.dim());
        for (i, raw) in rec.iter().enumerate() {
            if i == id_col {
                continue;
            }
            let x: f64 = raw.trim().parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| {
                Error::schema(&headers[i], format!("line {}: `{raw}` is not a finite number", line + 2))
            })?;
            v.push(x);
        }
        table.insert(rec[id_col].trim(), v)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> SchemaSpec {
        SchemaSpec::from_toml(
            "session_id_column = \"s\"\nposition_column = \"p\"\ntrack_id_column = \"t\"\n\
             skip_label_column = \"k\"\nfeature_track_id_column = \"track_id\"\n",
        )
        .unwrap()
    }

    #[test]
    fn reads_vectors() {
        let t = read_features("track_id,a,b\nx,1.5,2\ny,-1,0\n".as_bytes(), &schema()).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.get("x").unwrap(), &[1.5, 2.0]);
        assert!(matches!(t.get("z"), Err(Error::UnknownTrack(_))));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(read_features("track_id,a\nx,1\nx,2\n".as_bytes(), &schema()).is_err());
        assert!(read_features("track_id,a\nx,nan\n".as_bytes(), &schema()).is_err());
    }
}
