use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::data::schema::{parse_bool, KindName, SchemaSpec};
use crate::error::{Error, Result};

pub const MIN_SESSION_LEN: usize = 10;
pub const MAX_SESSION_LEN: usize = 20;

/// One raw log field, already checked against its column kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogValue {
    Category(usize),
    Count(f64),
    Bool(bool),
    Real(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub track_ids: Vec<String>,
    /// Per position, one value per non-date schema column.
    pub logs: Vec<Vec<LogValue>>,
    pub skips: Vec<u8>,
}

impl SessionRecord {
    pub fn len(&self) -> usize {
        self.skips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skips.is_empty()
    }
}

pub fn load_sessions(path: &Path, schema: &SchemaSpec) -> Result<Vec<SessionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sessions(file, schema).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::parse(path, detail),
        other => other,
    })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::schema(name, "column missing from session file"))
}

pub fn read_sessions<R: Read>(reader: R, schema: &SchemaSpec) -> Result<Vec<SessionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse("<sessions>", e))?.clone();
    let sid_col = column_index(&headers, &schema.session_id_column)?;
    let pos_col = column_index(&headers, &schema.position_column)?;
    let track_col = column_index(&headers, &schema.track_id_column)?;
    let skip_col = column_index(&headers, &schema.skip_label_column)?;
    for c in &schema.columns {
        column_index(&headers, &c.name)?;
    }
    let log_cols: Vec<_> = schema
        .log_columns()
        .map(|c| Ok((column_index(&headers, &c.name)?, c)))
        .collect::<Result<_>>()?;

    struct Row {
        position: usize,
        track: String,
        logs: Vec<LogValue>,
        skip: u8,
    }
    let mut order: Vec<(String, Vec<Row>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse("<sessions>", e))?;
        let line = line + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let position: usize = field(pos_col).parse().map_err(|_| {
            Error::schema(&schema.position_column, format!("line {line}: `{}` is not a position", field(pos_col)))
        })?;
        let skip = parse_bool(field(skip_col)).ok_or_else(|| {
            Error::schema(&schema.skip_label_column, format!("line {line}: `{}` is not a boolean", field(skip_col)))
        })? as u8;
        let mut logs = Vec::with_capacity(log_cols.len());
        for &(i, col) in &log_cols {
            let raw = field(i);
            let v = match col.kind {
                KindName::Categorical => {
                    let k = col.vocabulary.iter().position(|w| w == raw).ok_or_else(|| {
                        Error::schema(&col.name, format!("line {line}: value `{raw}` is not in the vocabulary"))
                    })?;
                    LogValue::Category(k)
                }
                KindName::Count => {
                    let x: f64 = raw.parse().ok().filter(|x: &f64| x.is_finite() && *x >= 0.0).ok_or_else(|| {
                        Error::schema(&col.name, format!("line {line}: `{raw}` is not a non-negative count"))
                    })?;
                    LogValue::Count(x)
                }
                KindName::Boolean => LogValue::Bool(parse_bool(raw).ok_or_else(|| {
                    Error::schema(&col.name, format!("line {line}: `{raw}` is not a boolean"))
                })?),
                KindName::Real => {
                    let x: f64 = raw.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| {
                        Error::schema(&col.name, format!("line {line}: `{raw}` is not a finite number"))
                    })?;
                    LogValue::Real(x)
                }
                KindName::Date => unreachable!("date columns are filtered out"),
            };
            logs.push(v);
        }
        let sid = field(sid_col).to_string();
        let slot = *index.entry(sid.clone()).or_insert_with(|| {
            order.push((sid, Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(Row {
            position,
            track: field(track_col).to_string(),
            logs,
            skip,
        });
    }

    order
        .into_iter()
        .map(|(session_id, mut rows)| {
            rows.sort_by_key(|r| r.position);
            let len = rows.len();
            if !(MIN_SESSION_LEN..=MAX_SESSION_LEN).contains(&len) {
                return Err(Error::Validation(format!(
                    "session `{session_id}` has {len} tracks, expected {MIN_SESSION_LEN}..={MAX_SESSION_LEN}"
                )));
            }
            if rows.iter().enumerate().any(|(i, r)| r.position != i + 1) {
                return Err(Error::Validation(format!(
                    "session `{session_id}` positions are not contiguous from 1 to {len}"
                )));
            }
            let mut rec = SessionRecord {
                session_id,
                track_ids: Vec::with_capacity(len),
                logs: Vec::with_capacity(len),
                skips: Vec::with_capacity(len),
            };
            for r in rows {
                rec.track_ids.push(r.track);
                rec.logs.push(r.logs);
                rec.skips.push(r.skip);
            }
            Ok(rec)
        })
        .collect()
}
