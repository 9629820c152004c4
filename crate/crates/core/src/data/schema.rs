//! Column layout of the session log, read from a TOML file:
//!
//! ```toml
//! session_id_column = "session_id"
//! position_column = "session_position"
//! track_id_column = "track_id_clean"
//! skip_label_column = "skip"
//! feature_track_id_column = "track_id"
//!
//! [[columns]]
//! name = "hist_user_behavior_reason_start"
//! kind = "categorical"
//! vocabulary = ["fwdbtn", "clickrow", "trackdone"]
//!
//! [[columns]]
//! name = "hist_user_behavior_n_seekfwd"
//! kind = "count"
//! ```
//!
//! Column kinds are `categorical`, `count`, `boolean`, `real` and `date`.
//! Date columns are accepted and ignored. Every column of the feature file
//! other than `feature_track_id_column` is an acoustic feature.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Categorical,
    Count,
    Boolean,
    Real,
    Date,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: KindName,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
}

impl Column {
    /// Width of this column after preprocessing.
    pub fn encoded_width(&self) -> usize {
        match self.kind {
            KindName::Categorical => self.vocabulary.len(),
            KindName::Count | KindName::Boolean | KindName::Real => 1,
            KindName::Date => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub session_id_column: String,
    pub position_column: String,
    pub track_id_column: String,
    pub skip_label_column: String,
    pub feature_track_id_column: String,
    #[serde(default)]
    pub columns: Vec<Column>,
}

impl SchemaSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SchemaSpec = toml::from_str(text).map_err(|e| Error::schema("<schema>", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Schema { column, detail } => Error::Schema {
                column,
                detail: format!("{detail} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let keys = [
            &self.session_id_column,
            &self.position_column,
            &self.track_id_column,
            &self.skip_label_column,
        ];
        for name in keys.into_iter().chain(self.columns.iter().map(|c| &c.name)) {
            if !seen.insert(name.as_str()) {
                return Err(Error::schema(name, "column name used more than once"));
            }
        }
        for c in &self.columns {
            match c.kind {
                KindName::Categorical => {
                    if c.vocabulary.is_empty() {
                        return Err(Error::schema(&c.name, "categorical column needs a vocabulary"));
                    }
                    let mut words = HashSet::new();
                    for w in &c.vocabulary {
                        if !words.insert(w) {
                            return Err(Error::schema(&c.name, format!("vocabulary entry `{w}` repeated")));
                        }
                    }
                }
                _ if !c.vocabulary.is_empty() => {
                    return Err(Error::schema(&c.name, "only categorical columns take a vocabulary"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Columns that survive preprocessing, in schema order.
    pub fn log_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.kind != KindName::Date)
    }

    /// Width of the encoded interaction-log block.
    pub fn log_width(&self) -> usize {
        self.columns.iter().map(Column::encoded_width).sum()
    }
}

pub(crate) fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}
