//! Session and feature file ingestion, preprocessing, and episode assembly.

mod episode;
mod features;
mod preprocess;
mod schema;
mod session;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use episode::{make_batches, split_session, Batch, Episode, EpisodeOptions};
pub use features::{load_features, read_features, FeatureTable};
pub use preprocess::{fit_stats, transform, LogRange, Moments, PreprocessStats, RowLayout};
pub use schema::{Column, KindName, SchemaSpec};
pub use session::{load_sessions, read_sessions, LogValue, SessionRecord, MAX_SESSION_LEN, MIN_SESSION_LEN};

use crate::error::Result;

pub const SESSIONS_FILE: &str = "sessions.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const SCHEMA_FILE: &str = "schema.toml";

/// Parsed sessions with the feature table and schema they were read with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: SchemaSpec,
    pub sessions: Vec<SessionRecord>,
    pub features: FeatureTable,
}

impl Dataset {
    /// Reads `sessions.csv`, `features.csv` and `schema.toml` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(SESSIONS_FILE), &dir.join(FEATURES_FILE), &dir.join(SCHEMA_FILE))
    }

    pub fn load(sessions: &Path, features: &Path, schema: &Path) -> Result<Self> {
        let schema = SchemaSpec::load(schema)?;
        let sessions = load_sessions(sessions, &schema)?;
        let features = load_features(features, &schema)?;
        features.check_coverage(&sessions)?;
        Ok(Dataset {
            schema,
            sessions,
            features,
        })
    }

    pub fn layout(&self) -> RowLayout {
        RowLayout::new(&self.schema, self.features.dim())
    }

    pub fn paths(dir: &Path) -> [PathBuf; 3] {
        [dir.join(SESSIONS_FILE), dir.join(FEATURES_FILE), dir.join(SCHEMA_FILE)]
    }

    /// Episodes for `sessions` in input order.
    pub fn episodes(
        &self,
        sessions: &[SessionRecord],
        stats: &PreprocessStats,
        opts: EpisodeOptions,
        with_query_labels: bool,
    ) -> Result<Vec<Episode>> {
        let layout = self.layout();
        sessions
            .par_iter()
            .map(|s| {
                let rows = transform(s, &self.features, stats, &self.schema)?;
                Episode::new(s.session_id.clone(), rows, &s.skips, layout, opts, with_query_labels)
            })
            .collect()
    }
}
