//! Synthetic sessions in the challenge file layout, with skip labels drawn
//! from one of four known rules:
//!
//! * `threshold`: `skip = [w . a > 0]` for one global `w`.
//! * `preference`: as above, but each session draws its own `w` from a small
//!   pool of shared tastes, so only the session's support labels reveal it.
//! * `markov`: a chain on the previous two labels plus a weak acoustic term.
//! * `log_leak`: a noisy acoustic rule whose label is also reflected in the
//!   `n_seekfwd` count column.
//!
//! Label noise flips each final label independently with probability `noise`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Column, KindName, SchemaSpec, MAX_SESSION_LEN, MIN_SESSION_LEN};
use crate::data::{FEATURES_FILE, SCHEMA_FILE, SESSIONS_FILE};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const MARKOV_PREV: f64 = -2.5;
pub const MARKOV_PREV2: f64 = 1.0;
pub const MARKOV_ACOUSTIC: f64 = 1.0;
/// Standard deviation of the latent noise in the log_leak label.
pub const LEAK_LATENT_SD: f64 = 2.0;
/// Probability that `n_seekfwd` lands in the range typical of the label.
pub const LEAK_FIDELITY: f64 = 0.85;

pub const REASONS: [&str; 3] = ["fwdbtn", "clickrow", "trackdone"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Threshold,
    Preference,
    Markov,
    LogLeak,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Threshold, Rule::Preference, Rule::Markov, Rule::LogLeak];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Threshold => "threshold",
            Rule::Preference => "preference",
            Rule::Markov => "markov",
            Rule::LogLeak => "log_leak",
        }
    }

    /// Expected skip rate of the noiseless rule. Every rule is symmetric
    /// under `w -> -w`, so label noise leaves it unchanged.
    pub fn design_skip_rate(self) -> f64 {
        0.5
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rule `{s}` (threshold, preference, markov, log_leak)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub n_tracks: usize,
    pub rule: Rule,
    pub noise: f64,
    pub seed: u64,
    /// Number of shared taste vectors the preference rule draws a
    /// session's `w` from; 0 draws a fresh `w` for every session.
    pub preference_pool: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sessions: 10_000,
            min_len: MIN_SESSION_LEN,
            max_len: MAX_SESSION_LEN,
            feature_dim: 16,
            n_tracks: 5_000,
            rule: Rule::Threshold,
            noise: 0.0,
            seed: 0,
            preference_pool: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 0.5), got {}", self.noise)));
        }
        if self.min_len < MIN_SESSION_LEN || self.max_len > MAX_SESSION_LEN || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "session lengths {}..={} must lie within {MIN_SESSION_LEN}..={MAX_SESSION_LEN}",
                self.min_len, self.max_len
            )));
        }
        if self.n_sessions == 0 || self.n_tracks == 0 || self.feature_dim == 0 {
            return Err(Error::Config("n_sessions, n_tracks and feature_dim must be positive".into()));
        }
        Ok(())
    }
}

pub fn schema() -> SchemaSpec {
    let col = |name: &str, kind, vocabulary: &[&str]| Column {
        name: name.into(),
        kind,
        vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
    };
    SchemaSpec {
        session_id_column: "session_id".into(),
        position_column: "session_position".into(),
        track_id_column: "track_id_clean".into(),
        skip_label_column: "skip".into(),
        feature_track_id_column: "track_id".into(),
        columns: vec![
            col("hist_user_behavior_reason_start", KindName::Categorical, &REASONS),
            col("hist_user_behavior_n_seekfwd", KindName::Count, &[]),
            col("hist_user_behavior_n_seekback", KindName::Count, &[]),
            col("hist_user_behavior_is_shuffle", KindName::Boolean, &[]),
            col("date", KindName::Date, &[]),
        ],
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Rescales `v` to norm `sqrt(len)`, so `v . a / sqrt(len)` has unit
/// variance for standard-normal `a`.
fn unit_scale(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = (v.len() as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= target / norm);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The global weight vector of the threshold, markov and log_leak rules.
pub fn rule_weights(config: &SynthConfig) -> Vec<f64> {
    unit_scale(normal_vec(&mut stream(config.seed, "synth.rule"), config.feature_dim))
}

/// Taste vectors of the preference rule, when drawn from a pool.
pub fn preference_pool(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(config.seed, "synth.tastes");
    (0..config.preference_pool).map(|_| normal_vec(&mut rng, config.feature_dim)).collect()
}

/// Acoustic features of every catalog track, quantized as written to disk.
pub fn catalog(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(config.seed, "synth.catalog");
    (0..config.n_tracks)
        .map(|_| normal_vec(&mut rng, config.feature_dim).into_iter().map(quantize).collect())
        .collect()
}

fn quantize(x: f64) -> f64 {
    format!("{x:.6}").parse().unwrap()
}

pub fn track_id(i: usize) -> String {
    format!("t_{i:06}")
}

pub fn session_id(i: usize) -> String {
    format!("s_{i:06}")
}

struct Position {
    track: usize,
    reason: usize,
    seekfwd: u32,
    seekback: u32,
    shuffle: bool,
    skip: bool,
}

fn session(
    config: &SynthConfig,
    tracks: &[Vec<f64>],
    w: &[f64],
    pool: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<Position> {
    let len = rng.random_range(config.min_len..=config.max_len);
    let scale = (config.feature_dim as f64).sqrt();
    let own_w = match config.rule {
        Rule::Preference if pool.is_empty() => Some(normal_vec(rng, config.feature_dim)),
        Rule::Preference => Some(pool[rng.random_range(0..pool.len())].clone()),
        _ => None,
    };
    let shuffle = rng.random_bool(0.3);
    let mut out: Vec<Position> = Vec::with_capacity(len);
    for t in 0..len {
        let track = rng.random_range(0..tracks.len());
        let a = &tracks[track];
        let skip = match config.rule {
            Rule::Threshold => dot(w, a) > 0.0,
            Rule::Preference => dot(own_w.as_ref().unwrap(), a) > 0.0,
            Rule::Markov => {
                let pm = |k: usize| if out[t - k].skip { 1.0 } else { -1.0 };
                let mut z = MARKOV_ACOUSTIC * dot(w, a) / scale;
                if t >= 1 {
                    z += MARKOV_PREV * pm(1);
                }
                if t >= 2 {
                    z += MARKOV_PREV2 * pm(2);
                }
                rng.random_bool(sigmoid(z))
            }
            Rule::LogLeak => {
                let latent: f64 = StandardNormal.sample(rng);
                dot(w, a) / scale + LEAK_LATENT_SD * latent > 0.0
            }
        };
        let seekfwd = if config.rule == Rule::LogLeak {
            let typical = rng.random_bool(LEAK_FIDELITY);
            if skip == typical {
                rng.random_range(2..=6)
            } else {
                rng.random_range(0..=1)
            }
        } else {
            rng.random_range(0..=6)
        };
        out.push(Position {
            track,
            reason: rng.random_range(0..REASONS.len()),
            seekfwd,
            seekback: rng.random_range(0..=3),
            shuffle,
            skip,
        });
    }
    // Flips happen after the chain is drawn, so the markov dynamics act on
    // clean labels.
    for p in &mut out {
        if rng.random_bool(config.noise) {
            p.skip = !p.skip;
        }
    }
    out
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `sessions.csv`, `features.csv` and `schema.toml` into `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<[PathBuf; 3]> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let [sessions_path, features_path, schema_path] =
        [SESSIONS_FILE, FEATURES_FILE, SCHEMA_FILE].map(|f| out_dir.join(f));

    let tracks = catalog(config);
    let w = rule_weights(config);
    let pool = preference_pool(config);

    let file = std::fs::File::create(&features_path).map_err(io_err(&features_path))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, s: &str| out.write_all(s.as_bytes());
    let mut header = String::from("track_id");
    for d in 0..config.feature_dim {
        header += &format!(",acoustic_{d:02}");
    }
    write(&mut out, &(header + "\n")).map_err(io_err(&features_path))?;
    for (i, a) in tracks.iter().enumerate() {
        let mut line = track_id(i);
        for x in a {
            line += &format!(",{x:.6}");
        }
        line.push('\n');
        write(&mut out, &line).map_err(io_err(&features_path))?;
    }
    out.flush().map_err(io_err(&features_path))?;

    let file = std::fs::File::create(&sessions_path).map_err(io_err(&sessions_path))?;
    let mut out = std::io::BufWriter::new(file);
    write(
        &mut out,
        "session_id,session_position,session_length,track_id_clean,skip,hist_user_behavior_reason_start,\
         hist_user_behavior_n_seekfwd,hist_user_behavior_n_seekback,hist_user_behavior_is_shuffle,date\n",
    )
    .map_err(io_err(&sessions_path))?;
    let mut rng = stream(config.seed, "synth.sessions");
    for s in 0..config.n_sessions {
        let rows = session(config, &tracks, &w, &pool, &mut rng);
        let sid = session_id(s);
        let date = format!("2018-07-{:02}", 1 + s % 28);
        for (p, r) in rows.iter().enumerate() {
            let line = format!(
                "{sid},{},{},{},{},{},{},{},{},{date}\n",
                p + 1,
                rows.len(),
                track_id(r.track),
                r.skip,
                REASONS[r.reason],
                r.seekfwd,
                r.seekback,
                r.shuffle,
            );
            write(&mut out, &line).map_err(io_err(&sessions_path))?;
        }
    }
    out.flush().map_err(io_err(&sessions_path))?;

    std::fs::write(&schema_path, schema().to_toml()).map_err(io_err(&schema_path))?;
    Ok([sessions_path, features_path, schema_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_names_round_trip() {
        for r in Rule::ALL {
            assert_eq!(r.name().parse::<Rule>().unwrap(), r);
        }
        assert!("nope".parse::<Rule>().is_err());
    }

    #[test]
    fn config_bounds() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SynthConfig { noise: 0.5, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { min_len: 9, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { max_len: 21, ..ok }.validate().is_err());
    }

    #[test]
    fn schema_is_valid() {
        let s = schema();
        s.validate().unwrap();
        assert_eq!(s.log_width(), 3 + 1 + 1 + 1);
    }

    #[test]
    fn weights_have_unit_projection_scale() {
        let w = rule_weights(&SynthConfig::default());
        assert!((dot(&w, &w) - 16.0).abs() < 1e-9);
    }
}
