#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqskip::data::{split_session, Dataset, Episode};
use seqskip::synth::{generate, Rule, SynthConfig};
use tempfile::TempDir;

pub fn synth(rule: Rule, n: usize, noise: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_sessions: n,
        n_tracks: 400,
        feature_dim: 6,
        rule,
        noise,
        seed,
        ..SynthConfig::default()
    }
}

pub fn generated(cfg: &SynthConfig) -> (TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate(cfg, dir.path()).unwrap();
    let data = Dataset::load_dir(dir.path()).unwrap();
    (dir, data)
}

/// An episode of random rows with well-formed label and indicator slots.
pub fn random_episode(rng: &mut ChaCha8Rng, dim: usize, len: usize) -> Episode {
    let (sup, _) = split_session(len).unwrap();
    let ts = *sup.end();
    let mut row = |query: bool| {
        let mut r: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        r[dim - 2] = if query { 0.0 } else { rng.random_range(0..=1) as f32 };
        r[dim - 1] = query as u8 as f32;
        r
    };
    let support_x: Vec<f32> = (0..ts).flat_map(|_| row(false)).collect();
    let query_x: Vec<f32> = (ts..len).flat_map(|_| row(true)).collect();
    let support_y = (0..ts).map(|m| support_x[m * dim + dim - 2] as u8).collect();
    let query_y = Some((ts..len).map(|_| rng.random_range(0..=1)).collect());
    Episode {
        session_id: format!("e{}", rng.random::<u32>()),
        dim,
        support_x,
        query_x,
        support_y,
        query_y,
        query_logs_visible: false,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
