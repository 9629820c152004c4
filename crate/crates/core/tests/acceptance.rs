//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs single-threaded.

use std::path::{Path, PathBuf};
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqskip::data::{split_session, Batch, Dataset, Episode};
use seqskip::eval::{evaluate_episodes, predict_dataset, predict_episodes, score_predictions, EVAL_BATCH};
use seqskip::metrics::{average_accuracy, baseline_maa, mean_average_accuracy, Baseline, PredictionSet};
use seqskip::models::{Model, ModelConfig, ModelKind};
use seqskip::synth::{generate, rule_weights, Rule, SynthConfig};
use seqskip::train::{train, TrainConfig, TrainOutcome};
use seqskip_tensor::gradcheck::primitive_suite;
use seqskip_tensor::nn::ConvStack;
use seqskip_tensor::{GateKind, Padding, ParamStore, Tape};

const WIDTH: usize = 32;
const EPOCHS: usize = 5;
const SESSIONS: usize = 20_000;

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    fn report(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn dataset(root: &Path, rule: Rule, n: usize, noise: f64) -> (Dataset, SynthConfig) {
    let cfg = SynthConfig {
        n_sessions: n,
        rule,
        noise,
        seed: 7,
        ..SynthConfig::default()
    };
    let dir = root.join(format!("{rule}_{n}_{noise}"));
    generate(&cfg, &dir).expect("synthetic data is written");
    (Dataset::load_dir(&dir).expect("synthetic data parses"), cfg)
}

fn fit(kind: ModelKind, data: &Dataset, epochs: usize, seed: u64) -> TrainOutcome {
    let mut cfg = TrainConfig::new(ModelConfig::new(kind, 0, WIDTH, seed), seed);
    cfg.max_epochs = epochs;
    train(&cfg, data).expect("training succeeds")
}

fn oracle_aa(correct: &[bool]) -> Ratio<i64> {
    let t = correct.len() as i64;
    let mut sum = Ratio::from_integer(0);
    for i in 0..correct.len() {
        let hits = correct[..=i].iter().filter(|&&c| c).count() as i64;
        if correct[i] {
            sum += Ratio::new(hits, i as i64 + 1);
        }
    }
    sum / t
}

fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn metric_oracle(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=10);
        let pred: Vec<u8> = (0..len).map(|_| rng.random_range(0..=1)).collect();
        let truth: Vec<u8> = (0..len).map(|_| rng.random_range(0..=1)).collect();
        let correct: Vec<bool> = pred.iter().zip(&truth).map(|(p, t)| p == t).collect();
        let got = average_accuracy(&pred, &truth).unwrap();
        worst = worst.max((got - ratio_f64(oracle_aa(&correct))).abs());
    }
    let hand1 = average_accuracy(&[1, 0, 1, 1], &[1, 1, 1, 1]).unwrap();
    let hand2 = average_accuracy(&[0, 1], &[1, 1]).unwrap();
    let hands_ok = (hand1 - 0.6041666666666666).abs() < 1e-12 && (hand2 - 0.25).abs() < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    s.report(
        1,
        "metric oracle",
        worst < 1e-12 && hands_ok && secs < 1.0,
        format!(
            "1000 pairs, max |AA - rational oracle| = {worst:.1e} (tol 1e-12); [1,0,1,1] -> {hand1:.6}, [0,1] -> {hand2}; {secs:.3}s (limit 1s)"
        ),
    );
}

fn gradient_suite(s: &mut Suite) {
    let start = Instant::now();
    let reports = primitive_suite(25, 2024).expect("suite runs");
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<_> = reports.iter().filter(|r| !(r.max_rel_error < 1e-4)).map(|r| r.name.clone()).collect();
    let min_trials = reports.iter().map(|r| r.trials).min().unwrap_or(0);
    let secs = start.elapsed().as_secs_f64();
    s.report(
        2,
        "gradient suite",
        failing.is_empty() && min_trials >= 25 && secs < 120.0,
        format!(
            "{} primitives x >= {min_trials} trials, max relative error {worst:.2e} (tol 1e-4){}; {secs:.1}s (limit 120s)",
            reports.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    );
}

fn random_episode(rng: &mut ChaCha8Rng, dim: usize) -> Episode {
    let len = rng.random_range(10..=20);
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
    Episode {
        session_id: "probe".into(),
        dim,
        support_x,
        query_x,
        support_y,
        query_y: None,
        query_logs_visible: false,
    }
}

fn predict_one(model: &Model, e: &Episode) -> Vec<f32> {
    model.predict(&Batch::new(&[e]).unwrap()).unwrap().remove(0)
}

fn stack_last_output(x: &[f64], t: usize, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let stack = ConvStack::new(
        &mut store,
        "s",
        width,
        &[1, 2, 4, 8, 16],
        &[2; 5],
        Padding::Causal,
        GateKind::Highway,
        false,
        &mut rng,
    )
    .unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(vec![1, t, width], x.to_vec()).unwrap();
    let y = stack.forward(&mut tape, &p, xv, None).unwrap();
    tape.value(y)[(t - 1) * width..].to_vec()
}

fn causality(s: &mut Suite) {
    let start = Instant::now();
    let dim = 12;
    let mut worst: f64 = 0.0;
    for (k, kind) in [ModelKind::Seq1eH, ModelKind::Seq1HL, ModelKind::Snail, ModelKind::Transformer]
        .into_iter()
        .enumerate()
    {
        let model = Model::new(ModelConfig::new(kind, dim, WIDTH, 3 + k as u64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        for _ in 0..100 {
            let e = random_episode(&mut rng, dim);
            let base = predict_one(&model, &e);
            let cut = rng.random_range(0..e.query_len());
            let mut moved = e.clone();
            for v in &mut moved.query_x[(cut + 1) * dim..] {
                *v += rng.random_range(-3.0..3.0);
            }
            let after = predict_one(&model, &moved);
            for n in 0..=cut {
                worst = worst.max((base[n] - after[n]).abs() as f64);
            }
        }
    }
    let (t, width) = (40, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..t * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = stack_last_output(&x, t, width);
    let reach = |dist: usize| {
        let mut bumped = x.clone();
        for v in &mut bumped[(t - 1 - dist) * width..][..width] {
            *v += 1.0;
        }
        let out = stack_last_output(&bumped, t, width);
        out.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (r31, r32) = (reach(31), reach(32));
    let secs = start.elapsed().as_secs_f64();
    s.report(
        3,
        "causality suite",
        worst <= 1e-6 && r31 > 0.0 && r32 == 0.0 && secs < 60.0,
        format!(
            "seq1eH/seq1HL/snail/transformer x 100 episodes, max earlier-output change {worst:.1e} (tol 1e-6); \
             stack reach at distance 31 = {r31:.2e} (> 0), at 32 = {r32:.1e} (== 0); {secs:.1}s (limit 60s)"
        ),
    );
}

fn permutation(s: &mut Suite) {
    let dim = 12;
    let mut worst: f64 = 0.0;
    for (k, kind) in [ModelKind::Rnb1, ModelKind::Rnb2Ue, ModelKind::Rnbc2Ue].into_iter().enumerate() {
        let model = Model::new(ModelConfig::new(kind, dim, WIDTH, 11 + k as u64)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + k as u64);
        let e = random_episode(&mut rng, dim);
        let base = predict_one(&model, &e);
        for _ in 0..50 {
            let mut order: Vec<usize> = (0..e.support_len()).collect();
            order.shuffle(&mut rng);
            let mut p = e.clone();
            for (dst, &src) in order.iter().enumerate() {
                p.support_x[dst * dim..][..dim].copy_from_slice(&e.support_x[src * dim..][..dim]);
                p.support_y[dst] = e.support_y[src];
            }
            let out = predict_one(&model, &p);
            worst = worst.max(out.iter().zip(&base).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max));
        }
    }
    s.report(
        4,
        "permutation suite",
        worst <= 1e-6,
        format!("rnb1/rnb2_ue/rnbc2_ue x 50 support permutations, max prediction change {worst:.1e} (tol 1e-6)"),
    );
}

/// MAA of the generating hyperplane itself on the validation sessions.
fn threshold_ceiling(data: &Dataset, cfg: &SynthConfig, val: &[Episode]) -> f64 {
    let w = rule_weights(cfg);
    let by_id: std::collections::HashMap<_, _> = data.sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    let aa: Vec<f64> = val
        .iter()
        .map(|e| {
            let s = by_id[e.session_id.as_str()];
            let ts = e.support_len();
            let pred: Vec<u8> = s.track_ids[ts..]
                .iter()
                .map(|t| {
                    let a = data.features.get(t).unwrap();
                    (a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() > 0.0) as u8
                })
                .collect();
            average_accuracy(&pred, e.query_y.as_ref().unwrap()).unwrap()
        })
        .collect();
    mean_average_accuracy(&aa).unwrap()
}

fn threshold(s: &mut Suite, root: &Path) {
    let (data, cfg) = dataset(root, Rule::Threshold, SESSIONS, 0.05);
    let start = Instant::now();
    let out = fit(ModelKind::Seq1HL, &data, EPOCHS, 1);
    let secs = start.elapsed().as_secs_f64();
    let all_skip = baseline_maa(Baseline::AllSkip, &out.val_episodes).unwrap();
    let ceiling = threshold_ceiling(&data, &cfg, &out.val_episodes);
    s.report(
        5,
        "threshold-rule learnability",
        out.best_val_maa >= 0.95 && all_skip <= 0.60 && secs < 300.0,
        format!(
            "seq1HL val MAA {:.4} (need >= 0.95), all_skip {all_skip:.4} (need <= 0.60), {secs:.0}s (limit 300s); \
             generating hyperplane scores {ceiling:.4} on the same noisy labels",
            out.best_val_maa
        ),
    );
}

fn markov(s: &mut Suite, root: &Path) {
    let (data, _) = dataset(root, Rule::Markov, SESSIONS, 0.1);
    let seq = fit(ModelKind::Seq1HL, &data, EPOCHS, 1).best_val_maa;
    let metric = fit(ModelKind::Rnbc2Ue, &data, EPOCHS, 1).best_val_maa;
    s.report(
        6,
        "markov rule: sequence over metric",
        seq - metric >= 0.05,
        format!("seq1HL {seq:.4} - rnbc2_ue {metric:.4} = {:.4} (need >= 0.05)", seq - metric),
    );
}

fn preference(s: &mut Suite, root: &Path) {
    let (data, _) = dataset(root, Rule::Preference, SESSIONS, 0.0);
    let rnbc2 = fit(ModelKind::Rnbc2Ue, &data, EPOCHS, 1);
    let all_skip = baseline_maa(Baseline::AllSkip, &rnbc2.val_episodes).unwrap();
    let no_skip = baseline_maa(Baseline::AllNoSkip, &rnbc2.val_episodes).unwrap();
    let rnb2 = fit(ModelKind::Rnb2Ue, &data, EPOCHS, 1).best_val_maa;
    let rnb1 = fit(ModelKind::Rnb1, &data, EPOCHS, 1).best_val_maa;
    let margin = rnbc2.best_val_maa - all_skip.max(no_skip);
    s.report(
        7,
        "preference rule: few-shot pathway",
        margin >= 0.10 && rnb2 - rnb1 >= 0.005,
        format!(
            "rnbc2_ue {:.4} vs all_skip {all_skip:.4} / all_no_skip {no_skip:.4}, margin {margin:.4} (need >= 0.10); \
             rnb2_ue {rnb2:.4} - rnb1 {rnb1:.4} = {:.4} (need >= 0.005)",
            rnbc2.best_val_maa,
            rnb2 - rnb1
        ),
    );
}

fn log_leak(s: &mut Suite, root: &Path) {
    let (data, _) = dataset(root, Rule::LogLeak, SESSIONS, 0.1);
    let teacher = fit(ModelKind::Teacher, &data, EPOCHS, 1).best_val_maa;
    let seq = fit(ModelKind::Seq1HL, &data, EPOCHS, 1).best_val_maa;
    s.report(
        8,
        "log_leak rule: teacher over seq1HL",
        teacher - seq >= 0.10,
        format!("teacher {teacher:.4} - seq1HL {seq:.4} = {:.4} (need >= 0.10)", teacher - seq),
    );
}

fn determinism(s: &mut Suite, root: &Path) {
    let (data, _) = dataset(root, Rule::Markov, 2_000, 0.1);
    let a = fit(ModelKind::Seq1HL, &data, 2, 5);
    let b = fit(ModelKind::Seq1HL, &data, 2, 5);
    let maa_a = evaluate_episodes(&a.model, &a.val_episodes, EVAL_BATCH).unwrap().maa;
    let maa_b = evaluate_episodes(&b.model, &b.val_episodes, EVAL_BATCH).unwrap().maa;
    let path = root.join("determinism.ckpt");
    a.model.save(&path, Default::default()).unwrap();
    let (loaded, _) = Model::load(&path).unwrap();
    let before = predict_episodes(&a.model, &a.val_episodes, EVAL_BATCH).unwrap();
    let after = predict_episodes(&loaded, &a.val_episodes, EVAL_BATCH).unwrap();
    let identical = before
        .iter()
        .flatten()
        .zip(after.iter().flatten())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    s.report(
        9,
        "determinism and checkpoint round trip",
        (maa_a - maa_b).abs() <= 1e-9 && identical,
        format!(
            "two fit+evaluate runs: {maa_a:.12} vs {maa_b:.12} (tol 1e-9); reloaded predictions bit-identical: {identical}"
        ),
    );
}

fn formats(s: &mut Suite, root: &Path) {
    let mut parsed = 0;
    let mut problems = Vec::new();
    for rule in Rule::ALL {
        let cfg = SynthConfig {
            n_sessions: 300,
            rule,
            noise: 0.1,
            seed: 3,
            ..SynthConfig::default()
        };
        let dir = root.join(format!("format_{rule}"));
        match generate(&cfg, &dir).and_then(|_| Dataset::load_dir(&dir)) {
            Ok(d) if d.sessions.len() == 300 => parsed += 1,
            Ok(d) => problems.push(format!("{rule}: {} sessions", d.sessions.len())),
            Err(e) => problems.push(format!("{rule}: {e}")),
        }
    }
    let data = Dataset::load_dir(&root.join("format_markov")).unwrap();
    let out = fit(ModelKind::Seq1eH, &data, 1, 2);
    let preds = predict_dataset(&out.model, &out.stats, &data).unwrap();
    let path = root.join("predictions.txt");
    preds.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let wire_ok = text.lines().count() == data.sessions.len()
        && text.lines().all(|l| {
            let (sid, bits) = l.split_once(',').unwrap_or(("", ""));
            !sid.is_empty() && !bits.is_empty() && bits.chars().all(|c| c == '0' || c == '1')
        });
    let reread = PredictionSet::load(&path).unwrap();
    let lossless = reread == preds;
    let scored = score_predictions(&reread, &data).unwrap().maa;
    let direct = seqskip::eval::evaluate_dataset(&out.model, &out.stats, &data).unwrap().maa;
    s.report(
        10,
        "format conformance",
        parsed == 4 && problems.is_empty() && wire_ok && lossless && (scored - direct).abs() < 1e-12,
        format!(
            "{parsed}/4 rules parse{}; wire format ok: {wire_ok}; re-read lossless: {lossless}; \
             MAA from file {scored:.6} vs direct {direct:.6}",
            if problems.is_empty() { String::new() } else { format!(" ({})", problems.join("; ")) }
        ),
    );
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("single-threaded pool");
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root: PathBuf = tmp.path().to_path_buf();
    let mut s = Suite { failed: Vec::new() };
    let start = Instant::now();
    metric_oracle(&mut s);
    gradient_suite(&mut s);
    causality(&mut s);
    permutation(&mut s);
    threshold(&mut s, &root);
    markov(&mut s, &root);
    preference(&mut s, &root);
    log_leak(&mut s, &root);
    determinism(&mut s, &root);
    formats(&mut s, &root);
    println!(
        "acceptance: {}/10 criteria passed in {:.0}s",
        10 - s.failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !s.failed.is_empty() {
        println!("failed criteria: {:?}", s.failed);
        std::process::exit(1);
    }
}
