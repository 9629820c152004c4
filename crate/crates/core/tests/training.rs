use seqskip::data::{fit_stats, Batch, EpisodeOptions};
use seqskip::eval::{evaluate_episodes, EVAL_BATCH};
use seqskip::models::{LossScope, Model, ModelConfig, ModelKind};
use seqskip::synth::Rule;
use seqskip::train::{split_train_val, stats_from_meta, train, train_with, TrainConfig};
use seqskip::Error;
use seqskip_tensor::{adam_step, AdamState, Tape};

mod common;

fn config(kind: ModelKind, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(ModelConfig::new(kind, 0, 16, seed), seed);
    c.max_epochs = epochs;
    c.batch_size = 32;
    c
}

#[test]
fn a_small_step_lowers_the_batch_loss() {
    let (_dir, data) = common::generated(&common::synth(Rule::Threshold, 64, 0.1, 1));
    let stats = fit_stats(&data.sessions, &data.features, &data.schema).unwrap();
    for kind in [ModelKind::Seq1HL, ModelKind::Rnbc2Ue, ModelKind::Rnb1] {
        let opts = EpisodeOptions::default();
        let eps = data.episodes(&data.sessions, &stats, opts, true).unwrap();
        let batch = Batch::new(&eps.iter().collect::<Vec<_>>()).unwrap();
        let mut failures = 0;
        for seed in 0..20 {
            let mut m = Model::new(ModelConfig::new(kind, data.layout().width(), 16, seed)).unwrap();
            let loss_of = |m: &Model| {
                let mut tape = Tape::new();
                let p = m.params().bind(&mut tape);
                let l = m.loss(&mut tape, &p, &batch, LossScope::QueryOnly).unwrap();
                let value = tape.value(l)[0];
                (value, tape.backward(l).unwrap(), p)
            };
            let (before, grads, p) = loss_of(&m);
            let mut adam = AdamState::new(m.params(), 1e-5);
            m.params_mut().zero_grads();
            m.params_mut().accumulate_grads(&p, &grads).unwrap();
            adam_step(m.params_mut(), &mut adam).unwrap();
            if loss_of(&m).0 >= before {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{kind}: {failures} of 20 steps raised the loss");
    }
}

#[test]
fn training_is_reproducible_and_prefetch_neutral() {
    let (_dir, data) = common::generated(&common::synth(Rule::Markov, 200, 0.1, 2));
    let c = config(ModelKind::Seq1eH, 2, 3);
    let a = train(&c, &data).unwrap();
    let b = train(&c, &data).unwrap();
    let serial = train(&TrainConfig { prefetch: false, ..c.clone() }, &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log, serial.log);
    assert_eq!(a.model.params(), serial.model.params());
    assert_ne!(train(&config(ModelKind::Seq1eH, 2, 4), &data).unwrap().model.params(), a.model.params());
}

#[test]
fn best_epoch_is_kept_and_checkpointed() {
    let (dir, data) = common::generated(&common::synth(Rule::Threshold, 200, 0.1, 5));
    let ckpt = dir.path().join("best.ckpt");
    let c = TrainConfig {
        checkpoint: Some(ckpt.clone()),
        ..config(ModelKind::Rnbc2Ue, 3, 5)
    };
    let mut seen = Vec::new();
    let out = train_with(&c, &data, |e| seen.push(*e)).unwrap();
    assert_eq!(seen, out.log);
    assert_eq!(seen.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    for e in &seen {
        assert!((e.lr - c.lr_at(e.epoch)).abs() < 1e-15);
        assert!(e.train_loss.is_finite());
    }
    let best = seen.iter().map(|e| e.val_maa).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_maa, best);
    assert_eq!(seen[out.best_epoch - 1].val_maa, best);
    assert_eq!(evaluate_episodes(&out.model, &out.val_episodes, EVAL_BATCH).unwrap().maa, best);

    let (loaded, meta) = Model::load(&ckpt).unwrap();
    let values = |m: &Model| m.params().iter().map(|(_, _, t)| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&loaded), values(&out.model));
    assert_eq!(stats_from_meta(&meta).unwrap(), out.stats);
}

#[test]
fn statistics_come_from_the_training_side_only() {
    let (_dir, data) = common::generated(&common::synth(Rule::LogLeak, 200, 0.1, 6));
    let c = config(ModelKind::Seq1eH, 1, 7);
    let out = train(&c, &data).unwrap();
    let (train_side, val_side) = split_train_val(&data.sessions, c.train_fraction, c.seed).unwrap();
    assert_eq!(out.stats, fit_stats(&train_side, &data.features, &data.schema).unwrap());
    assert_eq!(out.val_episodes.len(), val_side.len());
    assert!(out
        .val_episodes
        .iter()
        .zip(&val_side)
        .all(|(e, s)| e.session_id == s.session_id));
}

#[test]
fn teacher_trains_on_visible_query_logs() {
    let (_dir, data) = common::generated(&common::synth(Rule::LogLeak, 120, 0.1, 8));
    let out = train(&config(ModelKind::Teacher, 1, 1), &data).unwrap();
    assert!(out.val_episodes.iter().all(|e| e.query_logs_visible));
}

#[test]
fn divergence_is_reported_with_its_position() {
    let (_dir, data) = common::generated(&common::synth(Rule::Threshold, 200, 0.1, 9));
    let c = TrainConfig {
        base_lr: 1e30,
        ..config(ModelKind::Seq1HL, 3, 1)
    };
    match train(&c, &data) {
        Err(Error::NonFiniteLoss { epoch, batch }) => {
            assert!(epoch >= 1);
            let msg = Error::NonFiniteLoss { epoch, batch }.to_string();
            assert!(msg.contains(&format!("epoch {epoch}")) && msg.contains(&format!("batch {batch}")));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e30 should diverge"),
    }
}

#[test]
fn bad_configurations_are_rejected_before_training() {
    let (_dir, data) = common::generated(&common::synth(Rule::Threshold, 30, 0.1, 9));
    let c = config(ModelKind::Seq1HL, 1, 1);
    assert!(matches!(train(&TrainConfig { batch_size: 0, ..c.clone() }, &data), Err(Error::Config(_))));
    assert!(matches!(train(&TrainConfig { clip_norm: Some(-1.0), ..c }, &data), Err(Error::Config(_))));
}
