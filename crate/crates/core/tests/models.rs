use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use seqskip::data::{Batch, Episode};
use seqskip::models::{LossScope, Model, ModelConfig, ModelKind, Output};
use seqskip::Error;
use seqskip_tensor::{LossKind, Tape};

mod common;

const DIM: usize = 10;

fn model(kind: ModelKind, seed: u64) -> Model {
    Model::new(ModelConfig::new(kind, DIM, 16, seed)).unwrap()
}

fn episodes(seed: u64, n: usize) -> Vec<Episode> {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(10..=20);
            common::random_episode(&mut rng, DIM, len)
        })
        .collect()
}

fn predict(m: &Model, eps: &[&Episode]) -> Vec<Vec<f32>> {
    m.predict(&Batch::new(eps).unwrap()).unwrap()
}

fn teacher_view(e: &Episode) -> Episode {
    Episode {
        query_logs_visible: true,
        ..e.clone()
    }
}

#[test]
fn construction_is_deterministic() {
    for kind in ModelKind::ALL {
        let (a, b) = (model(kind, 3), model(kind, 3));
        assert_eq!(a.params(), b.params(), "{kind}");
        assert_ne!(a.params(), model(kind, 4).params(), "{kind}");
    }
}

#[test]
fn two_stack_model_has_twice_the_stack_parameters() {
    let one = model(ModelKind::Seq1eH, 0);
    let two = model(ModelKind::Seq1HL, 0);
    assert!(one.stack_params() > 0);
    assert_eq!(two.stack_params(), 2 * one.stack_params());
    assert_eq!(two.num_params() - one.num_params(), one.stack_params());
}

#[test]
fn outputs_are_probabilities_for_every_query() {
    let eps = episodes(1, 5);
    let refs: Vec<&Episode> = eps.iter().collect();
    for kind in ModelKind::ALL {
        let m = model(kind, 1);
        let views: Vec<Episode> = eps.iter().map(teacher_view).collect();
        let refs = if kind == ModelKind::Teacher { views.iter().collect() } else { refs.clone() };
        let out = predict(&m, &refs);
        for (e, p) in refs.iter().zip(&out) {
            assert_eq!(p.len(), e.query_len(), "{kind}");
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        }
    }
}

/// Padding a sample next to longer ones never changes its predictions.
#[test]
fn batching_does_not_change_predictions() {
    let eps = episodes(2, 6);
    for kind in ModelKind::ALL {
        let m = model(kind, 2);
        let views: Vec<Episode> = eps.iter().map(teacher_view).collect();
        let use_eps = if kind == ModelKind::Teacher { &views } else { &eps };
        let together = predict(&m, &use_eps.iter().collect::<Vec<_>>());
        for (e, joint) in use_eps.iter().zip(&together) {
            let alone = predict(&m, &[e]).remove(0);
            for (a, b) in alone.iter().zip(joint) {
                assert!((a - b).abs() < 1e-5, "{kind}: {a} vs {b}");
            }
        }
    }
}

/// The batch loss is the mean over every valid query step in the batch.
#[test]
fn batch_loss_is_the_step_weighted_mean_of_sample_losses() {
    let eps = episodes(3, 4);
    for kind in [ModelKind::Seq1HL, ModelKind::Rnbc2Ue, ModelKind::AttPair, ModelKind::Rnb2Ue] {
        let m = model(kind, 3);
        let loss = |eps: &[&Episode]| {
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape);
            let l = m.loss(&mut tape, &p, &Batch::new(eps).unwrap(), LossScope::QueryOnly).unwrap();
            tape.value(l)[0] as f64
        };
        let weight = |e: &Episode| match kind {
            ModelKind::Rnb2Ue => (e.support_len() * e.query_len()) as f64,
            _ => e.query_len() as f64,
        };
        let all = loss(&eps.iter().collect::<Vec<_>>());
        let total: f64 = eps.iter().map(weight).sum();
        let oracle: f64 = eps.iter().map(|e| loss(&[e]) * weight(e)).sum::<f64>() / total;
        assert!((all - oracle).abs() < 1e-5, "{kind}: {all} vs {oracle}");
    }
}

#[test]
fn zero_parameters_give_neutral_scores() {
    let eps = episodes(4, 3);
    let batch = Batch::new(&eps.iter().collect::<Vec<_>>()).unwrap();
    for kind in [ModelKind::Rnb1, ModelKind::Rnb2Ue, ModelKind::Rnbc2Ue] {
        let mut m = model(kind, 4);
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let r = m.relation_scores(&batch).unwrap();
        for (e, scores) in eps.iter().zip(&r) {
            assert_eq!(scores.len(), e.support_len() * e.query_len());
            assert!(scores.iter().all(|&v| v == 0.5), "{kind}");
        }
        if kind.has_user_embedding() {
            assert!(m.user_embedding(&batch).unwrap().iter().flatten().all(|&v| v == 0.0));
        }
        if kind != ModelKind::Rnbc2Ue {
            assert!(predict(&m, &[&eps[0]])[0].iter().all(|&v| v == 0.5));
        }
    }
}

#[test]
fn support_order_does_not_matter_to_metric_models() {
    let mut rng = common::rng(5);
    let e = common::random_episode(&mut rng, DIM, 17);
    for kind in [ModelKind::Rnb1, ModelKind::Rnb2Ue, ModelKind::Rnbc2Ue] {
        let m = model(kind, 5);
        let base = predict(&m, &[&e]).remove(0);
        let base_u = kind
            .has_user_embedding()
            .then(|| m.user_embedding(&Batch::new(&[&e]).unwrap()).unwrap());
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..e.support_len()).collect();
            order.shuffle(&mut rng);
            let mut p = e.clone();
            for (dst, &src) in order.iter().enumerate() {
                p.support_x[dst * DIM..][..DIM].copy_from_slice(&e.support_x[src * DIM..][..DIM]);
                p.support_y[dst] = e.support_y[src];
            }
            let out = predict(&m, &[&p]).remove(0);
            assert!(out.iter().zip(&base).all(|(a, b)| (a - b).abs() <= 1e-6), "{kind}");
            if let Some(u) = &base_u {
                let pu = m.user_embedding(&Batch::new(&[&p]).unwrap()).unwrap();
                assert!(pu[0].iter().zip(&u[0]).all(|(a, b)| (a - b).abs() <= 1e-6));
            }
        }
    }
}

/// Reordering the queries reorders the predictions the same way.
#[test]
fn metric_models_are_query_equivariant() {
    let mut rng = common::rng(6);
    let e = common::random_episode(&mut rng, DIM, 16);
    for kind in [ModelKind::Rnb1, ModelKind::Rnb2Ue, ModelKind::Rnbc2Ue] {
        let m = model(kind, 6);
        let base = predict(&m, &[&e]).remove(0);
        let mut order: Vec<usize> = (0..e.query_len()).collect();
        order.shuffle(&mut rng);
        let mut p = e.clone();
        for (dst, &src) in order.iter().enumerate() {
            p.query_x[dst * DIM..][..DIM].copy_from_slice(e.query_row(src));
        }
        let out = predict(&m, &[&p]).remove(0);
        for (dst, &src) in order.iter().enumerate() {
            assert!((out[dst] - base[src]).abs() <= 1e-6, "{kind}");
        }
    }
}

#[test]
fn causal_models_ignore_later_queries() {
    let mut rng = common::rng(7);
    for kind in [ModelKind::Seq1eH, ModelKind::Seq1HL, ModelKind::Snail, ModelKind::Transformer, ModelKind::AttPair] {
        let m = model(kind, 7);
        for _ in 0..20 {
            let len = rng.random_range(10..=20);
            let e = common::random_episode(&mut rng, DIM, len);
            let base = predict(&m, &[&e]).remove(0);
            let cut = rng.random_range(0..e.query_len());
            let mut moved = e.clone();
            moved.query_x[(cut + 1) * DIM..].iter_mut().for_each(|v| *v -= 2.0);
            let out = predict(&m, &[&moved]).remove(0);
            assert!(out[..=cut].iter().zip(&base).all(|(a, b)| (a - b).abs() <= 1e-6), "{kind}");
        }
    }
}

#[test]
fn query_predictions_see_the_whole_support() {
    let mut rng = common::rng(8);
    let e = common::random_episode(&mut rng, DIM, 20);
    for kind in [ModelKind::AttPair, ModelKind::Seq1HL, ModelKind::Rnb2Ue] {
        let m = model(kind, 8);
        let base = predict(&m, &[&e]).remove(0);
        let mut moved = e.clone();
        moved.support_x[..DIM - 2].iter_mut().for_each(|v| *v += 1.5);
        let out = predict(&m, &[&moved]).remove(0);
        assert!((out[0] - base[0]).abs() > 1e-7, "{kind}");
    }
}

#[test]
fn teacher_refuses_hidden_query_logs() {
    let eps = episodes(9, 2);
    let m = model(ModelKind::Teacher, 9);
    let batch = Batch::new(&eps.iter().collect::<Vec<_>>()).unwrap();
    assert!(matches!(m.predict(&batch), Err(Error::Contract(_))));
    let views: Vec<Episode> = eps.iter().map(teacher_view).collect();
    assert!(m.predict(&Batch::new(&views.iter().collect::<Vec<_>>()).unwrap()).is_ok());
}

#[test]
fn accessors_reject_models_without_the_part() {
    let eps = episodes(10, 1);
    let batch = Batch::new(&[&eps[0]]).unwrap();
    assert!(matches!(model(ModelKind::Seq1HL, 0).relation_scores(&batch), Err(Error::Contract(_))));
    assert!(matches!(model(ModelKind::Rnb1, 0).user_embedding(&batch), Err(Error::Contract(_))));
    let wrong = Batch::new(&[&common::random_episode(&mut common::rng(1), DIM + 1, 12)]).unwrap();
    assert!(model(ModelKind::Rnb1, 0).predict(&wrong).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(11, 3);
    for kind in ModelKind::ALL {
        let m = model(kind, 11);
        let path = dir.path().join(format!("{kind}.ckpt"));
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("note".to_string(), "x".to_string());
        m.save(&path, meta).unwrap();
        let (back, meta) = Model::load(&path).unwrap();
        assert_eq!(meta["note"], "x");
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        let views: Vec<Episode> = eps.iter().map(teacher_view).collect();
        let refs: Vec<&Episode> = views.iter().collect();
        assert_eq!(predict(&back, &refs), predict(&m, &refs));
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model(ModelKind::Rnb1, 0).save(&path, Default::default()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(Model::load(&path).is_err());
}

/// Support rows carry their own label as input, so a query-only loss must not
/// depend on what the model outputs at support steps.
#[test]
fn query_only_loss_ignores_support_steps() {
    let eps = episodes(12, 3);
    let batch = Batch::new(&eps.iter().collect::<Vec<_>>()).unwrap();
    let m = model(ModelKind::Seq1HL, 12);
    let grads = |manual: bool| {
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape);
        let loss = if manual {
            let Output::Timeline(pred) = m.forward(&mut tape, &p, &batch).unwrap() else {
                unreachable!()
            };
            let (l, s, q) = (batch.max_len, batch.max_support, batch.max_query);
            let query_y = batch.query_y.as_ref().unwrap();
            let mut target = vec![0f32; batch.size() * l];
            let mut mask = vec![false; batch.size() * l];
            for i in 0..batch.size() {
                let ts = batch.support_lengths[i];
                for m in 0..ts {
                    // Garbage targets at unmasked support steps.
                    target[i * l + m] = 1.0 - batch.support_y[i * s + m];
                }
                for n in 0..batch.query_lengths[i] {
                    target[i * l + ts + n] = query_y[i * q + n];
                    mask[i * l + ts + n] = true;
                }
            }
            tape.loss(LossKind::Bce, pred, Rc::from(target), Rc::from(mask)).unwrap()
        } else {
            m.loss(&mut tape, &p, &batch, LossScope::QueryOnly).unwrap()
        };
        let g = tape.backward(loss).unwrap();
        let mut store = m.params().clone();
        store.zero_grads();
        store.accumulate_grads(&p, &g).unwrap();
        store
    };
    assert_eq!(grads(true), grads(false));
    let mut tape = Tape::new();
    let p = m.params().bind(&mut tape);
    let a = m.loss(&mut tape, &p, &batch, LossScope::QueryOnly).unwrap();
    let b = m.loss(&mut tape, &p, &batch, LossScope::SupportAndQuery).unwrap();
    assert_ne!(tape.value(a)[0], tape.value(b)[0]);
}
