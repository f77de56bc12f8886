use katz_core::corpus::{build_examples, EncodedExample, QAPair, SentencePair};
use katz_core::model::ModelWeights;
use katz_core::train::*;
use katz_core::{Error, Model, ModelConfig, RngStream, Tensor, Vocabulary};
use proptest::prelude::*;

#[test]
fn loss_examples() {
    let z = Tensor::new(&[1, 4], vec![0.0f64; 4]).unwrap();
    let (ce, _) = compute_loss(&z, &[2], &[true], LossKind::CrossEntropy).unwrap();
    assert!((ce - 4f64.ln()).abs() < 1e-12);

    let z = Tensor::new(&[1, 3], vec![0.5f64, 1.6, 0.6]).unwrap();
    let (h, g) = compute_loss(&z, &[1], &[true], LossKind::Hinge).unwrap();
    assert_eq!(h, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));

    let z = Tensor::new(&[1, 3], vec![-1e4f64, 0.0, -1e4]).unwrap();
    let (m, _) = compute_loss(&z, &[1], &[true], LossKind::Mse).unwrap();
    assert_eq!(m, 0.0);

    let z = Tensor::new(&[1, 3], vec![0.0f64, 0.2, 0.9]).unwrap();
    let (h, _) = compute_loss(&z, &[1], &[true], LossKind::Hinge).unwrap();
    assert!((h - 1.7).abs() < 1e-12);
}

#[test]
fn loss_kind_names() {
    assert_eq!("ce".parse::<LossKind>().unwrap(), LossKind::CrossEntropy);
    assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
    assert!(matches!("l1".parse::<LossKind>(), Err(Error::Config(_))));
    let k: LossKind = serde_json::from_str("\"hinge\"").unwrap();
    assert_eq!(k, LossKind::Hinge);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = RngStream::new(4);
    let z = Tensor::from_fn(&[3, 5], |_| rng.gaussian());
    let labels = [1u32, 4, 0];
    let mask = [true, false, true];
    for kind in LossKind::ALL {
        let (_, g) = compute_loss(&z, &labels, &mask, kind).unwrap();
        for i in 0..z.len() {
            let at = |d: f64| {
                let mut zz = z.clone();
                zz.data_mut()[i] += d;
                compute_loss(&zz, &labels, &mask, kind).unwrap().0
            };
            let h = 1e-6;
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            assert!(
                (numeric - g.data()[i]).abs() < 1e-7,
                "{kind:?}[{i}] {numeric} vs {}",
                g.data()[i]
            );
        }
    }
}

fn tiny(seed: u64) -> Model<f32> {
    Model::init(ModelConfig::tiny(259, 16, 2, 1, 32), seed).unwrap()
}

#[test]
fn zero_gradient_step_is_pure_decay() {
    let mut m = tiny(1);
    let before = m.weights.clone();
    let cfg = TrainConfig::default();
    let mut st = TrainState::new(&m.weights, &cfg);
    let zeros = ModelWeights::zeros_like(&m.config);
    adamw_step(&mut m.weights, &zeros, &mut st, &cfg).unwrap();
    let factor = 1.0f32 - 3e-4f32 * 5e-2f32;
    for ((name, kind, a), (_, _, b)) in before.named().into_iter().zip(m.weights.named()) {
        let expect: Vec<f32> = if kind.decays() {
            a.data().iter().map(|&x| x * factor).collect()
        } else {
            a.data().to_vec()
        };
        assert_eq!(b.data(), &expect[..], "{name}");
    }
    assert_eq!(st.step, 1);

    let no_decay = TrainConfig {
        weight_decay: 0.0,
        ..cfg
    };
    let snapshot = m.weights.clone();
    adamw_step(&mut m.weights, &zeros, &mut st, &no_decay).unwrap();
    assert_eq!(m.weights, snapshot);
}

#[test]
fn first_step_matches_bias_corrected_closed_form() {
    let mut m = Model::<f64>::init(ModelConfig::tiny(259, 16, 2, 1, 32), 1).unwrap();
    for (_, _, t) in m.weights.named_mut() {
        t.fill(0.0);
    }
    let mut g = ModelWeights::zeros_like(&m.config);
    for (_, _, t) in g.named_mut() {
        t.fill(1.0);
    }
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(&m.weights, &cfg);
    adamw_step(&mut m.weights, &g, &mut st, &cfg).unwrap();
    // m̂ = v̂ = 1 after one step, so θ′ = −lr / (1 + eps).
    let expect = -cfg.lr / (1.0 + cfg.eps);
    for (name, kind, t) in m.weights.named() {
        if kind.is_trainable() {
            assert!(
                t.data().iter().all(|&x| (x - expect).abs() < 1e-7 * cfg.lr),
                "{name}"
            );
        } else {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
        }
    }
}

#[test]
fn mismatched_state_is_rejected() {
    let mut m = tiny(1);
    let other = Model::<f32>::init(ModelConfig::tiny(259, 16, 2, 2, 32), 1).unwrap();
    let cfg = TrainConfig::default();
    let mut st = TrainState::new(&other.weights, &cfg);
    let g = ModelWeights::zeros_like(&m.config);
    assert!(adamw_step(&mut m.weights, &g, &mut st, &cfg).is_err());
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            epochs: 0,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig {
            lr: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            weight_decay: 1.0,
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let mut m = tiny(1);
    assert!(matches!(train(&mut m, &[], &ok, None), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn shuffle_is_a_permutation(seed: u64, epoch in 0usize..100, n in 0usize..64) {
        let mut order = epoch_order(&RngStream::new(seed), epoch, n);
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}

fn qa_pairs(n: usize, seed: u64) -> Vec<QAPair> {
    let words = ["sun", "owl", "map", "ink", "fox", "elm"];
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|i| {
            let a: Vec<&str> = (0..2).map(|_| words[rng.below(words.len())]).collect();
            QAPair::new(&format!("q{i}?"), &a.join(" ")).unwrap()
        })
        .collect()
}

fn examples(n: usize, mask: bool) -> Vec<EncodedExample> {
    build_examples(&qa_pairs(n, 9), &Vocabulary::bytes(), 32, mask).examples
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let data = examples(6, true);
    let cfg = TrainConfig {
        lr: 3e-3,
        epochs: 30,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    };
    let mut a = tiny(2);
    let mut b = tiny(2);
    let sa = train(&mut a, &data, &cfg, None).unwrap();
    let sb = train(&mut b, &data, &cfg, None).unwrap();
    assert_eq!(sa.history.len(), 30);
    assert_eq!(sa.history, sb.history);
    assert_eq!(a.weights, b.weights);
    assert_eq!(sa.step, 60);
    assert!(sa.history[29] < 0.5 * sa.history[0], "{:?}", sa.history);

    let mut c = tiny(2);
    let sc = train(&mut c, &data, &TrainConfig { seed: 6, ..cfg }, None).unwrap();
    assert_ne!(sa.history, sc.history);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = examples(5, false);
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 6,
        batch_size: 2,
        seed: 1,
        ..Default::default()
    };
    let mut full = tiny(3);
    let s_full = train(&mut full, &data, &cfg, None).unwrap();

    let mut part = tiny(3);
    let s_half = train(
        &mut part,
        &data,
        &TrainConfig {
            epochs: 3,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    let s_rest = train(&mut part, &data, &cfg, Some(s_half)).unwrap();
    assert_eq!(s_rest.history, s_full.history);
    assert_eq!(part.weights, full.weights);
    assert_eq!(s_rest, s_full);
}

#[test]
fn all_loss_kinds_train() {
    let data = examples(4, true);
    for kind in LossKind::ALL {
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 3,
            batch_size: 3,
            loss_kind: kind,
            ..Default::default()
        };
        let mut m = tiny(4);
        let st = train(&mut m, &data, &cfg, None).unwrap();
        assert!(st.history.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn sequential_stages_and_skip_reduction() {
    let v = Vocabulary::bytes();
    let sc: Vec<SentencePair> = (0..4)
        .map(|i| SentencePair::new(&format!("line {i}"), "goes on").unwrap())
        .collect();
    let sc = build_examples(&sc, &v, 32, false).examples;
    let qa = examples(4, true);
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };

    let mut m = tiny(7);
    let mut stages = Vec::new();
    let out = finetune_sequential(&mut m, &sc, &qa, &cfg, &cfg, false, |_, st| {
        stages.push((st.stage, st.step));
        Ok(())
    })
    .unwrap();
    assert_eq!(stages, [(Stage::SentenceCompletion, 4), (Stage::Qa, 4)]);
    assert_eq!(out.qa.stage, Stage::Qa);
    assert_eq!(
        out.sentence_completion.unwrap().stage,
        Stage::SentenceCompletion
    );

    let mut skipped = tiny(7);
    let out = finetune_sequential(&mut skipped, &[], &qa, &cfg, &cfg, true, |_, _| Ok(())).unwrap();
    let mut plain = tiny(7);
    let st = train(
        &mut plain,
        &qa,
        &TrainConfig {
            stage: Stage::Qa,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    assert_eq!(skipped.weights, plain.weights);
    assert_eq!(out.qa, st);
    assert!(out.sentence_completion.is_none());

    assert!(matches!(
        finetune_sequential(&mut tiny(7), &[], &qa, &cfg, &cfg, false, |_, _| Ok(())),
        Err(Error::Data(_))
    ));
}
