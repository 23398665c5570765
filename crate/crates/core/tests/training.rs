mod common;

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgn_core::data::{
    batch_to_tensor, generate_synthetic, prepare_clip, rotate_sequence, DatasetManifest, Split, SyntheticConfig,
};
use sgn_core::eval::evaluate;
use sgn_core::model::{build_model, Preset};
use sgn_core::tensor::{BatchNormMode, Tape};
use sgn_core::train::{adam_step, lr_at_epoch, train, AdamConfig, OptimizerState, TrainRecipe};
use sgn_core::{Error, Model64, Tensor64};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ce(logits: &[f64], labels: &[usize], k: usize, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor64::new(vec![labels.len(), k], logits.to_vec()).unwrap());
    let l = tape.smoothed_cross_entropy(x, labels, eps).unwrap();
    tape.value(l).item()
}

fn smoothed_target(label: usize, k: usize, eps: f64) -> Vec<f64> {
    (0..k).map(|j| eps / k as f64 + if j == label { 1.0 - eps } else { 0.0 }).collect()
}

fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[test]
fn cross_entropy_reference_cases() {
    for k in [2usize, 5, 60] {
        for eps in [0.0, 0.1] {
            assert!((ce(&vec![0.0; k], &[1], k, eps) - (k as f64).ln()).abs() < 1e-12);
        }
    }
    assert!(ce(&[50.0, 0.0, 0.0], &[0], 3, 0.0) < 1e-20);
    let q = smoothed_target(2, 4, 0.1);
    let at_q: Vec<f64> = q.iter().map(|p| p.ln()).collect();
    assert!((ce(&at_q, &[2], 4, 0.1) - entropy(&q)).abs() < 1e-12);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor64::zeros(&[1, 3]));
    assert!(matches!(tape.smoothed_cross_entropy(x, &[3], 0.1), Err(Error::Data(_))));
}

#[test]
fn learning_rate_never_increases() {
    let r = TrainRecipe::default();
    let lrs: Vec<f64> = (0..r.epochs).map(|e| lr_at_epoch(&r, e).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!((lr_at_epoch(&r, 95).unwrap() - 1e-5).abs() < 1e-18);
    assert!(lr_at_epoch(&r, 120).is_err());
}

fn scalar_adam(p: &mut Tensor64, g: f64, state: &mut OptimizerState<f64>, lr: f64) {
    let grads: IndexMap<String, Tensor64> = [("p".to_string(), Tensor64::scalar(g))].into();
    adam_step([("p", p)], &grads, state, lr, 0.0, &AdamConfig::default()).unwrap();
}

#[test]
fn adam_scalar_cases() {
    let mut p = Tensor64::scalar(0.7);
    let mut state = OptimizerState::new();
    scalar_adam(&mut p, 0.3, &mut state, 0.01);
    let expected = 0.7 - 0.01 * 0.3 / (0.3 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-15);

    let mut p = Tensor64::scalar(1.5);
    let mut state = OptimizerState::new();
    for _ in 0..500 {
        let g = 2.0 * p.item();
        scalar_adam(&mut p, g, &mut state, 0.01);
    }
    assert!(p.item().abs() < 1e-3, "{}", p.item());

    let mut p = Tensor64::scalar(1.5);
    let mut state = OptimizerState::new();
    scalar_adam(&mut p, 0.0, &mut state, 0.01);
    assert_eq!(p.item(), 1.5);
}

fn toy_data(classes: usize, per_class: usize, seed: u64) -> DatasetManifest {
    generate_synthetic(&SyntheticConfig {
        joints: 8,
        classes,
        frames: 12,
        sequences_per_class: per_class,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn toy_model(preset: Preset, seed: u64) -> Model64 {
    build_model(&preset.config(8, 12, 4).scaled_widths(8), seed).unwrap()
}

fn batch_loss(m: &Model64, x: &Tensor64, labels: &[usize]) -> (f64, IndexMap<String, Tensor64>) {
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, x, BatchNormMode::Train).unwrap();
    let loss = tape.smoothed_cross_entropy(out.logits, labels, 0.1).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let named = out.params.iter().filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g))).collect();
    (tape.value(loss).item(), named)
}

#[test]
fn one_small_step_decreases_the_loss() {
    let data = toy_data(4, 4, 3);
    let seqs: Vec<_> = data.sequences.iter().take(8).collect();
    let mut r = rng(1);
    for trial in 0..10 {
        let clips: Vec<_> = seqs.iter().map(|s| prepare_clip(s, 12, 0, None, &mut r).unwrap()).collect();
        let x: Tensor64 = batch_to_tensor(&clips).unwrap();
        let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
        let mut m = toy_model(Preset::Sgn, 100 + trial);
        let (before, grads) = batch_loss(&m, &x, &labels);
        let mut state = OptimizerState::new();
        adam_step(m.params_mut(), &grads, &mut state, 1e-5, 0.0, &AdamConfig::default()).unwrap();
        let (after, _) = batch_loss(&m, &x, &labels);
        assert!(after < before, "trial {trial}: {before} -> {after}");
    }
}

fn quick_recipe(epochs: usize, seed: u64) -> TrainRecipe {
    TrainRecipe {
        epochs,
        milestones: vec![],
        batch_size: 8,
        val_fraction: 0.0,
        seed,
        ..TrainRecipe::default()
    }
}

#[test]
fn tiny_set_is_memorized() {
    let source = toy_data(4, 4, 5);
    let mut data = DatasetManifest::new(8, 2, vec!["lift".into(), "swap".into()]);
    data.sequences = source.sequences.into_iter().filter(|s| s.label < 2).collect();
    assert_eq!(data.sequences.len(), 8);
    for s in &mut data.sequences {
        s.split = Split::Train;
    }
    let model = build_model(&Preset::Sgn.config(8, 12, 2).scaled_widths(8), 2).unwrap();
    let mut epochs_seen = 0;
    let out = train::<f64>(model, &data, &quick_recipe(200, 1), &mut |_| epochs_seen += 1).unwrap();
    assert_eq!(epochs_seen, 200);
    assert!(out.log.iter().any(|row| row.train_acc == 1.0));
    for s in &mut data.sequences {
        s.split = Split::Test;
    }
    assert_eq!(evaluate(&out.model, &data, 1, 0).unwrap().accuracy, 1.0);
}

#[test]
fn training_is_reproducible() {
    let data = toy_data(4, 6, 7);
    let run = || {
        let out = train(toy_model(Preset::Sgn, 3), &data, &quick_recipe(2, 9), &mut |_| {}).unwrap();
        (out.model.checksum().unwrap(), out.log[0].train_loss)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let other = train(toy_model(Preset::Sgn, 3), &data, &quick_recipe(2, 10), &mut |_| {}).unwrap();
    assert_ne!(other.model.checksum().unwrap(), a.0);
}

#[test]
fn training_errors() {
    let mut data = toy_data(4, 2, 1);
    let recipe = quick_recipe(1, 0);
    let wrong = build_model::<f64>(&Preset::Sgn.config(9, 12, 4).scaled_widths(8), 0).unwrap();
    assert!(matches!(train(wrong, &data, &recipe, &mut |_| {}), Err(Error::Schema(_))));

    let mut bad = toy_model(Preset::Sgn, 0);
    bad.param_mut("embed.pos.fc1.weight").unwrap().data_mut()[0] = f64::NAN;
    match train(bad, &data, &recipe, &mut |_| {}) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0, step 0") && msg.contains("embed"), "{msg}"),
        other => panic!("expected numeric error, got {:?}", other.err()),
    }

    for s in &mut data.sequences {
        s.split = Split::Test;
    }
    assert!(matches!(train(toy_model(Preset::Sgn, 0), &data, &recipe, &mut |_| {}), Err(Error::Data(_))));
}

#[test]
fn rotation_augmentation_helps_on_rotated_test_copies() {
    let mut data = generate_synthetic(&SyntheticConfig {
        joints: 8,
        classes: 4,
        frames: 12,
        sequences_per_class: 40,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut r = rng(12);
    for s in data.sequences.iter_mut().filter(|s| s.split == Split::Test) {
        let deg = 50f64.to_radians();
        let angles = [r.random_range(-deg..deg), r.random_range(-deg..deg), r.random_range(-deg..deg)];
        *s = rotate_sequence(s, angles);
    }
    let recipe = TrainRecipe { rotation_degrees: [50.0; 3], ..quick_recipe(8, 4) };
    let accuracy = |preset: Preset| {
        let out = train(toy_model(preset, 8), &data, &recipe, &mut |_| {}).unwrap();
        evaluate(&out.model, &data, 1, 0).unwrap().accuracy
    };
    let (plain, augmented) = (accuracy(Preset::Baseline), accuracy(Preset::BaselineDa));
    assert!(augmented >= plain, "with augmentation {augmented}, without {plain}");
}

proptest! {
    #[test]
    fn cross_entropy_is_bounded_by_target_entropy(
        logits in prop::collection::vec(-20.0..20.0f64, 6),
        label in 0usize..6,
        eps in 0.0..0.9f64,
    ) {
        let q = smoothed_target(label, 6, eps);
        prop_assert!(ce(&logits, &[label], 6, eps) >= entropy(&q) - 1e-9);
    }
}
