use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use htn_risk::featurize::SequenceInput;
use htn_risk::nnet::{batch_loss, loss_and_gradient, Example, LrParams, LstmParams, Matrix, Model};
use htn_risk::train::{
    adam_step, class_weights, rmsprop_step, train_model, ModelKind, OptimizerKind, OptimizerState, StopReason,
    TrainConfig,
};

/// `f(p) = sum a_i (p_i - c_i)^2`.
fn bowl_gradient(p: &[f64], a: &[f64], c: &[f64]) -> Vec<f64> {
    p.iter().zip(a).zip(c).map(|((p, a), c)| 2.0 * a * (p - c)).collect()
}

#[test]
fn optimizers_descend_quadratic_bowls() {
    let a = [1.0, 4.0, 0.25, 10.0];
    let c = [1.5, -2.0, 0.3, 0.0];
    for (kind, step) in [
        (OptimizerKind::Adam, adam_step as fn(&mut [f64], &[f64], &mut OptimizerState, f64) -> _),
        (OptimizerKind::Rmsprop, rmsprop_step),
    ] {
        let mut p = vec![0.0, 0.0, 0.0, 3.0];
        let mut state = OptimizerState::new(kind, 4);
        for t in 0..4000 {
            let lr = if t < 2000 { 1e-2 } else { 1e-3 };
            let g = bowl_gradient(&p, &a, &c);
            step(&mut p, &g, &mut state, lr).unwrap();
        }
        for (p, c) in p.iter().zip(&c) {
            assert!((p - c).abs() < 0.02, "{kind:?}: {p} vs {c}");
        }
    }
}

#[test]
fn optimizer_rejects_non_finite_gradients() {
    let mut state = OptimizerState::new(OptimizerKind::Adam, 2);
    let mut p = vec![0.0, 1.0];
    assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut state, 1e-3).is_err());
    assert!(rmsprop_step(&mut p, &[0.0], &mut state, 1e-3).is_err());
}

proptest! {
    #[test]
    fn optimizer_updates_stay_finite(
        grads in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 1..30),
        lr in 1e-6f64..1e-1,
    ) {
        for kind in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
            let mut p = vec![0.5; 5];
            let mut state = OptimizerState::new(kind, 5);
            for g in &grads {
                match kind {
                    OptimizerKind::Adam => adam_step(&mut p, g, &mut state, lr).unwrap(),
                    OptimizerKind::Rmsprop => rmsprop_step(&mut p, g, &mut state, lr).unwrap(),
                }
                prop_assert!(p.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn class_weights_balance_total_mass(labels in prop::collection::vec(prop::bool::ANY, 2..200)) {
        let labels: Vec<f64> = labels.into_iter().map(f64::from).collect();
        let positives = labels.iter().filter(|&&y| y == 1.0).count();
        if positives == 0 || positives == labels.len() {
            prop_assert!(class_weights(&labels).is_err());
        } else {
            let w = class_weights(&labels).unwrap();
            let pos_mass = w.uncontrolled * positives as f64;
            let neg_mass = w.controlled * (labels.len() - positives) as f64;
            prop_assert!((pos_mass - neg_mass).abs() < 1e-9);
            prop_assert!((pos_mass + neg_mass - labels.len() as f64).abs() < 1e-9);
        }
    }
}

fn separable(n: usize, seed: u64) -> Vec<Example<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let label = f64::from(x[0] + 0.5 * x[1] - 0.3 * x[2] > 0.6);
            Example { input: x, label, weight: 1.0 }
        })
        .collect()
}

#[test]
fn logistic_regression_learns_a_separable_rule() {
    let train = separable(600, 1);
    let test = separable(300, 2);
    let mut config = TrainConfig::default_for(ModelKind::Lr);
    config.learning_rate = 5e-2;
    config.batch_size = 32;
    config.l1_lambda = 0.0;
    config.max_epochs = 200;
    let (model, log) = train_model(LrParams::zeros(4), &config, &train, &test).unwrap();
    let correct = test
        .iter()
        .filter(|e| f64::from(model.probability(&e.input).unwrap() >= 0.5) == e.label)
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy > 0.95, "accuracy {accuracy}, epochs {}", log.epochs_run());
    let first = log.epochs.first().unwrap().val_loss;
    assert!(log.epochs.last().unwrap().val_loss < first);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data: Vec<Example<SequenceInput>> = separable(40, 3)
        .into_iter()
        .map(|e| Example {
            input: SequenceInput {
                steps: Matrix::from_fn(3, 4, |t, f| e.input[f] * (t + 1) as f64 / 3.0),
                pad_count: 0,
            },
            label: e.label,
            weight: 1.0,
        })
        .collect();
    let mut config = TrainConfig::default_for(ModelKind::Lstm);
    config.hidden_size = 5;
    config.batch_size = 8;
    config.max_epochs = 5;
    config.seed = 42;
    let init = LstmParams::init(4, 5, &mut ChaCha8Rng::seed_from_u64(0));
    let (a, log_a) = train_model(init.clone(), &config, &data, &data).unwrap();
    let (b, log_b) = train_model(init.clone(), &config, &data, &data).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let losses = |l: &htn_risk::train::TrainLog| l.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>();
    assert_eq!(losses(&log_a), losses(&log_b));
    config.seed = 43;
    let (c, _) = train_model(init, &config, &data, &data).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn small_caps_and_constant_loss_stop() {
    let flat: Vec<Example<Vec<f64>>> = (0..6)
        .map(|i| Example { input: vec![1.0], label: (i % 2) as f64, weight: 1.0 })
        .collect();
    let mut config = TrainConfig::default_for(ModelKind::Lr);
    config.l1_lambda = 0.0;
    let (_, log) = train_model(LrParams::zeros(1), &config, &flat, &flat).unwrap();
    assert_eq!((log.epochs_run(), log.stop_reason), (2, StopReason::EarlyStop));

    config.max_epochs = 3;
    let (_, log) = train_model(LrParams::zeros(4), &config, &separable(50, 4), &separable(20, 5)).unwrap();
    assert_eq!((log.epochs_run(), log.stop_reason), (3, StopReason::MaxEpochs));
}

#[test]
fn two_phase_continues_past_the_first_stall() {
    let flat: Vec<Example<Vec<f64>>> = (0..6)
        .map(|i| Example { input: vec![1.0], label: (i % 2) as f64, weight: 1.0 })
        .collect();
    let mut config = TrainConfig::default_for(ModelKind::Lr);
    config.l1_lambda = 0.0;
    config.two_phase = true;
    let (_, log) = train_model(LrParams::zeros(1), &config, &flat, &flat).unwrap();
    assert_eq!((log.epochs_run(), log.stop_reason), (3, StopReason::EarlyStop));
}

#[test]
fn dropout_gradient_matches_finite_differences_under_a_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = LstmParams::init(3, 6, &mut rng);
    let batch: Vec<Example<SequenceInput>> = (0..3)
        .map(|i| Example {
            input: SequenceInput {
                steps: Matrix::from_fn(4, 3, |_, _| rng.random::<f64>()),
                pad_count: 0,
            },
            label: (i % 2) as f64,
            weight: 1.0,
        })
        .collect();
    let masked_loss = |m: &LstmParams| {
        let mut r = ChaCha8Rng::seed_from_u64(77);
        loss_and_gradient(m, &batch, 0.0, 0.5, &mut r).unwrap()
    };
    let (_, grads) = masked_loss(&model);
    let analytic = grads.slices().concat();
    let mut probe = model.clone();
    let mut offset = 0;
    let h = 1e-6;
    for k in 0..model.slices().len() {
        let n = model.slices()[k].len();
        for j in [0, n / 2, n - 1] {
            let orig = probe.slices()[k][j];
            probe.slices_mut()[k][j] = orig + h;
            let up = masked_loss(&probe).0;
            probe.slices_mut()[k][j] = orig - h;
            let down = masked_loss(&probe).0;
            probe.slices_mut()[k][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[offset + j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "tensor {k} index {j}: {a} vs {numeric}");
        }
        offset += n;
    }
}

#[test]
fn inference_loss_ignores_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = LstmParams::init(2, 3, &mut rng);
    let batch = vec![Example {
        input: SequenceInput { steps: Matrix::from_fn(2, 2, |r, c| (r + c) as f64 / 3.0), pad_count: 0 },
        label: 1.0,
        weight: 1.0,
    }];
    let (no_dropout, _) = loss_and_gradient(&model, &batch, 0.0, 0.0, &mut rng).unwrap();
    assert_eq!(no_dropout, batch_loss(&model, &batch, 0.0).unwrap());
}

/// Independent reimplementation of the two recurrences on `f(w) = w^2`.
fn reference_bowl(adam: bool) -> f64 {
    let (lr, mut w, mut m, mut v) = (0.1, 1.0f64, 0.0, 0.0);
    for t in 1..=200 {
        let g = 2.0 * w;
        if adam {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        } else {
            v = 0.9 * v + 0.1 * g * g;
            w -= lr * g / (v + 1e-8).sqrt();
        }
    }
    w
}

#[test]
fn unit_bowl_matches_reference_recurrence() {
    for (kind, adam) in [(OptimizerKind::Adam, true), (OptimizerKind::Rmsprop, false)] {
        let mut w = vec![1.0];
        let mut state = OptimizerState::new(kind, 1);
        for _ in 0..200 {
            let g = vec![2.0 * w[0]];
            match kind {
                OptimizerKind::Adam => adam_step(&mut w, &g, &mut state, 0.1).unwrap(),
                OptimizerKind::Rmsprop => rmsprop_step(&mut w, &g, &mut state, 0.1).unwrap(),
            }
        }
        let reference = reference_bowl(adam);
        assert!((w[0] - reference).abs() < 1e-12, "{kind:?}: {} vs {reference}", w[0]);
        assert!(w[0].abs() < 0.1, "{kind:?} ended at {}", w[0]);
    }
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    for kind in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
        let mut p = vec![0.3, -1.2];
        let mut state = OptimizerState::new(kind, 2);
        match kind {
            OptimizerKind::Adam => adam_step(&mut p, &[0.0, 0.0], &mut state, 0.1).unwrap(),
            OptimizerKind::Rmsprop => rmsprop_step(&mut p, &[0.0, 0.0], &mut state, 0.1).unwrap(),
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }
}

#[test]
fn grid_picks_the_config_with_better_validation_auroc() {
    use htn_risk::train::grid_search;
    let train = separable(400, 11);
    let val = separable(200, 12);
    let mut weak = TrainConfig::default_for(ModelKind::Lr);
    weak.learning_rate = 1e-6;
    weak.max_epochs = 1;
    weak.l1_lambda = 0.0;
    let mut strong = weak.clone();
    strong.learning_rate = 5e-2;
    strong.max_epochs = 100;
    let labels: Vec<f64> = val.iter().map(|e| e.label).collect();
    let (best, results) = grid_search(&[weak, strong], |c| {
        let (model, _) = train_model(LrParams::zeros(4), c, &train, &val)?;
        let scores: Vec<f64> = val.iter().map(|e| model.probability(&e.input)).collect::<Result<_, _>>()?;
        htn_risk::eval::auroc(&labels, &scores)
    })
    .unwrap();
    assert_eq!(best, 1);
    assert!(results[1].validation_auroc > 0.97, "{}", results[1].validation_auroc);
    assert!(results[1].validation_auroc > results[0].validation_auroc);
}
