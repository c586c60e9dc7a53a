//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//! Runs without the libtest harness so the lines always reach stdout.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use htn_risk::attribution::{integrated_gradients, write_ranked, write_step_attributions, FlatInput};
use htn_risk::cohort::{build_samples, CohortConfig, ExclusionRule, Split, SplitFractions};
use htn_risk::ehr::RawTables;
use htn_risk::eval::{auroc, roc_curve};
use htn_risk::featurize::{fit_schema, SequenceInput};
use htn_risk::nnet::{batch_loss, loss_and_gradient, Example, InputGradient, LrParams, LstmParams, Matrix, Model};
use htn_risk::pipeline::{attribute_stage, build_cohort, build_timelines, evaluate_stage, train_stage, ModelArtifact};
use htn_risk::synth::{generate_cohort, GeneratorConfig, DEFAULT_SEED};
use htn_risk::train::{
    class_weights, train_model, ModelKind, StopReason, TrainConfig, LR_MAX_EPOCHS, LSTM_MAX_EPOCHS,
};
use htn_risk::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("gradient correctness", gradient_correctness),
        ("auroc oracle equivalence", auroc_oracle),
        ("integrated gradients completeness", ig_completeness),
        ("class-weighting oracle", class_weighting),
        ("cohort fixture", cohort_fixture),
        ("synthetic reproduction of model ordering", positive_control),
        ("negative control", negative_control),
        ("determinism", determinism),
        ("no leakage into feature schema", no_leakage),
        ("early stopping and epoch caps", early_stopping),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = started.elapsed().as_secs_f64();
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name} ({secs:.1}s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, t: usize, f: usize) -> SequenceInput {
    SequenceInput {
        steps: Matrix::from_fn(t, f, |_, _| rng.random::<f64>()),
        pad_count: 0,
    }
}

/// Max over the checked coordinates of `|a - n| / max(|a|, |n|, 1e-6)`.
fn max_relative_error<M: Model>(model: &M, batch: &[Example<M::Input>], l1: f64, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut no_dropout = ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = loss_and_gradient(model, batch, l1, 0.0, &mut no_dropout)?;
    let analytic: Vec<f64> = grads.slices().concat();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let sizes: Vec<usize> = model.slices().iter().map(|s| s.len()).collect();
    for (k, &n) in sizes.iter().enumerate() {
        match sample {
            Some(m) if n > m => coords.extend((0..m).map(|_| (k, rng.random_range(0..n)))),
            _ => coords.extend((0..n).map(|j| (k, j))),
        }
    }
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (k, j) in coords {
        let orig = probe.slices()[k][j];
        probe.slices_mut()[k][j] = orig + h;
        let up = batch_loss(&probe, batch, l1)?;
        probe.slices_mut()[k][j] = orig - h;
        let down = batch_loss(&probe, batch, l1)?;
        probe.slices_mut()[k][j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[offsets[k] + j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

fn gradient_correctness() -> Result<Outcome> {
    let started = Instant::now();
    let (t, f) = (6, 8);
    let mut worst = [0.0f64; 3];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = LrParams {
            w: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: rng.random_range(-0.5..0.5),
        };
        let batch: Vec<Example<Vec<f64>>> = (0..8)
            .map(|i| Example {
                input: (0..f).map(|_| rng.random::<f64>()).collect(),
                label: (i % 2) as f64,
                weight: if i % 2 == 0 { 0.7 } else { 1.6 },
            })
            .collect();
        worst[0] = worst[0].max(max_relative_error(&lr, &batch, 1e-3, None, &mut rng)?);

        for (slot, hidden, sample) in [(1, 4, None), (2, 120, Some(40))] {
            let model = LstmParams::init(f, hidden, &mut rng);
            let batch: Vec<Example<SequenceInput>> = (0..4)
                .map(|i| Example {
                    input: random_sequence(&mut rng, t, f),
                    label: (i % 2) as f64,
                    weight: if i % 2 == 0 { 0.8 } else { 1.3 },
                })
                .collect();
            worst[slot] = worst[slot].max(max_relative_error(&model, &batch, 1e-5, sample, &mut rng)?);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        worst.iter().all(|&e| e < 1e-4) && secs < 30.0,
        format!(
            "max rel err lr {:.2e}, lstm H=4 {:.2e}, lstm H=120 {:.2e} (limit 1e-4, {secs:.1}s of 30s)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

fn brute_force_auc(labels: &[f64], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1.0 && lj == 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Result<Outcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let n = rng.random_range(2..=500);
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
        labels[0] = 0.0;
        labels[1] = 1.0;
        let levels = if instance % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
            .collect();
        let oracle = brute_force_auc(&labels, &scores);
        let trapezoid = roc_curve(&labels, &scores)?.area();
        let counted = auroc(&labels, &scores)?;
        worst = worst.max((trapezoid - oracle).abs()).max((counted - oracle).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        worst <= 1e-12 && secs < 10.0,
        format!("max |auc - brute force| {worst:.1e} over 100 instances ({secs:.1}s of 10s)"),
    ))
}

/// `f(x) = w . x`, exposed through the probability interface.
struct LinearScorer(Vec<f64>);

impl InputGradient for LinearScorer {
    type Input = Vec<f64>;

    fn probability_and_input_gradient(&self, x: &Vec<f64>) -> Result<(f64, Vec<f64>)> {
        Ok((self.0.iter().zip(x).map(|(w, x)| w * x).sum(), self.0.clone()))
    }
}

fn ig_completeness() -> Result<Outcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_lstm: f64 = 0.0;
    for _ in 0..10 {
        let model = LstmParams::init(10, 16, &mut rng);
        let x = random_sequence(&mut rng, 6, 10);
        let baseline = x.with_flat(&vec![0.0; 60])?;
        let ig = integrated_gradients(&model, &x, &baseline, 512)?;
        let (fx, _) = model.probability_and_input_gradient(&x)?;
        let (fb, _) = model.probability_and_input_gradient(&baseline)?;
        let gap = (ig.iter().sum::<f64>() - (fx - fb)).abs();
        worst_lstm = worst_lstm.max(gap / (fx - fb).abs());
    }
    let mut worst_linear: f64 = 0.0;
    for steps in [1, 2, 7, 64, 512] {
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let scorer = LinearScorer(w.clone());
        let ig = integrated_gradients(&scorer, &x, &vec![0.0; 12], steps)?;
        let expected: f64 = w.iter().zip(&x).map(|(w, x)| w * x).sum();
        worst_linear = worst_linear.max((ig.iter().sum::<f64>() - expected).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(outcome(
        worst_lstm < 1e-3 && worst_linear <= 1e-12 && secs < 30.0,
        format!("lstm max relative gap {worst_lstm:.2e} (limit 1e-3), linear max gap {worst_linear:.1e} ({secs:.1}s of 30s)"),
    ))
}

fn class_weighting() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<f64> = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0].to_vec();
    let inputs: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let weights = class_weights(&labels)?;
    let ratio = weights.uncontrolled / weights.controlled;
    let copies = ratio.round() as usize;
    let model = LrParams {
        w: vec![0.8, -1.1, 0.3],
        b: -0.2,
    };
    let weighted: Vec<Example<Vec<f64>>> = inputs
        .iter()
        .zip(&labels)
        .map(|(x, &y)| Example {
            input: x.clone(),
            label: y,
            weight: weights.weight(y),
        })
        .collect();
    let mut expanded = Vec::new();
    for (x, &y) in inputs.iter().zip(&labels) {
        let n = if y == 1.0 { copies } else { 1 };
        expanded.extend((0..n).map(|_| Example {
            input: x.clone(),
            label: y,
            weight: 1.0,
        }));
    }
    let a = batch_loss(&model, &weighted, 0.0)?;
    let b = batch_loss(&model, &expanded, 0.0)?;
    let diff = (a - b).abs();
    Ok(outcome(
        (ratio - copies as f64).abs() < 1e-12 && diff <= 1e-12,
        format!("weight ratio {ratio}, weighted {a:.15}, duplicated {b:.15}, diff {diff:.1e}"),
    ))
}

fn cohort_fixture() -> Result<Outcome> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cohort8");
    let (tables, errors) = RawTables::read_dir(&dir)?;
    let (timelines, tally) = build_timelines(&tables, &CohortConfig::default());
    let mut report = Vec::new();
    tally.write_csv(&mut report)?;
    let golden = std::fs::read(dir.join("exclusions.golden.csv")).map_err(|e| htn_risk::Error::io(&dir, e))?;
    let each_rule_once = ExclusionRule::ORDER.iter().all(|&r| tally.excluded(r) == 1);
    let included: Vec<&str> = timelines.patients.keys().map(|p| p.as_str()).collect();
    let six_visit = timelines
        .patients
        .iter()
        .find(|(_, e)| e.len() == 6)
        .map_or(0, |(id, e)| build_samples(id, e, 90).len());
    Ok(outcome(
        errors.is_empty() && each_rule_once && included == ["P06", "P07", "P08"] && report == golden && six_visit == 5,
        format!(
            "included {included:?}, one exclusion per rule: {each_rule_once}, report matches golden: {}, six-visit samples {six_visit}",
            report == golden
        ),
    ))
}

struct ControlResult {
    baseline: f64,
    lr: f64,
    lstm: f64,
    lstm_epochs: usize,
    secs: f64,
}

/// Default LSTM settings, capped at 20 epochs for desk-scale runtime.
const DESK_LSTM_EPOCHS: usize = 20;

fn run_control(generator: &GeneratorConfig) -> Result<ControlResult> {
    let started = Instant::now();
    let tables = generate_cohort(generator)?;
    let (cohort, _) = build_cohort(&tables, &CohortConfig::default(), SplitFractions::default(), DEFAULT_SEED)?;
    let samples = cohort.samples();
    let schema = fit_schema(&samples.train)?;

    let mut lr_config = TrainConfig::default_for(ModelKind::Lr);
    lr_config.seed = DEFAULT_SEED;
    let (lr, _) = train_stage(&lr_config, &schema, &samples)?;

    let mut lstm_config = TrainConfig::default_for(ModelKind::Lstm);
    lstm_config.seed = DEFAULT_SEED;
    lstm_config.max_epochs = DESK_LSTM_EPOCHS;
    let (lstm, log) = train_stage(&lstm_config, &schema, &samples)?;

    let report = evaluate_stage(&[&lr, &lstm], samples.get(Split::Test), 0.5)?;
    let auc = |name: &str| report.reports[name].auroc.unwrap_or(f64::NAN);
    Ok(ControlResult {
        baseline: auc("baseline"),
        lr: auc("lr"),
        lstm: auc("lstm"),
        lstm_epochs: log.epochs_run(),
        secs: started.elapsed().as_secs_f64(),
    })
}

fn positive_control() -> Result<Outcome> {
    let r = run_control(&GeneratorConfig::default())?;
    let margin = r.lr - r.baseline;
    let gap = (r.lstm - r.lr).abs();
    Ok(outcome(
        margin >= 0.03 && gap <= 0.05 && r.secs < 900.0,
        format!(
            "auroc baseline {:.4}, lr {:.4} (margin {margin:+.4}, need >= 0.03), lstm {:.4} (|lstm - lr| {gap:.4}, need <= 0.05), lstm epochs {}, {:.0}s of 900s",
            r.baseline, r.lr, r.lstm, r.lstm_epochs, r.secs
        ),
    ))
}

fn negative_control() -> Result<Outcome> {
    let r = run_control(&GeneratorConfig::default().without_covariate_effects())?;
    let (dl, ds) = (r.lr - r.baseline, r.lstm - r.baseline);
    Ok(outcome(
        dl <= 0.02 && ds <= 0.02,
        format!(
            "auroc baseline {:.4}, lr {:.4} ({dl:+.4}), lstm {:.4} ({ds:+.4}); limit +0.02, {:.0}s",
            r.baseline, r.lr, r.lstm, r.secs
        ),
    ))
}

/// Every byte artifact of one small end-to-end run, keyed by name.
fn pipeline_bytes(seed: u64) -> Result<BTreeMap<String, Vec<u8>>> {
    let generator = GeneratorConfig {
        n_patients: 300,
        seed,
        ..GeneratorConfig::default()
    };
    let tables = generate_cohort(&generator)?;
    let (cohort, tally) = build_cohort(&tables, &CohortConfig::default(), SplitFractions::default(), seed)?;
    let samples = cohort.samples();
    let schema = fit_schema(&samples.train)?;
    let mut out = BTreeMap::new();
    let mut exclusions = Vec::new();
    tally.write_csv(&mut exclusions)?;
    out.insert("exclusions".into(), exclusions);
    out.insert("cohort".into(), cohort.to_json().into_bytes());
    out.insert("schema".into(), schema.to_json().into_bytes());

    let mut models: Vec<ModelArtifact> = Vec::new();
    for kind in [ModelKind::Lr, ModelKind::Lstm] {
        let mut config = TrainConfig::default_for(kind);
        config.seed = seed;
        config.max_epochs = 4;
        config.hidden_size = 8;
        let (model, log) = train_stage(&config, &schema, &samples)?;
        let losses: Vec<String> = log.epochs.iter().map(|e| format!("{},{}", e.train_loss, e.val_loss)).collect();
        out.insert(format!("losses_{}", kind.name()), losses.join("\n").into_bytes());
        out.insert(format!("model_{}", kind.name()), model.to_json().into_bytes());
        models.push(model);
    }
    let test = samples.get(Split::Test);
    let refs: Vec<&ModelArtifact> = models.iter().collect();
    let report = evaluate_stage(&refs, test, 0.5)?;
    out.insert("report".into(), serde_json::to_vec_pretty(&report)?);
    for (name, curve) in &report.curves {
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        out.insert(format!("roc_{name}"), buf);
    }
    for model in &models {
        let result = attribute_stage(model, test, 10, 16)?;
        let mut ranked = Vec::new();
        write_ranked(&mut ranked, &result.ranked)?;
        out.insert(format!("attribution_{}", model.kind().name()), ranked);
        if let Some(per_step) = &result.per_step {
            let mut steps = Vec::new();
            write_step_attributions(&mut steps, &model.schema.columns, per_step)?;
            out.insert("attribution_steps".into(), steps);
        }
    }
    Ok(out)
}

fn determinism() -> Result<Outcome> {
    let first = pipeline_bytes(11)?;
    let second = pipeline_bytes(11)?;
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let other_seed = pipeline_bytes(12)?;
    let seed_matters = first["model_lr"] != other_seed["model_lr"];
    Ok(outcome(
        differing.is_empty() && first.len() == second.len() && seed_matters,
        format!(
            "{} artifacts compared, differing {differing:?}; a different seed changes the model: {seed_matters}",
            first.len()
        ),
    ))
}

fn no_leakage() -> Result<Outcome> {
    let generator = GeneratorConfig {
        n_patients: 600,
        ..GeneratorConfig::default()
    };
    let tables = generate_cohort(&generator)?;
    let (cohort, _) = build_cohort(&tables, &CohortConfig::default(), SplitFractions::default(), DEFAULT_SEED)?;
    let hash = fit_schema(&cohort.samples().train)?.hash();

    let mut mutated = cohort.clone();
    let test_ids: Vec<_> = cohort.splits.patients(Split::Test).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in &test_ids {
        let encounters = mutated.timelines.patients.get_mut(id).expect("split patient exists");
        for e in encounters.iter_mut() {
            e.record.systolic = Some(rng.random_range(150.0..260.0));
            e.record.age = rng.random_range(18.0..90.0);
            e.record.vitals.insert("weight".into(), rng.random_range(200.0..400.0));
            e.labs.insert("Leaked Panel".into());
            e.problems.insert("Z99.9".into());
        }
    }
    let test_hash = fit_schema(&mutated.samples().train)?.hash();

    let mut control = cohort.clone();
    let train_id = cohort.splits.patients(Split::Train).next().cloned().expect("train patient");
    for e in control.timelines.patients.get_mut(&train_id).expect("exists") {
        e.record.vitals.insert("weight".into(), 999.0);
    }
    let train_hash = fit_schema(&control.samples().train)?.hash();
    Ok(outcome(
        hash == test_hash && hash != train_hash,
        format!(
            "{} test patients mutated, hash unchanged: {}; mutating one training patient changes it: {}",
            test_ids.len(),
            hash == test_hash,
            hash != train_hash
        ),
    ))
}

fn early_stopping() -> Result<Outcome> {
    // Balanced labels on identical inputs give a zero gradient, so the
    // validation loss is constant from the first epoch.
    let flat: Vec<Example<Vec<f64>>> = (0..8)
        .map(|i| Example {
            input: vec![0.0, 0.0],
            label: (i % 2) as f64,
            weight: 1.0,
        })
        .collect();
    let mut config = TrainConfig::default_for(ModelKind::Lr);
    config.l1_lambda = 0.0;
    let (_, constant) = train_model(LrParams::zeros(2), &config, &flat, &flat)?;
    let stopped_at_two = constant.epochs_run() == 2 && constant.stop_reason == StopReason::EarlyStop;

    let separable: Vec<Example<Vec<f64>>> = (0..8)
        .map(|i| {
            let y = (i % 2) as f64;
            Example {
                input: vec![y + 0.1 * i as f64 / 8.0, 1.0 - y],
                label: y,
                weight: 1.0,
            }
        })
        .collect();
    let (_, lr_log) = train_model(LrParams::zeros(2), &config, &separable, &separable)?;

    let sequences: Vec<Example<SequenceInput>> = separable
        .iter()
        .map(|e| Example {
            input: SequenceInput {
                steps: Matrix::from_fn(2, 2, |_, c| e.input[c]),
                pad_count: 0,
            },
            label: e.label,
            weight: 1.0,
        })
        .collect();
    let mut lstm_config = TrainConfig::default_for(ModelKind::Lstm);
    lstm_config.hidden_size = 3;
    lstm_config.dropout = 0.0;
    lstm_config.l1_lambda = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, lstm_log) = train_model(LstmParams::init(2, 3, &mut rng), &lstm_config, &sequences, &sequences)?;

    let lr_capped = lr_log.epochs_run() == LR_MAX_EPOCHS && lr_log.stop_reason == StopReason::MaxEpochs;
    let lstm_capped = lstm_log.epochs_run() == LSTM_MAX_EPOCHS && lstm_log.stop_reason == StopReason::MaxEpochs;
    Ok(outcome(
        stopped_at_two && lr_capped && lstm_capped,
        format!(
            "constant loss stops after epoch {} ({:?}); lr ran {} of {LR_MAX_EPOCHS}, lstm ran {} of {LSTM_MAX_EPOCHS}",
            constant.epochs_run(),
            constant.stop_reason,
            lr_log.epochs_run(),
            lstm_log.epochs_run()
        ),
    ))
}
