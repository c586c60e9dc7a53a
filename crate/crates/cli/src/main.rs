//! `htnrisk`: generate -> cohort -> featurize -> train -> evaluate -> attribute,
//! with every stage reading and writing files under `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use htn_risk::attribution::{write_ranked, write_step_attributions, DEFAULT_IG_STEPS};
use htn_risk::cohort::{CohortConfig, Split, SplitFractions};
use htn_risk::ehr::{write_row_errors, RawTables};
use htn_risk::eval::DEFAULT_THRESHOLD;
use htn_risk::featurize::{fit_schema, write_lr_features, write_sequence_features, FeatureSchema};
use htn_risk::pipeline::{
    attribute_stage, build_cohort, evaluate_stage, grid_train_stage, train_stage, ArtifactRef, CohortArtifact,
    ModelArtifact, RunManifest,
};
use htn_risk::synth::{generate_cohort, population_summary, write_population_summary, GeneratorConfig, DEFAULT_SEED};
use htn_risk::train::{parse_key_values, parse_value, ModelKind, SearchGrid, TrainConfig};
use htn_risk::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "htnrisk", version, about = "Hypertension control risk stratification pipeline")]
struct Cli {
    /// Master seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Stage configuration as key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort as the four source tables.
    Generate(GenerateArgs),
    /// Apply exclusions, build samples and split patients.
    Cohort(CohortArgs),
    /// Fit the feature schema on the training split.
    Featurize(FeaturizeArgs),
    /// Train a logistic regression or LSTM.
    Train(TrainArgs),
    /// Score the test split against the carry-forward baseline.
    Evaluate(EvaluateArgs),
    /// Rank features by weight (LR) or integrated gradients (LSTM).
    Attribute(AttributeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n_patients: Option<usize>,
    /// Zero every covariate effect.
    #[arg(long)]
    no_covariate_effects: bool,
}

#[derive(Args)]
struct CohortArgs {
    /// Directory holding the four source tables.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Also export the training feature matrices as CSV.
    #[arg(long)]
    export: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, value_parser = ["lr", "lstm"])]
    model: String,
    /// Override max_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Run the full hyperparameter grid first.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Model artifacts to compare with the baseline.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20, allow_negative_numbers = true)]
    top: i64,
    /// Integrated-gradients steps.
    #[arg(long, default_value_t = DEFAULT_IG_STEPS)]
    steps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report(ErrorClass::Usage, &e.to_string());
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            report(class, &e.to_string());
            ExitCode::from(match class {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}

/// One JSON object on one stderr line.
fn report(class: ErrorClass, message: &str) {
    let kind = match class {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    };
    let line = json!({ "error": kind, "message": message.trim().replace('\n', " ") });
    eprintln!("{line}");
}

fn run(cli: &Cli) -> Result<(), Error> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Cohort(a) => cmd_cohort(cli, a),
        Command::Featurize(a) => cmd_featurize(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Attribute(a) => cmd_attribute(cli, a),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn config_text(cli: &Cli) -> Result<String, Error> {
    cli.config.as_deref().map_or(Ok(String::new()), read_text)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, text: &str) -> Result<(), Error> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn with_config_input(cli: &Cli, manifest: &mut RunManifest) -> Result<(), Error> {
    if let Some(c) = &cli.config {
        manifest.inputs.push(ArtifactRef::hashed(c)?);
    }
    Ok(())
}

fn finish(cli: &Cli, mut manifest: RunManifest, outputs: &[&str], unhashed: &[&str]) -> Result<(), Error> {
    for name in outputs {
        manifest.outputs.push(ArtifactRef::hashed(&cli.out.join(name))?);
    }
    for name in unhashed {
        manifest.outputs.push(ArtifactRef::unhashed(&cli.out.join(name)));
    }
    write_string(&cli.out.join("manifest.json"), &manifest.to_json())
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<(), Error> {
    let mut text = config_text(cli)?;
    text.push_str(&format!("\nseed={}\n", cli.seed));
    if let Some(n) = args.n_patients {
        text.push_str(&format!("n_patients={n}\n"));
    }
    if args.no_covariate_effects {
        text.push_str("covariate_effects=off\n");
    }
    let config = GeneratorConfig::from_key_values(&text)?;
    let tables = generate_cohort(&config)?;
    tables.write_dir(&cli.out)?;
    write_population_summary(
        create(&cli.out.join("population_summary.csv"))?,
        &population_summary(&tables.encounters, &tables.labs),
    )?;
    let mut manifest = RunManifest::new("generate", cli.seed);
    with_config_input(cli, &mut manifest)?;
    manifest.config = parse_key_values(&text)?.into_iter().collect();
    finish(
        cli,
        manifest,
        &[
            "encounters.csv",
            "medications.csv",
            "labs.csv",
            "diagnoses.csv",
            "population_summary.csv",
        ],
        &[],
    )
}

fn cohort_options(text: &str) -> Result<(CohortConfig, SplitFractions), Error> {
    let mut config = CohortConfig::default();
    let mut fractions = SplitFractions::default();
    for (k, v) in parse_key_values(text)? {
        match k.as_str() {
            "horizon_days" => config.horizon_days = parse_value(&k, &v)?,
            "min_age" => config.min_age = parse_value(&k, &v)?,
            "max_age" => config.max_age = parse_value(&k, &v)?,
            "fiscal_year_start_month" => config.fiscal_year_start_month = parse_value(&k, &v)?,
            "train_fraction" => fractions.train = parse_value(&k, &v)?,
            "validation_fraction" => fractions.validation = parse_value(&k, &v)?,
            "test_fraction" => fractions.test = parse_value(&k, &v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
    }
    if !(1..=12).contains(&config.fiscal_year_start_month) {
        return Err(Error::InvalidConfig("fiscal_year_start_month must be 1-12".into()));
    }
    Ok((config, fractions))
}

fn cmd_cohort(cli: &Cli, args: &CohortArgs) -> Result<(), Error> {
    let text = config_text(cli)?;
    let (config, fractions) = cohort_options(&text)?;
    let (tables, errors) = RawTables::read_dir(&args.data)?;
    if let Some(first) = errors.first() {
        write_row_errors(create(&cli.out.join("row_errors.csv"))?, &errors)?;
        return Err(Error::MalformedRows {
            table: table_name(&first.table),
            count: errors.len(),
            first_row: first.row,
            first_message: first.message.clone(),
        });
    }
    let (cohort, tally) = build_cohort(&tables, &config, fractions, cli.seed)?;
    write_string(&cli.out.join("cohort.json"), &cohort.to_json())?;
    tally.write_csv(create(&cli.out.join("exclusions.csv"))?)?;
    cohort.write_samples_csv(create(&cli.out.join("samples.csv"))?)?;

    let mut manifest = RunManifest::new("cohort", cli.seed);
    with_config_input(cli, &mut manifest)?;
    for kind in htn_risk::ehr::TableKind::ALL {
        manifest.inputs.push(ArtifactRef::hashed(&args.data.join(kind.file_name()))?);
    }
    manifest.config = parse_key_values(&text)?.into_iter().collect();
    finish(cli, manifest, &["cohort.json", "exclusions.csv", "samples.csv"], &[])
}

fn table_name(name: &str) -> &'static str {
    htn_risk::ehr::TableKind::ALL
        .iter()
        .map(|k| k.name())
        .find(|n| *n == name)
        .unwrap_or("input")
}

fn load_cohort(path: &Path) -> Result<CohortArtifact, Error> {
    CohortArtifact::from_json(&read_text(path)?)
}

fn cmd_featurize(cli: &Cli, args: &FeaturizeArgs) -> Result<(), Error> {
    let cohort = load_cohort(&args.cohort)?;
    let samples = cohort.samples();
    let mut schema = fit_schema(&samples.train)?;
    for (k, v) in parse_key_values(&config_text(cli)?)? {
        match k.as_str() {
            "clamp" => schema.clamp = parse_value(&k, &v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
    }
    write_string(&cli.out.join("schema.json"), &schema.to_json())?;
    let mut outputs = vec!["schema.json"];
    if args.export {
        write_lr_features(create(&cli.out.join("features_lr.csv"))?, &samples.train, &schema)?;
        write_sequence_features(create(&cli.out.join("features_sequence.csv"))?, &samples.train, &schema)?;
        outputs.extend(["features_lr.csv", "features_sequence.csv"]);
    }
    let mut manifest = RunManifest::new("featurize", cli.seed);
    manifest.inputs.push(ArtifactRef::hashed(&args.cohort)?);
    with_config_input(cli, &mut manifest)?;
    manifest.config.insert("schema_hash".into(), schema.hash());
    manifest.config.insert("columns".into(), schema.width().to_string());
    manifest.config.insert("lr_columns".into(), schema.lr_width().to_string());
    finish(cli, manifest, &outputs, &[])
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), Error> {
    let cohort = load_cohort(&args.cohort)?;
    let schema = FeatureSchema::from_json(&read_text(&args.schema)?)?;
    let mut text = format!("model_kind={}\n", args.model);
    text.push_str(&config_text(cli)?);
    text.push_str(&format!("\nseed={}\n", cli.seed));
    if let Some(e) = args.epochs {
        text.push_str(&format!("max_epochs={e}\n"));
    }
    let config = TrainConfig::from_key_values(&text)?;
    if config.model_kind.name() != args.model {
        return Err(Error::InvalidConfig(format!(
            "config names model `{}` but --model is `{}`",
            config.model_kind.name(),
            args.model
        )));
    }
    let samples = cohort.samples();
    let (artifact, log) = if args.grid {
        let configs = SearchGrid::default().expand(&config);
        let (artifact, log, results) = grid_train_stage(&configs, &schema, &samples)?;
        let mut w = csv::Writer::from_writer(create(&cli.out.join("grid.csv"))?);
        w.write_record(["learning_rate", "l1_lambda", "hidden_size", "batch_size", "validation_auroc"])?;
        for r in &results {
            w.write_record([
                r.config.learning_rate.to_string(),
                r.config.l1_lambda.to_string(),
                r.config.hidden_size.to_string(),
                r.config.batch_size.to_string(),
                r.validation_auroc.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("grid.csv", e))?;
        (artifact, log)
    } else {
        train_stage(&config, &schema, &samples)?
    };
    let model_file = format!("model_{}.json", args.model);
    write_string(&cli.out.join(&model_file), &artifact.to_json())?;
    log.write_csv(create(&cli.out.join("train_log.csv"))?)?;

    let mut manifest = RunManifest::new("train", cli.seed);
    manifest.inputs.push(ArtifactRef::hashed(&args.cohort)?);
    manifest.inputs.push(ArtifactRef::hashed(&args.schema)?);
    with_config_input(cli, &mut manifest)?;
    manifest.config = parse_key_values(&artifact.config.to_key_values())?.into_iter().collect();
    manifest.config.insert("stop_reason".into(), log.stop_reason.to_string());
    manifest.config.insert("epochs".into(), log.epochs_run().to_string());
    let mut outputs = vec![model_file.as_str()];
    if args.grid {
        outputs.push("grid.csv");
    }
    finish(cli, manifest, &outputs, &["train_log.csv"])
}

fn load_model(path: &Path) -> Result<ModelArtifact, Error> {
    ModelArtifact::from_json(&read_text(path)?)
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::InvalidConfig("threshold must lie in [0, 1]".into()));
    }
    let cohort = load_cohort(&args.cohort)?;
    let models = args.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let samples = cohort.samples();
    let refs: Vec<&ModelArtifact> = models.iter().collect();
    let report = evaluate_stage(&refs, samples.get(Split::Test), args.threshold)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_string(&cli.out.join("report.json"), &json)?;
    let mut outputs = vec!["report.json".to_string()];
    for (name, curve) in &report.curves {
        let file = format!("roc_{name}.csv");
        curve.write_csv(create(&cli.out.join(&file))?)?;
        outputs.push(file);
    }
    let mut manifest = RunManifest::new("evaluate", cli.seed);
    manifest.inputs.push(ArtifactRef::hashed(&args.cohort)?);
    for m in &args.models {
        manifest.inputs.push(ArtifactRef::hashed(m)?);
    }
    manifest.config.insert("threshold".into(), args.threshold.to_string());
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish(cli, manifest, &names, &[])
}

fn cmd_attribute(cli: &Cli, args: &AttributeArgs) -> Result<(), Error> {
    if args.top <= 0 {
        return Err(Error::InvalidConfig(format!("--top must be positive, got {}", args.top)));
    }
    if args.steps == 0 {
        return Err(Error::InvalidConfig("--steps must be positive".into()));
    }
    let cohort = load_cohort(&args.cohort)?;
    let model = load_model(&args.model)?;
    let samples = cohort.samples();
    let result = attribute_stage(&model, samples.get(Split::Test), args.top as usize, args.steps)?;
    write_ranked(create(&cli.out.join("attribution_ranked.csv"))?, &result.ranked)?;
    let mut outputs = vec!["attribution_ranked.csv"];
    if let Some(per_step) = &result.per_step {
        let names = &model.schema.columns;
        write_step_attributions(create(&cli.out.join("attribution_steps.csv"))?, names, per_step)?;
        outputs.push("attribution_steps.csv");
    }
    let mut manifest = RunManifest::new("attribute", cli.seed);
    manifest.inputs.push(ArtifactRef::hashed(&args.cohort)?);
    manifest.inputs.push(ArtifactRef::hashed(&args.model)?);
    manifest.config.insert("top".into(), args.top.to_string());
    manifest.config.insert("model_kind".into(), ModelKind::name(model.kind()).to_string());
    if model.kind() == ModelKind::Lstm {
        manifest.config.insert("steps".into(), args.steps.to_string());
    }
    if let Some(gap) = result.max_completeness_gap {
        manifest.config.insert("max_completeness_gap".into(), gap.to_string());
    }
    finish(cli, manifest, &outputs, &[])
}
