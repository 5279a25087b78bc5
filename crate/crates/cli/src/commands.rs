//! One function per subcommand. Each reads and writes artifacts under the
//! configured workdir and returns what it wrote for callers and tests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qosnet_core::checkpoint;
use qosnet_core::corpus::{load_metadata, load_qos_matrix, split_by_density, LoadWarnings};
use qosnet_core::eval::{self, EvalOptions, PredictionRecord};
use qosnet_core::synthetic::learnability_corpus;
use qosnet_core::templater::{build_examples, read_jsonl, write_jsonl};
use qosnet_core::trainer::{self, EpochLog};
use qosnet_core::uncertainty::{calibrate_temperature, calibration_nll, mc_predict};
use qosnet_core::{
    CalibrationState, DatasetSplit, EvalReport, FeatureExample, HeadKind, McConfig, QosModel, QosRecord, Tokenizer,
    TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::{Layout, RunConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn head_label(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::MultiPool => "multi_pool",
        HeadKind::Cls => "cls",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(split: &DatasetSplit) -> Self {
        SplitCounts {
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metric: qosnet_core::Metric,
    pub density: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub missing_marker: f64,
    pub matrix_rows: usize,
    pub matrix_columns: usize,
    pub observed: usize,
    pub dropped_missing: usize,
    pub dropped_invalid: usize,
    pub bad_coordinates: usize,
    pub counts: SplitCounts,
}

/// The split used by `prepare`, exposed so large record sets can be checked
/// without writing every example to disk.
pub fn split_records(cfg: &RunConfig, records: &[QosRecord]) -> Result<DatasetSplit> {
    split_by_density(records, cfg.density, cfg.validation_fraction, cfg.seed).context("corpus: splitting by density")
}

pub fn prepare(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.paths.workdir);
    let mut warnings = LoadWarnings::default();
    let (users, services) = load_metadata(&cfg.paths.users, &cfg.paths.services, &mut warnings).with_context(|| {
        format!(
            "corpus: loading metadata tables {} and {}",
            cfg.paths.users.display(),
            cfg.paths.services.display()
        )
    })?;
    let matrix = load_qos_matrix(&cfg.paths.matrix, cfg.metric, cfg.missing_marker)
        .with_context(|| format!("corpus: loading QoS matrix {}", cfg.paths.matrix.display()))?;
    let split = split_records(cfg, &matrix.records)?;
    fs::create_dir_all(layout.root.join("data"))
        .with_context(|| format!("prepare: creating {}", layout.root.display()))?;
    for (name, records) in [
        ("train", &split.train),
        ("valid", &split.validation),
        ("test", &split.test),
    ] {
        let examples = build_examples(records, &users, &services)
            .with_context(|| format!("templater: building the {name} split"))?;
        write_jsonl(&layout.split(name), &examples).with_context(|| format!("templater: writing the {name} split"))?;
    }
    let manifest = Manifest {
        metric: cfg.metric,
        density: cfg.density,
        validation_fraction: cfg.validation_fraction,
        seed: cfg.seed,
        missing_marker: cfg.missing_marker,
        matrix_rows: matrix.rows,
        matrix_columns: matrix.columns,
        observed: matrix.records.len(),
        dropped_missing: matrix.dropped_missing,
        dropped_invalid: matrix.dropped_invalid,
        bad_coordinates: warnings.bad_coordinates,
        counts: SplitCounts::of(&split),
    };
    write_json(&layout.manifest(), &manifest).context("prepare: writing manifest")?;
    log::info!(
        "prepared {} train / {} validation / {} test examples in {}",
        manifest.counts.train,
        manifest.counts.validation,
        manifest.counts.test,
        layout.root.display()
    );
    Ok(manifest)
}

fn load_split(layout: &Layout, name: &str) -> Result<Vec<FeatureExample>> {
    let path = layout.split(name);
    let examples: Vec<FeatureExample> =
        read_jsonl(&path).with_context(|| format!("templater: reading {} (run `prepare` first)", path.display()))?;
    if examples.is_empty() {
        bail!("templater: {} contains no examples", path.display());
    }
    Ok(examples)
}

#[derive(Serialize)]
struct StepRow {
    epoch: usize,
    batch: usize,
    total: f64,
    nll: f64,
    mae: f64,
    grad_norm: f64,
    clipped_norm: f64,
}

pub fn train(cfg: &RunConfig) -> Result<TrainLog> {
    let layout = Layout::new(&cfg.paths.workdir);
    let train_set = load_split(&layout, "train")?;
    let valid_set = load_split(&layout, "valid")?;
    let tokenizer = Tokenizer::build(train_set.iter().map(|e| e.feature.as_str()), cfg.max_vocab);
    let mut model = QosModel::new(tokenizer, cfg.encoder.clone(), cfg.fusion.clone(), cfg.head_kind())
        .context("backbone: building the model")?;
    log::info!(
        "model: {} encoder parameters, {} head parameters, vocabulary {}",
        model.backbone.parameter_count(),
        model.head.params.len(),
        model.tokenizer.tokens().len()
    );
    let train_data = trainer::prepare(&model, &train_set).context("tokenizer: encoding the train split")?;
    let valid_data = trainer::prepare(&model, &valid_set).context("tokenizer: encoding the validation split")?;
    let every = cfg.checkpoint_every.filter(|&e| e > 0);
    let log = trainer::train_with(
        &mut model,
        &train_data,
        &valid_data,
        &cfg.train,
        &cfg.schedule,
        |m: &QosModel, e: &EpochLog| {
            if let Some(k) = every {
                if (e.epoch + 1).is_multiple_of(k) {
                    checkpoint::save(m, &layout.epoch_checkpoint(e.epoch + 1))?;
                }
            }
            Ok(())
        },
    )
    .context("trainer: training")?;
    checkpoint::save(&model, &layout.checkpoint()).context("checkpoint: saving the model")?;
    log.write_csv(&layout.train_log())
        .context("trainer: writing the epoch log")?;
    let path = layout.step_log();
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("trainer: creating {}", path.display()))?;
    for s in &log.steps {
        w.serialize(StepRow {
            epoch: s.epoch,
            batch: s.batch,
            total: s.loss.total,
            nll: s.loss.nll,
            mae: s.loss.mae,
            grad_norm: s.grad_norm,
            clipped_norm: s.clipped_norm,
        })?;
    }
    w.flush()?;
    Ok(log)
}

fn load_model(path: &Path) -> Result<QosModel> {
    checkpoint::load(path).with_context(|| format!("checkpoint: loading {}", path.display()))
}

fn load_calibration(path: Option<&Path>) -> Result<CalibrationState> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("uncertainty: loading calibration {}", p.display())),
        None => Ok(CalibrationState::default()),
    }
}

/// MC-dropout predictions for every example, in input order.
pub fn predict_examples(
    model: &QosModel,
    examples: &[FeatureExample],
    mc: &McConfig,
    calib: &CalibrationState,
) -> Result<Vec<PredictionRecord>> {
    examples
        .iter()
        .map(|e| {
            let seq = model.sequence(e)?;
            let p = mc_predict(model, &seq, mc, calib)?;
            Ok(PredictionRecord {
                user_id: e.user_id,
                service_id: e.service_id,
                mu: p.mu,
                var: p.var,
                var_cal: p.var_cal,
                target: e.target,
            })
        })
        .collect::<qosnet_core::Result<Vec<_>>>()
        .context("uncertainty: MC-dropout prediction")
}

pub fn calibrate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<CalibrationState> {
    let layout = Layout::new(&cfg.paths.workdir);
    let model = load_model(&checkpoint.map(PathBuf::from).unwrap_or_else(|| layout.checkpoint()))?;
    let valid = load_split(&layout, "valid")?;
    let preds = predict_examples(&model, &valid, &cfg.mc, &CalibrationState::default())?;
    let pairs: Vec<(f64, f64)> = preds.iter().map(|p| (p.mu, p.var)).collect();
    let targets: Vec<f64> = preds.iter().map(|p| p.target).collect();
    let state = calibrate_temperature(&pairs, &targets, layout.split("valid").display().to_string())
        .context("uncertainty: fitting the temperature")?;
    log::info!(
        "calibration: tau = {:.4}, validation NLL {:.5} -> {:.5}",
        state.tau(),
        calibration_nll(&pairs, &targets, 0.0),
        state.fit_nll
    );
    write_json(&layout.calibration(), &state).context("uncertainty: writing calibration")?;
    Ok(state)
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    calibration: Option<&Path>,
    use_raw_var: bool,
) -> Result<EvalReport> {
    let layout = Layout::new(&cfg.paths.workdir);
    let model = load_model(&checkpoint.map(PathBuf::from).unwrap_or_else(|| layout.checkpoint()))?;
    let default_cal = layout.calibration();
    let calibration = calibration.or_else(|| default_cal.exists().then_some(default_cal.as_path()));
    let calib = load_calibration(calibration)?;
    let test = load_split(&layout, "test")?;
    let preds = predict_examples(&model, &test, &cfg.mc, &calib)?;
    fs::create_dir_all(layout.eval_dir()).with_context(|| format!("eval: creating {}", layout.eval_dir().display()))?;
    write_jsonl(&layout.predictions(), &preds).context("eval: writing predictions")?;
    let opts = EvalOptions {
        use_raw_var: use_raw_var || calibration.is_none(),
        density: Some(cfg.density),
        metric: Some(cfg.metric),
        head: Some(head_label(model.head.kind()).to_string()),
        ..Default::default()
    };
    let report = eval::evaluate(&preds, &opts).context("eval: computing diagnostics")?;
    eval::export_report(&report, &layout.eval_dir()).context("eval: writing report files")?;
    log::info!(
        "test MAE {:.5}, RMSE {:.5} over {} examples",
        report.mae,
        report.rmse,
        report.n
    );
    Ok(report)
}

/// One prediction-dump line; `target` is null when the input had none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub user_id: u32,
    pub service_id: u32,
    pub mu: f64,
    pub var: f64,
    pub var_cal: f64,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct PredictInput {
    feature: String,
    #[serde(default)]
    target: Option<f64>,
    #[serde(default)]
    user_id: u32,
    #[serde(default)]
    service_id: u32,
}

pub fn predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    calibration: Option<&Path>,
    input: &Path,
    output: &Path,
) -> Result<Vec<DumpRecord>> {
    let layout = Layout::new(&cfg.paths.workdir);
    let model = load_model(&checkpoint.map(PathBuf::from).unwrap_or_else(|| layout.checkpoint()))?;
    let default_cal = layout.calibration();
    let calib = load_calibration(calibration.or_else(|| default_cal.exists().then_some(default_cal.as_path())))?;
    let inputs: Vec<PredictInput> =
        read_jsonl(input).with_context(|| format!("templater: reading {}", input.display()))?;
    let examples: Vec<FeatureExample> = inputs
        .iter()
        .map(|i| FeatureExample {
            feature: i.feature.clone(),
            target: i.target.unwrap_or(0.0),
            user_id: i.user_id,
            service_id: i.service_id,
            metric: cfg.metric,
        })
        .collect();
    let preds = predict_examples(&model, &examples, &cfg.mc, &calib)?;
    let dump: Vec<DumpRecord> = preds
        .into_iter()
        .zip(&inputs)
        .map(|(p, i)| DumpRecord {
            user_id: p.user_id,
            service_id: p.service_id,
            mu: p.mu,
            var: p.var,
            var_cal: p.var_cal,
            target: i.target,
        })
        .collect();
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("predict: creating {}", dir.display()))?;
    }
    write_jsonl(output, &dump).with_context(|| format!("predict: writing {}", output.display()))?;
    Ok(dump)
}

/// Recomputes the diagnostic files from an existing prediction dump.
pub fn report(cfg: &RunConfig, predictions: &Path, out_dir: &Path, use_raw_var: bool) -> Result<EvalReport> {
    let preds: Vec<PredictionRecord> =
        read_jsonl(predictions).with_context(|| format!("eval: reading {}", predictions.display()))?;
    let opts = EvalOptions {
        use_raw_var,
        density: Some(cfg.density),
        metric: Some(cfg.metric),
        ..Default::default()
    };
    let report = eval::evaluate(&preds, &opts).context("eval: computing diagnostics")?;
    eval::export_report(&report, out_dir).context("eval: writing report files")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub name: String,
    pub block_size: usize,
    pub learning_rate: f64,
    pub passes: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// Block size, learning rate and MC pass count varied one at a time around
/// the base configuration.
pub fn sweep_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut points = vec![("base".to_string(), base.clone())];
    for b in [64, 128, 256] {
        let mut c = base.clone();
        c.encoder.block_size = b;
        points.push((format!("block{b}"), c));
    }
    for lr in [1e-5, 2e-5, 5e-5] {
        let mut c = base.clone();
        c.train.learning_rate = lr;
        points.push((format!("lr{lr:e}"), c));
    }
    for t in [10, 20, 30] {
        let mut c = base.clone();
        c.mc.passes = t;
        points.push((format!("mc{t}"), c));
    }
    let mut unique: Vec<(String, RunConfig)> = Vec::new();
    for (name, c) in points {
        if !unique.iter().any(|(_, u)| *u == c) {
            unique.push((name, c));
        }
    }
    unique
}

pub fn sweep(base: &RunConfig, out_dir: &Path) -> Result<Vec<SweepPoint>> {
    let mut results = Vec::new();
    for (name, mut cfg) in sweep_grid(base) {
        cfg.paths.workdir = out_dir.join(&name);
        log::info!("sweep point {name}");
        prepare(&cfg)?;
        train(&cfg)?;
        calibrate(&cfg, None)?;
        let r = evaluate(&cfg, None, None, false)?;
        results.push(SweepPoint {
            name,
            block_size: cfg.encoder.block_size,
            learning_rate: cfg.train.learning_rate,
            passes: cfg.mc.passes,
            mae: r.mae,
            rmse: r.rmse,
        });
    }
    let path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("sweep: creating {}", path.display()))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(results)
}

/// Writes a small generated dataset plus a matching config to `out_dir`.
pub fn synth(out_dir: &Path, users: usize, services: usize, noise: f64, seed: u64) -> Result<RunConfig> {
    fs::create_dir_all(out_dir).with_context(|| format!("synth: creating {}", out_dir.display()))?;
    let corpus = learnability_corpus(users, services, noise, seed);
    let mut cfg = RunConfig::default();
    cfg.paths.users = out_dir.join("users.txt");
    cfg.paths.services = out_dir.join("services.txt");
    cfg.paths.matrix = out_dir.join("matrix.txt");
    cfg.paths.workdir = out_dir.join("run");
    fs::write(&cfg.paths.users, corpus.user_table_text())?;
    fs::write(&cfg.paths.services, corpus.service_table_text())?;
    fs::write(&cfg.paths.matrix, corpus.matrix_text(cfg.missing_marker))?;
    cfg.density = 0.6;
    cfg.encoder.num_layers = 2;
    cfg.fusion.top_k = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.train.batch_size = 8;
    cfg.train.epochs = 120;
    write_json(&out_dir.join("config.json"), &cfg).context("synth: writing config")?;
    Ok(cfg)
}
