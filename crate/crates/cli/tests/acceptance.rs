//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom harness so the lines appear in order under
//! `cargo test`; the process exits non-zero when any criterion fails.
//! Artifacts of the training runs are kept under
//! `$CARGO_TARGET_TMPDIR/acceptance` for inspection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use qosnet::commands;
use qosnet::{Layout, RunConfig};
use qosnet_core::backbone::Mode;
use qosnet_core::eval::{coverage_curve, default_alpha_grid, mae, rmse, CoveragePoint};
use qosnet_core::fusion::{fuse_layers, multi_pool, ALL_POOLINGS};
use qosnet_core::synthetic::learnability_corpus;
use qosnet_core::templater::build_examples;
use qosnet_core::trainer::{self, active_layers, backbone_trainable, gaussian_nll, gaussian_nll_grad};
use qosnet_core::uncertainty::{
    calibrate_temperature, calibration_nll, calibration_nll_grad, mc_predict, pass_seed, StochasticRegressor,
};
use qosnet_core::{
    CalibrationState, EncoderConfig, FusionConfig, Head, HeadKind, McConfig, Metric, QosModel, QosRecord,
    TokenSequence, Tokenizer, TrainConfig, UnfreezeSchedule,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    fn failed(e: impl std::fmt::Display) -> Self {
        Outcome::new(false, format!("error: {e:#}"))
    }
}

fn report(n: usize, outcome: &Outcome, seconds: f64) {
    let verdict = if outcome.pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} — {} [{seconds:.1}s]", outcome.detail);
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t0 = Instant::now();
    let o = f();
    (o, t0.elapsed().as_secs_f64())
}

/// `|a - b| / max(|a|, |b|)`, with both below `floor` treated as agreement.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ---------------------------------------------------------------- criterion 1

/// Reference split table: (metric, density, train, test, validation).
const DIVISION_TABLE: [(Metric, f64, usize, usize, usize); 8] = [
    (Metric::Rt, 0.05, 95_877, 1_437_361, 383_310),
    (Metric::Rt, 0.10, 191_755, 1_341_483, 383_310),
    (Metric::Rt, 0.15, 287_632, 1_245_606, 383_310),
    (Metric::Rt, 0.20, 383_510, 1_149_728, 383_310),
    (Metric::Tp, 0.05, 82_586, 1_218_788, 330_343),
    (Metric::Tp, 0.10, 165_171, 1_136_203, 330_343),
    (Metric::Tp, 0.15, 247_757, 1_053_617, 330_343),
    (Metric::Tp, 0.20, 330_343, 971_031, 330_343),
];

fn synthetic_records(metric: Metric, n: usize) -> Vec<QosRecord> {
    const SERVICES: usize = 5825;
    (0..n)
        .map(|i| QosRecord {
            user_id: (i / SERVICES) as u32,
            service_id: (i % SERVICES) as u32,
            metric,
            target: 1.0,
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0usize;
    let mut cells = Vec::new();
    for metric in [Metric::Rt, Metric::Tp] {
        let rows: Vec<_> = DIVISION_TABLE.iter().filter(|r| r.0 == metric).collect();
        // A synthetic set whose cardinality equals the table's row total.
        let n = rows[0].2 + rows[0].3 + rows[0].4;
        let records = synthetic_records(metric, n);
        for &&(_, density, train, test, valid) in &rows {
            let cfg = RunConfig {
                metric,
                density,
                ..RunConfig::default()
            };
            let split = match commands::split_records(&cfg, &records) {
                Ok(s) => s,
                Err(e) => return Outcome::failed(e),
            };
            let diffs = [
                split.train.len().abs_diff(train),
                split.test.len().abs_diff(test),
                split.validation.len().abs_diff(valid),
            ];
            worst = worst.max(*diffs.iter().max().unwrap());
            cells.push(format!(
                "{metric:?}@{density}: train {}/{train} test {}/{test} valid {}/{valid}",
                split.train.len(),
                split.test.len(),
                split.validation.len()
            ));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 2 && secs < 60.0,
        format!(
            "worst cell off by {worst} records (tolerance 2), {secs:.1}s; {}",
            cells.join("; ")
        ),
    )
}

// ------------------------------------------------------------ criteria 2, 3, 4

struct Phase {
    c2: (Outcome, f64),
    c3: (Outcome, f64),
    c4: (Outcome, f64),
}

fn learnability_config(root: &Path, sft: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = commands::synth(&root.join("data"), 32, 16, 0.02, 42)?;
    cfg.paths.workdir = root.join("run");
    cfg.sft = sft;
    Ok(cfg)
}

fn criterion_2(root: &Path) -> Outcome {
    let run = || -> anyhow::Result<Outcome> {
        let t0 = Instant::now();
        let cfg = learnability_config(root, false)?;
        let manifest = commands::prepare(&cfg)?;
        let log = commands::train(&cfg)?;
        commands::calibrate(&cfg, None)?;
        let report = commands::evaluate(&cfg, None, None, false)?;
        let secs = t0.elapsed().as_secs_f64();
        let last = log.epochs.last().expect("at least one epoch");
        Ok(Outcome::new(
            report.mae < 0.04 && cfg.train.epochs <= 300 && secs < 600.0,
            format!(
                "held-out MAE {:.4} (MC mean, n={}) vs bound 0.04; deterministic valid MAE {:.4}; \
                 {} examples, N={} d={} block {}, {} epochs, {secs:.0}s",
                report.mae,
                report.n,
                last.valid_mae,
                manifest.observed,
                cfg.encoder.num_layers,
                cfg.encoder.hidden_dim,
                cfg.encoder.block_size,
                cfg.train.epochs
            ),
        ))
    };
    run().unwrap_or_else(Outcome::failed)
}

fn criterion_3(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 10_000;
    let mut preds = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let mu: f64 = rng.gen_range(-5.0..5.0);
        let sigma: f64 = rng.gen_range(0.2..3.0);
        let z: f64 = rng.sample(StandardNormal);
        ys.push(mu + sigma * z);
        // Reported sigma is half the truth: variance scaled by 1/4.
        preds.push((mu, sigma * sigma / 4.0));
    }
    let state = match calibrate_temperature(&preds, &ys, "synthetic") {
        Ok(s) => s,
        Err(e) => return Outcome::failed(e),
    };
    let tau = state.tau();
    let mut normalized = 0.0;
    for (&(m, v), &y) in preds.iter().zip(&ys) {
        normalized += (y - m) * (y - m) / v;
    }
    normalized /= n as f64;
    let identity = ((tau * tau) - normalized).abs() / normalized;
    let out = root.join("calibration_oracle.json");
    let body = serde_json::json!({"tau": tau, "log_tau": state.log_tau, "mean_normalized_sq": normalized});
    if let Err(e) = fs::write(&out, serde_json::to_vec_pretty(&body).unwrap()) {
        return Outcome::failed(e);
    }
    Outcome::new(
        (1.95..=2.05).contains(&tau) && identity < 1e-6,
        format!("tau {tau:.4} in [1.95, 2.05]; tau^2 identity rel err {identity:.2e} (< 1e-6)"),
    )
}

fn write_coverage(path: &Path, curve: &[CoveragePoint]) -> std::io::Result<()> {
    let mut s = String::from("alpha,empirical_coverage\n");
    for p in curve {
        s.push_str(&format!("{},{}\n", p.alpha, p.empirical_coverage));
    }
    fs::write(path, s)
}

fn criterion_4(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 10_000;
    let (mut mus, mut stds, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let mu: f64 = rng.gen_range(-5.0..5.0);
        let sigma: f64 = rng.gen_range(0.2..3.0);
        let z: f64 = rng.sample(StandardNormal);
        mus.push(mu);
        stds.push(sigma);
        ys.push(mu + sigma * z);
    }
    let alphas = default_alpha_grid();
    let doubled: Vec<f64> = stds.iter().map(|s| s * 2f64.sqrt()).collect();
    let (calibrated, inflated) = match (
        coverage_curve(&mus, &stds, &ys, &alphas),
        coverage_curve(&mus, &doubled, &ys, &alphas),
    ) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::failed(e),
    };
    let worst = calibrated
        .iter()
        .map(|p| (p.empirical_coverage - p.alpha).abs())
        .fold(0.0, f64::max);
    let under: Vec<f64> = inflated
        .iter()
        .filter(|p| p.alpha < 0.9 && p.empirical_coverage <= p.alpha)
        .map(|p| p.alpha)
        .collect();
    let checked = inflated.iter().filter(|p| p.alpha < 0.9).count();
    if let Err(e) = write_coverage(&root.join("coverage_calibrated.csv"), &calibrated)
        .and_then(|_| write_coverage(&root.join("coverage_doubled.csv"), &inflated))
    {
        return Outcome::failed(e);
    }
    Outcome::new(
        worst < 0.02 && under.is_empty(),
        format!(
            "calibrated max |coverage - alpha| {worst:.4} over {} alphas (< 0.02); doubled variances \
             over-cover at {}/{checked} alphas below 0.9",
            alphas.len(),
            checked - under.len()
        ),
    )
}

fn phase(root: &Path) -> Phase {
    if let Err(e) = fs::create_dir_all(root) {
        let f = || (Outcome::failed(&e), 0.0);
        return Phase {
            c2: f(),
            c3: f(),
            c4: f(),
        };
    }
    Phase {
        c2: timed(|| criterion_2(root)),
        c3: timed(|| criterion_3(root)),
        c4: timed(|| criterion_4(root)),
    }
}

// ---------------------------------------------------------------- criterion 5

fn random_matrix(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

/// Worst relative error of the head's parameter and input gradients.
fn head_stack_error(kind: HeadKind, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_layers, n_tokens, dim) = (3, 6, 8);
    let config = FusionConfig {
        top_k: 2,
        dropout_p: 0.2,
        ..FusionConfig::default()
    };
    let mut head = Head::new(kind, config, dim, n_layers, seed).expect("valid head");
    let mut states: Vec<Array2<f64>> = (0..n_layers)
        .map(|_| random_matrix((n_tokens, dim), &mut rng))
        .collect();
    let keep = [true, true, true, true, true, false];
    let (wm, wl): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let dropout_seed = seed ^ 0xD5;
    let objective = |head: &Head, states: &[Array2<f64>]| {
        let views: Vec<ArrayView2<f64>> = states.iter().map(|s| s.view()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (p, _) = head.forward(&views, &keep, Mode::Train, &mut r).expect("forward");
        wm * p.mu + wl * p.log_var
    };
    let views: Vec<ArrayView2<f64>> = states.iter().map(|s| s.view()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (_, cache) = head.forward(&views, &keep, Mode::Train, &mut r).expect("forward");
    let mut grads = head.params.zeros_like();
    let d_states = head.backward(&cache, wm, wl, &mut grads);

    let mut worst: f64 = 0.0;
    for i in 0..head.params.len() {
        let orig = head.params.data[i];
        let fd = central_diff(
            |x| {
                head.params.data[i] = x;
                objective(&head, &states)
            },
            orig,
            H,
        );
        head.params.data[i] = orig;
        worst = worst.max(rel_err(fd, grads.data[i], FLOOR));
    }
    for l in 0..n_layers {
        for r in 0..n_tokens {
            for c in 0..dim {
                let orig = states[l][[r, c]];
                let fd = central_diff(
                    |x| {
                        states[l][[r, c]] = x;
                        objective(&head, &states)
                    },
                    orig,
                    H,
                );
                states[l][[r, c]] = orig;
                let an = d_states[l].as_ref().map_or(0.0, |d| d[[r, c]]);
                worst = worst.max(rel_err(fd, an, FLOOR));
            }
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_nll: f64 = 0.0;
    for _ in 0..500 {
        let y: f64 = rng.gen_range(-3.0..3.0);
        let mu: f64 = rng.gen_range(-3.0..3.0);
        let lv: f64 = rng.gen_range(-3.0..3.0);
        let (g_mu, g_lv) = gaussian_nll_grad(y, mu, lv);
        let f = |m: f64, l: f64| gaussian_nll(&[y], &[m], &[l.exp()]).expect("valid input");
        let fd_mu = central_diff(|m| f(m, lv), mu, H);
        let fd_lv = central_diff(|l| f(mu, l), lv, H);
        worst_nll = worst_nll
            .max(rel_err(fd_mu, g_mu, FLOOR))
            .max(rel_err(fd_lv, g_lv, FLOOR));
    }
    let mut worst_tau: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..40);
        let preds: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(0.05..4.0)))
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lt: f64 = rng.gen_range(-1.5..1.5);
        let fd = central_diff(|t| calibration_nll(&preds, &ys, t), lt, H);
        worst_tau = worst_tau.max(rel_err(fd, calibration_nll_grad(&preds, &ys, lt), FLOOR));
    }
    let mut worst_head: f64 = 0.0;
    for seed in 0..6 {
        for kind in [HeadKind::MultiPool, HeadKind::Cls] {
            worst_head = worst_head.max(head_stack_error(kind, seed));
        }
    }
    let worst = worst_nll.max(worst_tau).max(worst_head);
    Outcome::new(
        worst < 1e-4,
        format!(
            "max rel err: nll (mu, log var) {worst_nll:.1e}, log tau {worst_tau:.1e}, \
             fusion/pooling/head {worst_head:.1e} (< 1e-4; |g| < 1e-7 on both sides counts as agreement)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn small_model(dropout: f64, seed: u64) -> (QosModel, Vec<TokenSequence>) {
    let corpus = learnability_corpus(8, 6, 0.02, seed);
    let examples = build_examples(&corpus.records, &corpus.users, &corpus.services).expect("examples");
    let tok = Tokenizer::build(examples.iter().map(|e| e.feature.as_str()), None);
    let encoder = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        dropout_p: dropout,
        seed,
        ..EncoderConfig::default()
    };
    let fusion = FusionConfig {
        top_k: 2,
        dropout_p: dropout,
        ..FusionConfig::default()
    };
    let model = QosModel::new(tok, encoder, fusion, HeadKind::MultiPool).expect("model");
    let seqs = examples
        .iter()
        .take(12)
        .map(|e| model.sequence(e).expect("sequence"))
        .collect();
    (model, seqs)
}

fn criterion_6() -> Outcome {
    let run = || -> qosnet_core::Result<Outcome> {
        let calib = CalibrationState {
            log_tau: 0.3,
            ..CalibrationState::default()
        };
        let mc = McConfig { passes: 20, seed: 42 };

        // No dropout: every pass equals the deterministic pass.
        let (plain, seqs) = small_model(0.0, 3);
        let mut zero_spread = true;
        for s in &seqs {
            let det = plain.predict_deterministic(s)?;
            let p = mc_predict(&plain, s, &mc, &CalibrationState::default())?;
            let spread = qosnet_core::stats::std_dev(&p.sample_mus);
            zero_spread &= spread == 0.0 && p.mc_std == 0.0 && p.mu == det.mu && p.var == det.var();
        }

        // T = 1 equals one dropout-active pass.
        let (noisy, seqs) = small_model(0.1, 3);
        let single = McConfig { passes: 1, seed: 42 };
        let mut one_pass = true;
        for s in &seqs {
            let p = mc_predict(&noisy, s, &single, &calib)?;
            let direct = noisy.sample(s, Mode::EvalMc, pass_seed(&single, s, 0))?;
            one_pass &= p.mu == direct.mu && p.var == direct.var();
        }

        // T = 20: plain arithmetic means of independently drawn passes.
        let mut worst: f64 = 0.0;
        let mut varied = false;
        for s in &seqs {
            let p = mc_predict(&noisy, s, &mc, &calib)?;
            let mut sum_mu = 0.0;
            let mut sum_var = 0.0;
            for t in 0..mc.passes {
                let g = noisy.sample(s, Mode::EvalMc, pass_seed(&mc, s, t))?;
                sum_mu += g.mu;
                sum_var += g.log_var.exp();
            }
            let (m, v) = (sum_mu / mc.passes as f64, sum_var / mc.passes as f64);
            let scaled = (2.0 * calib.log_tau).exp() * v;
            worst = worst
                .max((p.mu - m).abs())
                .max((p.var - v).abs())
                .max((p.var_cal - scaled).abs());
            varied |= p.mc_std > 0.0;
        }
        Ok(Outcome::new(
            zero_spread && one_pass && worst < 1e-12 && varied,
            format!(
                "p=0 zero spread and exact match: {zero_spread}; T=1 equals single pass: {one_pass}; \
                 T=20 mean/var/calibrated var max deviation {worst:.1e} (< 1e-12)"
            ),
        ))
    };
    run().unwrap_or_else(Outcome::failed)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut fuse_ok = true;
    for _ in 0..200 {
        let n_layers = rng.gen_range(1..5);
        let shape = (rng.gen_range(1..7), rng.gen_range(1..6));
        let states: Vec<Array2<f64>> = (0..n_layers).map(|_| random_matrix(shape, &mut rng)).collect();
        let views: Vec<ArrayView2<f64>> = states.iter().map(|s| s.view()).collect();
        fuse_ok &= fuse_layers(&views, 1).is_ok_and(|f| f == states[n_layers - 1]);
    }

    let mut perm_worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..10);
        let dim = rng.gen_range(2..7);
        let h = random_matrix((n, dim), &mut rng);
        let q = Array1::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0));
        let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
        keep[rng.gen_range(0..n)] = true;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let hp = Array2::from_shape_fn((n, dim), |(i, j)| h[[perm[i], j]]);
        let kp: Vec<bool> = perm.iter().map(|&i| keep[i]).collect();
        match (
            multi_pool(h.view(), &keep, &ALL_POOLINGS, Some(q.view())),
            multi_pool(hp.view(), &kp, &ALL_POOLINGS, Some(q.view())),
        ) {
            (Ok((a, _)), Ok((b, _))) => {
                perm_worst = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(perm_worst, f64::max)
            }
            (Err(e), _) | (_, Err(e)) => return Outcome::failed(e),
        }
    }

    let mut rmse_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        rmse_ok &= match (rmse(&t, &p), mae(&t, &p)) {
            (Ok(r), Ok(m)) => r >= m,
            _ => false,
        };
    }

    let (monotone, frozen_ok, max_clip, steps, counts) = match unfreezing_run() {
        Ok(v) => v,
        Err(e) => return Outcome::failed(e),
    };
    Outcome::new(
        fuse_ok && perm_worst < 1e-12 && rmse_ok && monotone && frozen_ok && max_clip <= 1.0 + 1e-6,
        format!(
            "K=1 fusion is the last layer: {fuse_ok}; pooling permutation drift {perm_worst:.1e} over 1000 sets; \
             rmse >= mae on 1000 vectors: {rmse_ok}; trainable sets nested over 20 epochs: {monotone} \
             (active layers {counts:?}), frozen weights untouched: {frozen_ok}; \
             max clipped norm {max_clip:.6} over {steps} steps (<= 1 + 1e-6)"
        ),
    )
}

type UnfreezeResult = (bool, bool, f64, usize, Vec<usize>);

fn unfreezing_run() -> qosnet_core::Result<UnfreezeResult> {
    let corpus = learnability_corpus(8, 6, 0.02, 11);
    let examples = build_examples(&corpus.records, &corpus.users, &corpus.services)?;
    let tok = Tokenizer::build(examples.iter().map(|e| e.feature.as_str()), None);
    let encoder = EncoderConfig {
        num_layers: 4,
        hidden_dim: 16,
        num_heads: 2,
        ..EncoderConfig::default()
    };
    let fusion = FusionConfig {
        top_k: 2,
        ..FusionConfig::default()
    };
    let mut model = QosModel::new(tok, encoder, fusion, HeadKind::MultiPool)?;
    let data = trainer::prepare(&model, &examples)?;
    let (train, valid) = data.split_at(36);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 8,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let schedule = UnfreezeSchedule {
        step_epochs: 3,
        layers_per_step: 1,
    };
    let n_layers = model.backbone.config().num_layers;
    let mut previous = model.backbone.params.data.clone();
    let mut prev_trainable = vec![false; previous.len()];
    let mut monotone = true;
    let mut frozen_ok = true;
    let mut counts = Vec::new();
    let mut epoch = 0;
    let log = trainer::train_with(&mut model, train, valid, &cfg, &schedule, |m, e| {
        let active = active_layers(epoch, &schedule, n_layers);
        let trainable = backbone_trainable(&m.backbone.params, &active);
        monotone &= prev_trainable
            .iter()
            .zip(&trainable)
            .all(|(&before, &now)| !before || now);
        monotone &= e.n_active_layers == active.len();
        let current = &m.backbone.params.data;
        frozen_ok &= trainable
            .iter()
            .zip(previous.iter().zip(current))
            .all(|(&t, (a, b))| t || a == b);
        counts.push(active.len());
        previous = current.clone();
        prev_trainable = trainable;
        epoch += 1;
        Ok(())
    })?;
    monotone &= counts.windows(2).all(|w| w[0] <= w[1]) && counts.last() == Some(&n_layers);
    let max_clip = log.steps.iter().map(|s| s.clipped_norm).fold(0.0, f64::max);
    Ok((monotone, frozen_ok, max_clip, log.steps.len(), counts))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(full_root: &Path, sft_root: &Path) -> Outcome {
    let run = || -> anyhow::Result<Outcome> {
        let cfg = learnability_config(sft_root, true)?;
        commands::prepare(&cfg)?;
        let sft = commands::train(&cfg)?;
        let full_log = Layout::new(full_root.join("run")).train_log();
        let full = qosnet_core::TrainLog::read_csv(&full_log)?;
        let (f, s) = (
            full.last().expect("full run log"),
            sft.epochs.last().expect("sft run log"),
        );
        let sft_log = Layout::new(&cfg.paths.workdir).train_log();
        Ok(Outcome::new(
            f.train_total < s.train_total && full.len() == sft.epochs.len(),
            format!(
                "final training loss: full head {:.4} vs first-position head {:.4} after {} epochs each; \
                 logs: {} and {}",
                f.train_total,
                s.train_total,
                full.len(),
                full_log.display(),
                sft_log.display()
            ),
        ))
    };
    run().unwrap_or_else(Outcome::failed)
}

// ---------------------------------------------------------------- criterion 9

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if let Ok(entries) = fs::read_dir(&dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(a: &Path, b: &Path) -> Outcome {
    let files = files_under(a);
    let other = files_under(b);
    let mut differing = Vec::new();
    for f in &files {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let required = [
        "run/train_log.csv",
        "run/train_steps.csv",
        "run/calibration.json",
        "run/eval/metrics.json",
    ];
    let missing: Vec<_> = required.iter().filter(|r| !files.contains(&PathBuf::from(r))).collect();
    Outcome::new(
        files == other && differing.is_empty() && missing.is_empty(),
        format!(
            "{} files compared across two seed-42 runs of criteria 2-4; differing: {:?}; missing: {missing:?}",
            files.len(),
            differing
        ),
    )
}

/// Runs criteria 2-4 in `work`, then moves the artifacts to `dest`. Both
/// repetitions run at the same path so recorded paths match too.
fn phase_at(work: &Path, dest: &Path) -> Phase {
    let p = phase(work);
    if let Err(e) = fs::rename(work, dest) {
        println!("  could not move {} to {}: {e}", work.display(), dest.display());
    }
    p
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let work = root.join("work");
    let (first, second, sft) = (root.join("first"), root.join("second"), root.join("sft"));

    let mut results = Vec::new();
    let mut record = |n: usize, (o, s): (Outcome, f64)| {
        report(n, &o, s);
        results.push(o.pass);
    };

    record(1, timed(criterion_1));
    let p = phase_at(&work, &first);
    record(2, p.c2);
    record(3, p.c3);
    record(4, p.c4);
    record(5, timed(criterion_5));
    record(6, timed(criterion_6));
    record(7, timed(criterion_7));
    record(8, timed(|| criterion_8(&first, &sft)));
    record(
        9,
        timed(|| {
            let again = phase_at(&work, &second);
            for (o, _) in [&again.c2, &again.c3, &again.c4] {
                if !o.pass {
                    println!("  rerun: {}", o.detail);
                }
            }
            criterion_9(&first, &second)
        }),
    );

    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria pass; artifacts in {}",
        results.len(),
        root.display()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
