//! Training protocol: Adam (lr 0.01, β₁ 0.9, β₂ 0.999) with
//! reduce-on-plateau annealing, MSE loss over mini-batches, early stopping
//! with patience 20 on the dev loss, restore-best weights, and the
//! evaluation metrics (test MSE, rounded-control accuracy, wall times,
//! repeat-and-average protocol).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{backward, Tensor};
use crate::dataset::Dataset;
use crate::feeder::{tap_position, TAP_MAX, TAP_MIN};
use crate::model::{build_model, Model, ModelError, ModelSpec};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {index} at optimizer step {step}")]
    NonFiniteGradient { index: usize, step: usize },
    #[error("training diverged: dev loss non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("dataset has an empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 5,
            lr_floor: 1e-5,
            early_stop_patience: 20,
            max_epochs: 500,
            batch_size: 64,
            seed: 42,
            repeats: 2,
        }
    }
}

/// Per-tensor Adam moment buffers.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients currently stored on
/// the parameters. Rejects non-finite gradients.
pub fn adam_step(
    params: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter().enumerate() {
        let grad = p.grad_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                index: i,
                step: state.step,
            });
        }
        let mut vals = p.to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..grad.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            vals[j] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.set_values(&vals);
    }
    Ok(())
}

/// Reduce-on-plateau annealing as a pure function of the dev-loss trace:
/// when the epochs elapsed since the last improvement reach a whole
/// multiple of the plateau patience, the rate halves (down to the floor).
pub fn anneal_lr(trace: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    if trace.is_empty() {
        return lr;
    }
    let mut best = f64::INFINITY;
    let mut best_at = 0usize;
    for (i, v) in trace.iter().enumerate() {
        if *v < best {
            best = *v;
            best_at = i;
        }
    }
    let since = trace.len() - 1 - best_at;
    if since > 0 && since.is_multiple_of(cfg.plateau_patience) {
        (lr * cfg.plateau_factor).max(cfg.lr_floor)
    } else {
        lr
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_dev_loss: f64,
    pub dev_trace: Vec<f64>,
    pub train_seconds: f64,
    pub final_lr: f64,
}

/// Full metric set for one trained model, including the evaluation side.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub test_mse: f64,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub epochs: usize,
    pub best_dev_loss: f64,
    pub dev_trace: Vec<f64>,
}

fn example_loss(model: &Model, data: &Dataset, idx: usize) -> Result<Tensor> {
    let ex = &data.examples[idx];
    let out = model.forward_encoded(&ex.u_prev, &ex.states)?;
    let target = Tensor::leaf(&[1, 3], ex.u_target.to_vec()).map_err(ModelError::from)?;
    Ok(out.mse_loss(&target).map_err(ModelError::from)?)
}

/// Mean per-example MSE over a split, forward only.
pub fn mean_loss(model: &Model, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        total += example_loss(model, data, i)?.item();
    }
    Ok(total / indices.len() as f64)
}

/// Mini-batch training with seeded shuffling, dev-loss early stopping and
/// restore-best. The model's feature statistics are taken from the
/// dataset so later raw-state predictions normalize identically.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.split.dev.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    model.norm = data.norm.clone();

    let started = Instant::now();
    let params = model.parameters();
    let mut adam = AdamState::new(&params);
    let mut lr = cfg.learning_rate;
    let mut dev_trace: Vec<f64> = Vec::new();
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_values: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let mut epochs = 0usize;

    let mut order: Vec<usize> = data.split.train.clone();
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            for p in &params {
                p.zero_grad();
            }
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(example_loss(model, data, i)?);
            }
            let mut total = losses[0].clone();
            for l in &losses[1..] {
                total = total.add(l).map_err(ModelError::from)?;
            }
            let batch_loss = total.scale(1.0 / batch.len() as f64);
            backward(&batch_loss).map_err(ModelError::from)?;
            adam_step(&params, &mut adam, lr, cfg)?;
        }

        let dev_loss = mean_loss(model, data, &data.split.dev)?;
        if !dev_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        dev_trace.push(dev_loss);
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best_epoch = epoch;
            for (snap, p) in best_values.iter_mut().zip(params.iter()) {
                snap.copy_from_slice(&p.to_vec());
            }
        }
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
        lr = anneal_lr(&dev_trace, lr, cfg);
    }

    for (snap, p) in best_values.iter().zip(params.iter()) {
        p.set_values(snap);
    }

    Ok(TrainReport {
        epochs,
        best_dev_loss: best_dev,
        dev_trace,
        train_seconds: started.elapsed().as_secs_f64(),
        final_lr: lr,
    })
}

/// Decoded-and-rounded control match: same discrete tap position, same
/// capacitor state after nearest rounding, phase angle within 2% of its
/// range. All three must match.
pub fn prediction_matches(pred_enc: &[f64], target_enc: &[f64]) -> bool {
    let decode_tap = |enc: f64| tap_position((TAP_MIN + enc * (TAP_MAX - TAP_MIN)).clamp(TAP_MIN, TAP_MAX));
    let tap_ok = decode_tap(pred_enc[0]) == decode_tap(target_enc[0]);
    let cap_ok = (pred_enc[1] >= 0.5) == (target_enc[1] >= 0.5);
    let delta_ok = (pred_enc[2].clamp(0.0, 1.0) - target_enc[2]).abs() <= 0.02;
    tap_ok && cap_ok && delta_ok
}

/// Test-split metrics: MSE over all outputs, the rounded-control accuracy
/// fraction, and the inference wall time; merged with a training report.
pub fn evaluate_metrics(model: &Model, data: &Dataset, report: &TrainReport) -> Result<Metrics> {
    if data.split.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let started = Instant::now();
    let mut total_mse = 0.0;
    let mut hits = 0usize;
    for &i in &data.split.test {
        let ex = &data.examples[i];
        let out = model.forward_encoded(&ex.u_prev, &ex.states)?;
        let pred = out.to_vec();
        let mut se = 0.0;
        for (p, t) in pred.iter().zip(ex.u_target.iter()) {
            se += (p - t) * (p - t);
        }
        total_mse += se / 3.0;
        if prediction_matches(&pred, &ex.u_target) {
            hits += 1;
        }
    }
    let n = data.split.test.len() as f64;
    Ok(Metrics {
        test_mse: total_mse / n,
        accuracy: hits as f64 / n,
        train_seconds: report.train_seconds,
        eval_seconds: started.elapsed().as_secs_f64(),
        epochs: report.epochs,
        best_dev_loss: report.best_dev_loss,
        dev_trace: report.dev_trace.clone(),
    })
}

/// Train `repeats` runs with derived seeds, average the reported metrics,
/// and keep the model from the best (lowest test MSE) run.
pub fn train_repeated(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, Metrics, Vec<Metrics>)> {
    assert!(cfg.repeats >= 1);
    let mut runs: Vec<(Model, Metrics)> = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let mut run_spec = *spec;
        run_spec.seed = derive_seed(spec.seed, 0x1000 + r as u64);
        let mut run_cfg = *cfg;
        run_cfg.seed = derive_seed(cfg.seed, 0x2000 + r as u64);
        let mut model = build_model(&run_spec)?;
        let report = train(&mut model, data, &run_cfg)?;
        let metrics = evaluate_metrics(&model, data, &report)?;
        runs.push((model, metrics));
    }
    let all: Vec<Metrics> = runs.iter().map(|(_, m)| m.clone()).collect();
    let k = runs.len() as f64;
    let avg = Metrics {
        test_mse: all.iter().map(|m| m.test_mse).sum::<f64>() / k,
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / k,
        train_seconds: all.iter().map(|m| m.train_seconds).sum::<f64>() / k,
        eval_seconds: all.iter().map(|m| m.eval_seconds).sum::<f64>() / k,
        epochs: (all.iter().map(|m| m.epochs).sum::<usize>() as f64 / k).round() as usize,
        best_dev_loss: all.iter().map(|m| m.best_dev_loss).sum::<f64>() / k,
        dev_trace: Vec::new(),
    };
    let best_idx = (0..runs.len())
        .min_by(|a, b| {
            runs[*a]
                .1
                .test_mse
                .partial_cmp(&runs[*b].1.test_mse)
                .expect("finite test mse")
        })
        .expect("at least one run");
    let best_model = runs.swap_remove(best_idx).0;
    Ok((best_model, avg, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_dataset, ExampleCase, SplitMode};
    use crate::model::{Category, CellKind};

    /// Synthetic dataset with states drawn from a seeded walk and targets
    /// produced by `f`.
    fn synthetic_dataset(
        n: usize,
        d_x: usize,
        seed: u64,
        f: impl Fn(&[f64], &[f64], &[f64]) -> [f64; 3],
    ) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let u_prev = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let s0: Vec<f64> = (0..d_x).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s1: Vec<f64> = (0..d_x).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u_target = f(&u_prev, &s0, &s1);
            examples.push(ExampleCase {
                u_prev,
                states: vec![s0, s1],
                u_target,
                source: 0,
            });
        }
        let mut ds = split_dataset(examples, seed, 30f64.to_radians(), SplitMode::Example).unwrap();
        ds.normalize_features();
        ds
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 60,
            batch_size: 16,
            seed,
            repeats: 1,
            ..TrainConfig::default()
        }
    }

    fn small_spec(category: Category, cell: CellKind, d_x: usize) -> ModelSpec {
        let mut sp = ModelSpec::new(category, cell, d_x);
        sp.hidden = 12;
        sp.d_k = 6;
        sp.heads = if category == Category::A { 1 } else { 2 };
        sp
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let p = Tensor::param(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        p.zero_grad();
        adam_step(std::slice::from_ref(&p), &mut state, 0.01, &cfg).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5, 3.0]);
        assert!(state.m[0].iter().all(|v| *v == 0.0));
        assert!(state.v[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // θ=0, g=2: m̂ = 2, v̂ = 4, update = lr·2/(2+ε) ≈ lr.
        let p = Tensor::param(&[1, 1], vec![0.0]).unwrap();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let loss = p.scale(2.0).sum();
        backward(&loss).unwrap();
        adam_step(std::slice::from_ref(&p), &mut state, 0.01, &cfg).unwrap();
        let got = p.to_vec()[0];
        assert!((got + 0.01).abs() < 1e-6, "{got}");
    }

    #[test]
    fn adam_equal_gradients_update_identically() {
        let p = Tensor::param(&[1, 2], vec![0.3, 0.3]).unwrap();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let loss = p.sum();
        backward(&loss).unwrap();
        adam_step(std::slice::from_ref(&p), &mut state, 0.01, &cfg).unwrap();
        let v = p.to_vec();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let p = Tensor::param(&[1, 1], vec![0.0]).unwrap();
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        p.set_grad(&[f64::NAN]);
        let res = adam_step(std::slice::from_ref(&p), &mut state, 0.01, &cfg);
        assert!(matches!(res, Err(TrainError::NonFiniteGradient { .. })));
    }

    #[test]
    fn anneal_follows_the_plateau_rule() {
        let cfg = TrainConfig::default();
        // improving trace: unchanged
        assert_eq!(anneal_lr(&[1.0, 0.9, 0.8], 0.01, &cfg), 0.01);
        // 5 epochs without improvement: halved
        let plateau = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6];
        assert_eq!(anneal_lr(&plateau, 0.01, &cfg), 0.005);
        // 6 epochs since improvement: no further cut until the 10th
        let plateau6 = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
        assert_eq!(anneal_lr(&plateau6, 0.005, &cfg), 0.005);
        // floor is sticky
        let long = vec![0.5; 11];
        assert_eq!(anneal_lr(&long, 1e-5, &cfg), 1e-5);
    }

    #[test]
    fn constant_targets_are_learned_quickly() {
        let ds = synthetic_dataset(300, 4, 5, |_, _, _| [0.4, 0.7, 0.2]);
        let sp = small_spec(Category::B, CellKind::Dense, 4);
        let mut model = build_model(&sp).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 32,
            seed: 9,
            repeats: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &cfg).unwrap();
        assert!(
            report.best_dev_loss <= 1e-4,
            "dev loss {} after {} epochs",
            report.best_dev_loss,
            report.epochs
        );
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let ds = synthetic_dataset(80, 3, 6, |u, s0, _| {
            [0.5 * u[0] + 0.1, 0.3 * (s0[0] + 1.0), 0.2]
        });
        let sp = small_spec(Category::B, CellKind::Lstm, 3);
        let run = || {
            let mut model = build_model(&sp).unwrap();
            let report = train(&mut model, &ds, &quick_cfg(11)).unwrap();
            let metrics = evaluate_metrics(&model, &ds, &report).unwrap();
            (report.dev_trace, metrics.test_mse, metrics.accuracy)
        };
        let (ta, ma, aa) = run();
        let (tb, mb, ab) = run();
        assert_eq!(ta, tb);
        assert_eq!(ma.to_bits(), mb.to_bits());
        assert_eq!(aa, ab);
    }

    #[test]
    fn monotone_worsening_dev_loss_stops_at_patience_plus_one() {
        // Train targets pull outputs toward 1; the dev split targets 0 on
        // the same inputs, so every training epoch strictly worsens dev
        // loss and the best epoch stays the first.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d_x = 3;
        let mut examples = Vec::new();
        for _ in 0..60 {
            let s0: Vec<f64> = (0..d_x).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s1: Vec<f64> = (0..d_x).map(|_| rng.random_range(-1.0..1.0)).collect();
            examples.push(ExampleCase {
                u_prev: [0.5, 0.5, 0.5],
                states: vec![s0, s1],
                u_target: [1.0, 1.0, 1.0],
                source: 0,
            });
        }
        let mut ds = split_dataset(examples, 3, 0.5, SplitMode::Example).unwrap();
        ds.normalize_features();
        for &i in &ds.split.dev {
            ds.examples[i].u_target = [0.0, 0.0, 0.0];
        }
        let sp = small_spec(Category::B, CellKind::Dense, d_x);
        let mut model = build_model(&sp).unwrap();
        let cfg = TrainConfig {
            learning_rate: 2e-4,
            max_epochs: 200,
            batch_size: 8,
            seed: 21,
            repeats: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &cfg).unwrap();
        for w in report.dev_trace.windows(2) {
            assert!(w[1] > w[0], "constructed run was not monotone: {:?}", report.dev_trace);
        }
        assert_eq!(report.epochs, cfg.early_stop_patience + 1);
        // restore-best: re-evaluated dev loss equals the trace minimum
        let dev_now = mean_loss(&model, &ds, &ds.split.dev).unwrap();
        let trace_min = report
            .dev_trace
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!((dev_now - trace_min).abs() <= 1e-12);
        assert_eq!(trace_min, report.dev_trace[0]);
    }

    #[test]
    fn early_stopping_never_overruns_best_epoch_plus_patience() {
        let ds = synthetic_dataset(100, 4, 8, |u, s0, s1| {
            [
                (0.6 * u[0] + 0.2 * (s1[0] - s0[0])).clamp(0.0, 1.0),
                if s0[1] > 0.0 { 1.0 } else { 0.0 },
                (0.5 + 0.3 * s1[2]).clamp(0.0, 1.0),
            ]
        });
        let sp = small_spec(Category::B, CellKind::Dense, 4);
        let mut model = build_model(&sp).unwrap();
        let cfg = quick_cfg(13);
        let report = train(&mut model, &ds, &cfg).unwrap();
        let best_epoch = report
            .dev_trace
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            + 1;
        assert!(report.epochs <= best_epoch + cfg.early_stop_patience);
    }

    #[test]
    fn perfect_predictor_scores_zero_mse_and_full_accuracy() {
        // Targets are taken from the model's own outputs, so evaluation
        // sees an exact predictor.
        let sp = small_spec(Category::B, CellKind::Dense, 3);
        let model = build_model(&sp).unwrap();
        let mut ds = synthetic_dataset(60, 3, 10, |_, _, _| [0.0, 0.0, 0.0]);
        for ex in ds.examples.iter_mut() {
            let out = model.forward_encoded(&ex.u_prev, &ex.states).unwrap().to_vec();
            ex.u_target = [out[0], out[1], out[2]];
        }
        let report = TrainReport {
            epochs: 1,
            best_dev_loss: 0.0,
            dev_trace: vec![0.0],
            train_seconds: 1.0,
            final_lr: 0.01,
        };
        let metrics = evaluate_metrics(&model, &ds, &report).unwrap();
        assert_eq!(metrics.test_mse, 0.0);
        assert_eq!(metrics.accuracy, 1.0);
        assert!(metrics.eval_seconds > 0.0);
    }

    #[test]
    fn identity_task_is_learned_to_small_error() {
        let ds = synthetic_dataset(300, 3, 10, |u, _, _| [u[0], u[1], u[2]]);
        let sp = small_spec(Category::B, CellKind::Dense, 3);
        let mut model = build_model(&sp).unwrap();
        let cfg = TrainConfig {
            max_epochs: 120,
            batch_size: 32,
            seed: 17,
            repeats: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &cfg).unwrap();
        let metrics = evaluate_metrics(&model, &ds, &report).unwrap();
        assert!(metrics.test_mse < 1e-3, "mse {}", metrics.test_mse);
        assert!(metrics.train_seconds > 0.0 && metrics.eval_seconds > 0.0);
    }

    #[test]
    fn accuracy_rule_discriminates_tap_positions() {
        // One full tap step off (1/32 in encoded space) must not match.
        let step = 1.0 / 32.0;
        let target = [16.0 * step, 1.0, 0.5];
        let off_by_one = [17.0 * step, 1.0, 0.5];
        assert!(!prediction_matches(&off_by_one, &target));
        let near = [16.0 * step + 0.01 * step, 1.0, 0.5];
        assert!(prediction_matches(&near, &target));
        // capacitor nearest rounding
        assert!(prediction_matches(&[target[0], 0.7, 0.5], &target));
        assert!(!prediction_matches(&[target[0], 0.4, 0.5], &target));
        // delta within 2% of range
        assert!(prediction_matches(&[target[0], 1.0, 0.515], &target));
        assert!(!prediction_matches(&[target[0], 1.0, 0.53], &target));
    }

    #[test]
    fn repeats_average_and_return_the_best_model() {
        let ds = synthetic_dataset(100, 3, 19, |u, _, s1| {
            [u[0], if s1[0] > 0.0 { 1.0 } else { 0.0 }, 0.3]
        });
        let sp = small_spec(Category::B, CellKind::Dense, 3);
        let cfg = TrainConfig {
            max_epochs: 30,
            batch_size: 16,
            seed: 23,
            repeats: 2,
            ..TrainConfig::default()
        };
        let (best, avg, all) = train_repeated(&sp, &ds, &cfg).unwrap();
        assert_eq!(all.len(), 2);
        let expect = (all[0].test_mse + all[1].test_mse) / 2.0;
        assert!((avg.test_mse - expect).abs() < 1e-15);
        let report = TrainReport {
            epochs: avg.epochs,
            best_dev_loss: avg.best_dev_loss,
            dev_trace: Vec::new(),
            train_seconds: 1.0,
            final_lr: 0.01,
        };
        let best_metrics = evaluate_metrics(&best, &ds, &report).unwrap();
        let min_mse = all.iter().map(|m| m.test_mse).fold(f64::INFINITY, f64::min);
        assert!((best_metrics.test_mse - min_mse).abs() < 1e-12);
    }
}
