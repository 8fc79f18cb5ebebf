//! Mini-batch Adam training on mean squared error.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::nn::{backward, forward, mse_loss, Gradients, LayerGrad, NetworkSpec, NnError, ParameterSet, Real, Tensor};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in layer {layer} at step {step}")]
    NonFiniteGradient { layer: usize, step: u64 },
    #[error("non-finite loss in epoch {epoch}; last good epoch was {last_good_epoch}")]
    NonFiniteLoss {
        epoch: usize,
        /// Number of completed epochs whose parameters are in `last_good`.
        last_good_epoch: usize,
        last_good: Box<ParameterSet<f32>>,
    },
    #[error("training sample {index}: {message}")]
    Sample { index: usize, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: the optimizer settings of the original setup with
    /// a learning rate suited to training from random initialisation.
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used with a pre-trained backbone.
    pub const PRETRAINED_LEARNING_RATE: f64 = 1e-5;

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(TrainError::Config("learning_rate and epsilon must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(TrainError::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Option<LayerGrad>>,
    pub v: Vec<Option<LayerGrad>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Real>(spec: &NetworkSpec, params: &ParameterSet<T>) -> Self {
        let zeros = Gradients::zeros_like(spec, params).layers;
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adam_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if let Some(layer) = grads.layers.iter().position(|g| {
        g.as_ref()
            .is_some_and(|g| g.weight.iter().chain(&g.bias).any(|v| !v.is_finite()))
    }) {
        return Err(TrainError::NonFiniteGradient {
            layer,
            step: state.t + 1,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.layers.iter().enumerate() {
        let (Some(g), Some(p)) = (g, params.layers[i].as_mut()) else {
            continue;
        };
        let m = state.m[i].as_mut().expect("adam state mirrors gradients");
        let v = state.v[i].as_mut().expect("adam state mirrors gradients");
        for (theta, (g, (m, v))) in [
            (&mut p.weight, (&g.weight, (&mut m.weight, &mut v.weight))),
            (&mut p.bias, (&g.bias, (&mut m.bias, &mut v.bias))),
        ] {
            for j in 0..theta.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let updated = theta[j].to_f64() - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                theta[j] = T::from_f64(updated);
            }
        }
    }
    Ok(())
}

/// Inputs and targets flattened for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<[f64; 2]>,
}

impl TrainingSet {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            inputs: dataset.samples.iter().map(|s| s.image.data().to_vec()).collect(),
            targets: dataset.samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error over all samples seen during the epoch.
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// `training_log.csv`: `epoch,mean_loss`. Timings are left out so that
    /// reruns produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{}", e.epoch, e.mean_loss);
        }
        out
    }
}

fn sample_tensor(spec: &NetworkSpec, input: &[f32]) -> Result<Tensor<f32>, NnError> {
    Tensor::new(1, spec.input_shape(), input.to_vec())
}

/// Loss and gradients of one mini-batch. Per-sample work runs in parallel;
/// the reduction runs in sample order.
fn batch_gradients(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    set: &TrainingSet,
    batch: &[usize],
) -> Result<(f64, Gradients), TrainError> {
    let entries = (2 * batch.len()) as f64;
    let per_sample = batch
        .par_iter()
        .map(|&i| {
            let x = sample_tensor(spec, &set.inputs[i]).map_err(|e| TrainError::Sample {
                index: i,
                message: e.to_string(),
            })?;
            let (pred, cache) = forward(spec, params, &x)?;
            let residual: Vec<f64> = pred
                .data
                .iter()
                .zip(&set.targets[i])
                .map(|(p, t)| f64::from(*p) - t)
                .collect();
            let grad: Vec<f64> = residual.iter().map(|r| 2.0 * r / entries).collect();
            let sq: f64 = residual.iter().map(|r| r * r).sum();
            Ok((sq, backward(spec, params, &cache, &grad)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut total = Gradients::zeros_like(spec, params);
    let mut sq = 0.0;
    for (s, g) in &per_sample {
        sq += s;
        total.accumulate(g);
    }
    Ok((sq, total))
}

/// Trains `params` for `cfg.epochs` epochs of shuffled mini-batches. The
/// last partial batch of an epoch is kept. `on_epoch` sees each finished
/// epoch and may end training early by returning `ControlFlow::Break`.
pub fn train(
    spec: &NetworkSpec,
    init: ParameterSet<f32>,
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<(ParameterSet<f32>, TrainingLog), TrainError> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    spec.validate()?;
    init.check_against(spec)?;
    let expected = spec.input_shape().len();
    if let Some(index) = set.inputs.iter().position(|x| x.len() != expected) {
        return Err(TrainError::Sample {
            index,
            message: format!("{} values, network expects {expected}", set.inputs[index].len()),
        });
    }

    let mut params = init;
    let mut state = AdamState::new(spec, &params);
    let mut log = TrainingLog {
        config: *cfg,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let last_good = params.clone();
        order.sort_unstable();
        order.shuffle(&mut seed::stream(cfg.seed, seed::TAG_SHUFFLE, epoch as u64));
        let mut sq_total = 0.0;
        let mut failure = None;
        for batch in order.chunks(cfg.batch_size) {
            let (sq, grads) = batch_gradients(spec, &params, set, batch)?;
            if !sq.is_finite() || !grads.is_finite() {
                failure = Some(());
                break;
            }
            sq_total += sq;
            adam_step(&mut params, &grads, &mut state, cfg)?;
        }
        let mean_loss = sq_total / (2 * set.len()) as f64;
        if failure.is_some() || !mean_loss.is_finite() || !params.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch + 1,
                last_good_epoch: epoch,
                last_good: Box::new(last_good),
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.epochs.push(record);
        if on_epoch(&record).is_break() {
            break;
        }
    }
    Ok((params, log))
}

/// Mean squared error of `params` over the whole set.
pub fn evaluate_mse(spec: &NetworkSpec, params: &ParameterSet<f32>, set: &TrainingSet) -> Result<f64, TrainError> {
    let sq = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let x = sample_tensor(spec, &set.inputs[i])?;
            let (pred, _) = forward(spec, params, &x)?;
            Ok(mse_loss(&pred, &set.targets[i]).0 * 2.0)
        })
        .collect::<Result<Vec<f64>, NnError>>()?;
    Ok(sq.iter().sum::<f64>() / (2 * set.len().max(1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_parameters, LayerParams};

    fn scalar_net() -> (NetworkSpec, ParameterSet<f64>) {
        let spec = NetworkSpec::parse(1, 1, "out2").unwrap();
        let params = ParameterSet {
            layers: vec![Some(LayerParams {
                weight_dims: vec![2, 3],
                weight: vec![0.5; 6],
                bias: vec![0.0; 2],
            })],
        };
        (spec, params)
    }

    fn constant_grads(value: f64) -> Gradients {
        Gradients {
            layers: vec![Some(LayerGrad {
                weight: vec![value; 6],
                bias: vec![value; 2],
            })],
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (spec, mut params) = scalar_net();
        let mut state = AdamState::new(&spec, &params);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        for g in [3.0, -0.2] {
            let before = params.clone();
            let mut s = state.clone();
            adam_step(&mut params, &constant_grads(g), &mut s, &cfg).unwrap();
            let p = params.layers[0].as_ref().unwrap();
            let b = before.layers[0].as_ref().unwrap();
            let step = b.weight[0] - p.weight[0];
            // bias-corrected first step: lr * g / (|g| + eps)
            assert!((step - 0.01 * g / (g.abs() + 1e-8)).abs() < 1e-15);
            state = AdamState::new(&spec, &params);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (spec, mut params) = scalar_net();
        let before = params.clone();
        let mut state = AdamState::new(&spec, &params);
        for _ in 0..100 {
            adam_step(&mut params, &constant_grads(0.0), &mut state, &TrainConfig::default()).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.t, 100);
    }

    #[test]
    fn two_unit_steps_match_hand_computation() {
        // g = 1 twice, lr = 0.1:
        // t=1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> theta -= 0.1 / (1 + 1e-8)
        // t=2: m = 0.19, v = 0.001999, m_hat = 0.19/0.19 = 1, v_hat = 1 -> same step
        let (spec, mut params) = scalar_net();
        let mut state = AdamState::new(&spec, &params);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut params, &constant_grads(1.0), &mut state, &cfg).unwrap();
        let m = &state.m[0].as_ref().unwrap().weight[0];
        let v = &state.v[0].as_ref().unwrap().weight[0];
        assert!((m - 0.1).abs() < 1e-15 && (v - 0.001).abs() < 1e-15);
        adam_step(&mut params, &constant_grads(1.0), &mut state, &cfg).unwrap();
        let m = state.m[0].as_ref().unwrap().weight[0];
        let v = state.v[0].as_ref().unwrap().weight[0];
        assert!((m - 0.19).abs() < 1e-15 && (v - 0.001999).abs() < 1e-15);
        let theta = params.layers[0].as_ref().unwrap().weight[0];
        assert!((theta - (0.5 - 2.0 * 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (spec, mut params) = scalar_net();
        let mut state = AdamState::new(&spec, &params);
        let err = adam_step(
            &mut params,
            &constant_grads(f64::NAN),
            &mut state,
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { layer: 0, step: 1 })));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = NetworkSpec::parse(4, 4, "conv2 relu pool flatten out2").unwrap();
        let init: ParameterSet<f32> = init_parameters(&spec, 3).unwrap();
        let set = TrainingSet {
            inputs: vec![vec![0.5; 48]; 3],
            targets: vec![[0.1, -0.1]; 3],
        };
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, log) = train(&spec, init.clone(), &set, &cfg, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(out, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn rejects_empty_set_and_bad_config() {
        let spec = NetworkSpec::parse(4, 4, "flatten out2").unwrap();
        let init: ParameterSet<f32> = init_parameters(&spec, 3).unwrap();
        let empty = TrainingSet {
            inputs: vec![],
            targets: vec![],
        };
        assert!(matches!(
            train(&spec, init.clone(), &empty, &TrainConfig::default(), |_| {
                ControlFlow::Continue(())
            }),
            Err(TrainError::EmptyDataset)
        ));
        let set = TrainingSet {
            inputs: vec![vec![0.0; 48]],
            targets: vec![[0.0; 2]],
        };
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&spec, init, &set, &bad, |_| ControlFlow::Continue(())),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn diverging_run_reports_last_good_epoch() {
        let spec = NetworkSpec::parse(1, 1, "out2").unwrap();
        let init: ParameterSet<f32> = init_parameters(&spec, 3).unwrap();
        let set = TrainingSet {
            inputs: vec![vec![f32::INFINITY, 1.0, 1.0]],
            targets: vec![[0.0, 0.0]],
        };
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        match train(&spec, init.clone(), &set, &cfg, |_| ControlFlow::Continue(())) {
            Err(TrainError::NonFiniteLoss {
                epoch,
                last_good_epoch,
                last_good,
            }) => {
                assert_eq!((epoch, last_good_epoch), (1, 0));
                assert_eq!(*last_good, init);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn random_inputs(count: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
        use rand::Rng;
        let mut rng = seed::stream(seed, "test", 0);
        (0..count)
            .map(|_| (0..len).map(|_| rng.random::<f32>()).collect())
            .collect()
    }

    #[test]
    fn linear_model_reaches_least_squares_solution() {
        // Noise-free targets, so least squares recovers the generating map.
        let spec = NetworkSpec::parse(1, 1, "out2").unwrap();
        let w = [[0.3, -0.7, 0.2], [0.9, 0.1, -0.4]];
        let b = [0.05, -0.1];
        let inputs = random_inputs(24, 3, 11);
        let targets = inputs
            .iter()
            .map(|x| {
                let f = |r: usize| b[r] + (0..3).map(|c| w[r][c] * f64::from(x[c])).sum::<f64>();
                [f(0), f(1)]
            })
            .collect();
        let set = TrainingSet { inputs, targets };
        let cfg = TrainConfig {
            epochs: 1500,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 5,
            ..TrainConfig::default()
        };
        let init: ParameterSet<f32> = init_parameters(&spec, 1).unwrap();
        let (params, _) = train(&spec, init, &set, &cfg, |_| ControlFlow::Continue(())).unwrap();
        let p = params.layers[0].as_ref().unwrap();
        for (r, row) in w.iter().enumerate() {
            for (c, expected) in row.iter().enumerate() {
                assert!((f64::from(p.weight[r * 3 + c]) - expected).abs() < 1e-3, "w[{r}][{c}]");
            }
            assert!((f64::from(p.bias[r]) - b[r]).abs() < 1e-3, "b[{r}]");
        }
    }

    fn small_cnn_set() -> (NetworkSpec, TrainingSet) {
        let spec = NetworkSpec::parse(8, 8, "conv4 relu pool conv8 relu pool flatten dense16 relu out2").unwrap();
        let inputs = random_inputs(32, 192, 12);
        let targets = (0..32)
            .map(|i| [(i as f64 * 0.4).sin() * 0.8, (i as f64 * 0.9).cos() * 0.8])
            .collect();
        (spec, TrainingSet { inputs, targets })
    }

    #[test]
    fn small_cnn_overfits_32_samples() {
        let (spec, set) = small_cnn_set();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let init: ParameterSet<f32> = init_parameters(&spec, 4).unwrap();
        let (params, log) = train(&spec, init, &set, &cfg, |_| ControlFlow::Continue(())).unwrap();
        let mse = evaluate_mse(&spec, &params, &set).unwrap();
        assert!(mse < 1e-4, "mse {mse}, last epoch {:?}", log.epochs.last());
    }

    #[test]
    fn training_is_deterministic_and_respects_frozen_layers() {
        let (spec, set) = small_cnn_set();
        let spec = spec.freeze_first(2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let init: ParameterSet<f32> = init_parameters(&spec, 4).unwrap();
        let (a, log_a) = train(&spec, init.clone(), &set, &cfg, |_| ControlFlow::Continue(())).unwrap();
        let (b, log_b) = train(&spec, init.clone(), &set, &cfg, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            log_a.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
            log_b.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>()
        );
        assert_eq!(a.layers[0], init.layers[0]);
        assert_ne!(a.layers[3], init.layers[3]);
    }

    #[test]
    fn break_stops_after_the_current_epoch() {
        let (spec, set) = small_cnn_set();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let init: ParameterSet<f32> = init_parameters(&spec, 4).unwrap();
        let (_, log) = train(&spec, init, &set, &cfg, |e| {
            if e.epoch == 3 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(log.epochs.len(), 3);
    }
}
