//! Station-masked loss, optimizers, the training loop and windowed prediction.

use std::path::Path;
use std::time::Instant;

use chrono::{DateTime, Utc};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use windcast_tensor::{parallel, Graph, Scalar, Tensor, TensorError, Var};

use crate::abed::{AbedModel, Mode};
use crate::error::{Error, Result};
use crate::featurecube::{build_input, step, Batch, FeatureCube, SampleSet, WindowConfig};
use crate::fsutil::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; off when absent.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            max_epochs: 200,
            early_stop_patience: 5,
            validation_fraction: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.max_epochs > 0
            && self.early_stop_patience > 0
            && self.validation_fraction > 0.0
            && self.validation_fraction <= 0.5
            && self.max_grad_norm.is_none_or(|n| n > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// Per-point weights of the masked loss and the number of samples that
/// carry at least one valid label.
///
/// For sample `b`, station `i` and component `c` with `n` valid times, each
/// valid point weighs `1 / (2 * n * N_b * B)`, where `N_b` counts stations
/// with any valid label and `B` counts contributing samples.
pub fn loss_weights<T: Scalar>(mask: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
    let shape = mask.shape();
    if shape.len() != 5 || shape[1] != 2 {
        return Err(Error::Tensor(TensorError::Shape {
            op: "loss mask",
            lhs: shape.to_vec(),
            rhs: vec![0, 2, 0, 0, 0],
        }));
    }
    let (b, l, plane) = (shape[0], shape[2], shape[3] * shape[4]);
    let m = mask.data();
    let at = |s: usize, c: usize, j: usize, cell: usize| m[((s * 2 + c) * l + j) * plane + cell] != T::zero();
    let mut counts = vec![[0usize; 2]; b * plane];
    for s in 0..b {
        for c in 0..2 {
            for j in 0..l {
                for cell in 0..plane {
                    if at(s, c, j, cell) {
                        counts[s * plane + cell][c] += 1;
                    }
                }
            }
        }
    }
    let stations: Vec<usize> = (0..b)
        .map(|s| counts[s * plane..(s + 1) * plane].iter().filter(|n| n[0] + n[1] > 0).count())
        .collect();
    let used = stations.iter().filter(|&&n| n > 0).count();
    for (s, n) in stations.iter().enumerate() {
        if *n == 0 {
            warn!("sample {s} of the batch has no valid labels; excluded from the loss");
        }
    }
    if used == 0 {
        return Err(Error::Training("no sample in the batch has a valid label".into()));
    }
    let mut w = vec![T::zero(); mask.len()];
    for s in 0..b {
        for c in 0..2 {
            for j in 0..l {
                for cell in 0..plane {
                    if at(s, c, j, cell) {
                        let n = counts[s * plane + cell][c];
                        let denom = 2.0 * n as f64 * stations[s] as f64 * used as f64;
                        w[((s * 2 + c) * l + j) * plane + cell] = T::from_f64_lossy(1.0 / denom);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(shape.to_vec(), w)?, used))
}

/// Masked squared error of a prediction against labels.
pub fn masked_mse_loss<T: Scalar>(pred: &Tensor<T>, labels: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    if pred.shape() != labels.shape() || pred.shape() != mask.shape() {
        return Err(Error::Tensor(TensorError::Shape {
            op: "masked_mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        }));
    }
    let (w, _) = loss_weights(mask)?;
    Ok(pred
        .data()
        .iter()
        .zip(labels.data())
        .zip(w.data())
        .filter(|(_, w)| **w != T::zero())
        .map(|((p, y), w)| {
            let e = p.as_f64() - y.as_f64();
            w.as_f64() * e * e
        })
        .sum())
}

/// The same loss recorded on a graph.
pub fn masked_mse_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, labels: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
    let (w, _) = loss_weights(mask)?;
    let y = g.constant(labels.clone());
    let diff = g.sub(pred, y)?;
    let sq = g.square(diff)?;
    let weighted = g.mul_const(sq, w)?;
    Ok(g.sum(weighted)?)
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g) {
                        *x = T::from_f64_lossy(x.as_f64() - *lr * d.as_f64());
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                if m.is_empty() {
                    *m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    *v = m.clone();
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for (i, (x, d)) in p.data_mut().iter_mut().zip(g).enumerate() {
                        let d = d.as_f64();
                        m[k][i] = *beta1 * m[k][i] + (1.0 - *beta1) * d;
                        v[k][i] = *beta2 * v[k][i] + (1.0 - *beta2) * d * d;
                        let mhat = m[k][i] / c1;
                        let vhat = v[k][i] / c2;
                        *x = T::from_f64_lossy(x.as_f64() - *lr * mhat / (vhat.sqrt() + *eps));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["epoch", "train_loss", "val_loss", "seconds"],
            self.epochs.iter().map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:.9e}", e.train_loss),
                    format!("{:.9e}", e.val_loss),
                    format!("{:.3}", e.seconds),
                ]
            }),
        )
    }
}

/// Patience-based stopping on a monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

fn numeric_failure(model: &AbedModel<f32>, epoch: usize, batch: usize, what: &str) -> Error {
    let norms: Vec<String> = model
        .param_norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect();
    Error::Numeric(format!(
        "{what} at epoch {epoch}, batch {batch}; parameter norms: {}",
        norms.join(", ")
    ))
}

fn tag_numeric(model: &AbedModel<f32>, epoch: usize, batch: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => numeric_failure(model, epoch, batch, &format!("non-finite value in {op}")),
        other => other,
    }
}

/// One optimization step on a batch; returns the batch loss.
fn train_step(
    model: &mut AbedModel<f32>,
    opt: &mut Optimizer,
    batch: &Batch,
    max_grad_norm: Option<f64>,
    epoch: usize,
    batch_id: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(batch.x.clone());
    let (loss, stats) = {
        let tag = tag_numeric(model, epoch, batch_id);
        let out = model.forward_graph(&mut g, &vars, x, Mode::Train).map_err(&tag)?;
        let loss = masked_mse_graph(&mut g, out.output, &batch.y, &batch.mask).map_err(&tag)?;
        (loss, out.bn_stats)
    };
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(numeric_failure(model, epoch, batch_id, "non-finite loss"));
    }
    g.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(&model.params)
        .map(|(v, (_, p))| g.grad(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let norm = grads.iter().flatten().map(|d| (*d as f64).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(numeric_failure(model, epoch, batch_id, "non-finite gradient"));
    }
    if let Some(limit) = max_grad_norm {
        if norm > limit {
            let s = (limit / norm) as f32;
            grads.iter_mut().flatten().for_each(|d| *d *= s);
        }
    }
    let mut tensors: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    opt.step(&mut tensors, &grads);
    for ((_, p), t) in model.params.iter_mut().zip(tensors) {
        *p = t;
    }
    if let Some(s) = stats {
        model.update_running_stats(&s);
    }
    Ok(value)
}

/// Mean infer-mode loss over a sample set, batch by batch.
pub fn evaluate_loss(model: &AbedModel<f32>, samples: &SampleSet, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = samples.batch(chunk)?;
        let pred = model.forward(&batch.x, Mode::Infer)?;
        let (w, used) = loss_weights(&batch.mask)?;
        // Undo the per-batch averaging so batches combine into a per-sample mean.
        let sum: f64 = pred
            .data()
            .iter()
            .zip(batch.y.data())
            .zip(w.data())
            .map(|((p, y), w)| (*w as f64) * ((*p - *y) as f64).powi(2))
            .sum();
        total += sum * used as f64;
        n += used;
    }
    if n == 0 {
        return Err(Error::Training("validation set has no labelled samples".into()));
    }
    Ok(total / n as f64)
}

/// Trained parameters from the best validation epoch plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AbedModel<f32>,
    pub log: TrainLog,
}

/// Seeded split of sample positions into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Training(format!("need at least two training samples, got {n}")));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11));
    let val = idx.split_off(n - n_val);
    let (mut train, mut val) = (idx, val);
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn train(mut model: AbedModel<f32>, samples: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let (train_idx, val_idx) = validation_split(samples.len(), cfg.validation_fraction, cfg.seed)?;
    let train_set = samples.subset_of(&train_idx);
    let val_set = samples.subset_of(&val_idx);
    info!(
        "training on {} samples, validating on {}, batch {}",
        train_set.len(),
        val_set.len(),
        cfg.batch_size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut steps = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.batch(chunk)?;
            loss_sum += train_step(&mut model, &mut opt, &batch, cfg.max_grad_norm, epoch, batch_id)?;
            n_batches += 1;
            steps += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val_loss = evaluate_loss(&model, &val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(numeric_failure(&model, epoch, n_batches, "non-finite validation loss"));
        }
        let seconds = started.elapsed().as_secs_f64();
        info!("epoch {epoch}: train {train_loss:.6e}, validation {val_loss:.6e}, {seconds:.1}s");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds,
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log: TrainLog {
            epochs,
            stop_reason,
            best_epoch: stopper.best_epoch().unwrap_or(0),
            steps,
        },
    })
}

/// Forecast for one start time.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub t0: DateTime<Utc>,
    pub t0_index: usize,
    /// Last observed instant.
    pub issue_time: DateTime<Utc>,
    /// Valid time of each output step.
    pub times: Vec<DateTime<Utc>>,
    /// Horizon of each output step, in cube steps; positive values are forecasts.
    pub horizons: Vec<i64>,
    /// `(2, D+F, h, w)` for `(u10, v10)`.
    pub values: Tensor<f32>,
}

impl Prediction {
    pub fn uv(&self, j: usize, row: usize, col: usize) -> (f32, f32) {
        let s = self.values.shape();
        let (l, h, w) = (s[1], s[2], s[3]);
        let at = |c: usize| self.values.data()[((c * l + j) * h + row) * w + col];
        debug_assert!(row < h && col < w);
        (at(0), at(1))
    }
}

/// Infer-mode forecasts for each requested start time.
pub fn predict(
    model: &AbedModel<f32>,
    cube: &FeatureCube,
    cfg: &WindowConfig,
    t0s: &[DateTime<Utc>],
) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let idx = t0s
        .iter()
        .map(|t| {
            cube.time_index(*t).ok_or_else(|| {
                Error::OutOfRange(format!("start time {} is not a tick of the cube", crate::ingest::format_timestamp(*t)))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    predict_indices(model, cube, cfg, &idx)
}

pub fn predict_indices(model: &AbedModel<f32>, cube: &FeatureCube, cfg: &WindowConfig, idx: &[usize]) -> Result<Vec<Prediction>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(CHUNK) {
        let inputs = parallel::map_range(chunk.len(), |k| build_input(cube, cfg, chunk[k]));
        let inputs = inputs.into_iter().collect::<Result<Vec<_>>>()?;
        let per = inputs[0].len();
        let mut data = Vec::with_capacity(per * inputs.len());
        for x in &inputs {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(inputs[0].shape());
        let y = model.forward(&Tensor::new(shape, data)?, Mode::Infer)?;
        let per_out = y.len() / chunk.len();
        let out_shape = y.shape()[1..].to_vec();
        for (k, &t0) in chunk.iter().enumerate() {
            let t0_time = cube.times[0] + step() * t0 as i32;
            let horizons: Vec<i64> = (0..cfg.len()).map(|j| cfg.horizon(j)).collect();
            out.push(Prediction {
                t0: t0_time,
                t0_index: t0,
                issue_time: t0_time + step() * (cfg.d as i32 - 1),
                times: (0..cfg.len()).map(|j| t0_time + step() * (cfg.m + j) as i32).collect(),
                horizons,
                values: Tensor::new(out_shape.clone(), y.data()[k * per_out..(k + 1) * per_out].to_vec())?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t5(data: Vec<f64>, l: usize) -> Tensor<f64> {
        Tensor::new(vec![1, 2, l, 1, 1], data).unwrap()
    }

    #[test]
    fn hand_case_is_one_and_a_half() {
        // u errors (1, 1), v errors (0, 2) at one station over two steps.
        let pred = t5(vec![1.0, 1.0, 0.0, 2.0], 2);
        let y = t5(vec![0.0; 4], 2);
        let mask = t5(vec![1.0; 4], 2);
        let loss = masked_mse_loss(&pred, &y, &mask).unwrap();
        assert!((loss - 1.5).abs() <= 1e-12, "{loss}");
    }

    #[test]
    fn perfect_fit_and_quadratic_scaling() {
        let mask = Tensor::new(vec![2, 2, 3, 2, 2], (0..48).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
        let y = Tensor::from_fn(&[2, 2, 3, 2, 2], |i| (i as f64).sin());
        assert_eq!(masked_mse_loss(&y, &y, &mask).unwrap(), 0.0);
        let p1 = Tensor::from_fn(&[2, 2, 3, 2, 2], |i| (i as f64).sin() + 0.3 * (i as f64).cos());
        let p2 = Tensor::from_fn(&[2, 2, 3, 2, 2], |i| (i as f64).sin() + 0.6 * (i as f64).cos());
        let (a, b) = (masked_mse_loss(&p1, &y, &mask).unwrap(), masked_mse_loss(&p2, &y, &mask).unwrap());
        assert!((b - 4.0 * a).abs() <= 1e-12 * b.max(1.0));
    }

    #[test]
    fn empty_sample_excluded_and_all_empty_errors() {
        let mut mask = vec![0.0; 8];
        mask[..4].fill(1.0);
        let mask = Tensor::new(vec![2, 2, 2, 1, 1], mask).unwrap();
        let pred = Tensor::new(vec![2, 2, 2, 1, 1], vec![1.0, 1.0, 0.0, 2.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let y = Tensor::zeros(&[2, 2, 2, 1, 1]);
        assert!((masked_mse_loss(&pred, &y, &mask).unwrap() - 1.5).abs() < 1e-12);
        let none = Tensor::zeros(&[2, 2, 2, 1, 1]);
        assert!(matches!(masked_mse_loss(&pred, &y, &none), Err(Error::Training(_))));
    }

    #[test]
    fn stations_weighted_equally_despite_gaps() {
        // Station A valid at both steps, station B at one: each station
        // contributes its own per-time mean.
        let mut mask = vec![0.0; 2 * 2 * 2];
        let idx = |c: usize, j: usize, cell: usize| (c * 2 + j) * 2 + cell;
        for c in 0..2 {
            mask[idx(c, 0, 0)] = 1.0;
            mask[idx(c, 1, 0)] = 1.0;
            mask[idx(c, 1, 1)] = 1.0;
        }
        let mut pred = vec![0.0; 8];
        pred[idx(0, 1, 1)] = 2.0;
        let shape = vec![1, 2, 2, 1, 2];
        let loss = masked_mse_loss(
            &Tensor::new(shape.clone(), pred).unwrap(),
            &Tensor::zeros(&shape),
            &Tensor::new(shape, mask).unwrap(),
        )
        .unwrap();
        // Station B: 0.5 * 4 = 2, station A: 0, mean 1.
        assert!((loss - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_ignores_masked_out_labels(seed in 0u64..500, fuzz in -100.0f64..100.0) {
            let shape = [2usize, 2, 3, 2, 3];
            let n: usize = shape.iter().product();
            let m = Tensor::from_fn(&shape, |i| ((i as u64 * 2654435761 + seed) % 3 == 0) as u8 as f64);
            let mut m = m;
            m.data_mut()[0] = 1.0;
            m.data_mut()[n / 2] = 1.0;
            let y = Tensor::from_fn(&shape, |i| (i as f64 * 0.37 + seed as f64).sin());
            let p = Tensor::from_fn(&shape, |i| (i as f64 * 0.11).cos());
            let mut yf = y.clone();
            for (v, k) in yf.data_mut().iter_mut().zip(m.data()) {
                if *k == 0.0 {
                    *v = fuzz;
                }
            }
            let a = masked_mse_loss(&p, &y, &m).unwrap();
            let b = masked_mse_loss(&p, &yf, &m).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let shape = [2usize, 2, 3, 2, 2];
        let mask = Tensor::from_fn(&shape, |i| (i % 4 != 1) as u8 as f64);
        let y = Tensor::from_fn(&shape, |i| (i as f64).sin());
        let p = Tensor::from_fn(&shape, |i| (i as f64 * 0.5).cos());
        let mut g = Graph::new();
        let pv = g.param(p.clone());
        let l = masked_mse_graph(&mut g, pv, &y, &mask).unwrap();
        let direct = masked_mse_loss(&p, &y, &mask).unwrap();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn single_step_closed_forms() {
        // f(p) = (p - 3)^2 at p = 0 has gradient -6.
        let grad = vec![vec![-6.0f64]];
        let mut p = vec![Tensor::new(vec![1], vec![0.0f64]).unwrap()];
        Optimizer::new(OptimizerKind::Sgd, 0.01).step(&mut p, &grad);
        assert!((p[0].data()[0] - 0.06).abs() < 1e-15);

        let mut p = vec![Tensor::new(vec![1], vec![0.0f64]).unwrap()];
        let mut adam = Optimizer::new(OptimizerKind::Adam, 0.001);
        adam.step(&mut p, &grad);
        let expect = 0.001 * 6.0 / (6.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
        // Second step with the same gradient: bias-corrected moments stay at g and g^2.
        adam.step(&mut p, &grad);
        assert!((p[0].data()[0] - 2.0 * expect).abs() < 1e-12);
    }

    #[test]
    fn early_stop_after_plateau() {
        let curve = [5.0, 4.0, 3.0, 2.5, 2.5, 2.6, 2.7, 2.5, 2.9, 3.0, 1.0];
        let mut s = EarlyStopper::new(5);
        let mut stopped = None;
        for (e, v) in curve.iter().enumerate() {
            if s.observe(e, *v) == Verdict::Stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(s.best_epoch(), Some(3));
        assert_eq!(stopped, Some(8));
    }

    #[test]
    fn validation_split_is_seeded_and_disjoint() {
        let (a, b) = validation_split(50, 0.1, 7).unwrap();
        let (c, d) = validation_split(50, 0.1, 7).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|i| !a.contains(i)));
        assert!(validation_split(1, 0.1, 0).is_err());
    }
}
