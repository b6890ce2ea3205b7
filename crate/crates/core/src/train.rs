//! Likelihood training with dropout always on, early stopping on the
//! evaluation fold, and dropout-rate selection.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplit, PatchSample};
use crate::model::NetworkSpec;
use crate::nn::{BatchItem, DropoutMask, Network, NnError, WeightSet};
use crate::predict::mc_predict;
use crate::rng::{stream, Purpose};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Best weights seen before divergence, if any epoch completed.
        last_good: Option<Box<TrainOutcome>>,
    },
    #[error("every dropout rate failed: {0:?}")]
    AllRatesFailed(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Dropout masks per evaluation sample when scoring the eval fold.
    pub eval_samples: usize,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    /// Hold the predicted variance at one (log-variance output fixed at zero).
    pub freeze_variance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 400,
            patience: 20,
            dropout_rate: 0.1,
            seed: 0,
            eval_samples: 20,
            clip_norm: 10.0,
            freeze_variance: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_samples == 0 {
            return bad("batch size, epochs and eval samples must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: WeightSet,
    pub v: WeightSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(w: &WeightSet) -> Self {
        AdamState {
            m: WeightSet::zeros_like(w),
            v: WeightSet::zeros_like(w),
            t: 0,
        }
    }
}

/// In-place adaptive-moment update.
pub fn adam_update(w: &mut WeightSet, grads: &WeightSet, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((wt, gt), mt), vt) in w
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut())
        .zip(state.v.tensors.iter_mut())
    {
        for (((wi, &gi), mi), vi) in wt.data.iter_mut().zip(&gt.data).zip(mt.data.iter_mut()).zip(vt.data.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Pure form of [`adam_update`].
pub fn sgd_step(w: &WeightSet, grads: &WeightSet, state: &AdamState, lr: f64) -> (WeightSet, AdamState) {
    let mut w = w.clone();
    let mut state = state.clone();
    adam_update(&mut w, grads, &mut state, lr);
    (w, state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub eval_nll: f64,
    pub wall_secs: f64,
    pub clipped_batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_eval_nll: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,eval_nll,wall_secs,clipped_batches\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{:.3},{}\n",
                e.epoch, e.train_nll, e.eval_nll, e.wall_secs, e.clipped_batches
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Network spec with the dropout rate used in training.
    pub spec: NetworkSpec,
    pub weights: WeightSet,
    pub log: TrainLog,
}

/// Mean Monte Carlo predictive NLL (mixture log score) over `samples`.
/// Masks come from a fixed stream so successive epochs are comparable.
pub fn mc_eval_nll(
    net: &Network,
    w: &WeightSet,
    samples: &[PatchSample],
    draws: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let scores: Vec<Result<f64, NnError>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream(seed, Purpose::EvalMasks, i as u64, 0);
            let e = mc_predict(net, w, &s.patch.values, &s.location_array(), draws, &mut rng, false)?;
            Ok(-e.log_density(s.target))
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

fn diverged(epoch: usize, reason: String, best: Option<(&NetworkSpec, &WeightSet, &[EpochRecord], usize, f64)>) -> TrainError {
    TrainError::Diverged {
        epoch,
        reason,
        last_good: best.map(|(spec, w, epochs, best_epoch, best_eval_nll)| {
            Box::new(TrainOutcome {
                spec: spec.clone(),
                weights: w.clone(),
                log: TrainLog {
                    epochs: epochs.to_vec(),
                    best_epoch,
                    best_eval_nll,
                    stop_reason: StopReason::Patience,
                },
            })
        }),
    }
}

/// Trains from a seeded initialisation and returns the weights of the epoch
/// with the lowest evaluation NLL.
pub fn train(spec: &NetworkSpec, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.eval.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let spec = spec.with_dropout_rate(cfg.dropout_rate);
    let net = Network::new(&spec)?.with_detached_log_var(cfg.freeze_variance);
    let mut w = net.init_weights(cfg.seed);
    if cfg.freeze_variance {
        let last = w.tensors.len() / 2 - 1;
        let (kernel, bias) = w.layer_mut(last);
        let fan_in = kernel.len() / 2;
        kernel[fan_in..].iter_mut().for_each(|v| *v = 0.0);
        bias[1] = 0.0;
    }
    let mut adam = AdamState::new(&w);
    let rate = cfg.dropout_rate;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(WeightSet, usize, f64)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64, 0));
        let mut nll_sum = 0.0;
        let mut clipped = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let masks: Vec<Option<DropoutMask>> = chunk
                .iter()
                .enumerate()
                .map(|(j, _)| {
                    if rate == 0.0 {
                        return Ok(None);
                    }
                    let pos = (b * cfg.batch_size + j) as u64;
                    net.sample_mask(rate, &mut stream(cfg.seed, Purpose::Dropout, epoch as u64, pos))
                        .map(Some)
                })
                .collect::<Result<_, NnError>>()?;
            let locs: Vec<[f64; 3]> = chunk.iter().map(|&i| data.train[i].location_array()).collect();
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .zip(&masks)
                .zip(&locs)
                .map(|((&i, m), loc)| BatchItem {
                    patch: &data.train[i].patch.values,
                    location: loc,
                    target: data.train[i].target,
                    mask: m.as_ref(),
                })
                .collect();
            let best_ref = best.as_ref().map(|(bw, be, bn)| (&spec, bw, epochs.as_slice(), *be, *bn));
            let (mut grads, batch_nll) = match net.batch_gradient(&w, &items) {
                Ok(r) => r,
                Err(NnError::NonFinite(what)) => return Err(diverged(epoch, what, best_ref)),
                Err(e) => return Err(e.into()),
            };
            let norm = grads.norm();
            if !(norm.is_finite() && batch_nll.is_finite()) {
                return Err(diverged(epoch, "non-finite loss or gradient".into(), best_ref));
            }
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
                clipped += 1;
            }
            adam_update(&mut w, &grads, &mut adam, cfg.learning_rate);
            nll_sum += batch_nll;
        }
        if clipped > 0 {
            log::debug!("epoch {epoch}: gradient clipping active on {clipped} batches");
        }
        let train_nll = nll_sum / data.train.len() as f64;
        let eval_nll = match mc_eval_nll(&net, &w, &data.eval, cfg.eval_samples, cfg.seed) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(NnError::NonFinite(_)) => {
                let best_ref = best.as_ref().map(|(bw, be, bn)| (&spec, bw, epochs.as_slice(), *be, *bn));
                return Err(diverged(epoch, "non-finite evaluation NLL".into(), best_ref));
            }
            Err(e) => return Err(e.into()),
        };
        epochs.push(EpochRecord {
            epoch,
            train_nll,
            eval_nll,
            wall_secs: started.elapsed().as_secs_f64(),
            clipped_batches: clipped,
        });
        log::info!("epoch {epoch}: train nll {train_nll:.5}, eval nll {eval_nll:.5}");

        let improved = best.as_ref().map_or(true, |(_, _, b)| eval_nll < *b);
        if improved {
            best = Some((w.clone(), epoch, eval_nll));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (weights, best_epoch, best_eval_nll) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        spec,
        weights,
        log: TrainLog {
            epochs,
            best_epoch,
            best_eval_nll,
            stop_reason,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub rate: f64,
    pub eval_nll: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best_rate: f64,
    pub best: TrainOutcome,
    pub rows: Vec<TuneRow>,
}

impl TuneResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate,eval_nll,best_epoch,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.rate,
                r.eval_nll.map(|v| v.to_string()).unwrap_or_default(),
                r.best_epoch.map(|v| v.to_string()).unwrap_or_default(),
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}

/// Index of the row with the lowest eval NLL; ties go to the smaller rate.
pub fn select_rate(rows: &[TuneRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| r.eval_nll.map(|s| (i, s, r.rate)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)))
        .map(|(i, _, _)| i)
}

/// Trains one model per rate and keeps the one with the best eval NLL.
/// A failing rate is recorded and the sweep continues.
pub fn tune_dropout(
    spec: &NetworkSpec,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    rates: &[f64],
) -> Result<TuneResult, TrainError> {
    if rates.is_empty() {
        return Err(TrainError::Config("no dropout rates given".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(TrainError::Config(format!("dropout rate {r} outside [0, 1)")));
    }
    let mut rows = Vec::with_capacity(rates.len());
    let mut best: Option<TrainOutcome> = None;
    for &rate in rates {
        let run_cfg = TrainConfig {
            dropout_rate: rate,
            ..cfg.clone()
        };
        log::info!("tuning: training with dropout rate {rate}");
        match train(spec, data, &run_cfg) {
            Ok(outcome) => {
                rows.push(TuneRow {
                    rate,
                    eval_nll: Some(outcome.log.best_eval_nll),
                    best_epoch: Some(outcome.log.best_epoch),
                    error: None,
                });
                if select_rate(&rows) == Some(rows.len() - 1) {
                    best = Some(outcome);
                }
            }
            Err(e) => {
                log::warn!("dropout rate {rate} failed: {e}");
                rows.push(TuneRow {
                    rate,
                    eval_nll: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    match best {
        Some(best) => Ok(TuneResult {
            best_rate: best.spec.dropout_rate,
            best,
            rows,
        }),
        None => Err(TrainError::AllRatesFailed(
            rows.into_iter().filter_map(|r| r.error).collect(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(v: f64) -> WeightSet {
        WeightSet {
            tensors: vec![Tensor::new(vec![1], vec![v]).unwrap()],
        }
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let w = single(0.7);
        let mut st = AdamState::new(&w);
        st.m.fill(0.2);
        st.v.fill(0.3);
        let (w2, st2) = sgd_step(&w, &single(0.0), &st, 0.1);
        assert_ne!(w2, w, "nonzero first moment still moves the weight");
        let fresh = AdamState::new(&w);
        let (w3, st3) = sgd_step(&w, &single(0.0), &fresh, 0.1);
        assert_eq!(w3, w);
        assert_eq!(st3.t, 1);
        assert!((st2.m.tensors[0].data[0] - 0.18).abs() < 1e-15);
        assert!((st2.v.tensors[0].data[0] - 0.3 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_on_square() {
        // f(w) = w^2 at w = 1: gradient 2, bias-corrected moments 2 and 4,
        // so the step is lr * 2 / (2 + eps).
        let w = single(1.0);
        let (w2, _) = sgd_step(&w, &single(2.0), &AdamState::new(&w), 0.1);
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + ADAM_EPS);
        let got = w2.tensors[0].data[0];
        assert!((got - expected).abs() < 1e-15);
        assert!(got < 1.0 && 1.0 - got <= 0.1);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let w = WeightSet {
            tensors: vec![Tensor::new(vec![2], vec![0.3, -1.2]).unwrap()],
        };
        let g = WeightSet {
            tensors: vec![Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()],
        };
        let (w2, _) = sgd_step(&w, &g, &AdamState::new(&w), 0.01);
        let d0 = w2.tensors[0].data[0] - 0.3;
        let d1 = w2.tensors[0].data[1] + 1.2;
        assert!((d0 - d1).abs() < 1e-15);
    }

    fn row(rate: f64, nll: Option<f64>) -> TuneRow {
        TuneRow {
            rate,
            eval_nll: nll,
            best_epoch: nll.map(|_| 1),
            error: nll.is_none().then(|| "failed".into()),
        }
    }

    #[test]
    fn rate_selection_rules() {
        assert_eq!(select_rate(&[row(0.3, Some(1.0))]), Some(0));
        assert_eq!(select_rate(&[row(0.2, Some(1.0)), row(0.1, Some(1.0))]), Some(1));
        assert_eq!(select_rate(&[row(0.1, Some(2.0)), row(0.2, Some(1.5)), row(0.3, None)]), Some(1));
        assert_eq!(select_rate(&[row(0.1, None)]), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
