//! Exit losses, SGD with momentum, the plateau scheduler, and the two-phase
//! training loop.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Slot, Tape};
use crate::data::Samples;
use crate::elastic::{argmax, ElasticNetwork, Mode, Recorded};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};

/// Max-shifted softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−(1/C)·ln ŷ_true`, or `−ln ŷ_true` when `class_scaled` is off. A zero
/// probability is clamped to machine epsilon before the log.
pub fn exit_loss(probs: &[f64], label: usize, class_scaled: bool) -> Result<f64> {
    let c = probs.len();
    if label >= c {
        return Err(Error::contract(format!("label {label} outside 0..{c}")));
    }
    let p = probs[label];
    debug_assert!(p > 0.0, "true-class probability underflowed; clamping to epsilon");
    let scale = if class_scaled { 1.0 / c as f64 } else { 1.0 };
    Ok(-scale * p.max(f64::EPSILON).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: Vec<f64>,
    /// Keep the 1/C factor on every exit loss.
    pub class_scaled: bool,
}

impl LossConfig {
    pub fn uniform(exits: usize) -> Self {
        Self {
            weights: vec![1.0; exits],
            class_scaled: true,
        }
    }

    pub fn validate(&self, exits: usize) -> Result<()> {
        if self.weights.len() != exits {
            return Err(Error::contract(format!(
                "{} loss weights for {exits} exits",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn scale(&self, classes: usize) -> f64 {
        if self.class_scaled {
            1.0 / classes as f64
        } else {
            1.0
        }
    }
}

/// `Σ w_i L_i`.
pub fn total_loss(losses: &[f64], cfg: &LossConfig) -> Result<f64> {
    if losses.len() != cfg.weights.len() {
        return Err(Error::contract(format!(
            "{} exit losses but {} weights",
            losses.len(),
            cfg.weights.len()
        )));
    }
    Ok(losses.iter().zip(&cfg.weights).map(|(l, w)| w * l).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 10,
            phase2_epochs: 100,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            patience: 10,
            factor: 10.0,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("batch size and patience must be positive"));
        }
        if !(self.factor > 1.0) {
            return Err(Error::config(format!("plateau factor must exceed 1, got {}", self.factor)));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("min improvement must be nonnegative"));
        }
        Ok(())
    }
}

/// Classical momentum: `v ← μv − ηg`, `w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Applies one update. Non-trainable parameters are skipped. Nothing is
    /// modified if any gradient is non-finite or misshapen.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}; step aborted")));
            }
        }
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            if !p.trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v - lr * g;
                *w += *v;
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` once the monitored value has gone
/// `patience` epochs without improving on its best by more than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    patience: usize,
    factor: f64,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, min_delta: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.patience, cfg.factor, cfg.min_delta)
    }

    /// Records one epoch's value and returns the learning rate for the next epoch.
    pub fn observe(&mut self, value: f64) -> f64 {
        if self.best - value > self.min_delta {
            self.best = value;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr /= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }

    pub fn stagnant_epochs(&self) -> usize {
        self.wait
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss_total: f64,
    pub val_loss_total: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation error fraction per exit.
    pub val_err: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub exits: usize,
    pub records: Vec<EpochRecord>,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

impl MetricsLog {
    pub fn new(exits: usize) -> Self {
        Self {
            exits,
            records: Vec::new(),
            halted: None,
        }
    }

    /// Appends `other`, renumbering its epochs to follow this log's.
    pub fn extend(&mut self, other: MetricsLog) {
        let offset = self.records.last().map_or(0, |r| r.epoch);
        for mut r in other.records {
            r.epoch += offset;
            self.records.push(r);
        }
        if self.halted.is_none() {
            self.halted = other.halted;
        }
    }
}

/// Mean per-exit losses and error fractions over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: Vec<f64>,
    pub loss_total: f64,
    pub errors: Vec<f64>,
}

const EVAL_BATCH: usize = 250;

/// Per-exit error fraction: how often `argmax ŷ⁽ⁱ⁾` misses the label.
pub fn evaluate<T: Scalar>(net: &ElasticNetwork<T>, data: &Samples) -> Result<Vec<f64>> {
    Ok(evaluate_report(net, data, &LossConfig::uniform(net.exit_count()))?.errors)
}

/// Losses and errors in evaluation mode.
pub fn evaluate_report<T: Scalar>(net: &ElasticNetwork<T>, data: &Samples, loss: &LossConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    check_classes(net, data)?;
    loss.validate(net.exit_count())?;
    let n_exits = net.exit_count();
    let c = net.classes();
    let scale = loss.scale(c);
    let mut wrong = vec![0usize; n_exits];
    let mut loss_sum = vec![0.0f64; n_exits];
    let all: Vec<usize> = (0..n_exits).collect();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let probs = net.forward_exits(&x, Mode::Eval, &all, None)?;
        for (i, p) in probs.iter().enumerate() {
            for (row, &label) in p.data().chunks_exact(c).zip(&labels) {
                if argmax(row) != label {
                    wrong[i] += 1;
                }
                loss_sum[i] -= scale * row[label].to_f64().max(T::prob_floor().to_f64()).ln();
            }
        }
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = loss_sum.iter().map(|s| s / n).collect();
    Ok(EvalReport {
        loss_total: total_loss(&mean, loss)?,
        loss: mean,
        errors: wrong.iter().map(|&w| w as f64 / n).collect(),
    })
}

fn check_classes<T: Scalar>(net: &ElasticNetwork<T>, data: &Samples) -> Result<()> {
    if data.classes > net.classes() || data.shape != net.graph().input_shape() {
        return Err(Error::shape(format!(
            "data has {} classes of {} images; network expects {} classes of {}",
            data.classes,
            data.shape,
            net.classes(),
            net.graph().input_shape()
        )));
    }
    Ok(())
}

/// Records every exit's loss and the weighted total for one batch.
pub fn record_losses<T: Scalar>(
    tape: &mut Tape<T>,
    rec: &Recorded,
    labels: &[usize],
    loss: &LossConfig,
    classes: usize,
) -> Result<(Vec<Slot>, Slot)> {
    let scale = T::from_f64(loss.scale(classes));
    let per_exit = rec
        .probs
        .iter()
        .map(|&p| tape.exit_loss(p, labels, scale))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<T> = loss.weights.iter().map(|&w| T::from_f64(w)).collect();
    let total = tape.weighted_sum(&per_exit, &weights)?;
    Ok((per_exit, total))
}

/// Gradient of the weighted total loss on one batch, for the parameters
/// that `mode` leaves trainable.
pub fn batch_gradients<T: Scalar>(
    net: &ElasticNetwork<T>,
    x: Tensor<T>,
    labels: &[usize],
    loss: &LossConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchResult<T>> {
    let all: Vec<usize> = (0..net.exit_count()).collect();
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, x, mode, &all, rng)?;
    let (per_exit, total) = record_losses(&mut tape, &rec, labels, loss, net.classes())?;
    let total_value = tape.value(total).item().to_f64();
    let exit_losses: Vec<f64> = per_exit.iter().map(|&s| tape.value(s).item().to_f64()).collect();
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!("total loss {total_value}")));
    }
    let mut grads = tape.backward(&[(total, Tensor::scalar(T::one()))])?;
    let mut out = Vec::new();
    for (name, slot) in &rec.params {
        let p = net.params.get(name).expect("recorded from the store");
        let updates = p.trainable && (p.head || mode == Mode::Train);
        if updates {
            let g = grads.take(*slot).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.push((name.clone(), g));
        }
    }
    Ok(BatchResult {
        total: total_value,
        exit_losses,
        grads: out,
        tape,
        recorded: rec,
    })
}

pub struct BatchResult<T: Scalar> {
    pub total: f64,
    pub exit_losses: Vec<f64>,
    pub grads: Vec<(String, Tensor<T>)>,
    pub tape: Tape<T>,
    pub recorded: Recorded,
}

struct Phase<'a> {
    number: u8,
    mode: Mode,
    train: &'a Samples,
    val: &'a Samples,
    cfg: &'a TrainConfig,
    loss: &'a LossConfig,
}

/// Phase 1: only the exit heads learn, at a constant rate; the backbone and
/// its batch-norm statistics stay frozen.
pub fn train_phase1<T: Scalar>(
    net: &mut ElasticNetwork<T>,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<MetricsLog> {
    let phase = Phase {
        number: 1,
        mode: Mode::FrozenBackbone,
        train,
        val,
        cfg,
        loss,
    };
    run_phase(net, &phase, cfg.phase1_epochs)
}

/// Phase 2: every weight learns; the rate drops by `factor` whenever the
/// validation total loss plateaus for `patience` epochs.
pub fn train_phase2<T: Scalar>(
    net: &mut ElasticNetwork<T>,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<MetricsLog> {
    let phase = Phase {
        number: 2,
        mode: Mode::Train,
        train,
        val,
        cfg,
        loss,
    };
    run_phase(net, &phase, cfg.phase2_epochs)
}

/// Both phases back to back, with epochs numbered continuously.
pub fn train<T: Scalar>(
    net: &mut ElasticNetwork<T>,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<MetricsLog> {
    let mut log = train_phase1(net, train, val, cfg, loss)?;
    if log.halted.is_none() {
        log.extend(train_phase2(net, train, val, cfg, loss)?);
    }
    Ok(log)
}

fn run_phase<T: Scalar>(net: &mut ElasticNetwork<T>, phase: &Phase, epochs: usize) -> Result<MetricsLog> {
    phase.cfg.validate()?;
    phase.loss.validate(net.exit_count())?;
    if phase.train.is_empty() || phase.val.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    check_classes(net, phase.train)?;
    check_classes(net, phase.val)?;

    let index = phase.number as u64;
    let mut shuffle_rng = rng::stream(phase.cfg.seed, Stream::Shuffle, index);
    let mut dropout_rng = rng::stream(phase.cfg.seed, Stream::Dropout, index);
    let mut sgd = Sgd::<T>::new(phase.cfg.lr, phase.cfg.momentum);
    let mut scheduler = PlateauScheduler::from_config(phase.cfg);
    let mut log = MetricsLog::new(net.exit_count());
    let mut order: Vec<usize> = (0..phase.train.len()).collect();

    for epoch in 1..=epochs {
        let lr = sgd.lr;
        order.shuffle(&mut shuffle_rng);
        let mut sums = vec![0.0; net.exit_count()];
        let mut total_sum = 0.0;
        for chunk in order.chunks(phase.cfg.batch_size) {
            let (x, labels) = phase.train.batch::<T>(chunk)?;
            let step = batch_gradients(net, x, &labels, phase.loss, phase.mode, Some(&mut dropout_rng))
                .and_then(|b| sgd.step(&mut net.params, &b.grads).map(|_| b));
            let b = match step {
                Ok(b) => b,
                Err(Error::NonFinite(msg)) => {
                    log.halted = Some(format!("epoch {epoch}: {msg}"));
                    return Ok(log);
                }
                Err(e) => return Err(e),
            };
            if phase.mode == Mode::Train {
                net.update_moving_stats(&b.tape, &b.recorded)?;
            }
            let w = chunk.len() as f64;
            total_sum += b.total * w;
            for (s, l) in sums.iter_mut().zip(&b.exit_losses) {
                *s += l * w;
            }
        }
        let n = phase.train.len() as f64;
        let report = evaluate_report(net, phase.val, phase.loss)?;
        if !report.loss_total.is_finite() {
            log.halted = Some(format!("epoch {epoch}: validation loss {}", report.loss_total));
            return Ok(log);
        }
        log.records.push(EpochRecord {
            epoch,
            phase: phase.number,
            lr,
            train_loss_total: total_sum / n,
            val_loss_total: report.loss_total,
            train_loss: sums.iter().map(|s| s / n).collect(),
            val_loss: report.loss,
            val_err: report.errors,
        });
        if phase.number == 2 {
            sgd.lr = scheduler.observe(report.loss_total);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_values() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = softmax(&[2f64.ln() + 1e3, 1e3]);
        assert!((shifted[0] - p[0]).abs() < 1e-12);
    }

    #[test]
    fn exit_loss_cases() {
        let mut onehot = vec![0.0; 10];
        onehot[4] = 1.0;
        assert_eq!(exit_loss(&onehot, 4, true).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        assert!((exit_loss(&uniform, 0, true).unwrap() - 0.230_258_509_299_404_6).abs() < 1e-12);
        assert!((exit_loss(&vec![0.01; 100], 0, true).unwrap() - 0.046_051_701_859_880_91).abs() < 1e-12);
        assert!(exit_loss(&uniform, 10, true).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(&[1.0; 4], &LossConfig::uniform(4)).unwrap(), 4.0);
        let cfg = LossConfig {
            weights: vec![0.0, 0.0, 1.0],
            class_scaled: true,
        };
        assert_eq!(total_loss(&[5.0, 7.0, 2.0], &cfg).unwrap(), 2.0);
        assert!(matches!(total_loss(&[1.0], &cfg), Err(Error::Contract(_))));
    }

    fn store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(crate::params::Param {
            name: "w".into(),
            value: Tensor::scalar(w),
            trainable: true,
            head: false,
        })
        .unwrap();
        s
    }

    #[test]
    fn sgd_recursion() {
        let g = vec![("w".to_string(), Tensor::scalar(2.0))];
        let mut s = store(0.0);
        let mut plain = Sgd::new(0.1, 0.0);
        plain.step(&mut s, &g).unwrap();
        assert!((s.value("w").unwrap().item() + 0.2).abs() < 1e-15);

        let mut s = store(0.0);
        let mut sgd = Sgd::new(1.0, 0.9);
        sgd.step(&mut s, &g).unwrap();
        let after_one = s.value("w").unwrap().item();
        sgd.step(&mut s, &g).unwrap();
        assert!((s.value("w").unwrap().item() - after_one - (-1.9 * 2.0)).abs() < 1e-12);

        let mut s = store(1.5);
        Sgd::new(1.0, 0.9)
            .step(&mut s, &[("w".to_string(), Tensor::scalar(0.0))])
            .unwrap();
        assert_eq!(s.value("w").unwrap().item(), 1.5);
    }

    #[test]
    fn sgd_rejects_non_finite_without_touching_params() {
        let mut s = store(1.0);
        let err = Sgd::new(1.0, 0.9).step(&mut s, &[("w".to_string(), Tensor::scalar(f64::NAN))]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s.value("w").unwrap().item(), 1.0);
    }

    #[test]
    fn improving_loss_keeps_rate() {
        let mut sched = PlateauScheduler::new(1e-3, 10, 10.0, 1e-4);
        for i in 0..50 {
            assert_eq!(sched.observe(1.0 - 0.01 * i as f64), 1e-3);
        }
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut sched = PlateauScheduler::new(1e-3, 10, 10.0, 1e-4);
        sched.observe(1.0);
        sched.observe(0.99);
        for _ in 0..9 {
            assert_eq!(sched.observe(0.99 - 5e-5), 1e-3);
        }
        assert!((sched.observe(0.99) - 1e-4).abs() < 1e-18);
        assert_eq!(sched.stagnant_epochs(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LossConfig {
            weights: vec![0.0, 0.0],
            class_scaled: true
        }
        .validate(2)
        .is_err());
    }
}
