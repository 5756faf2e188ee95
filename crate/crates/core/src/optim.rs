//! Adam updates and the minibatch training loop.

use std::io::Write;

use thiserror::Error;

use crate::cnn::{CnnError, Gradients, Network};
use crate::eval;
use crate::numerics::{RngStream, Tensor3};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("need at least {need} training samples, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam step. Parameters outside `mask` keep their value
/// and their moments; the step counter advances regardless.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
    let n = params.len();
    for (what, got) in [("grads", grads.len()), ("m", state.m.len()), ("v", state.v.len())] {
        if got != n {
            return Err(OptimError::LengthMismatch { what, expected: n, got });
        }
    }
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(OptimError::LengthMismatch { what: "mask", expected: n, got: mask.len() });
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient(i));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            lr: 1e-4,
            epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(OptimError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Images with binary labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Tensor3>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(images: Vec<Tensor3>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(OptimError::LengthMismatch {
                what: "labels",
                expected: images.len(),
                got: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation set lacks one of the classes.
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub adam: AdamState,
}

pub fn write_history<W: Write>(history: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_auc")?;
    for r in history {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_auc)?;
    }
    Ok(())
}

fn validation_auc(scores: &[f64], labels: &[u8]) -> f64 {
    eval::roc_auc(scores, labels).unwrap_or(f64::NAN)
}

/// Trains `net` in place on `train`, scoring `val` after every epoch and
/// restoring the parameters of the epoch with the best validation AUC
/// (earliest on ties). If no epoch has a defined AUC the final parameters are kept.
///
/// When `mask` freezes the whole backbone, backbone features are computed
/// once and only the head is run; the result is identical to the full path.
pub fn train(
    net: &mut Network,
    train: &ImageSet,
    val: &ImageSet,
    cfg: &TrainConfig,
    mask: &[bool],
    rng: &RngStream,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if mask.len() != net.param_count() {
        return Err(OptimError::LengthMismatch {
            what: "mask",
            expected: net.param_count(),
            got: mask.len(),
        });
    }
    if train.len() < cfg.batch_size.max(1) {
        return Err(OptimError::InsufficientData {
            have: train.len(),
            need: cfg.batch_size,
        });
    }
    let mut adam = AdamState::new(net.param_count(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { history, best_epoch: None, adam });
    }

    let head_only = mask[..net.head_offset()].iter().all(|&m| !m);
    let cached = if head_only {
        let f = |set: &ImageSet| -> Result<Vec<Tensor3>> {
            par::map(&set.images, |x| net.backbone_features(x)).into_iter().map(|r| r.map_err(Into::into)).collect()
        };
        Some((f(train)?, f(val)?))
    } else {
        None
    };

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.child_indexed("epoch", epoch).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let model: &Network = net;
            let results: Vec<std::result::Result<(f64, Gradients), CnnError>> = match &cached {
                Some((feats, _)) => par::map(batch, |&i| model.head_backward(&feats[i], train.labels[i])),
                None => par::map(batch, |&i| model.backward(&train.images[i], train.labels[i])),
            };
            let mut total = Gradients::zeros(model.param_count());
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                total.add(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            if !loss_sum.is_finite() || !total.is_finite() {
                return Err(OptimError::NonFinite { epoch, batch: b });
            }
            adam_step(&mut adam, net.params_mut(), &total.0, Some(mask))?;
        }
        let scores: Vec<f64> = match &cached {
            Some((_, vf)) => {
                let model: &Network = net;
                par::map(vf, |f| model.head_forward(f)[1])
            }
            None => net.score_batch(&val.images)?,
        };
        let val_auc = validation_auc(&scores, &val.labels);
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: train_loss {train_loss:.6} val_auc {val_auc:.6}");
        history.push(EpochRecord { epoch, train_loss, val_auc });
        if !val_auc.is_nan() && best.as_ref().is_none_or(|(a, _, _)| val_auc > *a) {
            best = Some((val_auc, epoch, net.params().to_vec()));
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            net.params_mut().copy_from_slice(&params);
            Some(e)
        }
        None => Some(cfg.epochs - 1),
    };
    Ok(TrainOutcome { history, best_epoch, adam })
}

/// Holds out a stratified `fraction` of `data` for validation, then trains.
pub fn train_with_holdout(
    net: &mut Network,
    data: &ImageSet,
    fraction: f64,
    cfg: &TrainConfig,
    mask: &[bool],
    rng: &RngStream,
) -> Result<TrainOutcome> {
    let (tr, va) = eval::stratified_split(&data.labels, fraction, &rng.child("holdout"));
    train(net, &data.subset(&tr), &data.subset(&va), cfg, mask, &rng.child("train"))
}
