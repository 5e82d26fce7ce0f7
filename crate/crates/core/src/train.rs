//! Mini-batch Adam training of a mode's trainable parameters on seen pairs.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetBundle, Split, World};
use crate::eval::{evaluate, EvalError};
use crate::scoring::{dropout_multipliers, DropoutMask, Model, ScoringError};
use crate::encoder::EncoderError;
use crate::tensor::{Matrix, TensorError};
use crate::vocab::{Composition, PromptMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss diverged in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("no training examples on seen pairs")]
    EmptySeenSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValAuc,
    ValUnseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub attribute_dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 128,
            epochs: 20,
            attribute_dropout: 0.3,
            weight_decay: 1e-5,
            seed: 0,
            selection: Selection::ValAuc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.attribute_dropout) {
            return bad(format!("attribute dropout {} outside [0, 1)", self.attribute_dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
    pub auc: f64,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub records: Vec<EpochRecord>,
}

/// Training examples: features of train-split examples labeled with a seen
/// pair, and their indices among `seen`.
fn training_set<'a>(bundle: &'a DatasetBundle, seen: &[Composition]) -> Vec<(&'a [f64], usize)> {
    bundle
        .examples_in(Split::Train)
        .filter_map(|e| {
            seen.iter()
                .position(|c| *c == e.label)
                .map(|y| (bundle.feature(e.row), y))
        })
        .collect()
}

fn dropout_mask(model: &Model, p: f64, rng: &mut ChaCha8Rng) -> Option<DropoutMask> {
    if p == 0.0 || model.mode().prompt_mode() != PromptMode::Csp {
        return None;
    }
    let (rows, cols) = (model.table.theta.rows(), model.table.theta.cols());
    let data = (0..rows).flat_map(|_| dropout_multipliers(cols, p, rng)).collect();
    Some(Matrix::from_vec(rows, cols, data).expect("mask shape"))
}

/// Overflow inside the encoder surfaces as a divergence of `epoch`.
fn diverged(e: TrainError, epoch: usize) -> TrainError {
    let overflow = |s: &ScoringError| {
        matches!(
            s,
            ScoringError::Encoder(EncoderError::NonFinite) | ScoringError::Tensor(TensorError::DegenerateNorm(_))
        )
    };
    match &e {
        TrainError::Scoring(s) | TrainError::Eval(EvalError::Scoring(s)) if overflow(s) => TrainError::DivergedLoss { epoch },
        _ => e,
    }
}

/// Trains `model` in place and restores the parameters of the best
/// validation epoch. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    model.config.weight_decay = cfg.weight_decay;
    model.config.validate()?;
    if bundle.meta.mixed_vocab {
        model.table.freeze_attributes(&bundle.seen_attributes());
    }
    let seen = bundle.seen_pairs();
    let data = training_set(bundle, &seen);
    if data.is_empty() {
        return Err(TrainError::EmptySeenSet);
    }
    let mut params = model.trainable_vector();
    if params.is_empty() {
        info!("mode {} has no trainable parameters", model.mode());
        return Ok(TrainSummary {
            epochs_run: 0,
            best_epoch: 0,
            best_metric: f64::NAN,
            records: Vec::new(),
        });
    }

    let metric = |m: &Model| -> Result<(f64, [f64; 4]), TrainError> {
        let (r, _) = evaluate(bundle, m, World::Closed, Split::Val, None)?;
        let key = match cfg.selection {
            Selection::ValAuc => r.auc,
            Selection::ValUnseen => r.unseen,
        };
        Ok((key, [r.seen, r.unseen, r.harmonic, r.auc]))
    };
    let (mut best_metric, _) = metric(model)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| data[i]).collect();
            let mask = dropout_mask(model, cfg.attribute_dropout, &mut rng);
            let (loss, grad) = model
                .loss_and_grad(&batch, &seen, mask.as_ref())
                .map_err(|e| diverged(e.into(), epoch))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::DivergedLoss { epoch });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut params, &grad, cfg.learning_rate);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(TrainError::DivergedLoss { epoch });
            }
            model.set_trainable_vector(&params);
        }
        let (key, [s, u, h, auc]) = metric(model).map_err(|e| diverged(e, epoch))?;
        let rec = EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            seen: s,
            unseen: u,
            harmonic: h,
            auc,
            checksums: model.checksums(),
        };
        debug!("epoch {epoch}: loss {:.5} val auc {auc:.4} h {h:.4}", rec.loss);
        on_epoch(&rec);
        records.push(rec);
        if key > best_metric {
            best_metric = key;
            best_params.clone_from(&params);
            best_epoch = epoch;
        }
    }
    model.set_trainable_vector(&best_params);
    info!("kept epoch {best_epoch} ({best_metric:.4})");
    Ok(TrainSummary {
        epochs_run: cfg.epochs,
        best_epoch,
        best_metric,
        records,
    })
}
