//! Class scoring for every model variant and the training loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderWeights, FrozenTextEncoder};
use crate::tensor::{self, Matrix, TensorError};
use crate::vocab::{
    build_prompt, init_context, init_soft_embeddings, BuiltPrompt, Composition, ConceptVocabulary,
    PromptMode, PromptTemplate, RowSource, Slot, SoftEmbeddingTable, VocabError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {0} is not among the candidates")]
    LabelNotInCandidates(usize),
    #[error("every candidate is masked")]
    AllCandidatesMasked,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Zeroshot,
    Csp,
    Coop,
    Cocsp,
    Cocoop,
    Adapter,
    Finetune,
}

/// A named group of parameters that a mode may train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSet {
    Encoder,
    Theta,
    Context,
    Meta,
    Adapter,
}

impl ParamSet {
    pub const ALL: [ParamSet; 5] = [
        ParamSet::Encoder,
        ParamSet::Theta,
        ParamSet::Context,
        ParamSet::Meta,
        ParamSet::Adapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamSet::Encoder => "encoder",
            ParamSet::Theta => "theta",
            ParamSet::Context => "context",
            ParamSet::Meta => "meta",
            ParamSet::Adapter => "adapter",
        }
    }
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Zeroshot,
        Mode::Csp,
        Mode::Coop,
        Mode::Cocsp,
        Mode::Cocoop,
        Mode::Adapter,
        Mode::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Zeroshot => "zeroshot",
            Mode::Csp => "csp",
            Mode::Coop => "coop",
            Mode::Cocsp => "cocsp",
            Mode::Cocoop => "cocoop",
            Mode::Adapter => "adapter",
            Mode::Finetune => "finetune",
        }
    }

    pub fn prompt_mode(self) -> PromptMode {
        match self {
            Mode::Csp | Mode::Cocsp | Mode::Finetune => PromptMode::Csp,
            Mode::Coop | Mode::Cocoop => PromptMode::Coop,
            Mode::Zeroshot | Mode::Adapter => PromptMode::Zeroshot,
        }
    }

    pub fn trainable_sets(self) -> &'static [ParamSet] {
        match self {
            Mode::Zeroshot => &[],
            Mode::Csp => &[ParamSet::Theta],
            Mode::Coop => &[ParamSet::Context],
            Mode::Cocsp => &[ParamSet::Theta, ParamSet::Meta],
            Mode::Cocoop => &[ParamSet::Context, ParamSet::Meta],
            Mode::Adapter => &[ParamSet::Adapter],
            Mode::Finetune => &[ParamSet::Encoder, ParamSet::Theta],
        }
    }

    /// Modes whose text representations depend on the image.
    pub fn is_conditional(self) -> bool {
        matches!(self, Mode::Cocsp | Mode::Cocoop)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub tau: f64,
    pub weight_decay: f64,
    pub mode: Mode,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            weight_decay: 0.0,
            mode: Mode::Csp,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ScoringError::InvalidConfig(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ScoringError::InvalidConfig(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Two affine layers with a rectifier between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

struct MlpCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp2 {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    /// First layer ~ N(0, 1/input), second layer zero.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let dist = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("positive std");
        m.w1.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        m
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.data_mut(), &mut self.b1, self.w2.data_mut(), &mut self.b2]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut pre = tensor::vec_matmul(x, &self.w1);
        pre.iter_mut().zip(&self.b1).for_each(|(p, b)| *p += b);
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut out = tensor::vec_matmul(&hidden, &self.w2);
        out.iter_mut().zip(&self.b2).for_each(|(o, b)| *o += b);
        (out, MlpCache { pre, hidden })
    }

    /// Accumulates parameter gradients into `grads`; returns d_input.
    fn backward(&self, x: &[f64], cache: &MlpCache, d_out: &[f64], grads: &mut Mlp2) -> Vec<f64> {
        for (i, h) in cache.hidden.iter().enumerate() {
            for (j, g) in d_out.iter().enumerate() {
                let cur = grads.w2.get(i, j);
                grads.w2.set(i, j, cur + h * g);
            }
        }
        grads.b2.iter_mut().zip(d_out).for_each(|(a, g)| *a += g);
        let mut d_pre = tensor::matmul_vec(&self.w2, d_out);
        d_pre
            .iter_mut()
            .zip(&cache.pre)
            .for_each(|(d, p)| if *p <= 0.0 { *d = 0.0 });
        for (i, xi) in x.iter().enumerate() {
            for (j, g) in d_pre.iter().enumerate() {
                let cur = grads.w1.get(i, j);
                grads.w1.set(i, j, cur + xi * g);
            }
        }
        grads.b1.iter_mut().zip(&d_pre).for_each(|(a, g)| *a += g);
        tensor::matmul_vec(&self.w1, &d_pre)
    }
}

/// Meta-network producing an image-specific bias for the learnable rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaNet {
    pub mlp: Mlp2,
}

impl MetaNet {
    pub fn hidden_width(d_out: usize) -> usize {
        (d_out / 16).max(1)
    }

    pub fn init(d_out: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp2::init(d_out, Self::hidden_width(d_out), d_model, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

pub fn cocsp_bias(meta: &MetaNet, image_rep: &[f64]) -> Vec<f64> {
    meta.mlp.forward(image_rep)
}

/// Residual image-side adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterNet {
    pub mlp: Mlp2,
    pub alpha: f64,
}

pub const DEFAULT_ADAPTER_ALPHA: f64 = 0.2;

impl AdapterNet {
    pub fn hidden_width(d_out: usize) -> usize {
        (d_out / 4).max(1)
    }

    pub fn init(d_out: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp2::init(d_out, Self::hidden_width(d_out), d_out, rng),
            alpha,
        }
    }

    fn mix(&self, x: &[f64], m: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(m)
            .map(|(a, b)| self.alpha * a + (1.0 - self.alpha) * b)
            .collect()
    }
}

pub fn adapter_transform(adapter: &AdapterNet, image_rep: &[f64]) -> Result<Vec<f64>, TensorError> {
    let m = adapter.mlp.forward(image_rep);
    tensor::l2_normalize(&adapter.mix(image_rep, &m))
}

/// `(image · text) / τ` for each text row.
pub fn class_logits(image_rep: &[f64], text_reps: &Matrix, tau: f64) -> Vec<f64> {
    (0..text_reps.rows())
        .map(|i| tensor::dot(image_rep, text_reps.row(i)) / tau)
        .collect()
}

/// Scalar added to unseen-class logits, with limits at the infinities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bias {
    NegInf,
    Finite(f64),
    PosInf,
}

impl Bias {
    pub fn as_f64(self) -> f64 {
        match self {
            Bias::NegInf => f64::NEG_INFINITY,
            Bias::Finite(b) => b,
            Bias::PosInf => f64::INFINITY,
        }
    }
}

/// Argmax of `logits + bias·[unseen]` over unmasked candidates, lowest
/// index on ties. Candidates whose logit is `-∞` count as masked. At
/// `±∞` the favored group wins whenever it has an available candidate.
pub fn predict_index(
    logits: &[f64],
    unseen: &[bool],
    bias: Bias,
    mask: Option<&[bool]>,
) -> Result<usize, ScoringError> {
    let available = |i: usize| logits[i] > f64::NEG_INFINITY && mask.is_none_or(|m| m[i]);
    let best_in = |want: Option<bool>, shift: f64| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..logits.len() {
            if !available(i) || want.is_some_and(|u| unseen[i] != u) {
                continue;
            }
            let s = logits[i] + if unseen[i] { shift } else { 0.0 };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    };
    let pick = match bias {
        Bias::Finite(b) => best_in(None, b),
        Bias::NegInf => best_in(Some(false), 0.0).or_else(|| best_in(Some(true), 0.0)),
        Bias::PosInf => best_in(Some(true), 0.0).or_else(|| best_in(Some(false), 0.0)),
    };
    pick.ok_or(ScoringError::AllCandidatesMasked)
}

/// Inverted dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_multipliers<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn attribute_dropout<R: Rng>(row: &[f64], p: f64, train: bool, rng: &mut R) -> Vec<f64> {
    if !train || p == 0.0 {
        return row.to_vec();
    }
    row.iter()
        .zip(dropout_multipliers(row.len(), p, rng))
        .map(|(v, m)| v * m)
        .collect()
}

/// Every parameter of the model. `config.mode` decides which are used and
/// which train.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub vocab: ConceptVocabulary,
    pub template: PromptTemplate,
    pub encoder: FrozenTextEncoder,
    pub table: SoftEmbeddingTable,
    pub context: Matrix,
    pub meta: MetaNet,
    pub adapter: AdapterNet,
    pub config: ScoringConfig,
}

/// Per-step scratch: attribute dropout multipliers, one row per attribute.
pub type DropoutMask = Matrix;

#[derive(Clone, Debug)]
struct Grads {
    encoder: Option<EncoderWeights>,
    theta: Matrix,
    context: Matrix,
    meta: Mlp2,
    adapter: Mlp2,
}

impl Grads {
    fn zeros(model: &Model) -> Self {
        let zeros_like = |m: &Mlp2| Mlp2::zeros(m.w1.rows(), m.hidden(), m.b2.len());
        Self {
            encoder: (model.config.mode == Mode::Finetune)
                .then(|| EncoderWeights::zeros(model.encoder.shape())),
            theta: Matrix::zeros(model.table.theta.rows(), model.table.theta.cols()),
            context: Matrix::zeros(model.context.rows(), model.context.cols()),
            meta: zeros_like(&model.meta.mlp),
            adapter: zeros_like(&model.adapter.mlp),
        }
    }

    fn add(&mut self, other: &Grads) {
        if let (Some(a), Some(b)) = (self.encoder.as_mut(), other.encoder.as_ref()) {
            for (x, y) in a.slices_mut().into_iter().zip(b.slices()) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        }
        self.theta.add_assign(&other.theta);
        self.context.add_assign(&other.context);
        for (x, y) in self.meta.slices_mut().into_iter().zip(other.meta.slices()) {
            x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
        }
        for (x, y) in self.adapter.slices_mut().into_iter().zip(other.adapter.slices()) {
            x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
        }
    }
}

/// Per-prompt backward result before routing.
struct PromptGrad {
    inputs: Matrix,
    weights: Option<EncoderWeights>,
}

impl Model {
    /// Fresh model around `encoder`: θ averaged from pretrained rows, coop
    /// context from the prefix rows, seeded meta-net and adapter.
    pub fn new(
        vocab: ConceptVocabulary,
        encoder: FrozenTextEncoder,
        template: PromptTemplate,
        config: ScoringConfig,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, ScoringError> {
        config.validate()?;
        let table = init_soft_embeddings(&vocab, &encoder.weights().token_table, encoder.tokenizer())?;
        let context = init_context(&template, &encoder);
        let shape = *encoder.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = MetaNet::init(shape.d_out, shape.d_model, &mut rng);
        let adapter = AdapterNet::init(shape.d_out, alpha, &mut rng);
        Ok(Self {
            vocab,
            template,
            encoder,
            table,
            context,
            meta,
            adapter,
            config,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn uses_dropout(&self) -> bool {
        self.config.mode.prompt_mode() == PromptMode::Csp
    }

    /// Builds the prompt and applies dropout and the image bias to its
    /// learnable rows.
    fn assemble(
        &self,
        slots: &[Slot],
        image_bias: Option<&[f64]>,
        dropout: Option<&DropoutMask>,
    ) -> Result<BuiltPrompt, ScoringError> {
        let mut p = build_prompt(
            &self.template,
            slots,
            &self.vocab,
            &self.table,
            &self.context,
            &self.encoder,
            self.config.mode.prompt_mode(),
        )?;
        for (pos, src) in p.sources.iter().enumerate() {
            let row = p.seq.embeddings.row_mut(pos);
            if let (RowSource::Theta(r), Some(mask)) = (src, dropout) {
                if self.table.is_attr_row(*r) {
                    row.iter_mut().zip(mask.row(*r)).for_each(|(v, m)| *v *= m);
                }
            }
            if let Some(b) = image_bias {
                if self.bias_applies(src) {
                    row.iter_mut().zip(b).for_each(|(v, x)| *v += x);
                }
            }
        }
        Ok(p)
    }

    fn bias_applies(&self, src: &RowSource) -> bool {
        match self.config.mode {
            Mode::Cocsp => matches!(src, RowSource::Theta(_)),
            Mode::Cocoop => matches!(src, RowSource::Context(_)),
            _ => false,
        }
    }

    fn image_bias(&self, image: &[f64]) -> Option<Vec<f64>> {
        self.config
            .mode
            .is_conditional()
            .then(|| cocsp_bias(&self.meta, image))
    }

    /// Image representation used for scoring (adapted in adapter mode).
    pub fn image_rep(&self, feature: &[f64]) -> Result<Vec<f64>, ScoringError> {
        if self.config.mode == Mode::Adapter {
            Ok(adapter_transform(&self.adapter, feature)?)
        } else {
            Ok(feature.to_vec())
        }
    }

    fn text_rep(
        &self,
        slots: &[Slot],
        image_bias: Option<&[f64]>,
        dropout: Option<&DropoutMask>,
    ) -> Result<(BuiltPrompt, Vec<f64>, Vec<f64>), ScoringError> {
        let p = self.assemble(slots, image_bias, dropout)?;
        let raw = self.encoder.encode(&p.seq)?;
        let t = tensor::l2_normalize(&raw)?;
        Ok((p, raw, t))
    }

    /// Unit-norm text representation per candidate (image-independent
    /// modes only; conditional modes use [`Self::logits`]).
    pub fn text_reps(&self, candidates: &[Vec<Slot>]) -> Result<Matrix, ScoringError> {
        let rows: Vec<Vec<f64>> = candidates
            .par_iter()
            .map(|s| self.text_rep(s, None, None).map(|(_, _, t)| t))
            .collect::<Result<_, _>>()?;
        Ok(Matrix::from_rows(&rows)?)
    }

    /// Logits of every feature row against every candidate slot list.
    pub fn slot_logits(
        &self,
        features: &[&[f64]],
        candidates: &[Vec<Slot>],
    ) -> Result<Vec<Vec<f64>>, ScoringError> {
        let tau = self.config.tau;
        if self.config.mode.is_conditional() {
            return features
                .par_iter()
                .map(|x| {
                    let bias = self.image_bias(x);
                    candidates
                        .iter()
                        .map(|s| {
                            let (_, _, t) = self.text_rep(s, bias.as_deref(), None)?;
                            Ok(tensor::dot(x, &t) / tau)
                        })
                        .collect()
                })
                .collect();
        }
        let text = self.text_reps(candidates)?;
        features
            .par_iter()
            .map(|x| Ok(class_logits(&self.image_rep(x)?, &text, tau)))
            .collect()
    }

    pub fn logits(
        &self,
        features: &[&[f64]],
        candidates: &[Composition],
    ) -> Result<Vec<Vec<f64>>, ScoringError> {
        let slots: Vec<Vec<Slot>> = candidates.iter().map(Composition::slots).collect();
        self.slot_logits(features, &slots)
    }

    fn prompt_backward(&self, p: &BuiltPrompt, d_raw: &[f64]) -> Result<PromptGrad, ScoringError> {
        if self.config.mode == Mode::Finetune {
            let g = self.encoder.full_param_gradient(&p.seq, d_raw)?;
            Ok(PromptGrad {
                inputs: g.inputs,
                weights: Some(g.weights),
            })
        } else {
            Ok(PromptGrad {
                inputs: self.encoder.encode_backward(&p.seq, d_raw)?,
                weights: None,
            })
        }
    }

    /// Routes input-row gradients back to their sources; returns the summed
    /// gradient at image-biased positions.
    fn route(
        &self,
        p: &BuiltPrompt,
        g: PromptGrad,
        dropout: Option<&DropoutMask>,
        grads: &mut Grads,
    ) -> Vec<f64> {
        let d = self.encoder.shape().d_model;
        let mut d_bias = vec![0.0; d];
        let add = |dst: &mut [f64], src: &[f64], scale: f64| {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
        };
        if let (Some(acc), Some(w)) = (grads.encoder.as_mut(), g.weights.as_ref()) {
            for (x, y) in acc.slices_mut().into_iter().zip(w.slices()) {
                add(x, y, 1.0);
            }
        }
        for (pos, src) in p.sources.iter().enumerate() {
            let row = g.inputs.row(pos);
            if self.bias_applies(src) {
                add(&mut d_bias, row, 1.0);
            }
            match src {
                RowSource::Theta(r) => {
                    let dst = grads.theta.row_mut(*r);
                    match dropout {
                        Some(mask) if self.table.is_attr_row(*r) => dst
                            .iter_mut()
                            .zip(row.iter().zip(mask.row(*r)))
                            .for_each(|(a, (b, m))| *a += b * m),
                        _ => add(dst, row, 1.0),
                    }
                }
                RowSource::Context(c) => add(grads.context.row_mut(*c), row, 1.0),
                RowSource::Token(id) => {
                    if let Some(enc) = grads.encoder.as_mut() {
                        add(enc.token_table.row_mut(*id), row, 1.0);
                    }
                }
                RowSource::MeanTokens(ids) => {
                    if let Some(enc) = grads.encoder.as_mut() {
                        let s = 1.0 / ids.len() as f64;
                        for id in ids {
                            add(enc.token_table.row_mut(*id), row, s);
                        }
                    }
                }
            }
        }
        d_bias
    }

    /// Cross-entropy over `candidates` plus `λ‖trainable‖²`, and its
    /// gradient in [`Self::trainable_vector`] layout.
    pub fn loss_and_grad(
        &self,
        batch: &[(&[f64], usize)],
        candidates: &[Composition],
        dropout: Option<&DropoutMask>,
    ) -> Result<(f64, Vec<f64>), ScoringError> {
        if batch.is_empty() {
            return Err(ScoringError::EmptyBatch);
        }
        if let Some(&(_, y)) = batch.iter().find(|(_, y)| *y >= candidates.len()) {
            return Err(ScoringError::LabelNotInCandidates(y));
        }
        let dropout = dropout.filter(|_| self.uses_dropout());
        let slots: Vec<Vec<Slot>> = candidates.iter().map(Composition::slots).collect();
        let (ce, mut grads) = if self.config.mode.is_conditional() {
            self.conditional_loss(batch, &slots, dropout)?
        } else {
            self.shared_loss(batch, &slots, dropout)?
        };
        let flat = self.trainable_vector();
        let lambda = self.config.weight_decay;
        let reg = lambda * flat.iter().map(|v| v * v).sum::<f64>();
        let mut g = self.flatten_grads(&mut grads);
        g.iter_mut().zip(&flat).for_each(|(gi, p)| *gi += 2.0 * lambda * p);
        Ok((ce + reg, g))
    }

    fn shared_loss(
        &self,
        batch: &[(&[f64], usize)],
        slots: &[Vec<Slot>],
        dropout: Option<&DropoutMask>,
    ) -> Result<(f64, Grads), ScoringError> {
        let tau = self.config.tau;
        let n = batch.len() as f64;
        let texts: Vec<(BuiltPrompt, Vec<f64>, Vec<f64>)> = slots
            .par_iter()
            .map(|s| self.text_rep(s, None, dropout))
            .collect::<Result<_, _>>()?;
        let text = Matrix::from_rows(&texts.iter().map(|t| t.2.clone()).collect::<Vec<_>>())?;

        let mut loss = 0.0;
        let mut d_text = Matrix::zeros(text.rows(), text.cols());
        let mut image_grads = Vec::with_capacity(batch.len());
        for (x, y) in batch {
            let xr = self.image_rep(x)?;
            let logits = class_logits(&xr, &text, tau);
            let probs = tensor::softmax_row(&logits);
            loss += tensor::log_sum_exp(&logits) - logits[*y];
            let mut d_img = vec![0.0; xr.len()];
            for (k, pk) in probs.iter().enumerate() {
                let dl = (pk - if k == *y { 1.0 } else { 0.0 }) / n;
                d_text
                    .row_mut(k)
                    .iter_mut()
                    .zip(&xr)
                    .for_each(|(a, b)| *a += dl * b / tau);
                d_img
                    .iter_mut()
                    .zip(text.row(k))
                    .for_each(|(a, b)| *a += dl * b / tau);
            }
            image_grads.push(d_img);
        }

        let per_prompt: Vec<PromptGrad> = texts
            .par_iter()
            .enumerate()
            .map(|(k, (p, raw, _))| {
                let d_raw = tensor::l2_normalize_backward(raw, d_text.row(k))?;
                self.prompt_backward(p, &d_raw)
            })
            .collect::<Result<_, _>>()?;
        let mut grads = Grads::zeros(self);
        for ((p, _, _), g) in texts.iter().zip(per_prompt) {
            self.route(p, g, dropout, &mut grads);
        }
        if self.config.mode == Mode::Adapter {
            for ((x, _), d_img) in batch.iter().zip(&image_grads) {
                self.adapter_backward(x, d_img, &mut grads.adapter)?;
            }
        }
        Ok((loss / n, grads))
    }

    fn adapter_backward(&self, x: &[f64], d_out: &[f64], acc: &mut Mlp2) -> Result<(), ScoringError> {
        let a = &self.adapter;
        let (m, cache) = a.mlp.forward_cached(x);
        let z = a.mix(x, &m);
        let dz = tensor::l2_normalize_backward(&z, d_out)?;
        let dm: Vec<f64> = dz.iter().map(|v| (1.0 - a.alpha) * v).collect();
        a.mlp.backward(x, &cache, &dm, acc);
        Ok(())
    }

    fn conditional_loss(
        &self,
        batch: &[(&[f64], usize)],
        slots: &[Vec<Slot>],
        dropout: Option<&DropoutMask>,
    ) -> Result<(f64, Grads), ScoringError> {
        let tau = self.config.tau;
        let n = batch.len() as f64;
        let per_example: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|(x, y)| -> Result<(f64, Grads), ScoringError> {
                let (bias, cache) = self.meta.mlp.forward_cached(x);
                let texts: Vec<_> = slots
                    .iter()
                    .map(|s| self.text_rep(s, Some(&bias), dropout))
                    .collect::<Result<_, _>>()?;
                let logits: Vec<f64> = texts.iter().map(|t| tensor::dot(x, &t.2) / tau).collect();
                let probs = tensor::softmax_row(&logits);
                let loss = tensor::log_sum_exp(&logits) - logits[*y];
                let mut grads = Grads::zeros(self);
                let mut d_bias = vec![0.0; bias.len()];
                for (k, (p, raw, _)) in texts.iter().enumerate() {
                    let dl = (probs[k] - if k == *y { 1.0 } else { 0.0 }) / n;
                    let dt: Vec<f64> = x.iter().map(|v| dl * v / tau).collect();
                    let d_raw = tensor::l2_normalize_backward(raw, &dt)?;
                    let g = self.prompt_backward(p, &d_raw)?;
                    let db = self.route(p, g, dropout, &mut grads);
                    d_bias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                }
                self.meta.mlp.backward(x, &cache, &d_bias, &mut grads.meta);
                Ok((loss, grads))
            })
            .collect::<Result<_, _>>()?;
        let mut total = Grads::zeros(self);
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l;
            total.add(g);
        }
        Ok((loss / n, total))
    }

    fn flatten_grads(&self, g: &mut Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for set in self.config.mode.trainable_sets() {
            match set {
                ParamSet::Encoder => out.extend(g.encoder.as_ref().expect("finetune grads").flatten()),
                ParamSet::Theta => {
                    for r in self.table.trainable_rows() {
                        out.extend_from_slice(g.theta.row(r));
                    }
                }
                ParamSet::Context => out.extend_from_slice(g.context.data()),
                ParamSet::Meta => out.extend(g.meta.flatten()),
                ParamSet::Adapter => out.extend(g.adapter.flatten()),
            }
        }
        out
    }

    /// The current mode's trainable parameters, flattened in a fixed order.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for set in self.config.mode.trainable_sets() {
            match set {
                ParamSet::Encoder => out.extend(self.encoder.weights().flatten()),
                ParamSet::Theta => {
                    for r in self.table.trainable_rows() {
                        out.extend_from_slice(self.table.theta.row(r));
                    }
                }
                ParamSet::Context => out.extend_from_slice(self.context.data()),
                ParamSet::Meta => out.extend(self.meta.mlp.flatten()),
                ParamSet::Adapter => out.extend(self.adapter.mlp.flatten()),
            }
        }
        out
    }

    pub fn set_trainable_vector(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &flat[off..off + n];
            off += n;
            s
        };
        for set in self.config.mode.trainable_sets() {
            match set {
                ParamSet::Encoder => {
                    let n = self.encoder.weights().scalar_count();
                    self.encoder.weights_mut().assign_flat(take(n));
                }
                ParamSet::Theta => {
                    let d = self.table.theta.cols();
                    for r in self.table.trainable_rows() {
                        self.table.theta.row_mut(r).copy_from_slice(take(d));
                    }
                }
                ParamSet::Context => {
                    let n = self.context.data().len();
                    self.context.data_mut().copy_from_slice(take(n));
                }
                ParamSet::Meta => {
                    let n = self.meta.param_count();
                    self.meta.mlp.assign_flat(take(n));
                }
                ParamSet::Adapter => {
                    let n = self.adapter.mlp.param_count();
                    self.adapter.mlp.assign_flat(take(n));
                }
            }
        }
        assert_eq!(off, flat.len(), "trainable vector length");
    }

    pub fn checksum(&self, set: ParamSet) -> String {
        match set {
            ParamSet::Encoder => self.encoder.weights_checksum(),
            ParamSet::Theta => self.table.checksum(),
            ParamSet::Context => digest(&[self.context.data()]),
            ParamSet::Meta => digest(&self.meta.mlp.slices()),
            ParamSet::Adapter => digest(&self.adapter.mlp.slices()),
        }
    }

    /// Digest of every parameter set, keyed by set name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        ParamSet::ALL
            .iter()
            .map(|s| (s.name().to_string(), self.checksum(*s)))
            .collect()
    }
}

fn digest(slices: &[&[f64]]) -> String {
    let mut h = Sha256::new();
    for s in slices {
        h.update((s.len() as u64).to_le_bytes());
        for v in *s {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderShape, WordTokenizer};

    fn micro_model(mode: Mode, seed: u64) -> Model {
        let vocab = ConceptVocabulary::new(
            vec!["young".into(), "old".into()],
            vec!["tiger".into(), "cat".into()],
        )
        .unwrap();
        let mut words: Vec<String> = ["a", "photo", "of", "object"].map(String::from).to_vec();
        words.extend(vocab.words());
        let tok = WordTokenizer::new(words, 2);
        let shape = EncoderShape {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_length: 8,
            vocab_size: tok.len(),
            d_out: 8,
        };
        let enc = FrozenTextEncoder::init_frozen(seed, &shape, tok).unwrap();
        let config = ScoringConfig {
            tau: 0.5,
            weight_decay: 0.01,
            mode,
        };
        Model::new(vocab, enc, PromptTemplate::default(), config, DEFAULT_ADAPTER_ALPHA, seed).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        tensor::l2_normalize(&v).unwrap()
    }

    #[test]
    fn logits_examples() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(class_logits(&[1.0, 0.0], &t, 1.0), vec![1.0, 0.0]);
        let l = class_logits(&[0.6, 0.8], &t, 0.01);
        assert!((l[0] - 60.0).abs() < 1e-12 && (l[1] - 80.0).abs() < 1e-12);
    }

    #[test]
    fn predict_handles_infinite_bias_and_masks() {
        let logits = [3.0, 5.0, 4.0];
        let unseen = [false, true, false];
        assert_eq!(predict_index(&logits, &unseen, Bias::NegInf, None).unwrap(), 2);
        assert_eq!(predict_index(&logits, &unseen, Bias::PosInf, None).unwrap(), 1);
        assert_eq!(predict_index(&logits, &unseen, Bias::Finite(-1.0), None).unwrap(), 1);
        assert_eq!(predict_index(&logits, &unseen, Bias::Finite(-1.5), None).unwrap(), 2);
        assert_eq!(predict_index(&[1.0, 1.0], &[false, false], Bias::Finite(0.0), None).unwrap(), 0);
        assert_eq!(
            predict_index(&logits, &unseen, Bias::PosInf, Some(&[true, false, true])).unwrap(),
            2
        );
        assert_eq!(
            predict_index(&logits, &unseen, Bias::Finite(0.0), Some(&[false; 3])),
            Err(ScoringError::AllCandidatesMasked)
        );
    }

    #[test]
    fn adapter_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = unit(&mut rng, 8);
        let mut a = AdapterNet::init(8, 1.0, &mut rng);
        a.mlp.w2.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let out = adapter_transform(&a, &x).unwrap();
        assert!(tensor::relative_error(&out, &x) < 1e-15);
        let z = AdapterNet {
            mlp: Mlp2::zeros(8, 2, 8),
            alpha: 0.2,
        };
        let out = adapter_transform(&z, &x).unwrap();
        assert!(tensor::relative_error(&out, &x) < 1e-15);
    }

    #[test]
    fn meta_net_shape_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(MetaNet::hidden_width(32), 2);
        assert_eq!(MetaNet::hidden_width(8), 1);
        let m = MetaNet::init(32, 32, &mut rng);
        assert_eq!(m.param_count(), 32 * 2 + 2 + 2 * 32 + 32);
        let zero = MetaNet {
            mlp: Mlp2::zeros(32, 2, 32),
        };
        assert!(cocsp_bias(&zero, &unit(&mut rng, 32)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = vec![1.0; 100_000];
        let out = attribute_dropout(&row, 0.5, true, &mut rng);
        let zeros = out.iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01, "{zeros}");
        assert!(out.iter().filter(|v| **v != 0.0).all(|v| *v == 2.0));
        assert_eq!(attribute_dropout(&row[..5], 0.0, true, &mut rng), row[..5].to_vec());
        assert_eq!(attribute_dropout(&row[..5], 0.7, false, &mut rng), row[..5].to_vec());
    }

    #[test]
    fn single_candidate_loss_is_regularizer_only() {
        let m = micro_model(Mode::Csp, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = unit(&mut rng, 8);
        let (loss, _) = m.loss_and_grad(&[(&x, 0)], &[Composition::pair(0, 0)], None).unwrap();
        let theta = m.trainable_vector();
        let reg = 0.01 * theta.iter().map(|v| v * v).sum::<f64>();
        assert!((loss - reg).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut m = micro_model(Mode::Csp, 1);
        m.config.weight_decay = 0.0;
        let x = vec![0.0; 8];
        let cands: Vec<_> = (0..2).flat_map(|a| (0..2).map(move |o| Composition::pair(a, o))).collect();
        let (loss, _) = m.loss_and_grad(&[(&x, 2)], &cands, None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(
            m.loss_and_grad(&[(&x, 7)], &cands, None).unwrap_err(),
            ScoringError::LabelNotInCandidates(7)
        );
    }

    #[test]
    fn csp_at_init_matches_zeroshot() {
        let m = micro_model(Mode::Csp, 4);
        let mut z = m.clone();
        z.config.mode = Mode::Zeroshot;
        let cands: Vec<Vec<Slot>> = (0..2)
            .flat_map(|a| (0..2).map(move |o| Composition::pair(a, o).slots()))
            .collect();
        let a = m.text_reps(&cands).unwrap();
        let b = z.text_reps(&cands).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        for r in 0..a.rows() {
            assert!((tensor::norm(a.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    fn fd_check(mode: Mode, seed: u64, with_dropout: bool) -> f64 {
        let mut m = micro_model(mode, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        // Non-trivial meta/adapter output layers so every path carries signal.
        for w in [&mut m.meta.mlp.w2, &mut m.adapter.mlp.w2] {
            w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let feats: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 8)).collect();
        let cands: Vec<_> = (0..2).flat_map(|a| (0..2).map(move |o| Composition::pair(a, o))).collect();
        let batch: Vec<(&[f64], usize)> =
            feats.iter().enumerate().map(|(i, f)| (f.as_slice(), i % 4)).collect();
        let mask = with_dropout.then(|| {
            let mut mk = Matrix::zeros(2, 8);
            for r in 0..2 {
                mk.row_mut(r).copy_from_slice(&dropout_multipliers(8, 0.3, &mut rng));
            }
            mk
        });
        let (_, analytic) = m.loss_and_grad(&batch, &cands, mask.as_ref()).unwrap();
        let p0 = m.trainable_vector();
        let numeric = tensor::finite_diff_grad(
            |p| {
                let mut mm = m.clone();
                mm.set_trainable_vector(p);
                mm.loss_and_grad(&batch, &cands, mask.as_ref()).unwrap().0
            },
            &p0,
            1e-5,
        );
        tensor::relative_error(&analytic, &numeric)
    }

    #[test]
    fn loss_gradient_matches_finite_differences_per_mode() {
        for mode in [Mode::Csp, Mode::Coop, Mode::Cocsp, Mode::Cocoop, Mode::Adapter] {
            for seed in 0..3 {
                let err = fd_check(mode, seed, false);
                assert!(err < 1e-5, "{mode} seed {seed}: {err:e}");
            }
        }
        assert!(fd_check(Mode::Csp, 5, true) < 1e-5);
        assert!(fd_check(Mode::Cocsp, 6, true) < 1e-5);
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        let err = fd_check(Mode::Finetune, 2, false);
        assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn zeroshot_has_no_trainable_parameters() {
        let m = micro_model(Mode::Zeroshot, 0);
        assert!(m.trainable_vector().is_empty());
        let x = vec![1.0 / 8f64.sqrt(); 8];
        let (_, g) = m.loss_and_grad(&[(&x, 0)], &[Composition::pair(0, 0)], None).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("nope".parse::<Mode>().is_err());
    }
}
