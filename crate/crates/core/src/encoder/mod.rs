//! Frozen micro text encoder: a pre-norm causal transformer whose output is
//! read at the end-of-text position and projected to the joint space.
//!
//! Only gradients with respect to the input embedding rows are needed for
//! prompt tuning; [`FrozenTextEncoder::full_param_gradient`] additionally
//! fills weight gradients for full fine-tuning. Both go through the same
//! backward routine.

pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{
    self, layer_norm_backward, layer_norm_cached, AttentionMask, LayerNormCache, Matrix,
    LAYER_NORM_EPS,
};
pub use tokenizer::WordTokenizer;

/// Prefix words plus the generic decomposition word, in tokenizer order.
pub const BASE_WORDS: [&str; 4] = ["a", "photo", "of", "object"];

/// Tokenizer for a vocabulary: the base words, then every concept word.
pub fn tokenizer_for(concept_words: &[String], hash_buckets: usize) -> WordTokenizer {
    WordTokenizer::new(
        BASE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(concept_words.iter().cloned()),
        hash_buckets,
    )
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder shape: {0}")]
    InvalidShape(String),
    #[error("sequence of length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("malformed token sequence: {0}")]
    BadSequence(String),
    #[error("encoder produced a non-finite value")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub d_out: usize,
}

impl EncoderShape {
    /// The desk-scale default; `vocab_size` still has to be set from the
    /// tokenizer.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            context_length: 16,
            vocab_size,
            d_out: 32,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_out == 0 || self.n_layers == 0 {
            return Err(EncoderError::InvalidShape("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::InvalidShape(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.context_length < 4 {
            return Err(EncoderError::InvalidShape(format!(
                "context length {} < 4",
                self.context_length
            )));
        }
        if self.vocab_size == 0 {
            return Err(EncoderError::InvalidShape("empty vocabulary".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }

    /// Number of weight scalars, or `None` if it overflows.
    pub fn weight_count(&self) -> Option<usize> {
        let d = self.d_model;
        let h = d.checked_mul(4)?;
        let block = d
            .checked_mul(d)?
            .checked_mul(4)?
            .checked_add(d.checked_mul(h)?.checked_mul(2)?)?
            .checked_add(d.checked_mul(9)?)?
            .checked_add(h)?;
        self.vocab_size
            .checked_add(self.context_length)?
            .checked_add(2)?
            .checked_add(self.d_out)?
            .checked_mul(d)?
            .checked_add(block.checked_mul(self.n_layers)?)
    }
}

/// Shape without the vocabulary size, which comes from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub d_out: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        let s = EncoderShape::desk(0);
        Self {
            d_model: s.d_model,
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            context_length: s.context_length,
            d_out: s.d_out,
        }
    }
}

impl EncoderDims {
    pub fn with_vocab(self, vocab_size: usize) -> EncoderShape {
        EncoderShape {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_length: self.context_length,
            vocab_size,
            d_out: self.d_out,
        }
    }
}

/// Weight scales used by [`FrozenTextEncoder::init_frozen`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub token_std: f64,
    pub positional_std: f64,
    /// Std of the attention and MLP projections, before residual scaling.
    pub weight_std: f64,
    /// Std of the final projection into the joint space.
    pub projection_std: f64,
}

impl InitScheme {
    /// Scales proportional to `1/√d_model`, so the sublayers stay
    /// non-trivial at small widths.
    pub fn for_shape(shape: &EncoderShape) -> Self {
        let s = 1.0 / (shape.d_model as f64).sqrt();
        Self {
            token_std: 1.0,
            positional_std: 0.5,
            weight_std: s,
            projection_std: s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_shift: Vec<f64>,
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_shift: Vec<f64>,
    pub w_fc: Matrix,
    pub b_fc: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl BlockWeights {
    fn zeros(shape: &EncoderShape) -> Self {
        let d = shape.d_model;
        let h = shape.mlp_width();
        Self {
            ln1_gain: vec![0.0; d],
            ln1_shift: vec![0.0; d],
            w_q: Matrix::zeros(d, d),
            b_q: vec![0.0; d],
            w_k: Matrix::zeros(d, d),
            b_k: vec![0.0; d],
            w_v: Matrix::zeros(d, d),
            b_v: vec![0.0; d],
            w_o: Matrix::zeros(d, d),
            b_o: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_shift: vec![0.0; d],
            w_fc: Matrix::zeros(d, h),
            b_fc: vec![0.0; h],
            w_out: Matrix::zeros(h, d),
            b_out: vec![0.0; d],
        }
    }

    fn slices(&self) -> [&[f64]; 16] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            self.w_q.data(),
            &self.b_q,
            self.w_k.data(),
            &self.b_k,
            self.w_v.data(),
            &self.b_v,
            self.w_o.data(),
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_shift,
            self.w_fc.data(),
            &self.b_fc,
            self.w_out.data(),
            &self.b_out,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_shift,
            self.w_q.data_mut(),
            &mut self.b_q,
            self.w_k.data_mut(),
            &mut self.b_k,
            self.w_v.data_mut(),
            &mut self.b_v,
            self.w_o.data_mut(),
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_shift,
            self.w_fc.data_mut(),
            &mut self.b_fc,
            self.w_out.data_mut(),
            &mut self.b_out,
        ]
    }
}

pub const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_shift", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_gain",
    "ln2_shift", "w_fc", "b_fc", "w_out", "b_out",
];

/// Every encoder weight. Also used, zero-initialized, as the weight
/// gradient bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub token_table: Matrix,
    pub positional: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gain: Vec<f64>,
    pub lnf_shift: Vec<f64>,
    pub projection: Matrix,
}

impl EncoderWeights {
    pub fn zeros(shape: &EncoderShape) -> Self {
        Self {
            token_table: Matrix::zeros(shape.vocab_size, shape.d_model),
            positional: Matrix::zeros(shape.context_length, shape.d_model),
            blocks: (0..shape.n_layers).map(|_| BlockWeights::zeros(shape)).collect(),
            lnf_gain: vec![0.0; shape.d_model],
            lnf_shift: vec![0.0; shape.d_model],
            projection: Matrix::zeros(shape.d_model, shape.d_out),
        }
    }

    /// All tensors in canonical order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.token_table.data(), self.positional.data()];
        for b in &self.blocks {
            out.extend(b.slices());
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_shift);
        out.push(self.projection.data());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.token_table.data_mut(), self.positional.data_mut()];
        for b in &mut self.blocks {
            out.extend(b.slices_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_shift);
        out.push(self.projection.data_mut());
        out
    }

    /// Names matching [`Self::slices`] order.
    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut names = vec!["token_table".to_string(), "positional".to_string()];
        for l in 0..n_layers {
            names.extend(BLOCK_TENSOR_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        names.extend(["lnf_gain", "lnf_shift", "projection"].map(String::from));
        names
    }

    pub fn scalar_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, flat.len(), "flat encoder vector length");
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.slices() {
            h.update((s.len() as u64).to_le_bytes());
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Input to the encoder: already-assembled embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Matrix,
    pub eot_position: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight gradients plus input-row gradients for one `(sequence, grad_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGradient {
    pub weights: EncoderWeights,
    pub inputs: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    shape: EncoderShape,
    tokenizer: WordTokenizer,
    weights: EncoderWeights,
}

struct BlockCache {
    x_in: Matrix,
    ln1: Vec<LayerNormCache>,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn: Matrix,
    ln2: Vec<LayerNormCache>,
    h2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    final_hidden: Vec<f64>,
    len: usize,
}

const GELU_K: f64 = 1.702;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(GELU_K * x)
}

fn quick_gelu_grad(x: f64) -> f64 {
    let s = sigmoid(GELU_K * x);
    s + GELU_K * x * s * (1.0 - s)
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = x.matmul(w);
    out.add_row_vector(b);
    out
}

fn head_columns(m: &Matrix, head: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[head * dh..(head + 1) * dh]);
    }
    out
}

fn write_head_columns(dst: &mut Matrix, src: &Matrix, head: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(src.row(r));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn layer_norm_rows(x: &Matrix, gain: &[f64], shift: &[f64]) -> (Matrix, Vec<LayerNormCache>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut caches = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (y, c) = layer_norm_cached(x.row(r), gain, shift, LAYER_NORM_EPS);
        out.row_mut(r).copy_from_slice(&y);
        caches.push(c);
    }
    (out, caches)
}

impl FrozenTextEncoder {
    /// Seeded random encoder with the default [`InitScheme`].
    pub fn init_frozen(
        seed: u64,
        shape: &EncoderShape,
        tokenizer: WordTokenizer,
    ) -> Result<Self, EncoderError> {
        Self::init_with_scheme(seed, shape, tokenizer, &InitScheme::for_shape(shape))
    }

    pub fn init_with_scheme(
        seed: u64,
        shape: &EncoderShape,
        tokenizer: WordTokenizer,
        scheme: &InitScheme,
    ) -> Result<Self, EncoderError> {
        shape.validate()?;
        if tokenizer.len() != shape.vocab_size {
            return Err(EncoderError::InvalidShape(format!(
                "tokenizer has {} rows, shape says {}",
                tokenizer.len(),
                shape.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut [f64], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in m.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        let residual = 1.0 / (2.0 * shape.n_layers as f64).sqrt();
        let mut w = EncoderWeights::zeros(shape);
        fill(w.token_table.data_mut(), scheme.token_std);
        fill(w.positional.data_mut(), scheme.positional_std);
        for b in &mut w.blocks {
            b.ln1_gain.fill(1.0);
            b.ln2_gain.fill(1.0);
            fill(b.w_q.data_mut(), scheme.weight_std);
            fill(b.w_k.data_mut(), scheme.weight_std);
            fill(b.w_v.data_mut(), scheme.weight_std);
            fill(b.w_o.data_mut(), scheme.weight_std * residual);
            fill(b.w_fc.data_mut(), scheme.weight_std);
            fill(b.w_out.data_mut(), scheme.weight_std * residual / 2.0);
        }
        w.lnf_gain.fill(1.0);
        fill(w.projection.data_mut(), scheme.projection_std);
        Ok(Self {
            shape: *shape,
            tokenizer,
            weights: w,
        })
    }

    /// Wraps externally produced weights (e.g. loaded from a checkpoint).
    pub fn from_parts(
        shape: EncoderShape,
        tokenizer: WordTokenizer,
        weights: EncoderWeights,
    ) -> Result<Self, EncoderError> {
        shape.validate()?;
        let expected = EncoderWeights::zeros(&shape);
        let same = tokenizer.len() == shape.vocab_size
            && weights.blocks.len() == shape.n_layers
            && expected
                .slices()
                .iter()
                .zip(weights.slices())
                .all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(EncoderError::InvalidShape(
                "weights do not match the declared shape".into(),
            ));
        }
        Ok(Self {
            shape,
            tokenizer,
            weights,
        })
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.shape
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    /// Mutable access for full fine-tuning.
    pub fn weights_mut(&mut self) -> &mut EncoderWeights {
        &mut self.weights
    }

    pub fn weights_checksum(&self) -> String {
        self.weights.checksum()
    }

    pub fn token_row(&self, id: usize) -> &[f64] {
        self.weights.token_table.row(id)
    }

    /// Mean of the token rows of `text`'s words.
    pub fn mean_token_row(&self, text: &str) -> Vec<f64> {
        let ids = self.tokenizer.tokenize(text);
        let mut acc = vec![0.0; self.shape.d_model];
        if ids.is_empty() {
            return acc;
        }
        for &id in &ids {
            add_into(&mut acc, self.token_row(id));
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }

    fn check(&self, seq: &TokenSequence) -> Result<(), EncoderError> {
        if seq.len() > self.shape.context_length {
            return Err(EncoderError::SequenceTooLong {
                len: seq.len(),
                context: self.shape.context_length,
            });
        }
        if seq.embeddings.cols() != self.shape.d_model {
            return Err(EncoderError::BadSequence(format!(
                "embedding width {} != d_model {}",
                seq.embeddings.cols(),
                self.shape.d_model
            )));
        }
        if seq.eot_position >= seq.len() {
            return Err(EncoderError::BadSequence(format!(
                "eot position {} outside sequence of length {}",
                seq.eot_position,
                seq.len()
            )));
        }
        Ok(())
    }

    /// Unnormalized text representation (length `d_out`).
    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>, EncoderError> {
        self.check(seq)?;
        let (out, _) = self.forward(seq);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        Ok(out)
    }

    /// Gradient of `grad_out · encode(seq)` with respect to each input row.
    pub fn encode_backward(
        &self,
        seq: &TokenSequence,
        grad_out: &[f64],
    ) -> Result<Matrix, EncoderError> {
        self.check(seq)?;
        let (_, cache) = self.forward(seq);
        Ok(self.backward(&cache, grad_out, seq.len(), None))
    }

    pub fn full_param_gradient(
        &self,
        seq: &TokenSequence,
        grad_out: &[f64],
    ) -> Result<EncoderGradient, EncoderError> {
        self.check(seq)?;
        let (_, cache) = self.forward(seq);
        let mut weights = EncoderWeights::zeros(&self.shape);
        let inputs = self.backward(&cache, grad_out, seq.len(), Some(&mut weights));
        Ok(EncoderGradient { weights, inputs })
    }

    /// Causal masking makes rows after the end-of-text token irrelevant to
    /// the readout, so the forward pass stops there.
    fn forward(&self, seq: &TokenSequence) -> (Vec<f64>, ForwardCache) {
        let len = seq.eot_position + 1;
        let d = self.shape.d_model;
        let dh = self.shape.head_dim();
        let w = &self.weights;

        let mut x = Matrix::zeros(len, d);
        for r in 0..len {
            let row = x.row_mut(r);
            for ((o, e), p) in row
                .iter_mut()
                .zip(seq.embeddings.row(r))
                .zip(w.positional.row(r))
            {
                *o = e + p;
            }
        }

        let mut blocks = Vec::with_capacity(w.blocks.len());
        for b in &w.blocks {
            let (h1, ln1) = layer_norm_rows(&x, &b.ln1_gain, &b.ln1_shift);
            let q = affine(&h1, &b.w_q, &b.b_q);
            let k = affine(&h1, &b.w_k, &b.b_k);
            let v = affine(&h1, &b.w_v, &b.b_v);
            let mut attn = Matrix::zeros(len, d);
            let mut probs = Vec::with_capacity(self.shape.n_heads);
            for head in 0..self.shape.n_heads {
                let (o, p) = tensor::scaled_dot_attention(
                    &head_columns(&q, head, dh),
                    &head_columns(&k, head, dh),
                    &head_columns(&v, head, dh),
                    AttentionMask::Causal,
                );
                write_head_columns(&mut attn, &o, head, dh);
                probs.push(p);
            }
            let mut x_mid = affine(&attn, &b.w_o, &b.b_o);
            x_mid.add_assign(&x);
            let (h2, ln2) = layer_norm_rows(&x_mid, &b.ln2_gain, &b.ln2_shift);
            let pre_act = affine(&h2, &b.w_fc, &b.b_fc);
            let mut act = pre_act.clone();
            act.data_mut().iter_mut().for_each(|v| *v = quick_gelu(*v));
            let mut x_out = affine(&act, &b.w_out, &b.b_out);
            x_out.add_assign(&x_mid);
            blocks.push(BlockCache {
                x_in: std::mem::replace(&mut x, x_out),
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                h2,
                pre_act,
                act,
            });
        }

        let (final_hidden, lnf) =
            layer_norm_cached(x.row(len - 1), &w.lnf_gain, &w.lnf_shift, LAYER_NORM_EPS);
        let out = tensor::vec_matmul(&final_hidden, &w.projection);
        (
            out,
            ForwardCache {
                blocks,
                lnf,
                final_hidden,
                len,
            },
        )
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        full_len: usize,
        mut grads: Option<&mut EncoderWeights>,
    ) -> Matrix {
        assert_eq!(grad_out.len(), self.shape.d_out, "grad_out width");
        let d = self.shape.d_model;
        let dh = self.shape.head_dim();
        let w = &self.weights;
        let len = cache.len;

        let d_hidden = tensor::matmul_vec(&w.projection, grad_out);
        let (d_last, d_gain, d_shift) = layer_norm_backward(&cache.lnf, &w.lnf_gain, &d_hidden);
        if let Some(g) = grads.as_deref_mut() {
            for (i, h) in cache.final_hidden.iter().enumerate() {
                for (j, go) in grad_out.iter().enumerate() {
                    let cur = g.projection.get(i, j);
                    g.projection.set(i, j, cur + h * go);
                }
            }
            add_into(&mut g.lnf_gain, &d_gain);
            add_into(&mut g.lnf_shift, &d_shift);
        }

        let mut dx = Matrix::zeros(len, d);
        dx.row_mut(len - 1).copy_from_slice(&d_last);

        for (bi, (b, c)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // MLP sublayer: x_out = x_mid + gelu(h2 W_fc + b_fc) W_out + b_out
            let d_act = dx.matmul_t(&b.w_out);
            let mut d_pre = d_act;
            for (g, u) in d_pre.data_mut().iter_mut().zip(c.pre_act.data()) {
                *g *= quick_gelu_grad(*u);
            }
            let d_h2 = d_pre.matmul_t(&b.w_fc);
            let mut d_mid = dx.clone();
            let mut ln2_gain_g = vec![0.0; d];
            let mut ln2_shift_g = vec![0.0; d];
            for r in 0..len {
                let (di, dg, ds) = layer_norm_backward(&c.ln2[r], &b.ln2_gain, d_h2.row(r));
                add_into(d_mid.row_mut(r), &di);
                add_into(&mut ln2_gain_g, &dg);
                add_into(&mut ln2_shift_g, &ds);
            }

            // attention sublayer: x_mid = x_in + attn W_o + b_o
            let d_attn = d_mid.matmul_t(&b.w_o);
            let mut dq = Matrix::zeros(len, d);
            let mut dk = Matrix::zeros(len, d);
            let mut dv = Matrix::zeros(len, d);
            for head in 0..self.shape.n_heads {
                let (hq, hk, hv) = tensor::scaled_dot_attention_backward(
                    &head_columns(&c.q, head, dh),
                    &head_columns(&c.k, head, dh),
                    &head_columns(&c.v, head, dh),
                    &c.probs[head],
                    &head_columns(&d_attn, head, dh),
                );
                write_head_columns(&mut dq, &hq, head, dh);
                write_head_columns(&mut dk, &hk, head, dh);
                write_head_columns(&mut dv, &hv, head, dh);
            }
            let mut d_h1 = dq.matmul_t(&b.w_q);
            d_h1.add_assign(&dk.matmul_t(&b.w_k));
            d_h1.add_assign(&dv.matmul_t(&b.w_v));
            let mut d_in = d_mid.clone();
            let mut ln1_gain_g = vec![0.0; d];
            let mut ln1_shift_g = vec![0.0; d];
            for r in 0..len {
                let (di, dg, ds) = layer_norm_backward(&c.ln1[r], &b.ln1_gain, d_h1.row(r));
                add_into(d_in.row_mut(r), &di);
                add_into(&mut ln1_gain_g, &dg);
                add_into(&mut ln1_shift_g, &ds);
            }

            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g.blocks[bi];
                gb.w_out.add_assign(&c.act.t_matmul(&dx));
                add_into(&mut gb.b_out, &dx.column_sums());
                gb.w_fc.add_assign(&c.h2.t_matmul(&d_pre));
                add_into(&mut gb.b_fc, &d_pre.column_sums());
                add_into(&mut gb.ln2_gain, &ln2_gain_g);
                add_into(&mut gb.ln2_shift, &ln2_shift_g);
                gb.w_o.add_assign(&c.attn.t_matmul(&d_mid));
                add_into(&mut gb.b_o, &d_mid.column_sums());
                gb.w_q.add_assign(&c.h1.t_matmul(&dq));
                add_into(&mut gb.b_q, &dq.column_sums());
                gb.w_k.add_assign(&c.h1.t_matmul(&dk));
                add_into(&mut gb.b_k, &dk.column_sums());
                gb.w_v.add_assign(&c.h1.t_matmul(&dv));
                add_into(&mut gb.b_v, &dv.column_sums());
                add_into(&mut gb.ln1_gain, &ln1_gain_g);
                add_into(&mut gb.ln1_shift, &ln1_shift_g);
            }
            debug_assert_eq!(c.x_in.rows(), len);
            dx = d_in;
        }

        if let Some(g) = grads.as_deref_mut() {
            for r in 0..len {
                add_into(g.positional.row_mut(r), dx.row(r));
            }
        }
        let mut inputs = Matrix::zeros(full_len, d);
        for r in 0..len {
            inputs.row_mut(r).copy_from_slice(dx.row(r));
        }
        inputs
    }
}
