//! Concept vocabulary, the learnable soft-embedding table and prompt
//! assembly.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::tokenizer::split_words;
use crate::encoder::{FrozenTextEncoder, TokenSequence, WordTokenizer};
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("vocabulary has no {0}")]
    EmptyVocabulary(&'static str),
    #[error("duplicate {namespace} name {name:?}")]
    DuplicateName { namespace: &'static str, name: String },
    #[error("unknown concept: {0}")]
    UnknownConcept(String),
    #[error("prompt of length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("fraction {0} selects no attributes")]
    InvalidFraction(f64),
    #[error("no seen pairs remain after filtering")]
    EmptySeenSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct ConceptVocabulary {
    attributes: Vec<String>,
    objects: Vec<String>,
    attr_index: HashMap<String, usize>,
    obj_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    attributes: Vec<String>,
    objects: Vec<String>,
}

impl From<VocabRepr> for ConceptVocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = |v: &[String]| v.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            attr_index: index(&r.attributes),
            obj_index: index(&r.objects),
            attributes: r.attributes,
            objects: r.objects,
        }
    }
}

impl From<ConceptVocabulary> for VocabRepr {
    fn from(v: ConceptVocabulary) -> Self {
        Self {
            attributes: v.attributes,
            objects: v.objects,
        }
    }
}

fn build_index(
    names: &[String],
    namespace: &'static str,
) -> Result<HashMap<String, usize>, VocabError> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if index.insert(n.clone(), i).is_some() {
            return Err(VocabError::DuplicateName {
                namespace,
                name: n.clone(),
            });
        }
    }
    Ok(index)
}

impl ConceptVocabulary {
    pub fn new(attributes: Vec<String>, objects: Vec<String>) -> Result<Self, VocabError> {
        if attributes.is_empty() {
            return Err(VocabError::EmptyVocabulary("attributes"));
        }
        if objects.is_empty() {
            return Err(VocabError::EmptyVocabulary("objects"));
        }
        Ok(Self {
            attr_index: build_index(&attributes, "attribute")?,
            obj_index: build_index(&objects, "object")?,
            attributes,
            objects,
        })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn attr_id(&self, name: &str) -> Option<usize> {
        self.attr_index.get(name).copied()
    }

    pub fn obj_id(&self, name: &str) -> Option<usize> {
        self.obj_index.get(name).copied()
    }

    /// Every word of every concept name, in vocabulary order.
    pub fn words(&self) -> Vec<String> {
        self.attributes
            .iter()
            .chain(&self.objects)
            .flat_map(|n| split_words(n))
            .collect()
    }

    /// Human-readable form, e.g. `"old white tiger"`.
    pub fn describe(&self, comp: &Composition) -> String {
        let mut parts: Vec<&str> = comp.attrs.iter().map(|&a| self.attributes[a].as_str()).collect();
        parts.push(&self.objects[comp.obj]);
        parts.join(" ")
    }
}

/// A class label: one or more attributes and exactly one object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Composition {
    pub attrs: Vec<usize>,
    pub obj: usize,
}

impl Composition {
    pub fn pair(attr: usize, obj: usize) -> Self {
        Self {
            attrs: vec![attr],
            obj,
        }
    }

    pub fn is_pair(&self) -> bool {
        self.attrs.len() == 1
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut s: Vec<Slot> = self.attrs.iter().map(|&a| Slot::Attr(a)).collect();
        s.push(Slot::Obj(self.obj));
        s
    }

    pub fn validate(&self, vocab: &ConceptVocabulary) -> Result<(), VocabError> {
        if self.attrs.is_empty() {
            return Err(VocabError::UnknownConcept("composition without attribute".into()));
        }
        if let Some(a) = self.attrs.iter().find(|&&a| a >= vocab.n_attrs()) {
            return Err(VocabError::UnknownConcept(format!("attribute index {a}")));
        }
        if self.obj >= vocab.n_objs() {
            return Err(VocabError::UnknownConcept(format!("object index {}", self.obj)));
        }
        Ok(())
    }
}

/// Learnable concept rows `θ = [θ_A; θ_O]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftEmbeddingTable {
    pub theta: Matrix,
    pub trainable: Vec<bool>,
    pub n_attrs: usize,
}

impl SoftEmbeddingTable {
    pub fn attr_row(&self, attr: usize) -> usize {
        attr
    }

    pub fn obj_row(&self, obj: usize) -> usize {
        self.n_attrs + obj
    }

    pub fn is_attr_row(&self, row: usize) -> bool {
        row < self.n_attrs
    }

    pub fn trainable_rows(&self) -> Vec<usize> {
        (0..self.theta.rows()).filter(|&r| self.trainable[r]).collect()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable_rows().len() * self.theta.cols()
    }

    /// Flags attribute rows outside `keep` as frozen.
    pub fn freeze_attributes(&mut self, keep: &BTreeSet<usize>) {
        for a in 0..self.n_attrs {
            if !keep.contains(&a) {
                self.trainable[a] = false;
            }
        }
    }

    pub fn checksum(&self) -> String {
        checksum_rows(&self.theta, |_| true)
    }

    /// Digest over frozen rows only.
    pub fn frozen_checksum(&self) -> String {
        checksum_rows(&self.theta, |r| !self.trainable[r])
    }
}

fn checksum_rows(m: &Matrix, keep: impl Fn(usize) -> bool) -> String {
    let mut h = Sha256::new();
    for r in (0..m.rows()).filter(|&r| keep(r)) {
        h.update((r as u64).to_le_bytes());
        for v in m.row(r) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn mean_rows(table: &Matrix, ids: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; table.cols()];
    for &id in ids {
        for (a, v) in acc.iter_mut().zip(table.row(id)) {
            *a += v;
        }
    }
    let n = ids.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Each concept row is the mean of its words' pretrained token rows.
pub fn init_soft_embeddings(
    vocab: &ConceptVocabulary,
    token_table: &Matrix,
    tokenizer: &WordTokenizer,
) -> Result<SoftEmbeddingTable, VocabError> {
    let names: Vec<&String> = vocab.attributes.iter().chain(&vocab.objects).collect();
    if names.is_empty() {
        return Err(VocabError::EmptyVocabulary("concepts"));
    }
    let mut theta = Matrix::zeros(names.len(), token_table.cols());
    for (r, name) in names.iter().enumerate() {
        let ids = tokenizer.tokenize(name);
        if ids.is_empty() {
            return Err(VocabError::UnknownConcept(format!("{name:?} has no tokens")));
        }
        theta.row_mut(r).copy_from_slice(&mean_rows(token_table, &ids));
    }
    Ok(SoftEmbeddingTable {
        trainable: vec![true; theta.rows()],
        theta,
        n_attrs: vocab.n_attrs(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Words between the begin sentinel and the concept slots.
    pub prefix: Vec<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: ["a", "photo", "of"].map(String::from).to_vec(),
        }
    }
}

impl PromptTemplate {
    /// Begin sentinel plus prefix words.
    pub fn prefix_len(&self) -> usize {
        1 + self.prefix.len()
    }

    pub fn render(&self, concepts: &str) -> String {
        format!("{} {}", self.prefix.join(" "), concepts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Csp,
    Coop,
    Zeroshot,
}

/// One concept position in a prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Attr(usize),
    Obj(usize),
    /// Fixed pretrained word(s), e.g. the generic "object" token.
    Word(String),
}

/// Where an assembled row came from, for gradient routing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowSource {
    Token(usize),
    /// Mean of several pretrained token rows.
    MeanTokens(Vec<usize>),
    Theta(usize),
    Context(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuiltPrompt {
    pub seq: TokenSequence,
    pub sources: Vec<RowSource>,
}

impl BuiltPrompt {
    /// Positions holding learnable rows (θ or context).
    pub fn trainable_positions(&self) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, RowSource::Theta(_) | RowSource::Context(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assemble the embedding rows for `slots`.
///
/// In csp mode concept slots read θ rows, except rows flagged frozen, which
/// read the averaged pretrained rows. Coop and zeroshot expand each concept
/// into its pretrained word tokens; coop replaces the prefix words with the
/// `context` rows.
pub fn build_prompt(
    template: &PromptTemplate,
    slots: &[Slot],
    vocab: &ConceptVocabulary,
    table: &SoftEmbeddingTable,
    context: &Matrix,
    encoder: &FrozenTextEncoder,
    mode: PromptMode,
) -> Result<BuiltPrompt, VocabError> {
    let tok = encoder.tokenizer();
    let mut sources = vec![RowSource::Token(tok.bos())];
    match mode {
        PromptMode::Coop => sources.extend((0..context.rows()).map(RowSource::Context)),
        PromptMode::Csp | PromptMode::Zeroshot => {
            sources.extend(template.prefix.iter().map(|w| RowSource::Token(tok.token_id(w))))
        }
    }
    for slot in slots {
        let (name, row) = match slot {
            Slot::Attr(a) => {
                let name = vocab
                    .attributes
                    .get(*a)
                    .ok_or_else(|| VocabError::UnknownConcept(format!("attribute index {a}")))?;
                (name.as_str(), Some(table.attr_row(*a)))
            }
            Slot::Obj(o) => {
                let name = vocab
                    .objects
                    .get(*o)
                    .ok_or_else(|| VocabError::UnknownConcept(format!("object index {o}")))?;
                (name.as_str(), Some(table.obj_row(*o)))
            }
            Slot::Word(w) => (w.as_str(), None),
        };
        let ids = tok.tokenize(name);
        if ids.is_empty() {
            return Err(VocabError::UnknownConcept(format!("{name:?} has no tokens")));
        }
        match (mode, row) {
            (PromptMode::Csp, Some(r)) if table.trainable[r] => sources.push(RowSource::Theta(r)),
            (PromptMode::Csp, _) if ids.len() > 1 => sources.push(RowSource::MeanTokens(ids)),
            _ => sources.extend(ids.into_iter().map(RowSource::Token)),
        }
    }
    sources.push(RowSource::Token(tok.eot()));

    let context_length = encoder.shape().context_length;
    if sources.len() > context_length {
        return Err(VocabError::SequenceTooLong {
            len: sources.len(),
            context: context_length,
        });
    }
    let token_table = &encoder.weights().token_table;
    let mut embeddings = Matrix::zeros(sources.len(), token_table.cols());
    for (i, s) in sources.iter().enumerate() {
        let row = embeddings.row_mut(i);
        match s {
            RowSource::Token(id) => row.copy_from_slice(token_table.row(*id)),
            RowSource::MeanTokens(ids) => row.copy_from_slice(&mean_rows(token_table, ids)),
            RowSource::Theta(r) => row.copy_from_slice(table.theta.row(*r)),
            RowSource::Context(c) => row.copy_from_slice(context.row(*c)),
        }
    }
    Ok(BuiltPrompt {
        seq: TokenSequence {
            eot_position: sources.len() - 1,
            embeddings,
        },
        sources,
    })
}

/// Context rows for coop, copied from the pretrained prefix word rows.
pub fn init_context(template: &PromptTemplate, encoder: &FrozenTextEncoder) -> Matrix {
    let tok = encoder.tokenizer();
    let ids: Vec<usize> = template.prefix.iter().map(|w| tok.token_id(w)).collect();
    let d = encoder.shape().d_model;
    let mut m = Matrix::zeros(ids.len(), d);
    for (i, id) in ids.iter().enumerate() {
        m.row_mut(i).copy_from_slice(encoder.token_row(*id));
    }
    m
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSplit {
    pub seen_attrs: BTreeSet<usize>,
    pub seen_pairs: Vec<Composition>,
}

/// Drop every pair whose attributes are not all in `seen_attrs`.
pub fn filter_seen_pairs(pairs: &[Composition], seen_attrs: &BTreeSet<usize>) -> Vec<Composition> {
    pairs
        .iter()
        .filter(|c| c.attrs.iter().all(|a| seen_attrs.contains(a)))
        .cloned()
        .collect()
}

/// Select `⌈fraction·|A|⌉` attributes at random and keep only the seen pairs
/// they appear in.
pub fn split_mixed_vocabulary(
    vocab: &ConceptVocabulary,
    seen_pairs: &[Composition],
    fraction: f64,
    seed: u64,
) -> Result<MixedSplit, VocabError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(VocabError::InvalidFraction(fraction));
    }
    let n = (fraction * vocab.n_attrs() as f64).ceil() as usize;
    if n == 0 {
        return Err(VocabError::InvalidFraction(fraction));
    }
    let mut order: Vec<usize> = (0..vocab.n_attrs()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let seen_attrs: BTreeSet<usize> = order.into_iter().take(n).collect();
    let kept = filter_seen_pairs(seen_pairs, &seen_attrs);
    if kept.is_empty() {
        return Err(VocabError::EmptySeenSet);
    }
    Ok(MixedSplit {
        seen_attrs,
        seen_pairs: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderShape;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn setup() -> (ConceptVocabulary, FrozenTextEncoder) {
        let vocab = ConceptVocabulary::new(
            names(&["young", "old", "white", "faux fur"]),
            names(&["tiger", "cat"]),
        )
        .unwrap();
        let mut words = names(&["a", "photo", "of", "object"]);
        words.extend(vocab.words());
        let tok = WordTokenizer::new(words, 4);
        let shape = EncoderShape::desk(tok.len());
        let enc = FrozenTextEncoder::init_frozen(1, &shape, tok).unwrap();
        (vocab, enc)
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empties() {
        assert!(matches!(
            ConceptVocabulary::new(names(&["a", "a"]), names(&["x"])),
            Err(VocabError::DuplicateName { .. })
        ));
        assert!(ConceptVocabulary::new(vec![], names(&["x"])).is_err());
        assert!(ConceptVocabulary::new(names(&["a"]), vec![]).is_err());
    }

    #[test]
    fn single_token_rows_copy_and_multi_token_rows_average() {
        let tok = WordTokenizer::new(["tiger", "faux", "fur"], 0);
        let mut table = Matrix::zeros(tok.len(), 2);
        table.row_mut(tok.token_id("tiger")).copy_from_slice(&[3.0, -1.0]);
        table.row_mut(tok.token_id("faux")).copy_from_slice(&[1.0, 0.0]);
        table.row_mut(tok.token_id("fur")).copy_from_slice(&[0.0, 1.0]);
        let vocab = ConceptVocabulary::new(names(&["faux fur"]), names(&["tiger"])).unwrap();
        let soft = init_soft_embeddings(&vocab, &table, &tok).unwrap();
        assert_eq!(soft.theta.row(0), &[0.5, 0.5]);
        assert_eq!(soft.theta.row(1), &[3.0, -1.0]);
        assert!(soft.trainable.iter().all(|t| *t));
    }

    #[test]
    fn csp_prompt_layout() {
        let (vocab, enc) = setup();
        let table = init_soft_embeddings(&vocab, &enc.weights().token_table, enc.tokenizer()).unwrap();
        let ctx = init_context(&PromptTemplate::default(), &enc);
        let t = PromptTemplate::default();
        let p = build_prompt(&t, &Composition::pair(0, 0).slots(), &vocab, &table, &ctx, &enc, PromptMode::Csp)
            .unwrap();
        assert_eq!(p.seq.len(), 7);
        assert_eq!(p.seq.eot_position, 6);
        assert_eq!(p.trainable_positions(), vec![4, 5]);

        let z = build_prompt(&t, &Composition::pair(0, 0).slots(), &vocab, &table, &ctx, &enc, PromptMode::Zeroshot)
            .unwrap();
        assert!(z.trainable_positions().is_empty());

        let aao = Composition { attrs: vec![1, 2], obj: 0 };
        let p = build_prompt(&t, &aao.slots(), &vocab, &table, &ctx, &enc, PromptMode::Csp).unwrap();
        assert_eq!(p.seq.len(), 8);
        assert_eq!(p.trainable_positions(), vec![4, 5, 6]);

        let c = build_prompt(&t, &Composition::pair(3, 1).slots(), &vocab, &table, &ctx, &enc, PromptMode::Coop)
            .unwrap();
        // bos, 3 context rows, "faux", "fur", "cat", eot
        assert_eq!(c.seq.len(), 8);
        assert_eq!(c.trainable_positions(), vec![1, 2, 3]);
    }

    #[test]
    fn frozen_rows_read_pretrained_values() {
        let (vocab, enc) = setup();
        let mut table = init_soft_embeddings(&vocab, &enc.weights().token_table, enc.tokenizer()).unwrap();
        table.theta.row_mut(3).iter_mut().for_each(|v| *v += 1.0);
        table.freeze_attributes(&BTreeSet::from([0, 1, 2]));
        let ctx = init_context(&PromptTemplate::default(), &enc);
        let p = build_prompt(
            &PromptTemplate::default(),
            &Composition::pair(3, 0).slots(),
            &vocab,
            &table,
            &ctx,
            &enc,
            PromptMode::Csp,
        )
        .unwrap();
        assert_eq!(p.seq.embeddings.row(4), enc.mean_token_row("faux fur").as_slice());
        assert_eq!(p.trainable_positions(), vec![5]);
    }

    #[test]
    fn build_prompt_errors() {
        let (vocab, enc) = setup();
        let table = init_soft_embeddings(&vocab, &enc.weights().token_table, enc.tokenizer()).unwrap();
        let ctx = init_context(&PromptTemplate::default(), &enc);
        let t = PromptTemplate::default();
        assert!(matches!(
            build_prompt(&t, &Composition::pair(9, 0).slots(), &vocab, &table, &ctx, &enc, PromptMode::Csp),
            Err(VocabError::UnknownConcept(_))
        ));
        let many = Composition { attrs: vec![0; 12], obj: 0 };
        assert!(matches!(
            build_prompt(&t, &many.slots(), &vocab, &table, &ctx, &enc, PromptMode::Csp),
            Err(VocabError::SequenceTooLong { len: 18, context: 16 })
        ));
    }

    #[test]
    fn every_open_world_pair_builds() {
        let (vocab, enc) = setup();
        let table = init_soft_embeddings(&vocab, &enc.weights().token_table, enc.tokenizer()).unwrap();
        let ctx = init_context(&PromptTemplate::default(), &enc);
        for a in 0..vocab.n_attrs() {
            for o in 0..vocab.n_objs() {
                for mode in [PromptMode::Csp, PromptMode::Coop, PromptMode::Zeroshot] {
                    build_prompt(
                        &PromptTemplate::default(),
                        &Composition::pair(a, o).slots(),
                        &vocab,
                        &table,
                        &ctx,
                        &enc,
                        mode,
                    )
                    .unwrap();
                }
            }
        }
    }

    #[test]
    fn mixed_split_filters_pairs() {
        let vocab = ConceptVocabulary::new(names(&["a1", "a2", "a3", "a4"]), names(&["o1"])).unwrap();
        let pairs = vec![Composition::pair(0, 0), Composition::pair(3, 0)];
        assert_eq!(
            filter_seen_pairs(&pairs, &BTreeSet::from([0, 1, 2])),
            vec![Composition::pair(0, 0)]
        );
        let full = split_mixed_vocabulary(&vocab, &pairs, 1.0, 3).unwrap();
        assert_eq!(full.seen_pairs, pairs);
        assert_eq!(full.seen_attrs.len(), 4);
        let quarter = split_mixed_vocabulary(&vocab, &pairs, 0.25, 3);
        match quarter {
            Ok(s) => assert_eq!(s.seen_attrs.len(), 1),
            Err(e) => assert_eq!(e, VocabError::EmptySeenSet),
        }
        assert!(split_mixed_vocabulary(&vocab, &pairs, 0.0, 3).is_err());
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let (vocab, _) = setup();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: ConceptVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.attr_id("old"), Some(1));
    }
}
