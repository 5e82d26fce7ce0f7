//! Oracle-aligned synthetic datasets.
//!
//! Ground-truth concept rows `E*` define every image feature: a feature is
//! the normalized sum of Gaussian noise and the encoder output for the
//! prompt built from `E*` rows. The encoder's pretrained concept rows are `E*` plus a
//! perturbation, so the untrained model starts misaligned by a known
//! amount.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::container::{self, Precision};
use super::{
    save_bundle, save_encoder, write_file, AuxEmbeddings, BundleMeta, DataError, DatasetBundle,
    Example, PairEntry, Split, AUX_FILE, GROUND_TRUTH_FILE,
};
use crate::encoder::{tokenizer_for, EncoderDims, FrozenTextEncoder, TokenSequence};
use crate::tensor::{self, Matrix};
use crate::vocab::{split_mixed_vocabulary, Composition, ConceptVocabulary, PromptTemplate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HigherOrderSpec {
    pub attrs_per_class: usize,
    pub classes: usize,
}

impl Default for HigherOrderSpec {
    fn default() -> Self {
        Self {
            attrs_per_class: 2,
            classes: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub encoder: EncoderDims,
    pub seen_pairs: usize,
    pub examples_per_pair: usize,
    /// Feature noise σ, added to the raw oracle encoder output.
    pub noise: f64,
    /// Standard deviation of the ground-truth concept rows `E*`.
    pub concept_std: f64,
    /// Perturbation σ_init of the pretrained concept rows.
    pub init_noise: f64,
    pub aux_noise: f64,
    pub hash_buckets: usize,
    pub seed: u64,
    /// Fraction of attributes kept in seen pairs (mixed vocabulary).
    pub mixed_fraction: Option<f64>,
    pub higher_order: Option<HigherOrderSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_attrs: 8,
            n_objs: 8,
            encoder: EncoderDims::default(),
            seen_pairs: 30,
            examples_per_pair: 20,
            noise: 0.05,
            concept_std: 0.5,
            init_noise: 0.5,
            aux_noise: 0.05,
            hash_buckets: 4,
            seed: 0,
            mixed_fraction: None,
            higher_order: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub bundle: DatasetBundle,
    /// Frozen encoder whose concept rows carry the init perturbation.
    pub encoder: FrozenTextEncoder,
    /// `E*`: attribute rows, then object rows.
    pub ground_truth: Matrix,
    pub aux: AuxEmbeddings,
}

fn infeasible(msg: impl Into<String>) -> DataError {
    DataError::InfeasibleSpec(msg.into())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (a, o) = (self.n_attrs, self.n_objs);
        if a == 0 || o == 0 {
            return Err(infeasible("vocabulary must be nonempty"));
        }
        if self.seen_pairs < a.max(o) {
            return Err(infeasible(format!(
                "{} seen pairs cannot cover {a} attributes and {o} objects",
                self.seen_pairs
            )));
        }
        if self.seen_pairs >= a * o {
            return Err(infeasible(format!(
                "{} seen pairs leave no unseen pair among {}",
                self.seen_pairs,
                a * o
            )));
        }
        if self.examples_per_pair == 0 {
            return Err(infeasible("examples_per_pair must be >= 1"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("concept_std", self.concept_std),
            ("init_noise", self.init_noise),
            ("aux_noise", self.aux_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(infeasible(format!("{name} must be >= 0")));
            }
        }
        let attrs = self.higher_order.map_or(1, |h| h.attrs_per_class.max(1));
        let len = PromptTemplate::default().prefix_len() + attrs + 2;
        if len > self.encoder.context_length {
            return Err(infeasible(format!(
                "prompt length {len} exceeds context length {}",
                self.encoder.context_length
            )));
        }
        if let Some(f) = self.mixed_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(infeasible(format!("mixed fraction {f} outside (0, 1]")));
            }
        }
        if let Some(h) = self.higher_order {
            if h.attrs_per_class < 2 || h.attrs_per_class > a {
                return Err(infeasible(format!(
                    "{} attributes per class with {a} attributes",
                    h.attrs_per_class
                )));
            }
            let max = binomial(a, h.attrs_per_class).saturating_mul(o);
            if h.classes == 0 || h.classes > max {
                return Err(infeasible(format!(
                    "{} higher-order classes requested, at most {max} exist",
                    h.classes
                )));
            }
        }
        self.encoder.with_vocab(1).validate()?;
        Ok(())
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn fill_normal(values: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    values.iter_mut().for_each(|v| *v += dist.sample(rng));
}

/// Seeded shuffle, then a greedy pass that takes any pair covering a new
/// attribute or object, then the remaining pairs in shuffled order.
pub fn choose_seen_pairs(
    n_attrs: usize,
    n_objs: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Composition>, DataError> {
    let mut all: Vec<(usize, usize)> = (0..n_attrs)
        .flat_map(|a| (0..n_objs).map(move |o| (a, o)))
        .collect();
    all.shuffle(rng);
    let mut attrs = BTreeSet::new();
    let mut objs = BTreeSet::new();
    let mut chosen = vec![false; all.len()];
    for (i, (a, o)) in all.iter().enumerate() {
        if !attrs.contains(a) || !objs.contains(o) {
            attrs.insert(*a);
            objs.insert(*o);
            chosen[i] = true;
        }
    }
    let covering = chosen.iter().filter(|c| **c).count();
    if covering > count {
        return Err(infeasible(format!(
            "coverage needs {covering} seen pairs, only {count} requested"
        )));
    }
    let mut extra = count - covering;
    for c in chosen.iter_mut() {
        if extra == 0 {
            break;
        }
        if !*c {
            *c = true;
            extra -= 1;
        }
    }
    let mut seen: Vec<Composition> = all
        .iter()
        .zip(&chosen)
        .filter(|(_, c)| **c)
        .map(|((a, o), _)| Composition::pair(*a, *o))
        .collect();
    seen.sort();
    Ok(seen)
}

/// `[bos, prefix..., E* rows..., eot]` with fixed rows from `encoder`.
pub fn oracle_prompt(
    encoder: &FrozenTextEncoder,
    ground_truth: &Matrix,
    n_attrs: usize,
    comp: &Composition,
) -> TokenSequence {
    let tok = encoder.tokenizer();
    let template = PromptTemplate::default();
    let mut rows: Vec<Vec<f64>> = vec![encoder.token_row(tok.bos()).to_vec()];
    rows.extend(template.prefix.iter().map(|w| encoder.token_row(tok.token_id(w)).to_vec()));
    rows.extend(comp.attrs.iter().map(|&a| ground_truth.row(a).to_vec()));
    rows.push(ground_truth.row(n_attrs + comp.obj).to_vec());
    rows.push(encoder.token_row(tok.eot()).to_vec());
    TokenSequence {
        eot_position: rows.len() - 1,
        embeddings: Matrix::from_rows(&rows).expect("uniform rows"),
    }
}

/// Raw oracle encoder output plus noise, normalized and rounded to 32-bit
/// precision.
fn sample_features(
    encoder: &FrozenTextEncoder,
    ground_truth: &Matrix,
    n_attrs: usize,
    comp: &Composition,
    count: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, DataError> {
    let raw = encoder.encode(&oracle_prompt(encoder, ground_truth, n_attrs, comp))?;
    (0..count)
        .map(|_| {
            let mut v = raw.clone();
            fill_normal(&mut v, noise, rng);
            let unit = tensor::l2_normalize(&v).map_err(|e| infeasible(e.to_string()))?;
            Ok(unit.into_iter().map(|x| x as f32 as f64).collect())
        })
        .collect()
}

fn split_counts(n: usize, seen: bool) -> (usize, usize) {
    if seen {
        let train = ((0.6 * n as f64).round() as usize).max(1).min(n);
        let val = ((0.2 * n as f64).round() as usize).min(n - train);
        (train, val)
    } else {
        (0, n / 2)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let vocab = ConceptVocabulary::new(
        (0..spec.n_attrs).map(|i| format!("attr{i}")).collect(),
        (0..spec.n_objs).map(|i| format!("obj{i}")).collect(),
    )
    .expect("generated names are unique");
    let tok = tokenizer_for(&vocab.words(), spec.hash_buckets);
    let shape = spec.encoder.with_vocab(tok.len());
    let mut encoder = FrozenTextEncoder::init_frozen(spec.seed, &shape, tok)?;
    let d = shape.d_model;
    let n_concepts = spec.n_attrs + spec.n_objs;

    let mut ground_truth = Matrix::zeros(n_concepts, d);
    fill_normal(ground_truth.data_mut(), spec.concept_std, &mut stream(spec.seed, 1));

    let mut init_rng = stream(spec.seed, 2);
    let names: Vec<String> = vocab.attributes().iter().chain(vocab.objects()).cloned().collect();
    for (r, name) in names.iter().enumerate() {
        let id = encoder.tokenizer().token_id(name);
        let mut row = ground_truth.row(r).to_vec();
        fill_normal(&mut row, spec.init_noise, &mut init_rng);
        encoder.weights_mut().token_table.row_mut(id).copy_from_slice(&row);
    }

    let mut seen = choose_seen_pairs(spec.n_attrs, spec.n_objs, spec.seen_pairs, &mut stream(spec.seed, 3))?;
    let mut meta = BundleMeta::default();
    if let Some(f) = spec.mixed_fraction {
        let split = split_mixed_vocabulary(&vocab, &seen, f, spec.seed)
            .map_err(|e| infeasible(e.to_string()))?;
        seen = split.seen_pairs;
        meta.mixed_vocab = true;
        meta.held_out_attributes = (0..spec.n_attrs)
            .filter(|a| !split.seen_attrs.contains(a))
            .map(|a| vocab.attributes()[a].clone())
            .collect();
    }
    let seen_set: BTreeSet<&Composition> = seen.iter().collect();

    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    let mut examples = Vec::new();
    let mut feat_rng = stream(spec.seed, 4);
    let n = spec.examples_per_pair;
    for a in 0..spec.n_attrs {
        for o in 0..spec.n_objs {
            let comp = Composition::pair(a, o);
            let is_seen = seen_set.contains(&comp);
            pairs.push(PairEntry {
                comp: comp.clone(),
                seen: is_seen,
                phases: if is_seen {
                    vec![Split::Train, Split::Val, Split::Test]
                } else {
                    vec![Split::Val, Split::Test]
                },
            });
            let feats = sample_features(&encoder, &ground_truth, spec.n_attrs, &comp, n, spec.noise, &mut feat_rng)?;
            let (train, val) = split_counts(n, is_seen);
            for (i, f) in feats.into_iter().enumerate() {
                let split = if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
                examples.push(Example { row: rows.len(), label: comp.clone(), split });
                rows.push(f);
            }
        }
    }

    if let Some(h) = spec.higher_order {
        meta.attribute_order = Some("registry".into());
        let mut classes: Vec<Composition> = attribute_combinations(spec.n_attrs, h.attrs_per_class)
            .into_iter()
            .flat_map(|attrs| (0..spec.n_objs).map(move |obj| Composition { attrs: attrs.clone(), obj }))
            .collect();
        classes.shuffle(&mut stream(spec.seed, 7));
        classes.truncate(h.classes);
        classes.sort();
        for comp in classes {
            let feats = sample_features(&encoder, &ground_truth, spec.n_attrs, &comp, n, spec.noise, &mut feat_rng)?;
            for f in feats {
                examples.push(Example { row: rows.len(), label: comp.clone(), split: Split::Test });
                rows.push(f);
            }
            pairs.push(PairEntry { comp, seen: false, phases: vec![Split::Test] });
        }
    }

    let mut aux = AuxEmbeddings::new(d);
    let mut aux_rng = stream(spec.seed, 5);
    for (r, name) in names.iter().enumerate() {
        let mut v = ground_truth.row(r).to_vec();
        fill_normal(&mut v, spec.aux_noise, &mut aux_rng);
        aux.insert(name, v);
    }

    let bundle = DatasetBundle {
        vocab,
        features: Matrix::from_rows(&rows).map_err(|e| infeasible(e.to_string()))?,
        examples,
        pairs,
        meta,
    };
    bundle.validate()?;
    Ok(SyntheticData {
        bundle,
        encoder,
        ground_truth,
        aux,
    })
}

/// Same as [`generate_synthetic`] with higher-order test classes of
/// `attrs_per_class` attributes each.
pub fn generate_higher_order(spec: &SyntheticSpec, attrs_per_class: usize) -> Result<SyntheticData, DataError> {
    let mut s = spec.clone();
    let classes = s.higher_order.map_or(HigherOrderSpec::default().classes, |h| h.classes);
    s.higher_order = Some(HigherOrderSpec { attrs_per_class, classes });
    generate_synthetic(&s)
}

/// Ascending index combinations of size `k`.
pub fn attribute_combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Bundle files plus encoder, ground truth and aux embeddings.
pub fn save_synthetic(data: &SyntheticData, dir: &Path) -> Result<(), DataError> {
    save_bundle(&data.bundle, dir)?;
    save_encoder(&data.encoder, dir)?;
    write_file(
        &dir.join(GROUND_TRUTH_FILE),
        container::encode_matrix(&data.ground_truth, Precision::F64),
    )?;
    write_file(&dir.join(AUX_FILE), super::write_glove(&data.aux))
}
