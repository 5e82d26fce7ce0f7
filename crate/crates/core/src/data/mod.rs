//! Dataset bundles: containers, loaders, writers and the synthetic
//! generator.

pub mod container;
pub mod glove;
pub mod synth;
pub mod tsv;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderShape, EncoderWeights, FrozenTextEncoder, WordTokenizer};
use crate::tensor::{self, Matrix};
use crate::vocab::{Composition, ConceptVocabulary};
use container::{ContainerError, Precision};
pub use glove::{parse_glove, write_glove, AuxEmbeddings};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format {
        file: String,
        line: Option<usize>,
        msg: String,
    },
    #[error("examples.tsv:{line}: split violation: {msg}")]
    SplitViolation { line: usize, msg: String },
    #[error("coverage error: {0}")]
    CoverageError(String),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl DataError {
    fn container(file: &str, e: ContainerError) -> Self {
        DataError::Format {
            file: file.to_string(),
            line: None,
            msg: e.to_string(),
        }
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes`, creating missing parent directories.
pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("split {s:?} is not train|val|test")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub row: usize,
    pub label: Composition,
    pub split: Split,
}

/// A registered class: its seen/unseen status and the splits it appears in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub comp: Composition,
    pub seen: bool,
    pub phases: Vec<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleMeta {
    /// Some attributes never appear in seen pairs.
    pub mixed_vocab: bool,
    pub held_out_attributes: Vec<String>,
    /// Attribute order inside multi-attribute labels.
    pub attribute_order: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    Closed,
    Open,
}

impl FromStr for World {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            _ => Err(format!("world {s:?} is not closed|open")),
        }
    }
}

/// Ordered candidate classes with their unseen flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub comps: Vec<Composition>,
    pub unseen: Vec<bool>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn index(&self) -> HashMap<&Composition, usize> {
        self.comps.iter().enumerate().map(|(i, c)| (c, i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub vocab: ConceptVocabulary,
    pub features: Matrix,
    pub examples: Vec<Example>,
    pub pairs: Vec<PairEntry>,
    pub meta: BundleMeta,
}

pub const FEATURES_FILE: &str = "features.bin";
pub const EXAMPLES_FILE: &str = "examples.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const META_FILE: &str = "meta.json";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const ENCODER_META_FILE: &str = "encoder.json";
pub const AUX_FILE: &str = "aux_embeddings.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.bin";

const UNIT_NORM_TOL: f64 = 1e-6;

impl DatasetBundle {
    pub fn seen_pairs(&self) -> Vec<Composition> {
        self.pairs.iter().filter(|p| p.seen).map(|p| p.comp.clone()).collect()
    }

    pub fn unseen_pairs(&self) -> Vec<Composition> {
        self.pairs.iter().filter(|p| !p.seen).map(|p| p.comp.clone()).collect()
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        self.features.row(row)
    }

    /// Attribute indices that appear in some seen pair.
    pub fn seen_attributes(&self) -> BTreeSet<usize> {
        self.pairs
            .iter()
            .filter(|p| p.seen)
            .flat_map(|p| p.comp.attrs.iter().copied())
            .collect()
    }

    pub fn examples_in(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// Candidates for pair classification on `split`. Closed world: seen
    /// pairs plus the unseen pairs registered for `split`. Open world:
    /// every attribute-object pair. Higher-order classes are excluded.
    pub fn candidates(&self, world: World, split: Split) -> CandidateSet {
        let seen: BTreeSet<&Composition> = self.pairs.iter().filter(|p| p.seen).map(|p| &p.comp).collect();
        let comps: Vec<Composition> = match world {
            World::Closed => self
                .pairs
                .iter()
                .filter(|p| p.comp.is_pair() && (p.seen || p.phases.contains(&split)))
                .map(|p| p.comp.clone())
                .collect(),
            World::Open => (0..self.vocab.n_attrs())
                .flat_map(|a| (0..self.vocab.n_objs()).map(move |o| Composition::pair(a, o)))
                .collect(),
        };
        let unseen = comps.iter().map(|c| !seen.contains(c)).collect();
        CandidateSet { comps, unseen }
    }

    /// Higher-order classes registered for `split`.
    pub fn higher_order_candidates(&self, split: Split) -> CandidateSet {
        let comps: Vec<Composition> = self
            .pairs
            .iter()
            .filter(|p| !p.comp.is_pair() && p.phases.contains(&split))
            .map(|p| p.comp.clone())
            .collect();
        let unseen = vec![true; comps.len()];
        CandidateSet { comps, unseen }
    }

    /// Checks everything except per-line context; `lines` maps example
    /// index to its source line (index + 2 when absent).
    fn validate_with_lines(&self, lines: Option<&[usize]>) -> Result<(), DataError> {
        let line_of = |i: usize| lines.map_or(i + 2, |l| l[i]);
        let mut status: HashMap<&Composition, bool> = HashMap::new();
        for (i, p) in self.pairs.iter().enumerate() {
            p.comp.validate(&self.vocab).map_err(|e| DataError::Format {
                file: PAIRS_FILE.into(),
                line: Some(i + 2),
                msg: e.to_string(),
            })?;
            if let Some(prev) = status.insert(&p.comp, p.seen) {
                let msg = if prev == p.seen {
                    "duplicate pair".to_string()
                } else {
                    format!("{} listed as both seen and unseen", self.vocab.describe(&p.comp))
                };
                return Err(DataError::Format {
                    file: PAIRS_FILE.into(),
                    line: Some(i + 2),
                    msg,
                });
            }
        }
        for (i, e) in self.examples.iter().enumerate() {
            if e.row >= self.features.rows() {
                return Err(DataError::Format {
                    file: EXAMPLES_FILE.into(),
                    line: Some(line_of(i)),
                    msg: format!("row {} outside {} feature rows", e.row, self.features.rows()),
                });
            }
            let name = self.vocab.describe(&e.label);
            match status.get(&e.label) {
                None => {
                    return Err(DataError::Format {
                        file: EXAMPLES_FILE.into(),
                        line: Some(line_of(i)),
                        msg: format!("label {name:?} not in pairs.tsv"),
                    })
                }
                Some(false) if e.split == Split::Train => {
                    return Err(DataError::SplitViolation {
                        line: line_of(i),
                        msg: format!("train example labeled with unseen pair {name:?}"),
                    })
                }
                _ => {}
            }
        }
        if !self.meta.mixed_vocab {
            let seen = self.pairs.iter().filter(|p| p.seen);
            let attrs: BTreeSet<usize> = seen.clone().flat_map(|p| p.comp.attrs.iter().copied()).collect();
            let objs: BTreeSet<usize> = seen.map(|p| p.comp.obj).collect();
            if let Some(a) = (0..self.vocab.n_attrs()).find(|a| !attrs.contains(a)) {
                return Err(DataError::CoverageError(format!(
                    "attribute {:?} appears in no seen pair",
                    self.vocab.attributes()[a]
                )));
            }
            if let Some(o) = (0..self.vocab.n_objs()).find(|o| !objs.contains(o)) {
                return Err(DataError::CoverageError(format!(
                    "object {:?} appears in no seen pair",
                    self.vocab.objects()[o]
                )));
            }
        }
        for r in 0..self.features.rows() {
            let n = tensor::norm(self.features.row(r));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(DataError::Format {
                    file: FEATURES_FILE.into(),
                    line: None,
                    msg: format!("row {r} has norm {n}"),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.validate_with_lines(None)
    }
}

/// Renormalizes rows whose norm is off by more than the tolerance; zero
/// rows are an error.
fn renormalize(features: &mut Matrix) -> Result<usize, DataError> {
    let mut fixed = 0;
    for r in 0..features.rows() {
        let n = tensor::norm(features.row(r));
        if (n - 1.0).abs() <= UNIT_NORM_TOL {
            continue;
        }
        let unit = tensor::l2_normalize(features.row(r)).map_err(|e| DataError::Format {
            file: FEATURES_FILE.into(),
            line: None,
            msg: format!("row {r}: {e}"),
        })?;
        features.row_mut(r).copy_from_slice(&unit);
        fixed += 1;
    }
    if fixed > 0 {
        log::info!("renormalized {fixed} feature rows");
    }
    Ok(fixed)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, DataError> {
    let vocab = tsv::parse_vocab(&read_text(&dir.join(VOCAB_FILE))?)?;
    let pairs = tsv::parse_pairs(&read_text(&dir.join(PAIRS_FILE))?, &vocab)?;
    let examples = tsv::parse_examples(&read_text(&dir.join(EXAMPLES_FILE))?, &vocab)?;
    let (mut features, _) = container::decode_matrix(&read_bytes(&dir.join(FEATURES_FILE))?)
        .map_err(|e| DataError::container(FEATURES_FILE, e))?;
    renormalize(&mut features)?;
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| DataError::Format {
            file: META_FILE.into(),
            line: Some(e.line()),
            msg: e.to_string(),
        })?
    } else {
        BundleMeta::default()
    };
    let pair_lines: Vec<usize> = pairs.iter().map(|(l, _)| *l).collect();
    let lines: Vec<usize> = examples.iter().map(|(l, _)| *l).collect();
    let bundle = DatasetBundle {
        vocab,
        features,
        examples: examples.into_iter().map(|(_, e)| e).collect(),
        pairs: pairs.into_iter().map(|(_, p)| p).collect(),
        meta,
    };
    bundle.validate_with_lines(Some(&lines)).map_err(|e| match e {
        DataError::Format { file, line: Some(l), msg } if file == PAIRS_FILE => DataError::Format {
            file,
            line: Some(pair_lines[l - 2]),
            msg,
        },
        e => e,
    })?;
    Ok(bundle)
}

/// Writes the four bundle files plus meta.json.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(
        &dir.join(FEATURES_FILE),
        container::encode_matrix(&bundle.features, Precision::F32),
    )?;
    write_file(&dir.join(VOCAB_FILE), tsv::write_vocab(&bundle.vocab))?;
    write_file(&dir.join(PAIRS_FILE), tsv::write_pairs(&bundle.vocab, &bundle.pairs))?;
    write_file(
        &dir.join(EXAMPLES_FILE),
        tsv::write_examples(&bundle.vocab, &bundle.examples),
    )?;
    let meta = serde_json::to_string_pretty(&bundle.meta).expect("meta serializes");
    write_file(&dir.join(META_FILE), meta + "\n")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderSidecar {
    shape: EncoderShape,
    tokenizer: WordTokenizer,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Tensors as matrices; vectors become single rows.
pub(crate) fn encoder_matrices(w: &EncoderWeights, shape: &EncoderShape) -> Vec<(String, Matrix)> {
    let templ = EncoderWeights::zeros(shape);
    let shapes = tensor_shapes(&templ);
    EncoderWeights::tensor_names(shape.n_layers)
        .into_iter()
        .zip(w.slices())
        .zip(shapes)
        .map(|((name, s), (r, c))| (name, Matrix::from_vec(r, c, s.to_vec()).expect("shape")))
        .collect()
}

fn tensor_shapes(w: &EncoderWeights) -> Vec<(usize, usize)> {
    let mut out = vec![
        (w.token_table.rows(), w.token_table.cols()),
        (w.positional.rows(), w.positional.cols()),
    ];
    for b in &w.blocks {
        let m = |x: &Matrix| (x.rows(), x.cols());
        let v = |x: &Vec<f64>| (1, x.len());
        out.extend([
            v(&b.ln1_gain),
            v(&b.ln1_shift),
            m(&b.w_q),
            v(&b.b_q),
            m(&b.w_k),
            v(&b.b_k),
            m(&b.w_v),
            v(&b.b_v),
            m(&b.w_o),
            v(&b.b_o),
            v(&b.ln2_gain),
            v(&b.ln2_shift),
            m(&b.w_fc),
            v(&b.b_fc),
            m(&b.w_out),
            v(&b.b_out),
        ]);
    }
    out.extend([(1, w.lnf_gain.len()), (1, w.lnf_shift.len())]);
    out.push((w.projection.rows(), w.projection.cols()));
    out
}

/// Encoder as an f64 archive plus a JSON sidecar with shape and tokenizer.
pub fn encode_encoder(enc: &FrozenTextEncoder) -> (Vec<u8>, String) {
    let mats = encoder_matrices(enc.weights(), enc.shape());
    let refs: Vec<&Matrix> = mats.iter().map(|(_, m)| m).collect();
    let sidecar = EncoderSidecar {
        shape: *enc.shape(),
        tokenizer: enc.tokenizer().clone(),
        tensors: mats
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    (
        container::encode_archive(&refs, Precision::F64),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n",
    )
}

pub fn decode_encoder(bin: &[u8], json: &str) -> Result<FrozenTextEncoder, DataError> {
    let sidecar: EncoderSidecar = serde_json::from_str(json).map_err(|e| DataError::Format {
        file: ENCODER_META_FILE.into(),
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    sidecar.shape.validate()?;
    let mats = container::decode_archive(bin).map_err(|e| DataError::container(ENCODER_FILE, e))?;
    let stored: usize = mats.iter().map(|m| m.data().len()).sum();
    if sidecar.shape.weight_count() != Some(stored) {
        return Err(DataError::Format {
            file: ENCODER_FILE.into(),
            line: None,
            msg: format!("{stored} weights do not fit the declared shape"),
        });
    }
    let mut weights = EncoderWeights::zeros(&sidecar.shape);
    let expected = tensor_shapes(&weights);
    if mats.len() != expected.len() {
        return Err(DataError::Format {
            file: ENCODER_FILE.into(),
            line: None,
            msg: format!("{} tensors, expected {}", mats.len(), expected.len()),
        });
    }
    for (i, (m, (r, c))) in mats.iter().zip(&expected).enumerate() {
        if (m.rows(), m.cols()) != (*r, *c) {
            return Err(DataError::Format {
                file: ENCODER_FILE.into(),
                line: None,
                msg: format!("tensor {i} is {}x{}, expected {r}x{c}", m.rows(), m.cols()),
            });
        }
    }
    for (dst, m) in weights.slices_mut().into_iter().zip(&mats) {
        dst.copy_from_slice(m.data());
    }
    Ok(FrozenTextEncoder::from_parts(sidecar.shape, sidecar.tokenizer, weights)?)
}

pub fn save_encoder(enc: &FrozenTextEncoder, dir: &Path) -> Result<(), DataError> {
    let (bin, json) = encode_encoder(enc);
    write_file(&dir.join(ENCODER_FILE), bin)?;
    write_file(&dir.join(ENCODER_META_FILE), json)
}

/// The bundle's frozen encoder, if it ships one.
pub fn load_encoder(dir: &Path) -> Result<Option<FrozenTextEncoder>, DataError> {
    let bin = dir.join(ENCODER_FILE);
    if !bin.exists() {
        return Ok(None);
    }
    let json = read_text(&dir.join(ENCODER_META_FILE))?;
    decode_encoder(&read_bytes(&bin)?, &json).map(Some)
}

pub fn load_aux(path: &Path) -> Result<AuxEmbeddings, DataError> {
    parse_glove(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> DatasetBundle {
        let vocab = ConceptVocabulary::new(
            vec!["young".into(), "old".into()],
            vec!["tiger".into(), "cat".into()],
        )
        .unwrap();
        let all = [Split::Train, Split::Val, Split::Test];
        let pairs = vec![
            PairEntry { comp: Composition::pair(0, 0), seen: true, phases: all.to_vec() },
            PairEntry { comp: Composition::pair(1, 1), seen: true, phases: all.to_vec() },
            PairEntry { comp: Composition::pair(0, 1), seen: false, phases: vec![Split::Val, Split::Test] },
        ];
        let s = 0.5f64.sqrt();
        let features = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![s, s],
        ])
        .unwrap();
        let examples = vec![
            Example { row: 0, label: Composition::pair(0, 0), split: Split::Train },
            Example { row: 1, label: Composition::pair(1, 1), split: Split::Val },
            Example { row: 2, label: Composition::pair(0, 1), split: Split::Test },
        ];
        DatasetBundle { vocab, features, examples, pairs, meta: BundleMeta::default() }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        // f32-representable values survive the 32-bit container exactly.
        for v in b.features.data_mut() {
            *v = *v as f32 as f64;
        }
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn train_example_with_unseen_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.examples[2].split = Split::Train;
        save_bundle(&b, dir.path()).unwrap();
        match load_bundle(dir.path()) {
            Err(DataError::SplitViolation { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("young cat"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coverage_and_disjointness() {
        let mut b = tiny_bundle();
        b.pairs[1].seen = false;
        b.examples[1].split = Split::Val;
        assert!(matches!(b.validate(), Err(DataError::CoverageError(_))));
        b.meta.mixed_vocab = true;
        b.validate().unwrap();

        let mut b = tiny_bundle();
        b.pairs.push(PairEntry { comp: Composition::pair(0, 0), seen: false, phases: vec![] });
        assert!(b.validate().unwrap_err().to_string().contains("both seen and unseen"));
    }

    #[test]
    fn off_norm_rows_are_renormalized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.features.row_mut(0).copy_from_slice(&[2.0, 0.0]);
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.features.row(0), &[1.0, 0.0]);
        assert!(b.validate().is_err());
    }

    #[test]
    fn candidate_sets() {
        let b = tiny_bundle();
        let closed = b.candidates(World::Closed, Split::Test);
        assert_eq!(closed.len(), 3);
        assert_eq!(closed.unseen, vec![false, false, true]);
        let open = b.candidates(World::Open, Split::Test);
        assert_eq!(open.len(), 4);
        assert_eq!(open.unseen.iter().filter(|u| **u).count(), 2);
    }

    #[test]
    fn encoder_files_round_trip() {
        let tok = WordTokenizer::new(["a", "photo", "of"], 2);
        let shape = EncoderShape::desk(tok.len());
        let enc = FrozenTextEncoder::init_frozen(5, &shape, tok).unwrap();
        let (bin, json) = encode_encoder(&enc);
        let back = decode_encoder(&bin, &json).unwrap();
        assert_eq!(back, enc);
        assert!(decode_encoder(&bin[..bin.len() - 8], &json).is_err());
    }
}
