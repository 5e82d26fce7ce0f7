//! Model checkpoints: the encoder files plus an f64 archive of the prompt
//! and auxiliary-network tensors with a JSON sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::container::{self, Precision};
use crate::data::{self, read_bytes, read_text, write_file, DataError, TensorEntry};
use crate::scoring::{AdapterNet, MetaNet, Mlp2, Mode, Model, ScoringConfig, ScoringError};
use crate::tensor::Matrix;
use crate::vocab::{ConceptVocabulary, PromptTemplate, SoftEmbeddingTable};

pub const PARAMS_FILE: &str = "params.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("{CHECKPOINT_FILE}: {0}")]
    Format(String),
}

/// Run provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    version: u32,
    mode: Mode,
    tau: f64,
    weight_decay: f64,
    alpha: f64,
    run: RunInfo,
    vocab: ConceptVocabulary,
    template: PromptTemplate,
    trainable: Vec<bool>,
    n_attrs: usize,
    tensors: Vec<TensorEntry>,
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("row shape")
}

fn mlp_tensors(prefix: &str, m: &Mlp2) -> Vec<(String, Matrix)> {
    vec![
        (format!("{prefix}.w1"), m.w1.clone()),
        (format!("{prefix}.b1"), row(&m.b1)),
        (format!("{prefix}.w2"), m.w2.clone()),
        (format!("{prefix}.b2"), row(&m.b2)),
    ]
}

fn tensors(model: &Model) -> Vec<(String, Matrix)> {
    let mut out = vec![
        ("theta".to_string(), model.table.theta.clone()),
        ("context".to_string(), model.context.clone()),
    ];
    out.extend(mlp_tensors("meta", &model.meta.mlp));
    out.extend(mlp_tensors("adapter", &model.adapter.mlp));
    out
}

pub fn save_checkpoint(model: &Model, run: &RunInfo, dir: &Path) -> Result<(), CheckpointError> {
    data::save_encoder(&model.encoder, dir)?;
    let named = tensors(model);
    let refs: Vec<&Matrix> = named.iter().map(|(_, m)| m).collect();
    let sidecar = Sidecar {
        version: CHECKPOINT_VERSION,
        mode: model.config.mode,
        tau: model.config.tau,
        weight_decay: model.config.weight_decay,
        alpha: model.adapter.alpha,
        run: run.clone(),
        vocab: model.vocab.clone(),
        template: model.template.clone(),
        trainable: model.table.trainable.clone(),
        n_attrs: model.table.n_attrs,
        tensors: named
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    write_file(&dir.join(PARAMS_FILE), container::encode_archive(&refs, Precision::F64))?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    write_file(&dir.join(CHECKPOINT_FILE), json)?;
    Ok(())
}

fn take_mlp(mats: &mut std::vec::IntoIter<Matrix>) -> Mlp2 {
    let mut next = || mats.next().expect("tensor count checked");
    let (w1, b1, w2, b2) = (next(), next(), next(), next());
    Mlp2 {
        w1,
        b1: b1.into_vec(),
        w2,
        b2: b2.into_vec(),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, RunInfo), CheckpointError> {
    let encoder = data::load_encoder(dir)?
        .ok_or_else(|| CheckpointError::Format(format!("no {} in {}", data::ENCODER_FILE, dir.display())))?;
    let sidecar: Sidecar = serde_json::from_str(&read_text(&dir.join(CHECKPOINT_FILE))?)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {}", sidecar.version)));
    }
    let mats = container::decode_archive(&read_bytes(&dir.join(PARAMS_FILE))?)
        .map_err(|e| CheckpointError::Format(format!("{PARAMS_FILE}: {e}")))?;

    let config = ScoringConfig {
        tau: sidecar.tau,
        weight_decay: sidecar.weight_decay,
        mode: sidecar.mode,
    };
    let mut model = Model::new(
        sidecar.vocab,
        encoder,
        sidecar.template,
        config,
        sidecar.alpha,
        sidecar.run.seed,
    )?;
    let expected = tensors(&model);
    let shapes_match = mats.len() == expected.len()
        && mats
            .iter()
            .zip(&expected)
            .zip(&sidecar.tensors)
            .all(|((m, (name, e)), t)| {
                (m.rows(), m.cols()) == (e.rows(), e.cols()) && t.name == *name && (t.rows, t.cols) == (e.rows(), e.cols())
            });
    if !shapes_match || sidecar.trainable.len() != model.table.trainable.len() || sidecar.n_attrs != model.table.n_attrs {
        return Err(CheckpointError::Format("tensor layout does not match the vocabulary and encoder".into()));
    }
    let mut it = mats.into_iter();
    model.table = SoftEmbeddingTable {
        theta: it.next().expect("theta"),
        trainable: sidecar.trainable,
        n_attrs: sidecar.n_attrs,
    };
    model.context = it.next().expect("context");
    model.meta = MetaNet { mlp: take_mlp(&mut it) };
    model.adapter = AdapterNet {
        mlp: take_mlp(&mut it),
        alpha: sidecar.alpha,
    };
    Ok((model, sidecar.run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticSpec};
    use crate::scoring::ParamSet;

    fn model(mode: Mode) -> Model {
        let spec = SyntheticSpec {
            n_attrs: 3,
            n_objs: 3,
            seen_pairs: 5,
            examples_per_pair: 2,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let cfg = ScoringConfig { mode, ..ScoringConfig::default() };
        Model::new(d.bundle.vocab, d.encoder, PromptTemplate::default(), cfg, 0.3, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in Mode::ALL {
            let mut m = model(mode);
            let mut v = m.trainable_vector();
            v.iter_mut().enumerate().for_each(|(i, x)| *x += 1e-3 * i as f64);
            m.set_trainable_vector(&v);
            m.table.trainable[1] = false;
            let dir = tempfile::tempdir().unwrap();
            let run = RunInfo { seed: 9, epoch: 4 };
            save_checkpoint(&m, &run, dir.path()).unwrap();
            let (back, r) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(r, run);
            assert_eq!(back, m, "{mode}");
            for set in ParamSet::ALL {
                assert_eq!(back.checksum(set), m.checksum(set));
            }
        }
    }

    #[test]
    fn rejects_truncated_params() {
        let m = model(Mode::Csp);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &RunInfo { seed: 0, epoch: 0 }, dir.path()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Format(_))));
    }
}
