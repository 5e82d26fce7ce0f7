//! Open-world feasibility scores from auxiliary word embeddings.
//!
//! A pair `(a, o)` scores high when `o` resembles objects already seen
//! with `a` and `a` resembles attributes already seen with `o`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EvalError, ScoreTable};
use crate::data::{AuxEmbeddings, CandidateSet};
use crate::tensor::{cosine, Matrix};
use crate::vocab::{Composition, ConceptVocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityForm {
    /// Neighbours restricted to concepts that co-occur in a seen pair.
    CoOccurrence,
    /// Neighbours drawn from every concept appearing in any seen pair.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityScores {
    /// `n_attrs x n_objs`.
    pub rho: Matrix,
    pub seen: BTreeSet<Composition>,
    /// Concept names that had no aux vector and used the mean vector.
    pub fallbacks: Vec<String>,
    /// Attributes with no seen pair, scored with the literal form.
    pub literal_attrs: Vec<usize>,
}

fn lookup(aux: &AuxEmbeddings, name: &str, allow_fallback: bool, fallbacks: &mut Vec<String>) -> Result<Vec<f64>, EvalError> {
    match aux.phrase(name) {
        Some(v) => Ok(v),
        None if allow_fallback => {
            fallbacks.push(name.to_string());
            Ok(aux.mean())
        }
        None => Err(EvalError::MissingAuxEmbedding(name.to_string())),
    }
}

fn max_cos(v: &[f64], others: &[&Vec<f64>]) -> f64 {
    others.iter().map(|o| cosine(v, o)).fold(f64::NEG_INFINITY, f64::max)
}

pub fn feasibility_scores(
    vocab: &ConceptVocabulary,
    seen_pairs: &[Composition],
    aux: &AuxEmbeddings,
    form: FeasibilityForm,
    allow_fallback: bool,
) -> Result<FeasibilityScores, EvalError> {
    let mut fallbacks = Vec::new();
    let attr_vecs = vocab
        .attributes()
        .iter()
        .map(|n| lookup(aux, n, allow_fallback, &mut fallbacks))
        .collect::<Result<Vec<_>, _>>()?;
    let obj_vecs = vocab
        .objects()
        .iter()
        .map(|n| lookup(aux, n, allow_fallback, &mut fallbacks))
        .collect::<Result<Vec<_>, _>>()?;

    let (na, no) = (vocab.n_attrs(), vocab.n_objs());
    let mut objs_of = vec![BTreeSet::new(); na];
    let mut attrs_of = vec![BTreeSet::new(); no];
    for p in seen_pairs.iter().filter(|p| p.is_pair()) {
        objs_of[p.attrs[0]].insert(p.obj);
        attrs_of[p.obj].insert(p.attrs[0]);
    }
    let all_objs: BTreeSet<usize> = objs_of.iter().flatten().copied().collect();
    let all_attrs: BTreeSet<usize> = attrs_of.iter().flatten().copied().collect();

    let mut literal_attrs = Vec::new();
    let mut rho = Matrix::zeros(na, no);
    for a in 0..na {
        let co_objs = match form {
            FeasibilityForm::CoOccurrence if !objs_of[a].is_empty() => &objs_of[a],
            FeasibilityForm::CoOccurrence => {
                literal_attrs.push(a);
                &all_objs
            }
            FeasibilityForm::Literal => &all_objs,
        };
        let neigh_objs: Vec<&Vec<f64>> = co_objs.iter().map(|&o| &obj_vecs[o]).collect();
        for o in 0..no {
            let co_attrs = match form {
                FeasibilityForm::CoOccurrence if !attrs_of[o].is_empty() => &attrs_of[o],
                _ => &all_attrs,
            };
            let neigh_attrs: Vec<&Vec<f64>> = co_attrs.iter().map(|&x| &attr_vecs[x]).collect();
            let r = (max_cos(&obj_vecs[o], &neigh_objs) + max_cos(&attr_vecs[a], &neigh_attrs)) / 2.0;
            rho.set(a, o, r);
        }
    }
    Ok(FeasibilityScores {
        rho,
        seen: seen_pairs.iter().cloned().collect(),
        fallbacks,
        literal_attrs,
    })
}

impl FeasibilityScores {
    pub fn score(&self, c: &Composition) -> f64 {
        self.rho.get(c.attrs[0], c.obj)
    }

    /// Keeps seen candidates and unseen candidates scoring above `threshold`.
    pub fn mask(&self, candidates: &CandidateSet, threshold: f64) -> Vec<bool> {
        candidates
            .comps
            .iter()
            .zip(&candidates.unseen)
            .map(|(c, &u)| !u || self.seen.contains(c) || self.score(c) > threshold)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub val_harmonic: f64,
    pub tried: usize,
}

/// Picks the threshold maximizing validation harmonic mean, preferring the
/// smaller threshold on ties. `val` must be scored over the open-world
/// candidate set.
pub fn calibrate_threshold(scores: &FeasibilityScores, val: &ScoreTable) -> Result<Calibration, EvalError> {
    let unseen_rho: Vec<f64> = val
        .candidates
        .comps
        .iter()
        .zip(&val.candidates.unseen)
        .filter(|(_, u)| **u)
        .map(|(c, _)| scores.score(c))
        .collect();
    let floor = scores.rho.data().iter().copied().fold(f64::INFINITY, f64::min);
    let mut thresholds: Vec<f64> = unseen_rho.into_iter().filter(|r| *r < 1.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, floor.next_down());

    let mut best: Option<Calibration> = None;
    for &t in &thresholds {
        let h = val.masked(&scores.mask(&val.candidates, t)).sweep()?.best_harmonic;
        if best.as_ref().is_none_or(|b| h > b.val_harmonic) {
            best = Some(Calibration {
                threshold: t,
                val_harmonic: h,
                tried: thresholds.len(),
            });
        }
    }
    Ok(best.expect("at least one threshold"))
}
