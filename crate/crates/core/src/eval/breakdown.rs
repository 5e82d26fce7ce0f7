//! Diagnostic evaluations: primitive-concept accuracy, accuracy by
//! novelty bucket and higher-order compositions.

use serde::{Deserialize, Serialize};

use super::{score_split, EvalError};
use crate::data::{DatasetBundle, Split, World};
use crate::scoring::{predict_index, Model};
use crate::vocab::Slot;

/// Lowest-index argmax.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub attr_seen: f64,
    pub attr_unseen: f64,
    pub obj_seen: f64,
    pub obj_unseen: f64,
    pub n_seen: usize,
    pub n_unseen: usize,
}

fn frac(c: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

/// Classifies attributes with `"a photo of <attr> object"` prompts and
/// objects with `"a photo of <obj>"` prompts.
pub fn decomposition_eval(bundle: &DatasetBundle, model: &Model, split: Split) -> Result<DecompositionReport, EvalError> {
    let seen = bundle.seen_pairs();
    let examples: Vec<_> = bundle.examples_in(split).filter(|e| e.label.is_pair()).collect();
    if examples.is_empty() {
        return Err(EvalError::NoExamples(split.name().into()));
    }
    let feats: Vec<&[f64]> = examples.iter().map(|e| bundle.feature(e.row)).collect();
    let attr_prompts: Vec<Vec<Slot>> = (0..bundle.vocab.n_attrs())
        .map(|a| vec![Slot::Attr(a), Slot::Word("object".into())])
        .collect();
    let obj_prompts: Vec<Vec<Slot>> = (0..bundle.vocab.n_objs()).map(|o| vec![Slot::Obj(o)]).collect();
    let attr_logits = model.slot_logits(&feats, &attr_prompts)?;
    let obj_logits = model.slot_logits(&feats, &obj_prompts)?;

    let mut counts = [[0usize; 2]; 2];
    let mut totals = [0usize; 2];
    for (i, e) in examples.iter().enumerate() {
        let g = usize::from(!seen.contains(&e.label));
        totals[g] += 1;
        counts[g][0] += usize::from(argmax(&attr_logits[i]) == e.label.attrs[0]);
        counts[g][1] += usize::from(argmax(&obj_logits[i]) == e.label.obj);
    }
    Ok(DecompositionReport {
        attr_seen: frac(counts[0][0], totals[0]),
        attr_unseen: frac(counts[1][0], totals[1]),
        obj_seen: frac(counts[0][1], totals[0]),
        obj_unseen: frac(counts[1][1], totals[1]),
        n_seen: totals[0],
        n_unseen: totals[1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub n_classes: usize,
    pub n_examples: usize,
    /// `None` when the bucket has no test examples.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bias: f64,
    pub buckets: Vec<Bucket>,
}

pub const BUCKET_NAMES: [&str; 3] = ["unseen_attr_unseen_pair", "seen_attr_unseen_pair", "seen_attr_seen_pair"];

/// Closed-world test accuracy split by whether the attribute and the pair
/// were seen in training, at the bias that maximizes validation harmonic
/// mean.
pub fn bucket_eval(bundle: &DatasetBundle, model: &Model) -> Result<BucketReport, EvalError> {
    let val = score_split(bundle, model, bundle.candidates(World::Closed, Split::Val), Split::Val)?;
    let bias = val.sweep()?.best_bias;
    let test = score_split(bundle, model, bundle.candidates(World::Closed, Split::Test), Split::Test)?;
    let seen_attrs = bundle.seen_attributes();

    let bucket_of = |i: usize| {
        let c = &test.candidates.comps[i];
        if !test.candidates.unseen[i] {
            2
        } else if seen_attrs.contains(&c.attrs[0]) {
            1
        } else {
            0
        }
    };
    let mut classes = [0usize; 3];
    for i in 0..test.candidates.len() {
        classes[bucket_of(i)] += 1;
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (row, &y) in test.logits.iter().zip(&test.labels) {
        let b = bucket_of(y);
        totals[b] += 1;
        hits[b] += usize::from(predict_index(row, &test.candidates.unseen, bias, None)? == y);
    }
    Ok(BucketReport {
        bias: bias.as_f64(),
        buckets: (0..3)
            .map(|b| Bucket {
                name: BUCKET_NAMES[b].into(),
                n_classes: classes[b],
                n_examples: totals[b],
                accuracy: (totals[b] > 0).then(|| frac(hits[b], totals[b])),
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderReport {
    pub n_classes: usize,
    pub n_examples: usize,
    pub top1: f64,
    pub chance: f64,
}

/// Top-1 accuracy of multi-attribute examples of `split` among the
/// multi-attribute classes registered for it.
pub fn higher_order_eval(bundle: &DatasetBundle, model: &Model, split: Split) -> Result<HigherOrderReport, EvalError> {
    let cands = bundle.higher_order_candidates(split);
    let index = cands.index();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (i, e) in bundle.examples_in(split).filter(|e| !e.label.is_pair()).enumerate() {
        let y = *index.get(&e.label).ok_or(EvalError::LabelNotInCandidates {
            example: i,
            label: usize::MAX,
            candidates: cands.len(),
        })?;
        feats.push(bundle.feature(e.row));
        labels.push(y);
    }
    if feats.is_empty() {
        return Err(EvalError::NoExamples(format!("{} higher-order", split.name())));
    }
    let logits = model.logits(&feats, &cands.comps)?;
    let hits = logits.iter().zip(&labels).filter(|(l, y)| argmax(l) == **y).count();
    Ok(HigherOrderReport {
        n_classes: cands.len(),
        n_examples: labels.len(),
        top1: frac(hits, labels.len()),
        chance: 1.0 / cands.len() as f64,
    })
}
