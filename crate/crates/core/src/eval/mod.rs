//! Generalized zero-shot evaluation.
//!
//! Adding a bias `b` to unseen-class logits flips an example's prediction
//! from its best seen class to its best unseen class exactly when `b`
//! crosses the margin `max_seen - max_unseen`. The accuracy curve is a step
//! function of `b`, so it is evaluated at every distinct margin, at the
//! midpoint of every gap between consecutive margins, and at `±∞`.

pub mod breakdown;
pub mod feasibility;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CandidateSet, DatasetBundle, Split, World};
use crate::scoring::{Bias, Model, ScoringError};

pub use breakdown::{
    bucket_eval, decomposition_eval, higher_order_eval, BucketReport, DecompositionReport,
    HigherOrderReport,
};
pub use feasibility::{calibrate_threshold, feasibility_scores, FeasibilityForm, FeasibilityScores};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no seen candidate classes")]
    NoSeenCandidates,
    #[error("no unseen candidate classes")]
    NoUnseenCandidates,
    #[error("example {example} has label {label} outside the {candidates} candidates")]
    LabelNotInCandidates {
        example: usize,
        label: usize,
        candidates: usize,
    },
    #[error("no aux embedding for {0:?}")]
    MissingAuxEmbedding(String),
    #[error("no {0} examples to evaluate")]
    NoExamples(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: Bias,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    /// True when `bias` equals some example's margin.
    pub at_margin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_harmonic: f64,
    pub auc: f64,
    /// Operating point achieving `best_harmonic`.
    pub best_bias: Bias,
}

pub fn harmonic(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Area under the (unseen, seen) curve by the trapezoid rule, points in
/// bias order.
pub fn trapezoid_auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].unseen_acc - w[0].unseen_acc) * (w[0].seen_acc + w[1].seen_acc) / 2.0)
        .sum()
}

/// Best seen and best unseen candidate per example. Candidates with a
/// `-∞` logit are unavailable.
struct Extremes {
    seen: Option<(usize, f64)>,
    unseen: Option<(usize, f64)>,
}

fn extremes(logits: &[f64], unseen: &[bool]) -> Extremes {
    let mut e = Extremes { seen: None, unseen: None };
    for (i, &l) in logits.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let slot = if unseen[i] { &mut e.unseen } else { &mut e.seen };
        if slot.is_none_or(|(_, b)| l > b) {
            *slot = Some((i, l));
        }
    }
    e
}

impl Extremes {
    /// Same decision as [`crate::scoring::predict_index`] without a mask.
    fn predict(&self, bias: Bias) -> Option<usize> {
        match (self.seen, self.unseen) {
            (None, None) => None,
            (Some((s, _)), None) => Some(s),
            (None, Some((u, _))) => Some(u),
            (Some((s, sv)), Some((u, uv))) => Some(match bias {
                Bias::NegInf => s,
                Bias::PosInf => u,
                Bias::Finite(b) => {
                    let shifted = uv + b;
                    if shifted > sv {
                        u
                    } else if shifted < sv {
                        s
                    } else {
                        s.min(u)
                    }
                }
            }),
        }
    }

    fn margin(&self) -> Option<f64> {
        match (self.seen, self.unseen) {
            (Some((_, s)), Some((_, u))) => Some(s - u),
            _ => None,
        }
    }
}

fn accuracies(ext: &[Extremes], labels: &[usize], unseen: &[bool], bias: Bias) -> (f64, f64) {
    let (mut sc, mut sn, mut uc, mut un) = (0usize, 0usize, 0usize, 0usize);
    for (e, &y) in ext.iter().zip(labels) {
        let hit = e.predict(bias) == Some(y);
        if unseen[y] {
            un += 1;
            uc += hit as usize;
        } else {
            sn += 1;
            sc += hit as usize;
        }
    }
    let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    (frac(sc, sn), frac(uc, un))
}

/// Seen and unseen accuracy at one bias.
pub fn accuracy_at(logits: &[Vec<f64>], unseen: &[bool], labels: &[usize], bias: Bias) -> (f64, f64) {
    let ext: Vec<Extremes> = logits.iter().map(|l| extremes(l, unseen)).collect();
    accuracies(&ext, labels, unseen, bias)
}

fn check_inputs(logits: &[Vec<f64>], unseen: &[bool], labels: &[usize]) -> Result<(), EvalError> {
    if !unseen.iter().any(|u| !u) {
        return Err(EvalError::NoSeenCandidates);
    }
    if !unseen.iter().any(|u| *u) {
        return Err(EvalError::NoUnseenCandidates);
    }
    for (i, (&y, l)) in labels.iter().zip(logits).enumerate() {
        if y >= unseen.len() || l.len() != unseen.len() {
            return Err(EvalError::LabelNotInCandidates {
                example: i,
                label: y,
                candidates: unseen.len(),
            });
        }
    }
    Ok(())
}

/// Exact seen/unseen trade-off curve over all biases.
pub fn sweep_bias(logits: &[Vec<f64>], unseen: &[bool], labels: &[usize]) -> Result<EvalCurve, EvalError> {
    check_inputs(logits, unseen, labels)?;
    let ext: Vec<Extremes> = logits.iter().map(|l| extremes(l, unseen)).collect();
    let mut margins: Vec<f64> = ext.iter().filter_map(Extremes::margin).filter(|m| m.is_finite()).collect();
    margins.sort_by(f64::total_cmp);
    margins.dedup();

    let mut biases = vec![(Bias::NegInf, false)];
    for (i, &m) in margins.iter().enumerate() {
        if i > 0 {
            let mid = margins[i - 1] + (m - margins[i - 1]) / 2.0;
            if mid > margins[i - 1] && mid < m {
                biases.push((Bias::Finite(mid), false));
            }
        }
        biases.push((Bias::Finite(m), true));
    }
    biases.push((Bias::PosInf, false));

    let points: Vec<CurvePoint> = biases
        .into_iter()
        .map(|(bias, at_margin)| {
            let (s, u) = accuracies(&ext, labels, unseen, bias);
            CurvePoint {
                bias,
                seen_acc: s,
                unseen_acc: u,
                at_margin,
            }
        })
        .collect();

    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        let h = harmonic(p.seen_acc, p.unseen_acc);
        let b = &points[best];
        let hb = harmonic(b.seen_acc, b.unseen_acc);
        if h > hb || (h == hb && b.at_margin && !p.at_margin) {
            best = i;
        }
    }
    let first = points.first().expect("at least two points");
    let last = points.last().expect("at least two points");
    Ok(EvalCurve {
        best_seen: first.seen_acc,
        best_unseen: last.unseen_acc,
        best_harmonic: harmonic(points[best].seen_acc, points[best].unseen_acc),
        auc: trapezoid_auc(&points),
        best_bias: points[best].bias,
        points,
    })
}

pub fn curve_tsv(curve: &EvalCurve) -> String {
    let mut s = String::from("bias\tseen_acc\tunseen_acc\n");
    for p in &curve.points {
        writeln!(s, "{}\t{}\t{}", p.bias.as_f64(), p.seen_acc, p.unseen_acc).unwrap();
    }
    s
}

/// Per-example logits over a candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub candidates: CandidateSet,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ScoreTable {
    /// Copy with masked-out candidates set to `-∞`.
    pub fn masked(&self, mask: &[bool]) -> ScoreTable {
        let logits = self
            .logits
            .iter()
            .map(|row| {
                row.iter()
                    .zip(mask)
                    .map(|(l, keep)| if *keep { *l } else { f64::NEG_INFINITY })
                    .collect()
            })
            .collect();
        ScoreTable {
            candidates: self.candidates.clone(),
            logits,
            labels: self.labels.clone(),
        }
    }

    pub fn sweep(&self) -> Result<EvalCurve, EvalError> {
        sweep_bias(&self.logits, &self.candidates.unseen, &self.labels)
    }
}

/// Scores every pair-labeled example of `split` against `candidates`.
pub fn score_split(
    bundle: &DatasetBundle,
    model: &Model,
    candidates: CandidateSet,
    split: Split,
) -> Result<ScoreTable, EvalError> {
    let index = candidates.index();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, e) in bundle.examples_in(split).filter(|e| e.label.is_pair()).enumerate() {
        let y = *index.get(&e.label).ok_or(EvalError::LabelNotInCandidates {
            example: i,
            label: usize::MAX,
            candidates: candidates.len(),
        })?;
        rows.push(bundle.feature(e.row));
        labels.push(y);
    }
    if rows.is_empty() {
        return Err(EvalError::NoExamples(split.name().into()));
    }
    let logits = model.logits(&rows, &candidates.comps)?;
    Ok(ScoreTable {
        candidates,
        logits,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub world: World,
    pub split: Split,
    pub mode: String,
    pub n_candidates: usize,
    pub n_masked: usize,
    pub n_examples: usize,
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
    pub auc: f64,
    /// Top-1 unseen accuracy at bias `+∞`.
    pub unseen_top1: f64,
    pub best_bias: f64,
    pub threshold: Option<f64>,
}

/// Full evaluation on one split. `mask[i]` keeps candidate `i`.
pub fn evaluate(
    bundle: &DatasetBundle,
    model: &Model,
    world: World,
    split: Split,
    mask: Option<&[bool]>,
) -> Result<(EvalReport, EvalCurve), EvalError> {
    let table = score_split(bundle, model, bundle.candidates(world, split), split)?;
    report_from(&table, world, split, model, mask, None)
}

pub fn report_from(
    table: &ScoreTable,
    world: World,
    split: Split,
    model: &Model,
    mask: Option<&[bool]>,
    threshold: Option<f64>,
) -> Result<(EvalReport, EvalCurve), EvalError> {
    let masked;
    let t = match mask {
        Some(m) => {
            masked = table.masked(m);
            &masked
        }
        None => table,
    };
    let curve = t.sweep()?;
    Ok((
        EvalReport {
            world,
            split,
            mode: model.mode().name().into(),
            n_candidates: t.candidates.len(),
            n_masked: mask.map_or(0, |m| m.iter().filter(|k| !**k).count()),
            n_examples: t.labels.len(),
            seen: curve.best_seen,
            unseen: curve.best_unseen,
            harmonic: curve.best_harmonic,
            auc: curve.auc,
            unseen_top1: curve.best_unseen,
            best_bias: curve.best_bias.as_f64(),
            threshold,
        },
        curve,
    ))
}

/// Mean and standard error of the mean (0 for fewer than two values).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::predict_index;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_classifier_rectangle() {
        let logits = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let c = sweep_bias(&logits, &[false, true], &[0, 1]).unwrap();
        assert!(c.points.iter().any(|p| p.seen_acc == 1.0 && p.unseen_acc == 1.0));
        assert_eq!((c.auc, c.best_harmonic), (1.0, 1.0));
    }

    #[test]
    fn masked_unseen_classes_give_zero() {
        let ninf = f64::NEG_INFINITY;
        let logits = vec![vec![2.0, ninf], vec![1.0, ninf]];
        let c = sweep_bias(&logits, &[false, true], &[0, 1]).unwrap();
        assert_eq!((c.best_unseen, c.auc), (0.0, 0.0));
        assert_eq!(c.best_seen, 1.0);
    }

    #[test]
    fn requires_both_groups() {
        assert_eq!(sweep_bias(&[vec![1.0]], &[false], &[0]), Err(EvalError::NoUnseenCandidates));
        assert_eq!(sweep_bias(&[vec![1.0]], &[true], &[0]), Err(EvalError::NoSeenCandidates));
    }

    #[test]
    fn extremes_agree_with_predict_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let k = rng.random_range(2..6);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64).collect();
            let unseen: Vec<bool> = (0..k).map(|_| rng.random()).collect();
            let e = extremes(&logits, &unseen);
            for b in [Bias::NegInf, Bias::PosInf, Bias::Finite(rng.random_range(-3..4) as f64)] {
                assert_eq!(e.predict(b), predict_index(&logits, &unseen, b, None).ok());
            }
        }
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (1.6666666666666667f64 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>, Vec<usize>)> {
        (2usize..=8, 1usize..=10).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), n),
                prop::collection::vec(any::<bool>(), k)
                    .prop_filter("both groups", |u| u.iter().any(|x| *x) && u.iter().any(|x| !*x)),
                prop::collection::vec(0..k, n),
            )
        })
    }

    proptest! {
        #[test]
        fn curve_invariants((logits, unseen, labels) in instance()) {
            let c = sweep_bias(&logits, &unseen, &labels).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].seen_acc <= w[0].seen_acc);
                prop_assert!(w[1].unseen_acc >= w[0].unseen_acc);
            }
            prop_assert!(c.auc >= 0.0 && c.auc <= c.best_seen * c.best_unseen + 1e-12);
            prop_assert!(c.best_harmonic <= harmonic(c.best_seen, c.best_unseen) + 1e-12);
            for p in &c.points {
                prop_assert!((0.0..=1.0).contains(&p.seen_acc) && (0.0..=1.0).contains(&p.unseen_acc));
            }
        }

        #[test]
        fn per_example_shift_leaves_curve_unchanged(
            (logits, unseen, labels) in instance(),
            shifts in prop::collection::vec(-8i32..8, 10),
        ) {
            // Integer-valued logits keep the shifted margins exact.
            let ints: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|v| v.round()).collect()).collect();
            let shifted: Vec<Vec<f64>> = ints
                .iter()
                .zip(&shifts)
                .map(|(r, s)| r.iter().map(|v| v + *s as f64).collect())
                .collect();
            let a = sweep_bias(&ints, &unseen, &labels).unwrap();
            let b = sweep_bias(&shifted, &unseen, &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
