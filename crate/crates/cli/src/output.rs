//! Standard-output schemas and atomic directory publishing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use czsl::eval::{mean_stderr, BucketReport, DecompositionReport, EvalReport, FeasibilityForm, HigherOrderReport};
use czsl::scoring::Mode;
use czsl::train::Selection;
use serde::Serialize;

use crate::config::RunConfig;

pub fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
    pub auc: f64,
}

/// Mean and standard error over runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: Metrics,
    pub stderr: Metrics,
}

impl Aggregate {
    pub fn of<'a>(reports: impl Iterator<Item = &'a EvalReport>) -> Self {
        let rs: Vec<&EvalReport> = reports.collect();
        let stat = |f: fn(&EvalReport) -> f64| mean_stderr(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (s, u, h, a) = (stat(|r| r.seen), stat(|r| r.unseen), stat(|r| r.harmonic), stat(|r| r.auc));
        Aggregate {
            n: rs.len(),
            mean: Metrics {
                seen: s.0,
                unseen: u.0,
                harmonic: h.0,
                auc: a.0,
            },
            stderr: Metrics {
                seen: s.1,
                unseen: u.1,
                harmonic: h.1,
                auc: a.1,
            },
        }
    }
}

#[derive(Serialize)]
pub struct TrainRun {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val: EvalReport,
}

#[derive(Serialize)]
pub struct TrainOutput {
    pub mode: Mode,
    pub selection: Selection,
    pub runs: Vec<TrainRun>,
    pub aggregate: Aggregate,
    pub config: RunConfig,
}

#[derive(Serialize)]
pub struct FeasibilityReport {
    pub form: FeasibilityForm,
    pub threshold: f64,
    pub val_harmonic: f64,
    pub thresholds_tried: usize,
    pub n_masked: usize,
    pub fallbacks: Vec<String>,
    pub literal_attributes: Vec<String>,
}

#[derive(Serialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub feasibility: Option<FeasibilityReport>,
    pub decomposition: DecompositionReport,
    pub buckets: Option<BucketReport>,
    pub higher_order: Option<HigherOrderReport>,
}

#[derive(Serialize)]
pub struct EvalOutput {
    pub runs: Vec<EvalRun>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
pub struct Ranked {
    pub rank: usize,
    pub class: String,
    pub prompt: String,
    pub logit: f64,
    pub unseen: bool,
}

#[derive(Serialize)]
pub struct RetrieveOutput {
    pub row: usize,
    pub label: Option<String>,
    pub candidates: usize,
    pub results: Vec<Ranked>,
}

fn sibling(out: &Path, tag: &str) -> PathBuf {
    let name = out.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Fills a fresh temporary directory next to `out`, then renames it into
/// place. An existing `out` is replaced only after `fill` succeeds.
pub fn publish(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = sibling(out, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.context(format!("writing {}", out.display())));
    }
    if out.exists() {
        let old = sibling(out, "old");
        fs::rename(out, &old).with_context(|| format!("moving aside {}", out.display()))?;
        fs::rename(&tmp, out).with_context(|| format!("renaming into {}", out.display()))?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, out).with_context(|| format!("renaming into {}", out.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn publish_replaces_only_on_success() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        publish(&out, |d| Ok(fs::write(d.join("a"), "1")?)).unwrap();
        assert_eq!(fs::read_to_string(out.join("a")).unwrap(), "1");
        assert!(publish(&out, |_| anyhow::bail!("boom")).is_err());
        assert_eq!(fs::read_to_string(out.join("a")).unwrap(), "1");
        publish(&out, |d| Ok(fs::write(d.join("b"), "2")?)).unwrap();
        assert!(!out.join("a").exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }
}
