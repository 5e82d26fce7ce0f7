use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use czsl::checkpoint::load_checkpoint;
use czsl::data::{load_bundle, Split, World};
use czsl::eval::evaluate;
use czsl::scoring::{predict_index, Bias};
use serde_json::Value;

fn czsl(args: &[&str], workers: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_czsl"));
    cmd.args(args);
    match workers {
        Some(n) => cmd.env("CZSL_WORKERS", n.to_string()),
        None => cmd.env_remove("CZSL_WORKERS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = czsl(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(args: &[&str]) -> i32 {
    czsl(args, None).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = r#"{"n_attrs": 4, "n_objs": 4, "seen_pairs": 8, "examples_per_pair": 6, "seed": 3}"#;

/// Generates a bundle from `spec` under `root/name`.
fn gen(root: &Path, name: &str, spec: &str) -> PathBuf {
    let spec_path = root.join(format!("{name}.json"));
    fs::write(&spec_path, spec).unwrap();
    let out = root.join(name);
    ok(&["gen", "--spec", p(&spec_path), "--out", p(&out)]);
    out
}

/// Removes the first `k` unseen pairs from every split, so the closed world
/// is a strict subset of the open one.
fn retire_unseen_pairs(dir: &Path, k: usize) {
    let pairs = fs::read_to_string(dir.join("pairs.tsv")).unwrap();
    let mut retired = Vec::new();
    let lines: Vec<String> = pairs
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols[2] == "unseen" && retired.len() < k {
                retired.push((cols[0].to_string(), cols[1].to_string()));
                format!("{}\t{}\tunseen\t", cols[0], cols[1])
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(dir.join("pairs.tsv"), lines.join("\n") + "\n").unwrap();
    let examples = fs::read_to_string(dir.join("examples.tsv")).unwrap();
    let kept: Vec<&str> = examples
        .lines()
        .filter(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            !retired.iter().any(|(a, o)| cols[1] == a && cols[2] == o)
        })
        .collect();
    fs::write(dir.join("examples.tsv"), kept.join("\n") + "\n").unwrap();
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn gen_is_byte_identical_and_loadable() {
    let t = tempfile::tempdir().unwrap();
    let a = gen(t.path(), "a", SPEC);
    let b = gen(t.path(), "b", SPEC);
    assert_eq!(read_tree(&a), read_tree(&b));
    load_bundle(&a).unwrap();
}

#[test]
fn usage_and_spec_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    assert_eq!(code(&["gen", "--spec", p(&spec)]), 2);
    fs::write(&spec, r#"{"n_attrs": 4, "n_objs": 4, "seen_pairs": 2}"#).unwrap();
    assert_eq!(code(&["gen", "--spec", p(&spec), "--out", p(&t.path().join("x"))]), 2);
    fs::write(&spec, r#"{"n_atrs": 4}"#).unwrap();
    assert_eq!(code(&["gen", "--spec", p(&spec), "--out", p(&t.path().join("x"))]), 2);
    assert!(!t.path().join("x").exists());

    let data = gen(t.path(), "data", SPEC);
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "learnig_rate": 1}}"#).unwrap();
    assert_eq!(code(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&t.path().join("o"))]), 2);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&t.path().join("o")), "--mode", "clip"]), 2);
}

#[test]
fn runtime_failures_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data", SPEC);
    let missing = t.path().join("nope");
    assert_eq!(code(&["eval", "--data", p(&data), "--checkpoint", p(&missing)]), 1);

    let ck = t.path().join("ck");
    ok(&["train", "--data", p(&data), "--out", p(&ck), "--mode", "zeroshot"]);
    assert_eq!(code(&["retrieve", "--data", p(&data), "--checkpoint", p(&ck), "--row", "100000"]), 1);

    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"mode": "coop"}, "train": {"epochs": 3, "learning_rate": 1e308, "batch_size": 4}}"#).unwrap();
    let out = czsl(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&t.path().join("d"))], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged in epoch 1"));
    assert!(!t.path().join("d").exists());
}

#[test]
fn zeroshot_checkpoint_matches_untrained_model() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data", SPEC);
    let ck = t.path().join("ck");
    let out = ok(&["train", "--data", p(&data), "--out", p(&ck), "--mode", "zeroshot"]);
    assert_eq!(out["runs"][0]["epochs_run"], 0);

    let bundle = load_bundle(&data).unwrap();
    let (model, _) = load_checkpoint(&ck).unwrap();
    let encoder = czsl::data::load_encoder(&data).unwrap().unwrap();
    let fresh = czsl::scoring::Model::new(
        bundle.vocab.clone(),
        encoder,
        Default::default(),
        czsl::scoring::ScoringConfig {
            mode: czsl::scoring::Mode::Zeroshot,
            weight_decay: 1e-5,
            ..Default::default()
        },
        czsl::scoring::DEFAULT_ADAPTER_ALPHA,
        0,
    )
    .unwrap();
    for world in [World::Closed, World::Open] {
        let a = evaluate(&bundle, &model, world, Split::Test, None).unwrap();
        let b = evaluate(&bundle, &fresh, world, Split::Test, None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn seeds_report_mean_and_standard_error() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data", SPEC);
    let ck = t.path().join("ck");
    let out = ok(&["train", "--data", p(&data), "--out", p(&ck), "--seeds", "3", "--epochs", "2", "--learning-rate", "5e-3"]);
    assert_eq!(out["aggregate"]["n"], 3);
    for key in ["seen", "unseen", "harmonic", "auc"] {
        assert!(out["aggregate"]["mean"][key].is_f64());
        assert!(out["aggregate"]["stderr"][key].as_f64().unwrap() >= 0.0);
    }
    for s in 0..3 {
        assert!(ck.join(format!("seed_{s}")).join("checkpoint.json").exists());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(ck.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, out);
    assert_eq!(summary["config"]["train"]["batch_size"], 128);
}

#[test]
fn open_world_is_no_easier_than_closed() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data", r#"{"n_attrs": 5, "n_objs": 5, "seen_pairs": 10, "examples_per_pair": 4, "seed": 1}"#);
    retire_unseen_pairs(&data, 5);
    let ck = t.path().join("ck");
    ok(&["train", "--data", p(&data), "--out", p(&ck), "--epochs", "3", "--learning-rate", "5e-3"]);
    let closed = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--world", "closed"]);
    let open = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--world", "open"]);
    let n = |v: &Value| v["runs"][0]["report"]["n_candidates"].as_u64().unwrap();
    assert!(n(&open) > n(&closed));
    assert_eq!((n(&closed), n(&open)), (20, 25));
    let auc = |v: &Value| v["runs"][0]["report"]["auc"].as_f64().unwrap();
    assert!(auc(&open) <= auc(&closed));

    let rep = t.path().join("rep");
    let aux = data.join("aux_embeddings.txt");
    let f = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--world", "open", "--feasibility", p(&aux), "--out", p(&rep)]);
    let feas = &f["runs"][0]["feasibility"];
    assert!(feas["threshold"].as_f64().unwrap() < 1.0);
    let report: Value = serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, f);
    let tsv = fs::read_to_string(rep.join("curve.tsv")).unwrap();
    assert!(tsv.starts_with("bias\tseen_acc\tunseen_acc\n-inf\t"));
    assert_eq!(code(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--feasibility", p(&aux)]), 2);
}

#[test]
fn retrieve_ranks_every_candidate() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(
        t.path(),
        "data",
        r#"{"n_attrs": 4, "n_objs": 4, "seen_pairs": 8, "examples_per_pair": 3, "noise": 0, "init_noise": 0, "seed": 5}"#,
    );
    let ck = t.path().join("ck");
    ok(&["train", "--data", p(&data), "--out", p(&ck), "--mode", "zeroshot"]);
    let bundle = load_bundle(&data).unwrap();
    let (model, _) = load_checkpoint(&ck).unwrap();
    let cands = bundle.candidates(World::Closed, Split::Test);

    for e in bundle.examples_in(Split::Test) {
        let all = ok(&["retrieve", "--data", p(&data), "--checkpoint", p(&ck), "--row", &e.row.to_string(), "--k", &cands.len().to_string()]);
        let mut classes: Vec<String> = all["results"].as_array().unwrap().iter().map(|r| r["class"].as_str().unwrap().to_string()).collect();
        assert_eq!(classes[0], bundle.vocab.describe(&e.label));
        classes.sort();
        let mut want: Vec<String> = cands.comps.iter().map(|c| bundle.vocab.describe(c)).collect();
        want.sort();
        assert_eq!(classes, want);

        let top = ok(&["retrieve", "--data", p(&data), "--checkpoint", p(&ck), "--row", &e.row.to_string(), "--k", "1"]);
        let logits = model.logits(&[bundle.feature(e.row)], &cands.comps).unwrap().remove(0);
        let i = predict_index(&logits, &cands.unseen, Bias::Finite(0.0), None).unwrap();
        assert_eq!(top["results"][0]["class"].as_str().unwrap(), bundle.vocab.describe(&cands.comps[i]));
        assert_eq!(top["results"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data", SPEC);
    let mut trees = Vec::new();
    let mut stdouts = Vec::new();
    for workers in [1, 4] {
        let ck = t.path().join(format!("ck{workers}"));
        let rep = t.path().join(format!("rep{workers}"));
        let train = czsl(
            &["train", "--data", p(&data), "--out", p(&ck), "--mode", "cocsp", "--epochs", "2", "--learning-rate", "5e-3", "--seeds", "2"],
            Some(workers),
        );
        assert!(train.status.success());
        let eval = czsl(&["eval", "--data", p(&data), "--checkpoint", p(&ck.join("seed_1")), "--out", p(&rep)], Some(workers));
        assert!(eval.status.success());
        trees.push((read_tree(&ck), read_tree(&rep)));
        stdouts.push((train.stdout, eval.stdout));
    }
    assert_eq!(trees[0], trees[1]);
    assert_eq!(stdouts[0], stdouts[1]);
}
