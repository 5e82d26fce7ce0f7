//! `czsl`: generate synthetic bundles, train prompt variants, evaluate and
//! retrieve.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use czsl::checkpoint::{load_checkpoint, save_checkpoint, RunInfo};
use czsl::data::synth::{generate_synthetic, save_synthetic, SyntheticSpec};
use czsl::data::{load_aux, load_bundle, load_encoder, DataError, DatasetBundle, Split, World};
use czsl::encoder::{tokenizer_for, FrozenTextEncoder};
use czsl::eval::{
    bucket_eval, calibrate_threshold, decomposition_eval, evaluate, feasibility_scores, higher_order_eval,
    report_from, score_split, FeasibilityForm,
};
use czsl::scoring::{Mode, Model};
use czsl::train::{train, TrainError};

use czsl_cli::config::RunConfig;
use czsl_cli::output::{self, publish, to_json, Aggregate, EvalRun, FeasibilityReport, Ranked, RetrieveOutput, TrainRun};

/// Process exit classes: usage and spec errors exit 2, runtime failures 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Parser)]
#[command(name = "czsl", version, about = "Compositional zero-shot learning with soft prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle from a spec JSON.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one checkpoint per seed and report validation metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        /// Run this many consecutive seeds starting at the configured seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate checkpoints and write a report plus curve points.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "closed")]
        world: World,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Aux word embeddings (GloVe text) for open-world filtering.
        #[arg(long)]
        feasibility: Option<PathBuf>,
        #[arg(long)]
        literal_feasibility: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank candidate prompts for one feature row.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "closed")]
        world: World,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_workers().and_then(|()| match cli.command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            mode,
            seeds,
            seed,
            epochs,
            learning_rate,
        } => cmd_train(TrainArgs {
            config,
            data,
            out,
            mode,
            seeds,
            seed,
            epochs,
            learning_rate,
        }),
        Command::Eval {
            data,
            checkpoint,
            world,
            split,
            feasibility,
            literal_feasibility,
            out,
        } => cmd_eval(&data, &checkpoint, world, split, feasibility.as_deref(), literal_feasibility, out.as_deref()),
        Command::Retrieve {
            data,
            checkpoint,
            row,
            k,
            world,
            split,
        } => cmd_retrieve(&data, &checkpoint, row, k, world, split),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Prints one JSON document; a closed pipe is not an error.
fn emit(json: &str) -> CmdResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{json}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).runtime(),
        _ => Ok(()),
    }
}

fn configure_workers() -> CmdResult<()> {
    let Ok(v) = std::env::var("CZSL_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("CZSL_WORKERS must be a positive integer, got {v:?}"))
        .usage()?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()
}

fn cmd_gen(spec_path: &Path, out: &Path) -> CmdResult<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))
        .runtime()?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", spec_path.display()))
        .usage()?;
    let data = match generate_synthetic(&spec) {
        Err(e @ DataError::InfeasibleSpec(_)) => return Err(e).usage(),
        r => r.runtime()?,
    };
    publish(out, |dir| save_synthetic(&data, dir).map_err(Into::into)).runtime()?;
    emit(&to_json(&serde_json::json!({
        "examples": data.bundle.examples.len(),
        "seen_pairs": data.bundle.seen_pairs().len(),
        "unseen_pairs": data.bundle.unseen_pairs().len(),
    })))
}

struct TrainArgs {
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: PathBuf,
    mode: Option<Mode>,
    seeds: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
}

/// Bundle plus the frozen encoder to build models around.
fn load_data(cfg: &RunConfig) -> CmdResult<(DatasetBundle, FrozenTextEncoder)> {
    if let Some(dir) = &cfg.data.path {
        let bundle = load_bundle(dir).runtime()?;
        let encoder = match load_encoder(dir).runtime()? {
            Some(e) => e,
            None => {
                let tok = tokenizer_for(&bundle.vocab.words(), cfg.model.hash_buckets);
                let shape = cfg.model.encoder.with_vocab(tok.len());
                FrozenTextEncoder::init_frozen(cfg.train.seed, &shape, tok).usage()?
            }
        };
        return Ok((bundle, encoder));
    }
    if let Some(spec) = &cfg.data.synthetic {
        let d = generate_synthetic(spec).usage()?;
        return Ok((d.bundle, d.encoder));
    }
    Err(Failure::Usage(anyhow!("no data: pass --data or set data.path or data.synthetic")))
}

fn cmd_train(args: TrainArgs) -> CmdResult<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).usage()?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data {
        cfg.data.path = Some(d);
    }
    if let Some(m) = args.mode {
        cfg.model.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(n) = args.seeds {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--seeds must be >= 1")));
        }
        cfg.eval.seeds = (0..n as u64).map(|i| cfg.train.seed + i).collect();
    }
    cfg.validate().usage()?;
    let (bundle, encoder) = load_data(&cfg)?;

    let seeds = cfg.seeds();
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &seeds {
        let mut model = Model::new(
            bundle.vocab.clone(),
            encoder.clone(),
            cfg.template(),
            cfg.scoring(),
            cfg.model.alpha,
            seed,
        )
        .usage()?;
        let tc = czsl::train::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let mut log = String::new();
        let summary = match train(&mut model, &bundle, &tc, |r| {
            log.push_str(&serde_json::to_string(r).expect("record serializes"));
            log.push('\n');
        }) {
            Err(e @ TrainError::DivergedLoss { .. }) => return Err(e).runtime(),
            Err(e @ TrainError::InvalidConfig(_)) => return Err(e).usage(),
            r => r.runtime()?,
        };
        let (report, _) = evaluate(&bundle, &model, World::Closed, Split::Val, None).runtime()?;
        runs.push(TrainRun {
            seed,
            epochs_run: summary.epochs_run,
            best_epoch: summary.best_epoch,
            val: report,
        });
        artifacts.push((model, RunInfo { seed, epoch: summary.best_epoch }, log));
    }
    let output = output::TrainOutput {
        mode: cfg.model.mode,
        selection: cfg.train.selection,
        aggregate: Aggregate::of(runs.iter().map(|r| &r.val)),
        runs,
        config: cfg.clone(),
    };
    let json = to_json(&output);
    let single = artifacts.len() == 1;
    publish(&args.out, |root| {
        for (model, run, log) in &artifacts {
            let dir = if single {
                root.to_path_buf()
            } else {
                root.join(format!("seed_{}", run.seed))
            };
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(model, run, &dir)?;
            std::fs::write(dir.join("train_log.jsonl"), log)?;
        }
        std::fs::write(root.join("summary.json"), format!("{json}\n"))?;
        Ok(())
    })
    .runtime()?;
    emit(&json)
}

fn load_compatible(bundle: &DatasetBundle, path: &Path) -> CmdResult<Model> {
    let (model, _) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime()?;
    if model.vocab != bundle.vocab {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint {} was trained on a different vocabulary",
            path.display()
        )));
    }
    Ok(model)
}

fn cmd_eval(
    data: &Path,
    checkpoints: &[PathBuf],
    world: World,
    split: Split,
    feasibility: Option<&Path>,
    literal: bool,
    out: Option<&Path>,
) -> CmdResult<()> {
    if feasibility.is_some() && world != World::Open {
        return Err(Failure::Usage(anyhow!("--feasibility applies to --world open only")));
    }
    let bundle = load_bundle(data).runtime()?;
    let aux = feasibility.map(load_aux).transpose().runtime()?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for path in checkpoints {
        let model = load_compatible(&bundle, path)?;
        let table = score_split(&bundle, &model, bundle.candidates(world, split), split).runtime()?;
        let (report, curve, feas) = match &aux {
            Some(aux) => {
                let form = if literal {
                    FeasibilityForm::Literal
                } else {
                    FeasibilityForm::CoOccurrence
                };
                let scores = feasibility_scores(&bundle.vocab, &bundle.seen_pairs(), aux, form, true).runtime()?;
                let val = score_split(&bundle, &model, bundle.candidates(World::Open, Split::Val), Split::Val).runtime()?;
                let cal = calibrate_threshold(&scores, &val).runtime()?;
                let mask = scores.mask(&table.candidates, cal.threshold);
                let (r, c) = report_from(&table, world, split, &model, Some(&mask), Some(cal.threshold)).runtime()?;
                let f = FeasibilityReport {
                    form,
                    threshold: cal.threshold,
                    val_harmonic: cal.val_harmonic,
                    thresholds_tried: cal.tried,
                    n_masked: r.n_masked,
                    fallbacks: scores.fallbacks.clone(),
                    literal_attributes: scores.literal_attrs.iter().map(|&a| bundle.vocab.attributes()[a].clone()).collect(),
                };
                (r, c, Some(f))
            }
            None => {
                let (r, c) = report_from(&table, world, split, &model, None, None).runtime()?;
                (r, c, None)
            }
        };
        let decomposition = decomposition_eval(&bundle, &model, split).runtime()?;
        let buckets = if bundle.meta.mixed_vocab {
            Some(bucket_eval(&bundle, &model).runtime()?)
        } else {
            None
        };
        let higher_order = if bundle.higher_order_candidates(split).is_empty() {
            None
        } else {
            Some(higher_order_eval(&bundle, &model, split).runtime()?)
        };
        runs.push(EvalRun {
            report,
            feasibility: feas,
            decomposition,
            buckets,
            higher_order,
        });
        curves.push(curve);
    }
    let output = output::EvalOutput {
        aggregate: Aggregate::of(runs.iter().map(|r| &r.report)),
        runs,
    };
    let json = to_json(&output);
    if let Some(out) = out {
        publish(out, |dir| {
            std::fs::write(dir.join("report.json"), format!("{json}\n"))?;
            for (i, c) in curves.iter().enumerate() {
                let name = if curves.len() == 1 {
                    "curve.tsv".to_string()
                } else {
                    format!("curve_{i}.tsv")
                };
                std::fs::write(dir.join(name), czsl::eval::curve_tsv(c))?;
            }
            Ok(())
        })
        .runtime()?;
    }
    emit(&json)
}

fn cmd_retrieve(data: &Path, checkpoint: &Path, row: usize, k: usize, world: World, split: Split) -> CmdResult<()> {
    if k == 0 {
        return Err(Failure::Usage(anyhow!("--k must be >= 1")));
    }
    let bundle = load_bundle(data).runtime()?;
    if row >= bundle.features.rows() {
        return Err(Failure::Runtime(anyhow!(
            "row {row} out of range: the bundle has {} feature rows",
            bundle.features.rows()
        )));
    }
    let model = load_compatible(&bundle, checkpoint)?;
    let cands = bundle.candidates(world, split);
    let logits = model.logits(&[bundle.feature(row)], &cands.comps).runtime()?.remove(0);
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let results = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &i)| {
            let class = bundle.vocab.describe(&cands.comps[i]);
            Ranked {
                rank: rank + 1,
                prompt: model.template.render(&class),
                class,
                logit: logits[i],
                unseen: cands.unseen[i],
            }
        })
        .collect();
    let label = bundle
        .examples
        .iter()
        .find(|e| e.row == row)
        .map(|e| bundle.vocab.describe(&e.label));
    emit(&to_json(&RetrieveOutput {
        row,
        label,
        candidates: cands.len(),
        results,
    }))
}
