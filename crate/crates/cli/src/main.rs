//! `ecn`: generate a synthetic corpus, train, evaluate, infer, explain and
//! run ablations.

mod config;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ecn_core::dataset::features::build_model_input_traced;
use ecn_core::dataset::{generate_synthetic, read_json, write_json, Corpus, Manifest, Vocab, MANIFEST_FILE};
use ecn_core::metrics::{auc, hr_at_n, ndcg_at_n, rankings};
use ecn_core::model::{Model, Variant};
use ecn_core::paths::{MetaPath, PathInstance};
use ecn_core::records::Sample;
use ecn_core::train::{TrainConfig, Trainer};
use ecn_tensor::checkpoint::peek_dtype;
use ecn_tensor::{Checkpoint, DType, Real};
use serde::Serialize;
use serde_json::{json, Map, Value};

use config::ConfigError;
use pipeline::{load_corpus, part_auc, prepare, sampler, Part, Subset};

/// Batch size used whenever a command only scores.
const SCORE_CHUNK: usize = 512;

#[derive(Parser)]
#[command(name = "ecn", version, about = "Infer latent shopping needs over an e-commerce concept net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted needs.
    GenData {
        /// Generator config (JSON). Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.ckpt, final.ckpt, history.csv and run.json.
    Train {
        /// Corpus directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Model config (JSON). `vocab` is taken from the data when absent.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training config (JSON).
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Day-based split config (JSON).
        #[arg(long)]
        split_config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Score a split and write metrics.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: auc, hr@N, ndcg@N.
        #[arg(long, value_delimiter = ',', default_value = "auc")]
        metrics: Vec<String>,
        /// Must match the split used for training.
        #[arg(long)]
        split_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        /// Where to write the metrics; defaults to metrics.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a user's top concepts, best first.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: u32,
        #[arg(long, default_value_t = 10)]
        topn: usize,
        /// Snapshot time in epoch seconds; defaults to the latest sample time.
        #[arg(long)]
        now: Option<i64>,
    },
    /// Print the attention weights and sampled paths behind one score as JSON.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: u32,
        #[arg(long)]
        concept: u32,
        /// Snapshot time in epoch seconds; defaults to the latest sample time.
        #[arg(long)]
        now: Option<i64>,
    },
    /// Train ablation variants and write ablation.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        split_config: Option<PathBuf>,
        /// Seeds to average over; the training config's seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train {
            data,
            model_config,
            train_config,
            split_config,
            out,
            precision,
        } => {
            let args = TrainArgs {
                data: &data,
                model_config: model_config.as_deref(),
                train_config: train_config.as_deref(),
                split_config: split_config.as_deref(),
                out: &out,
                precision,
            };
            match precision {
                Precision::F32 => train::<f32>(args),
                Precision::F64 => train::<f64>(args),
            }
        }
        Command::Eval {
            ckpt,
            data,
            metrics,
            split_config,
            subset,
            out,
        } => {
            let metrics = metrics.iter().map(|m| m.parse()).collect::<anyhow::Result<Vec<Metric>>>()?;
            let split = config::split(split_config.as_deref())?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("metrics.json"));
            let corpus = load_corpus(&data)?;
            let samples = pipeline::subset(&corpus, &split, subset)?;
            let value = match peek_dtype(&ckpt)? {
                DType::F32 => eval(&load_model::<f32>(&ckpt)?, &corpus, samples, &metrics, subset)?,
                DType::F64 => eval(&load_model::<f64>(&ckpt)?, &corpus, samples, &metrics, subset)?,
            };
            write_json(&out, &value)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Infer {
            ckpt,
            data,
            user,
            topn,
            now,
        } => {
            let corpus = load_corpus(&data)?;
            let now = snapshot(&corpus, now)?;
            let ranked = match peek_dtype(&ckpt)? {
                DType::F32 => infer(&load_model::<f32>(&ckpt)?, &corpus, user, now)?,
                DType::F64 => infer(&load_model::<f64>(&ckpt)?, &corpus, user, now)?,
            };
            println!("rank\tconcept\tscore\tname");
            for (rank, (concept, score)) in ranked.iter().take(topn).enumerate() {
                let name = corpus.net.concept(*concept).map_or("", |c| c.name.as_str());
                println!("{}\t{concept}\t{score:.6}\t{name}", rank + 1);
            }
            Ok(())
        }
        Command::Explain {
            ckpt,
            data,
            user,
            concept,
            now,
        } => {
            let corpus = load_corpus(&data)?;
            let now = snapshot(&corpus, now)?;
            let value = match peek_dtype(&ckpt)? {
                DType::F32 => explain(&load_model::<f32>(&ckpt)?, &corpus, user, concept, now)?,
                DType::F64 => explain(&load_model::<f64>(&ckpt)?, &corpus, user, concept, now)?,
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::Ablate {
            data,
            variants,
            out,
            model_config,
            train_config,
            split_config,
            seeds,
            precision,
        } => {
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>, _>>()?
            };
            let args = AblateArgs {
                data: &data,
                variants,
                out: &out,
                model_config: model_config.as_deref(),
                train_config: train_config.as_deref(),
                split_config: split_config.as_deref(),
                seeds,
            };
            match precision {
                Precision::F32 => ablate::<f32>(args),
                Precision::F64 => ablate::<f64>(args),
            }
        }
    }
}

fn gen_data(config: Option<&Path>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let cfg = config::synth(config)?;
    let output = generate_synthetic(&cfg, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = output.save(out, seed, &cfg)?;
    let c = manifest.counts;
    println!(
        "wrote {}: {} net records, {} users, {} behaviors, {} samples ({} positive)",
        out.display(),
        c.conceptnet,
        c.users,
        c.behaviors,
        c.samples,
        c.positives
    );
    Ok(())
}

fn load_model<T: Real>(path: &Path) -> anyhow::Result<Model<T>> {
    let ckpt = Checkpoint::<T>::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Trainer::from_checkpoint(ckpt)?.into_model())
}

fn snapshot(corpus: &Corpus, now: Option<i64>) -> anyhow::Result<i64> {
    match now.or_else(|| corpus.latest_time()) {
        Some(t) => Ok(t),
        None => bail!("the corpus has no samples; pass --now"),
    }
}

struct TrainArgs<'a> {
    data: &'a Path,
    model_config: Option<&'a Path>,
    train_config: Option<&'a Path>,
    split_config: Option<&'a Path>,
    out: &'a Path,
    precision: Precision,
}

fn train<T: Real>(args: TrainArgs<'_>) -> anyhow::Result<()> {
    let corpus = load_corpus(args.data)?;
    let vocab = Vocab::of(&corpus.net);
    let model_cfg = config::model(args.model_config, vocab)?;
    let train_cfg = config::train(args.train_config)?;
    let split_cfg = config::split(args.split_config)?;
    let data = prepare(&corpus, &split_cfg, sampler(&model_cfg))?;
    eprintln!(
        "train {} / validation {} / test {} samples",
        data.train.samples.len(),
        data.validation.samples.len(),
        data.test.samples.len()
    );
    let trained = pipeline::train::<T>(model_cfg.clone(), train_cfg.clone(), &data, vocab, Some(args.out.to_path_buf()))?;
    let test_auc = part_auc(&trained.model, &data.test, SCORE_CHUNK)?;
    let manifest: Option<Manifest> = read_json(&args.data.join(MANIFEST_FILE)).ok();
    let run = json!({
        "data": args.data,
        "data_manifest": manifest,
        "precision": args.precision,
        "model": model_cfg,
        "train": train_cfg,
        "split": split_cfg,
        "steps": trained.history.steps.last().map_or(0, |s| s.step),
        "best": trained.history.best.map(|(step, auc)| json!({"step": step, "val_auc": auc})),
        "final_test_auc": test_auc,
        "epoch_seconds": trained.history.epoch_seconds,
    });
    write_json(&args.out.join("run.json"), &run)?;
    for (e, secs) in trained.history.epoch_seconds.iter().enumerate() {
        let loss: Vec<f64> = trained.history.steps.iter().filter(|s| s.epoch == e).map(|s| s.loss).collect();
        let val = trained.history.steps.iter().filter(|s| s.epoch == e).filter_map(|s| s.val_auc).last();
        eprintln!(
            "epoch {e}: mean loss {:.5}, val AUC {}, {secs:.1}s",
            loss.iter().sum::<f64>() / loss.len().max(1) as f64,
            val.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    println!(
        "trained {} steps in {:.1}s; final test AUC {}",
        trained.history.steps.last().map_or(0, |s| s.step),
        trained.seconds,
        test_auc.map_or("undefined".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Auc,
    Hr(usize),
    Ndcg(usize),
}

impl FromStr for Metric {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "auc" {
            return Ok(Metric::Auc);
        }
        let cutoff = |rest: &str| -> anyhow::Result<usize> {
            match rest.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => bail!("metric `{s}`: the cut-off must be a positive integer"),
            }
        };
        if let Some(rest) = s.strip_prefix("hr@") {
            return Ok(Metric::Hr(cutoff(rest)?));
        }
        if let Some(rest) = s.strip_prefix("ndcg@") {
            return Ok(Metric::Ndcg(cutoff(rest)?));
        }
        bail!("unknown metric `{s}` (expected auc, hr@N or ndcg@N)")
    }
}

fn eval<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    samples: Vec<Sample>,
    metrics: &[Metric],
    which: Subset,
) -> anyhow::Result<Value> {
    let part = Part::new(corpus, samples, sampler(model.config()))?;
    let scores = model.predict(&part.inputs, SCORE_CHUNK)?;
    let users = rankings(&part.samples, &scores)?;
    let mut out = Map::new();
    for m in metrics {
        let (key, value) = match *m {
            Metric::Auc => ("auc".to_string(), auc(&scores, &part.labels)?),
            Metric::Hr(n) => (format!("hr@{n}"), hr_at_n(&users, n)?),
            Metric::Ndcg(n) => (format!("ndcg@{n}"), ndcg_at_n(&users, n)?),
        };
        out.insert(key, json!(value));
    }
    out.insert(
        "counts".into(),
        json!({
            "samples": part.samples.len(),
            "positives": part.positives(),
            "users_with_positive": users.len(),
        }),
    );
    out.insert("subset".into(), serde_json::to_value(which)?);
    Ok(Value::Object(out))
}

/// Every concept scored for `user`, best first, ties by concept index.
fn infer<T: Real>(model: &Model<T>, corpus: &Corpus, user: u32, now: i64) -> anyhow::Result<Vec<(u32, f64)>> {
    corpus.profile(user)?;
    let concepts: Vec<u32> = corpus.net.concepts().map(|c| c.index).collect();
    let inputs = concepts
        .iter()
        .map(|&c| corpus.model_input(user, c, now, sampler(model.config())))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = model.predict(&inputs, SCORE_CHUNK)?;
    let mut ranked: Vec<(u32, f64)> = concepts.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn explain<T: Real>(model: &Model<T>, corpus: &Corpus, user: u32, concept: u32, now: i64) -> anyhow::Result<Value> {
    let profile = corpus.profile(user)?;
    let (input, instances) = build_model_input_traced(
        profile,
        corpus.user_behaviors(user),
        concept,
        &corpus.net,
        now,
        sampler(model.config()),
    )?;
    let trace = model.trace(&input)?;
    let paths: BTreeMap<String, &Vec<PathInstance>> = MetaPath::ALL
        .iter()
        .map(|mp| (mp.name().to_string(), &instances[mp.index()]))
        .collect();
    Ok(json!({
        "user": user,
        "concept": concept,
        "concept_name": corpus.net.concept(concept).map(|c| c.name.clone()),
        "now": now,
        "trace": trace,
        "paths": paths,
    }))
}

struct AblateArgs<'a> {
    data: &'a Path,
    variants: Vec<Variant>,
    out: &'a Path,
    model_config: Option<&'a Path>,
    train_config: Option<&'a Path>,
    split_config: Option<&'a Path>,
    seeds: Vec<u64>,
}

fn ablate<T: Real>(args: AblateArgs<'_>) -> anyhow::Result<()> {
    let corpus = load_corpus(args.data)?;
    let vocab = Vocab::of(&corpus.net);
    let base = config::model(args.model_config, vocab)?;
    let train_cfg = config::train(args.train_config)?;
    let split_cfg = config::split(args.split_config)?;
    let seeds = if args.seeds.is_empty() { vec![train_cfg.seed] } else { args.seeds };
    // Every variant shares the sampler settings, so featurize once.
    let data = prepare(&corpus, &split_cfg, sampler(&base))?;
    std::fs::create_dir_all(args.out).with_context(|| format!("creating {}", args.out.display()))?;

    // The full model is always trained first as the reference.
    let mut order = vec![Variant::Full];
    order.extend(args.variants.iter().filter(|v| **v != Variant::Full));
    let mut runs = String::from("variant,seed,auc,best_val_auc,seconds\n");
    let mut mean_auc: BTreeMap<&'static str, f64> = BTreeMap::new();
    for variant in order {
        let mut total = 0.0;
        for &seed in &seeds {
            let cfg = variant.apply(base.clone());
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let trained = pipeline::train::<T>(cfg, tc, &data, vocab, None)?;
            let a = part_auc(&trained.model, &data.test, SCORE_CHUNK)?
                .context("the held-out split must contain both classes")?;
            let best = trained.history.best.map_or(String::new(), |(_, v)| v.to_string());
            writeln!(runs, "{},{seed},{a},{best},{:.2}", variant.name(), trained.seconds)?;
            eprintln!("{} seed {seed}: AUC {a:.4} ({:.1}s)", variant.name(), trained.seconds);
            total += a;
        }
        mean_auc.insert(variant.name(), total / seeds.len() as f64);
    }
    let full = mean_auc[Variant::Full.name()];
    let mut table = String::from("variant,auc,decrease_pct\n");
    for v in &args.variants {
        let a = mean_auc[v.name()];
        writeln!(table, "{},{a},{}", v.name(), (full - a) / full * 100.0)?;
    }
    std::fs::write(args.out.join("ablation.csv"), &table)?;
    std::fs::write(args.out.join("ablation_runs.csv"), runs)?;
    let manifest = json!({
        "data": args.data,
        "model": base,
        "train": train_cfg,
        "split": split_cfg,
        "seeds": seeds,
    });
    write_json(&args.out.join("ablation.json"), &manifest)?;
    print!("{table}");
    Ok(())
}
