use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hier_core::clustering::{cluster_values, ClusterOptions};
use hier_core::datamodel::{generate_split, ingest_embeddings, write_hse, write_jsonl, Split, SyntheticParams};
use hier_core::harness::{self, Checkpoint, Config};
use hier_core::numerics::Tensor;
use hier_core::reasoning::{sample_seed, Ablation, AblationKind, HierModel, ModelConfig};
use hier_core::relations::{score_all_pairs, select_relations, JsMode};

#[derive(Parser)]
#[command(name = "hier", version, about = "Hierarchical concept/relation reasoning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    PaperVerbatim,
}

impl From<ModeArg> for JsMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => JsMode::Standard,
            ModeArg::PaperVerbatim => JsMode::PaperVerbatim,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    None,
    Concept,
    Relation,
    Cot,
    Evolution,
}

impl AblateArg {
    fn kind(self) -> Option<AblationKind> {
        match self {
            AblateArg::None => None,
            AblateArg::Concept => Some(AblationKind::Concept),
            AblateArg::Relation => Some(AblationKind::Relation),
            AblateArg::Cot => Some(AblationKind::Cot),
            AblateArg::Evolution => Some(AblationKind::Evolution),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic split as HSE (or JSON Lines for a .jsonl path).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 12)]
        tokens: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.25)]
        distractors: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster each sample's tokens into concepts.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score and select concept pairs from a `cluster` output file.
    Relations {
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, value_enum, default_value = "standard")]
        mode: ModeArg,
        /// Trained checkpoint supplying the encoder; a fresh one from `--seed` otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample predictions and gate scores as JSON Lines on stdout.
    Reason {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        ablate: AblateArg,
    },
    /// Train from a TOML config; history goes to stdout as JSON Lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.hck")]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on an HSE file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
    },
    /// Train once per seed and report mean and standard deviation.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Train the full pipeline and one ablated variant; compare test metrics.
    Ablate {
        #[arg(long, value_enum)]
        which: AblateArg,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn emit(out: &mut impl Write, value: &Value) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn load_config(path: &Path) -> Result<(Config, PathBuf)> {
    let cfg = Config::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn generate(args: Command) -> Result<()> {
    let Command::Generate {
        out,
        split,
        classes,
        per_class,
        d,
        tokens,
        noise,
        distractors,
        seed,
    } = args
    else {
        unreachable!()
    };
    let params = SyntheticParams {
        n_classes: classes,
        samples_per_class: per_class,
        d,
        tokens_per_sample: tokens,
        noise_std: noise,
        distractor_fraction: distractors,
        seed,
    };
    let ds = generate_split(&params, split.into())?;
    if out.extension().is_some_and(|e| e == "jsonl") {
        write_jsonl(&ds, &out)?;
    } else {
        write_hse(&ds, &out)?;
    }
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cluster_cmd(input: &Path, k: usize, iters: usize, seed: u64, alpha: f64, out: &Path) -> Result<()> {
    let ds = ingest_embeddings(input)?;
    let opts = ClusterOptions {
        iterations: iters,
        ..ClusterOptions::default()
    };
    let mut w = jsonl_writer(out)?;
    for s in ds.samples() {
        let kk = k.min(s.sequence.len());
        let (concepts, assign) = cluster_values(&s.sequence, ds.labels(), kk, alpha, sample_seed(seed, &s.id), &opts)?;
        emit(
            &mut w,
            &json!({
                "id": s.id,
                "label": s.label,
                "n_labels": ds.labels().len(),
                "alpha": concepts.alpha,
                "centroids": rows(&concepts.centroids),
                "hard_counts": assign.hard_counts(),
                "soft_mass": assign.soft_mass(),
            }),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn relations_cmd(concepts: &Path, ratio: f64, mode: JsMode, model: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let reader = BufReader::new(File::open(concepts).with_context(|| format!("opening {}", concepts.display()))?);
    let mut w = jsonl_writer(out)?;
    let mut fresh: Option<HierModel> = None;
    let trained = model.map(Checkpoint::load).transpose()?;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("line {}", lineno + 1))?;
        let centroids: Vec<Vec<f64>> = serde_json::from_value(v["centroids"].clone())
            .with_context(|| format!("line {}: missing centroids", lineno + 1))?;
        let c = Tensor::from_rows(&centroids)?;
        let m = match &trained {
            Some(ck) => &ck.model,
            None => {
                if fresh.is_none() {
                    let n_labels = v["n_labels"].as_u64().context("concept line lacks n_labels")? as usize;
                    let cfg = ModelConfig {
                        d: c.cols(),
                        n_labels,
                        ..ModelConfig::default()
                    };
                    fresh = Some(HierModel::new(cfg, seed)?);
                }
                fresh.as_ref().expect("just set")
            }
        };
        let (store, enc) = (&m.store, m.encoder());
        let set = select_relations(score_all_pairs(&c, enc, store, mode)?, ratio)?;
        let rels: Vec<Value> = set
            .selected
            .iter()
            .map(|r| json!({"pair": [r.pair.0, r.pair.1], "score": r.score, "vector": r.vector}))
            .collect();
        emit(&mut w, &json!({"id": v["id"], "retention_ratio": ratio, "relations": rels}))?;
    }
    w.flush()?;
    Ok(())
}

fn reason_cmd(model: &Path, input: &Path, ablate: AblateArg) -> Result<()> {
    let mut ck = Checkpoint::load(model)?;
    if let Some(kind) = ablate.kind() {
        ck.model.config.ablation = Ablation::only(kind);
    }
    let ds = ingest_embeddings(input)?;
    let names = ds.labels().names();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for s in ds.samples() {
        let p = ck.model.predict(&s.sequence, ds.labels(), sample_seed(ck.seed, &s.id))?;
        emit(
            &mut out,
            &json!({
                "id": s.id,
                "label": s.label,
                "predicted": p.label,
                "predicted_name": names[p.label],
                "probs": p.probs,
                "concept_scores": p.concept_scores,
                "relation_scores": p.relation_scores,
                "relation_pairs": p.relation_pairs,
                "relation_js": p.relation_js,
            }),
        )?;
    }
    Ok(())
}

fn train_cmd(config: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let (cfg, base) = load_config(config)?;
    let splits = cfg.data.load(cfg.d, &base)?;
    let result = harness::train(&cfg, &splits)?;
    let stdout = io::stdout();
    let mut so = stdout.lock();
    for rec in &result.history {
        emit(&mut so, &serde_json::to_value(rec)?)?;
    }
    if let Some(h) = history {
        harness::write_jsonl(h, &result.history)?;
    }
    result.checkpoint.save(out)?;
    let test = harness::evaluate(&result.checkpoint.model, &splits.test, cfg.seed, cfg.beta)?;
    emit(
        &mut so,
        &json!({"best_epoch": result.best_epoch, "checkpoint": out.display().to_string(), "test": test.metrics}),
    )?;
    Ok(())
}

fn eval_cmd(checkpoint: &Path, input: &Path, beta: f64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = ingest_embeddings(input)?;
    if ds.labels().names() != ck.labels.as_slice() {
        bail!("label set of {} does not match the checkpoint", input.display());
    }
    let ev = harness::evaluate(&ck.model, &ds, ck.seed, beta)?;
    println!("{}", json!({"loss": ev.loss, "metrics": ev.metrics}));
    Ok(())
}

fn sweep_cmd(config: &Path, seeds: &[u64]) -> Result<()> {
    let (cfg, base) = load_config(config)?;
    let splits = cfg.data.load(cfg.d, &base)?;
    let res = harness::run_seed_sweep(&cfg, &splits, seeds)?;
    let stdout = io::stdout();
    let mut so = stdout.lock();
    for r in &res.runs {
        emit(&mut so, &serde_json::to_value(r)?)?;
    }
    emit(&mut so, &json!({"summary": res.summary}))?;
    Ok(())
}

fn ablate_cmd(which: AblateArg, config: Option<&Path>) -> Result<()> {
    let Some(kind) = which.kind() else {
        bail!("--which must name a component");
    };
    let (cfg, base) = match config {
        Some(p) => load_config(p)?,
        None => (Config::default(), PathBuf::new()),
    };
    let splits = cfg.data.load(cfg.d, &base)?;
    let stdout = io::stdout();
    let mut so = stdout.lock();
    for (name, ablation) in [("full", cfg.ablation), (kind_name(kind), cfg.ablation.with(kind))] {
        let run = Config { ablation, ..cfg.clone() };
        let res = harness::train(&run, &splits)?;
        let test = harness::evaluate(&res.checkpoint.model, &splits.test, run.seed, run.beta)?;
        emit(&mut so, &json!({"variant": name, "best_epoch": res.best_epoch, "test": test.metrics.scalars()}))?;
    }
    Ok(())
}

fn kind_name(kind: AblationKind) -> &'static str {
    match kind {
        AblationKind::Concept => "w/o concept",
        AblationKind::Relation => "w/o relation",
        AblationKind::Cot => "w/o cot",
        AblationKind::Evolution => "w/o self-evolution",
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let res = run(cli.command);
    // a closed downstream pipe (e.g. `| head`) is not an error
    if let Err(e) = &res {
        if e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) {
            return Ok(());
        }
    }
    res
}

fn run(command: Command) -> Result<()> {
    match command {
        cmd @ Command::Generate { .. } => generate(cmd),
        Command::Cluster {
            input,
            k,
            iters,
            seed,
            alpha,
            out,
        } => cluster_cmd(&input, k, iters, seed, alpha, &out),
        Command::Relations {
            concepts,
            ratio,
            mode,
            model,
            seed,
            out,
        } => relations_cmd(&concepts, ratio, mode.into(), model.as_deref(), seed, &out),
        Command::Reason { model, input, ablate } => reason_cmd(&model, &input, ablate),
        Command::Train { config, out, history } => train_cmd(&config, &out, history.as_deref()),
        Command::Eval { checkpoint, input, beta } => eval_cmd(&checkpoint, &input, beta),
        Command::Sweep { config, seeds } => sweep_cmd(&config, &seeds),
        Command::Ablate { which, config } => ablate_cmd(which, config.as_deref()),
    }
}
