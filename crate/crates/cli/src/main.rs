mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cclm::data::{build_corpus, Split, SyntheticCorpus};
use cclm::model::{checkpoint_digest, load_checkpoint, ModelWeights};
use cclm::objectives::{gradient_suite, SuiteOptions};
use cclm::train::{
    export_embeddings, latest_checkpoint, read_loss_curve, retrieval_eval, train_run, Ablation,
    RunOptions, LOG_FILE,
};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "cclm",
    version,
    about = "Cross-view language modeling on a synthetic multilingual corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train, then fine-tune for retrieval on pivot-language captions.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit once this many steps are done.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Overrides `train.ablation`.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Two-stage retrieval on one split; writes a JSON report.
    Eval {
        #[command(flatten)]
        io: SplitIo,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `eval.top_k`.
        #[arg(long)]
        top_k: Option<usize>,
        /// Evaluate at another input resolution, interpolating the image
        /// position table.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Finite-difference checks of every primitive and of the total loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random instances per primitive.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write pooled [CLS] embeddings of every image and caption in a split.
    ExportEmbeddings {
        #[command(flatten)]
        io: SplitIo,
    },
}

#[derive(Args)]
struct SplitIo {
    /// A checkpoint directory, or a run directory (its latest checkpoint).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train {
            config,
            corpus,
            out,
            resume,
            stop_after,
            ablation,
        } => train(
            config.as_deref(),
            &corpus,
            &out,
            RunOptions { resume, stop_after },
            ablation,
        ),
        Command::Eval {
            io,
            config,
            top_k,
            image_size,
        } => eval(&io, config.as_deref(), top_k, image_size),
        Command::Gradcheck {
            config,
            trials,
            inject_fault,
        } => gradcheck(config.as_deref(), trials, inject_fault),
        Command::ExportEmbeddings { io } => export(&io),
    }
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let corpus = build_corpus(&cfg.data)?;
    let manifest = corpus
        .save(out)
        .with_context(|| format!("writing corpus to {}", out.display()))?;
    cfg.echo(out)?;
    println!("corpus digest {}", manifest.digest);
    println!(
        "train {} scenes + {} parallel pairs, dev {}, test {}, vocab {}",
        corpus.train.scenes.len(),
        corpus.train.parallel.len(),
        corpus.dev.scenes.len(),
        corpus.test.scenes.len(),
        corpus.vocab.len()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let (corpus, _) = SyntheticCorpus::load(dir)
        .with_context(|| format!("loading corpus from {}", dir.display()))?;
    Ok(corpus)
}

fn train(
    config: Option<&Path>,
    corpus_dir: &Path,
    out: &Path,
    opts: RunOptions,
    ablation: Option<Ablation>,
) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(a) = ablation {
        cfg.train.ablation = a;
    }
    let (corpus, manifest) = SyntheticCorpus::load(corpus_dir)
        .with_context(|| format!("loading corpus from {}", corpus_dir.display()))?;
    let expected = build_corpus(&cfg.data)?.digest()?;
    if manifest.digest != expected {
        bail!(
            "corpus digest {} does not match the configuration (expected {expected}); regenerate it with gen-data",
            manifest.digest
        );
    }
    cfg.echo(out)?;

    let model = cfg.train.model_config(&cfg.model_for(corpus.vocab.len()));
    let init = ModelWeights::init(&model, cfg.seed)?;
    info!(
        "{} parameters, ablation {}, {} steps",
        init.count_parameters().total,
        cfg.train.ablation,
        cfg.train.total_steps()
    );
    let every = (cfg.train.total_steps() / 20).max(1);
    let summary = train_run(
        out,
        init,
        &corpus.train,
        corpus.vocab.len(),
        corpus.spec.pivot,
        &cfg.train,
        &opts,
        |r| {
            if r.step % every == 0 {
                info!(
                    "step {} {} total {:.4} lr {:.2e}",
                    r.step, r.kind, r.terms.total, r.lr
                );
            }
        },
    )?;
    println!(
        "{} after {} steps ({} image-caption, {} translation batches)",
        if summary.finished {
            "finished"
        } else {
            "stopped"
        },
        summary.steps,
        summary.counters.cross_modal,
        summary.counters.cross_lingual
    );
    println!(
        "checkpoint {} digest {}",
        summary.checkpoint.display(),
        checkpoint_digest(&summary.checkpoint)?
    );
    Ok(())
}

/// A run directory resolves to its latest checkpoint.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    ensure!(
        path.is_dir(),
        "checkpoint {} is not a directory",
        path.display()
    );
    if path.join("checkpoints").is_dir() {
        return Ok(latest_checkpoint(path)?);
    }
    Ok(path.to_path_buf())
}

fn open_split(io: &SplitIo) -> Result<(ModelWeights, SyntheticCorpus, Split, PathBuf)> {
    let ckpt = resolve_checkpoint(&io.checkpoint)?;
    let weights =
        load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let corpus = load_corpus(&io.corpus)?;
    ensure!(
        weights.config.vocab_size == corpus.vocab.len(),
        "checkpoint vocabulary ({}) does not match the corpus ({})",
        weights.config.vocab_size,
        corpus.vocab.len()
    );
    let split = corpus.split(&io.split)?.clone();
    Ok((weights, corpus, split, ckpt))
}

fn language_names(corpus: &SyntheticCorpus) -> Vec<String> {
    corpus.languages.iter().map(|l| l.name.clone()).collect()
}

fn eval(
    io: &SplitIo,
    config: Option<&Path>,
    top_k: Option<usize>,
    image_size: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let (mut weights, corpus, mut split, ckpt) = open_split(io)?;
    if let Some(size) = image_size {
        weights = weights.with_image_size(size)?;
    }
    if split
        .images()
        .first()
        .is_none_or(|im| im.height != weights.config.image_size)
    {
        split = split.rendered_at(weights.config.image_size)?;
    }
    let top_k = top_k.unwrap_or(cfg.eval.top_k);
    let mut report = retrieval_eval(
        &weights,
        &split,
        &language_names(&corpus),
        corpus.spec.pivot,
        top_k,
    )?;
    // Checkpoints live two levels below the run directory and its loss log.
    if let Some(log) = ckpt
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join(LOG_FILE))
        .filter(|p| p.is_file())
    {
        report.loss_curve = read_loss_curve(&log)?;
    }
    if let Some(dir) = io.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&io.out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", io.out.display()))?;
    print!("{}", report.summary_table());
    Ok(())
}

fn gradcheck(config: Option<&Path>, trials: usize, fault: Option<String>) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let opts = SuiteOptions {
        seed: cfg.seed,
        trials,
        fault,
        ..SuiteOptions::default()
    };
    let checks = gradient_suite(&cfg.model, &cfg.data, &opts)?;
    println!(
        "{:<28} {:>14} {:>8}  result",
        "check", "max rel error", "coords"
    );
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!c.passed());
        let at = c
            .worst
            .as_deref()
            .map_or(String::new(), |w| format!(" (worst at {w})"));
        println!(
            "{:<28} {:>14.3e} {:>8}  {verdict}{at}",
            c.name, c.max_rel_error, c.coords_checked
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", checks.len());
    }
    println!("all {} gradient checks passed", checks.len());
    Ok(())
}

fn export(io: &SplitIo) -> Result<()> {
    let (weights, corpus, mut split, _) = open_split(io)?;
    if split
        .images()
        .first()
        .is_none_or(|im| im.height != weights.config.image_size)
    {
        split = split.rendered_at(weights.config.image_size)?;
    }
    if let Some(dir) = io.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(&io.out).with_context(|| format!("creating {}", io.out.display()))?;
    let mut w = BufWriter::new(file);
    let rows = export_embeddings(&weights, &split, &language_names(&corpus), &mut w)?;
    w.flush()?;
    println!("wrote {rows} embeddings to {}", io.out.display());
    Ok(())
}
