//! On-disk training runs: loss log, rolling checkpoints, exact resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchCounters, OptimState, StepRecord, TrainConfig, Trainer, LOG_HEADER};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelWeights};

pub const LOG_FILE: &str = "loss_log.tsv";
const CHECKPOINTS: &str = "checkpoints";
const LATEST: &str = "LATEST";
const TRAINER_FILE: &str = "trainer.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub finished: bool,
    pub counters: BatchCounters,
    pub checkpoint: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    step: u64,
    counters: BatchCounters,
    config: TrainConfig,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Directory of the most recent checkpoint under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let pointer = run_dir.join(CHECKPOINTS).join(LATEST);
    let name = io(&pointer, fs::read_to_string(&pointer))?;
    Ok(run_dir.join(CHECKPOINTS).join(name.trim()))
}

fn write_checkpoint(run_dir: &Path, t: &Trainer<'_>) -> Result<PathBuf> {
    let root = run_dir.join(CHECKPOINTS);
    io(&root, fs::create_dir_all(&root))?;
    let name = format!("step-{:07}", t.step);
    let dir = root.join(&name);
    let tmp = root.join(format!("{name}.tmp"));
    if tmp.exists() {
        io(&tmp, fs::remove_dir_all(&tmp))?;
    }
    save_checkpoint(&tmp, &t.weights)?;
    t.optim.save(&tmp)?;
    let state = TrainerState {
        step: t.step,
        counters: t.counters,
        config: t.config.clone(),
    };
    let state_path = tmp.join(TRAINER_FILE);
    io(
        &state_path,
        fs::write(&state_path, serde_json::to_vec_pretty(&state)?),
    )?;
    if dir.exists() {
        io(&dir, fs::remove_dir_all(&dir))?;
    }
    io(&dir, fs::rename(&tmp, &dir))?;

    let pointer = root.join(LATEST);
    let pointer_tmp = root.join(format!("{LATEST}.tmp"));
    io(&pointer_tmp, fs::write(&pointer_tmp, &name))?;
    io(&pointer, fs::rename(&pointer_tmp, &pointer))?;

    // Only the newest checkpoint is kept.
    for entry in io(&root, fs::read_dir(&root))? {
        let entry = io(&root, entry)?;
        let n = entry.file_name().to_string_lossy().into_owned();
        if n.starts_with("step-") && n != name {
            io(&entry.path(), fs::remove_dir_all(entry.path()))?;
        }
    }
    Ok(dir)
}

/// Keeps the header and every record up to `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let file = io(path, File::open(path))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = io(path, line)?;
        let s = line.split('\t').next().unwrap_or("");
        match s.parse::<u64>() {
            Ok(n) if n <= step => kept.push(line),
            Ok(_) => {}
            Err(_) if line == LOG_HEADER => kept.push(line),
            Err(_) => {
                return Err(Error::Invalid(format!(
                    "unreadable loss log line `{line}` in {}",
                    path.display()
                )))
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    io(path, fs::write(path, text))
}

/// Trains `init` under `config`, writing `loss_log.tsv` and checkpoints into
/// `out`. With `resume`, `init` is ignored and the run continues from the
/// latest checkpoint; the log is cut back to that step first, so an
/// interrupted-and-resumed run produces the same log as an uninterrupted one.
pub fn train_run(
    out: &Path,
    init: ModelWeights,
    split: &Split,
    vocab_size: usize,
    pivot: usize,
    config: &TrainConfig,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<RunSummary> {
    io(out, fs::create_dir_all(out))?;
    let log_path = out.join(LOG_FILE);
    let mut trainer = if opts.resume {
        let ckpt = latest_checkpoint(out)?;
        let weights = load_checkpoint(&ckpt)?;
        let state_path = ckpt.join(TRAINER_FILE);
        let state: TrainerState = serde_json::from_slice(&io(&state_path, fs::read(&state_path))?)?;
        if &state.config != config {
            return Err(Error::Config(
                "training config differs from the one the checkpoint was written with".into(),
            ));
        }
        let optim = OptimState::load(&ckpt)?;
        let mut t = Trainer::new(config.clone(), weights, split, vocab_size, pivot)?;
        t.resume(state.step, optim, state.counters);
        truncate_log(&log_path, state.step)?;
        t
    } else {
        let ckpts = out.join(CHECKPOINTS);
        if ckpts.exists() {
            io(&ckpts, fs::remove_dir_all(&ckpts))?;
        }
        io(&log_path, fs::write(&log_path, format!("{LOG_HEADER}\n")))?;
        Trainer::new(config.clone(), init, split, vocab_size, pivot)?
    };

    let mut log = io(&log_path, OpenOptions::new().append(true).open(&log_path))?;
    let mut checkpoint = if opts.resume {
        Some(latest_checkpoint(out)?)
    } else {
        None
    };
    while !trainer.is_done() {
        if opts.stop_after.is_some_and(|s| trainer.step >= s) {
            break;
        }
        let record = trainer.step()?;
        io(&log_path, writeln!(log, "{}", record.log_line()))?;
        on_step(&record);
        if trainer.step % config.checkpoint_every == 0
            || trainer.at_phase_end()
            || trainer.is_done()
        {
            io(&log_path, log.flush())?;
            checkpoint = Some(write_checkpoint(out, &trainer)?);
        }
    }
    io(&log_path, log.flush())?;
    let checkpoint = match checkpoint {
        Some(c) if c.ends_with(format!("step-{:07}", trainer.step)) => c,
        _ => write_checkpoint(out, &trainer)?,
    };
    Ok(RunSummary {
        steps: trainer.step,
        finished: trainer.is_done(),
        counters: trainer.counters,
        checkpoint,
    })
}

/// `(step, total loss)` pairs from a loss log.
pub fn read_loss_curve(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| *l != LOG_HEADER)
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            let parse = || Some((cols.first()?.parse().ok()?, cols.get(5)?.parse().ok()?));
            parse().ok_or_else(|| {
                Error::Invalid(format!(
                    "unreadable loss log line `{line}` in {}",
                    path.display()
                ))
            })
        })
        .collect()
}
