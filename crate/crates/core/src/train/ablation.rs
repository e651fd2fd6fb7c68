use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{retrieval_eval, Ablation, BatchCounters, EvalReport, TrainConfig, Trainer};
use crate::data::{Split, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::model::{CclmConfig, ModelWeights};

/// Outcome of one pre-train → fine-tune → evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub steps: u64,
    pub counters: BatchCounters,
    pub report: EvalReport,
}

impl ExperimentResult {
    pub fn pivot_recall(&self) -> f64 {
        self.report
            .language(&self.report.pivot)
            .map_or(0.0, |l| l.average_recall)
    }

    pub fn transfer_recall(&self) -> f64 {
        self.report.transfer_average_recall().unwrap_or(0.0)
    }
}

/// Trains a fresh model (initialized from `train.seed`) on the corpus'
/// training split and evaluates retrieval on `eval_split`.
pub fn run_experiment(
    corpus: &SyntheticCorpus,
    base_model: &CclmConfig,
    train: &TrainConfig,
    eval_split: &Split,
    top_k: usize,
) -> Result<ExperimentResult> {
    let config = train.model_config(base_model);
    let weights = ModelWeights::init(&config, train.seed)?;
    let pivot = corpus.spec.pivot;
    let mut t = Trainer::new(
        train.clone(),
        weights,
        &corpus.train,
        corpus.vocab.len(),
        pivot,
    )?;
    t.run(|_| {})?;
    let names: Vec<String> = corpus.languages.iter().map(|l| l.name.clone()).collect();
    let report = retrieval_eval(&t.weights, eval_split, &names, pivot, top_k)?;
    Ok(ExperimentResult {
        ablation: train.ablation,
        seed: train.seed,
        steps: t.step,
        counters: t.counters,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub pivot_recall: Spread,
    pub transfer_recall: Spread,
    /// Transfer over pivot average recall; NaN for runs whose pivot scored 0.
    pub transfer_gap: Spread,
    /// Summed over seeds.
    pub counters: BatchCounters,
    pub runs: Vec<ExperimentResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} steps, seeds {:?}\n{:<28} {:>15} {:>15} {:>15} {:>8} {:>8}\n",
            self.steps,
            self.seeds,
            "variant",
            "pivot avg R",
            "transfer avg R",
            "gap",
            "modal",
            "lingual"
        );
        for r in &self.rows {
            let f = |x: Spread| format!("{:.3}±{:.3}", x.mean, x.std);
            let _ = writeln!(
                s,
                "{:<28} {:>15} {:>15} {:>15} {:>8} {:>8}",
                r.ablation.label(),
                f(r.pivot_recall),
                f(r.transfer_recall),
                f(r.transfer_gap),
                r.counters.cross_modal,
                r.counters.cross_lingual
            );
        }
        s
    }
}

/// Runs every variant under every seed with the same budget and summarizes
/// pivot and transfer-language average recall.
pub fn run_ablation_suite(
    corpus: &SyntheticCorpus,
    base_model: &CclmConfig,
    base_train: &TrainConfig,
    variants: &[Ablation],
    seeds: &[u64],
    eval_split: &Split,
    top_k: usize,
    mut on_run: impl FnMut(&ExperimentResult),
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "the ablation suite needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let steps = base_train.total_steps();
    let mut rows = Vec::new();
    for &ablation in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let train = TrainConfig {
                seed,
                ablation,
                ..base_train.clone()
            };
            let r = run_experiment(corpus, base_model, &train, eval_split, top_k)?;
            if r.steps != steps {
                return Err(Error::Config(format!(
                    "budget mismatch: {} ran {} steps, expected {steps}",
                    ablation, r.steps
                )));
            }
            on_run(&r);
            runs.push(r);
        }
        let pivot: Vec<f64> = runs.iter().map(ExperimentResult::pivot_recall).collect();
        let transfer: Vec<f64> = runs.iter().map(ExperimentResult::transfer_recall).collect();
        let gap: Vec<f64> = pivot
            .iter()
            .zip(&transfer)
            .map(|(&p, &t)| if p > 0.0 { t / p } else { f64::NAN })
            .collect();
        let counters = runs
            .iter()
            .fold(BatchCounters::default(), |acc, r| BatchCounters {
                cross_modal: acc.cross_modal + r.counters.cross_modal,
                cross_lingual: acc.cross_lingual + r.counters.cross_lingual,
            });
        rows.push(AblationRow {
            ablation,
            pivot_recall: Spread::of(&pivot),
            transfer_recall: Spread::of(&transfer),
            transfer_gap: Spread::of(&gap),
            counters,
            runs,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        steps,
        rows,
    })
}
