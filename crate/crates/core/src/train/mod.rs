//! Optimization, the pre-train/fine-tune loop, retrieval evaluation and the
//! ablation harness.

mod ablation;
mod eval;
mod export;
mod optim;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, tlm_inputs, BatchOptions, Split};
use crate::error::{Error, Result};
use crate::model::{BoundParams, CclmConfig, Model, ModelWeights, ViewKind};
use crate::objectives::{total_loss, LossTerms, NegativeSampling, Negatives, Objectives};
use crate::rng::substream;
use crate::Tape;

pub use ablation::{
    run_ablation_suite, run_experiment, AblationRow, AblationTable, ExperimentResult, Spread,
};
pub use eval::{
    rank_retrieval, recall_at, retrieval_eval, transfer_gap, two_stage_rank, EvalReport,
    LanguageResult, Rankings, Recall, RECALL_KS,
};
pub use export::{export_embeddings, EMBEDDING_HEADER_PREFIX};
pub use optim::{
    adamw_step, lr_schedule, AdamWConfig, OptimState, MIN_LOG_TAU, REFERENCE_PEAK_LR,
    REFERENCE_WARMUP_STEPS, REFERENCE_WEIGHT_DECAY,
};
pub use run::{latest_checkpoint, read_loss_curve, train_run, RunOptions, RunSummary, LOG_FILE};

/// The model variants compared in the ablation table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    #[default]
    Full,
    NoSharedCrossAttn,
    NoSharedFfn,
    Tlm,
    TlmCl,
    NoParallel,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Self::Full,
        Self::NoSharedCrossAttn,
        Self::NoSharedFfn,
        Self::Tlm,
        Self::TlmCl,
        Self::NoParallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSharedCrossAttn => "w/o-shared-cross-attn",
            Self::NoSharedFfn => "w/o-shared-ffn",
            Self::Tlm => "w/-tlm",
            Self::TlmCl => "w/-tlm-cl",
            Self::NoParallel => "w/o-parallel",
        }
    }

    /// Row label as printed in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "CCLM (full)",
            Self::NoSharedCrossAttn => "w/o shared cross-attn",
            Self::NoSharedFfn => "w/o shared FFN",
            Self::Tlm => "w/ TLM",
            Self::TlmCl => "w/ TLM + CL",
            Self::NoParallel => "w/o parallel sentence pairs",
        }
    }

    pub fn apply_to_model(self, config: &mut CclmConfig) {
        match self {
            Self::NoSharedCrossAttn => config.share_cross_attn = false,
            Self::NoSharedFfn => config.share_ffn = false,
            _ => {}
        }
    }

    /// Objective set for cross-lingual pre-training batches.
    pub fn cross_lingual_objectives(self) -> Objectives {
        match self {
            Self::Tlm => Objectives::TLM,
            Self::TlmCl => Objectives::TLM_CL,
            _ => Objectives::PRETRAIN,
        }
    }

    pub fn uses_parallel(self) -> bool {
        self != Self::NoParallel
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!(
                    "unknown ablation `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl Serialize for Ablation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Budget and batching for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Probability that a batch is cross-lingual.
    pub mix_ratio: f64,
    pub mask_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub negatives: NegativeSampling,
    pub ablation: Ablation,
    /// Write a checkpoint every this many steps (and always at the end of
    /// each phase).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: PhaseConfig {
                steps: 2000,
                batch_size: 16,
                peak_lr: 1e-3,
                warmup_steps: 100,
                mix_ratio: 0.5,
                mask_rate: 0.15,
            },
            finetune: PhaseConfig {
                steps: 300,
                batch_size: 16,
                peak_lr: 2e-4,
                warmup_steps: 30,
                mix_ratio: 0.0,
                mask_rate: 0.15,
            },
            weight_decay: 0.02,
            grad_clip: None,
            negatives: NegativeSampling::Proportional,
            ablation: Ablation::Full,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if p.steps > 0 && p.warmup_steps >= p.steps {
                return Err(Error::Config(format!(
                    "{name}: warmup_steps must be below steps"
                )));
            }
            if p.batch_size < 2 {
                return Err(Error::Config(format!(
                    "{name}: batch_size must be at least 2"
                )));
            }
            if !(0.0..=1.0).contains(&p.mix_ratio) {
                return Err(Error::Config(format!(
                    "{name}: mix_ratio must lie in [0, 1]"
                )));
            }
            if !(p.mask_rate > 0.0 && p.mask_rate < 1.0) {
                return Err(Error::Config(format!(
                    "{name}: mask_rate must lie in (0, 1)"
                )));
            }
            if !(p.peak_lr >= 0.0) {
                return Err(Error::Config(format!(
                    "{name}: peak_lr must be non-negative"
                )));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration with the ablation's sharing toggles applied.
    pub fn model_config(&self, base: &CclmConfig) -> CclmConfig {
        let mut c = base.clone();
        self.ablation.apply_to_model(&mut c);
        c
    }

    pub fn total_steps(&self) -> u64 {
        self.pretrain.steps + self.finetune.steps
    }

    fn phases(&self) -> Vec<(Phase, &PhaseConfig)> {
        [
            (Phase::Pretrain, &self.pretrain),
            (Phase::Finetune, &self.finetune),
        ]
        .into_iter()
        .filter(|(_, p)| p.steps > 0)
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// All three objectives over mixed image-caption and translation batches.
    Pretrain,
    /// Contrastive and matching only, on pivot-language captions.
    Finetune,
}

/// Number of batches of each kind consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCounters {
    pub cross_modal: u64,
    pub cross_lingual: u64,
}

/// One optimizer step, as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based over the whole run.
    pub step: u64,
    pub phase: Phase,
    pub kind: ViewKind,
    pub terms: LossTerms,
    pub lr: f64,
}

impl StepRecord {
    /// `step  view_kind  L_cl  L_match  L_mlm  total  lr`, tab-separated,
    /// with `-` for terms not computed.
    pub fn log_line(&self) -> String {
        let term = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.kind,
            term(self.terms.contrastive),
            term(self.terms.matching),
            term(self.terms.mlm),
            self.terms.total,
            self.lr
        )
    }
}

pub const LOG_HEADER: &str = "step\tview_kind\tL_cl\tL_match\tL_mlm\ttotal\tlr";

/// Drives the optimizer over a training split. All randomness of step `s`
/// comes from substreams indexed by `s`, so a trainer rebuilt from a
/// checkpoint continues exactly.
pub struct Trainer<'s> {
    pub config: TrainConfig,
    pub weights: ModelWeights,
    pub optim: OptimState,
    /// Steps completed.
    pub step: u64,
    pub counters: BatchCounters,
    split: &'s Split,
    vocab_size: usize,
    pivot: usize,
}

impl<'s> Trainer<'s> {
    pub fn new(
        config: TrainConfig,
        weights: ModelWeights,
        split: &'s Split,
        vocab_size: usize,
        pivot: usize,
    ) -> Result<Self> {
        config.validate()?;
        if weights.config.vocab_size != vocab_size {
            return Err(Error::Config(format!(
                "model vocabulary {} does not match the corpus vocabulary {vocab_size}",
                weights.config.vocab_size
            )));
        }
        let optim = OptimState::new(AdamWConfig::default());
        Ok(Self {
            config,
            weights,
            optim,
            step: 0,
            counters: BatchCounters::default(),
            split,
            vocab_size,
            pivot,
        })
    }

    /// Restores mid-run state (see [`train_run`] for the on-disk form).
    pub fn resume(&mut self, step: u64, optim: OptimState, counters: BatchCounters) {
        self.step = step;
        self.optim = optim;
        self.counters = counters;
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Phase and 0-based index within it of the next step.
    fn locate(&self, step: u64) -> Option<(Phase, PhaseConfig, u64)> {
        let mut start = 0;
        for (phase, cfg) in self.config.phases() {
            if step < start + cfg.steps {
                return Some((phase, cfg.clone(), step - start));
            }
            start += cfg.steps;
        }
        None
    }

    /// Whether the step just completed ends a phase.
    pub fn at_phase_end(&self) -> bool {
        self.step > 0
            && self.locate(self.step - 1).map(|(p, ..)| p)
                != self.locate(self.step).map(|(p, ..)| p)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let (phase, pc, local) = self
            .locate(self.step)
            .ok_or_else(|| Error::Invalid("training budget exhausted".into()))?;
        if local == 0 {
            self.optim = OptimState::new(AdamWConfig {
                weight_decay: self.config.weight_decay,
                peak_lr: pc.peak_lr,
                warmup_steps: pc.warmup_steps,
                total_steps: pc.steps,
                grad_clip: self.config.grad_clip,
                ..AdamWConfig::default()
            });
        }
        let index = self.step;
        let seed = self.config.seed;
        let tag = match phase {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        };
        let stream = |name: &str| substream(seed, &format!("{tag}/{name}"), index);
        let ablation = self.config.ablation;
        let mix_ratio = match phase {
            Phase::Pretrain if !ablation.uses_parallel() => 0.0,
            Phase::Pretrain => pc.mix_ratio,
            Phase::Finetune => 0.0,
        };
        let opts = BatchOptions {
            batch_size: pc.batch_size,
            mix_ratio,
            mask_rate: pc.mask_rate,
            caption_language: Some(self.pivot),
        };
        let batch = make_batch(
            self.split,
            self.vocab_size,
            &opts,
            &mut stream("batching"),
            &mut stream("masking"),
        )?;
        let objectives = match (phase, batch.kind) {
            (Phase::Finetune, _) => Objectives::FINETUNE,
            (Phase::Pretrain, ViewKind::CrossLingual) => ablation.cross_lingual_objectives(),
            (Phase::Pretrain, ViewKind::CrossModal) => Objectives::PRETRAIN,
        };
        let tlm = if objectives.tlm {
            Some(tlm_inputs(
                &batch,
                self.vocab_size,
                pc.mask_rate,
                self.weights.config.max_text_len,
                &mut stream("tlm-masking"),
            )?)
        } else {
            None
        };

        let mut tape = Tape::<f32>::new();
        let params = BoundParams::bind_all(&mut tape, &self.weights);
        let mut model = Model::new(&mut tape, &params).with_dropout(stream("dropout"));
        let mut neg_rng = stream("negatives");
        let out = total_loss(
            &mut model,
            &batch,
            objectives,
            Negatives::Sampled(self.config.negatives, &mut neg_rng),
            tlm.as_ref().map(|(t, g)| (t, g.as_slice())),
        )?;
        if let Some((term, value)) = out.terms.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                step: index + 1,
                term,
                value,
            });
        }
        let grads = tape.backward(out.total)?;
        let named = params.named_grads(&grads);
        let lr = lr_schedule(local + 1, pc.warmup_steps, pc.steps, pc.peak_lr);
        adamw_step(&mut self.weights, &named, &mut self.optim, lr)?;

        match batch.kind {
            ViewKind::CrossModal => self.counters.cross_modal += 1,
            ViewKind::CrossLingual => self.counters.cross_lingual += 1,
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            phase,
            kind: batch.kind,
            terms: out.terms,
            lr,
        })
    }

    /// Runs to the end of the budget.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let r = self.step()?;
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }
}

/// Pre-training only: mixed batches, all three objectives (or the ablation's
/// set on translation batches).
pub fn pretrain(
    weights: ModelWeights,
    split: &Split,
    vocab_size: usize,
    pivot: usize,
    config: &TrainConfig,
) -> Result<(ModelWeights, Vec<StepRecord>, BatchCounters)> {
    let cfg = TrainConfig {
        finetune: PhaseConfig {
            steps: 0,
            ..config.finetune.clone()
        },
        ..config.clone()
    };
    let mut t = Trainer::new(cfg, weights, split, vocab_size, pivot)?;
    let log = t.run(|_| {})?;
    Ok((t.weights, log, t.counters))
}

/// Retrieval fine-tuning on pivot-language captions: contrastive and matching
/// terms only.
pub fn finetune_retrieval(
    weights: ModelWeights,
    split: &Split,
    vocab_size: usize,
    pivot: usize,
    config: &TrainConfig,
) -> Result<(ModelWeights, Vec<StepRecord>)> {
    let cfg = TrainConfig {
        pretrain: PhaseConfig {
            steps: 0,
            ..config.pretrain.clone()
        },
        ..config.clone()
    };
    let mut t = Trainer::new(cfg, weights, split, vocab_size, pivot)?;
    let log = t.run(|_| {})?;
    Ok((t.weights, log))
}
