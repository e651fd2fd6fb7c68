//! Contrastive, matching and masked-LM objectives over cross-view batches.
//!
//! One implementation serves both view kinds; the kind only decides which
//! encoder and projection feed each argument.

mod check;
mod mi;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{CrossViewBatch, OtherView};
use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch, ViewFeatures, ViewKind};
use crate::tensor::Element;

pub use check::{gradient_suite, param_name, total_loss_gradcheck, SuiteCheck, SuiteOptions};
pub use mi::{mi_lower_bound_estimate, BatchSampling, DiscreteJoint, MiEstimate};

/// A masked position and the token it originally held.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmTarget {
    pub row: usize,
    pub pos: usize,
    pub token: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(scores)[positive]`.
pub fn info_nce(scores: &[f64], positive: usize) -> Result<f64> {
    if positive >= scores.len() {
        return Err(Error::IndexOutOfRange {
            op: "info_nce",
            index: positive,
            limit: scores.len(),
        });
    }
    if scores.len() == 1 {
        return Ok(0.0);
    }
    let lse = log_sum_exp(scores);
    if !lse.is_finite() {
        return Err(Error::Invalid(format!(
            "info_nce scores have no finite log-sum-exp: {scores:?}"
        )));
    }
    Ok(lse - scores[positive])
}

/// Symmetric InfoNCE with diagonal positives: half the row-wise loss plus
/// half the column-wise loss.
pub fn contrastive_loss<T: Element>(tape: &mut Tape<T>, sim: Var) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    let [n, m] = shape[..] else {
        return Err(Error::Shape(format!(
            "similarity matrix must be rank 2, got {shape:?}"
        )));
    };
    if n != m {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: vec![n],
            rhs: vec![m],
        });
    }
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let rows = tape.cross_entropy_from_logits(sim, &diag)?;
    let simt = tape.transpose(sim, 0, 1)?;
    let cols = tape.cross_entropy_from_logits(simt, &diag)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, 0.5))
}

/// How hard negatives are drawn from a similarity row or column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Softmax over the scores with the positive excluded.
    #[default]
    Proportional,
    /// Uniform over the non-positive entries.
    Uniform,
}

/// One negative partner per row (a b-index) and per column (an a-index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// `for_rows[i]` is the negative b paired with aᵢ.
    pub for_rows: Vec<usize>,
    /// `for_cols[j]` is the negative a paired with bⱼ.
    pub for_cols: Vec<usize>,
}

fn draw_excluding(
    scores: impl Iterator<Item = f64>,
    skip: usize,
    mode: NegativeSampling,
    rng: &mut impl Rng,
) -> usize {
    let scores: Vec<f64> = scores.collect();
    let m = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(k, &s)| match (k == skip, mode) {
            (true, _) => 0.0,
            (false, NegativeSampling::Uniform) => 1.0,
            (false, NegativeSampling::Proportional) => (s - m).exp(),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = Some(k);
            if u < w {
                return k;
            }
            u -= w;
        }
    }
    // Rounding left `u` past the final bucket, or every weight underflowed.
    last.unwrap_or(if skip == 0 { 1 } else { 0 })
}

/// Samples hard negatives from a row-major `n × n` score matrix.
pub fn sample_hard_negatives(
    sim: &[f64],
    n: usize,
    mode: NegativeSampling,
    rng: &mut impl Rng,
) -> Result<HardNegatives> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "hard negatives need at least 2 pairs, got {n}"
        )));
    }
    if sim.len() != n * n {
        return Err(Error::Shape(format!(
            "{} scores for an {n}×{n} matrix",
            sim.len()
        )));
    }
    let for_rows = (0..n)
        .map(|i| draw_excluding((0..n).map(|j| sim[i * n + j]), i, mode, rng))
        .collect();
    let for_cols = (0..n)
        .map(|j| draw_excluding((0..n).map(|i| sim[i * n + j]), j, mode, rng))
        .collect();
    Ok(HardNegatives { for_rows, for_cols })
}

/// Two-way matched/unmatched cross-entropy, averaged over the negatives
/// for b and the negatives for a.
pub fn matching_loss<T: Element>(
    tape: &mut Tape<T>,
    pos: Var,
    neg_b: Var,
    neg_a: Var,
) -> Result<Var> {
    let n = tape.shape(pos).iter().product::<usize>();
    for v in [neg_b, neg_a] {
        if tape.shape(v).iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "matching_loss",
                lhs: tape.shape(pos).to_vec(),
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    let col = |tape: &mut Tape<T>, v: Var| tape.reshape(v, &[n, 1]);
    let p = col(tape, pos)?;
    let nb = col(tape, neg_b)?;
    let na = col(tape, neg_a)?;
    let b = tape.concat(&[p, nb], 1)?;
    let a = tape.concat(&[p, na], 1)?;
    let logits = tape.concat(&[b, a], 0)?;
    tape.cross_entropy_from_logits(logits, &vec![Some(0); 2 * n])
}

/// An MLM-style loss plus whether it had no targets.
#[derive(Clone, Copy, Debug)]
pub struct MlmLoss {
    pub loss: Var,
    /// No masked positions: the loss is 0 and carries no signal.
    pub empty: bool,
}

fn masked_lm<T: Element>(
    model: &mut Model<'_, T>,
    sequence: Var,
    targets: &[MlmTarget],
) -> Result<MlmLoss> {
    if targets.is_empty() {
        let zero = model.tape.constant(crate::Tensor::scalar(T::zero()));
        return Ok(MlmLoss {
            loss: zero,
            empty: true,
        });
    }
    let positions: Vec<(usize, usize)> = targets.iter().map(|t| (t.row, t.pos)).collect();
    let rows = model.gather_positions(sequence, &positions)?;
    let logits = model.mlm_logits(rows)?;
    let labels: Vec<Option<usize>> = targets.iter().map(|t| Some(t.token)).collect();
    let loss = model.tape.cross_entropy_from_logits(logits, &labels)?;
    Ok(MlmLoss { loss, empty: false })
}

/// Mean cross-entropy of the original tokens at masked positions of a fused
/// sequence.
pub fn conditional_mlm_loss<T: Element>(
    model: &mut Model<'_, T>,
    fused: Var,
    targets: &[MlmTarget],
) -> Result<MlmLoss> {
    masked_lm(model, fused, targets)
}

/// Translation LM: masked prediction over `[CLS] a [SEP] b` from the text
/// encoder alone.
pub fn tlm_loss<T: Element>(
    model: &mut Model<'_, T>,
    tokens: &TokenBatch,
    targets: &[MlmTarget],
) -> Result<MlmLoss> {
    let feats = model.encode_text(tokens)?;
    masked_lm(model, feats.sequence, targets)
}

/// Which terms a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub contrastive: bool,
    pub matching: bool,
    pub mlm: bool,
    /// Translation LM in place of conditional MLM (cross-lingual only).
    pub tlm: bool,
}

impl Objectives {
    pub const PRETRAIN: Self = Self {
        contrastive: true,
        matching: true,
        mlm: true,
        tlm: false,
    };
    pub const FINETUNE: Self = Self {
        contrastive: true,
        matching: true,
        mlm: false,
        tlm: false,
    };
    pub const TLM: Self = Self {
        contrastive: false,
        matching: false,
        mlm: false,
        tlm: true,
    };
    pub const TLM_CL: Self = Self {
        contrastive: true,
        matching: false,
        mlm: false,
        tlm: true,
    };
}

/// Source of hard negatives for the matching term.
pub enum Negatives<'r> {
    Sampled(NegativeSampling, &'r mut ChaCha8Rng),
    Fixed(&'r HardNegatives),
}

/// Per-term values for logging. The MLM slot holds the translation LM term
/// when that objective is active.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub contrastive: Option<f64>,
    pub matching: Option<f64>,
    pub mlm: Option<f64>,
    pub total: f64,
    pub mlm_empty: bool,
}

impl LossTerms {
    /// Name of the first non-finite term, in logging order.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("L_cl", self.contrastive),
            ("L_match", self.matching),
            ("L_mlm", self.mlm),
        ]
        .into_iter()
        .find_map(|(n, v)| v.filter(|x| !x.is_finite()).map(|x| (n, x)))
        .or((!self.total.is_finite()).then_some(("total", self.total)))
    }
}

pub struct LossOutput {
    pub total: Var,
    pub terms: LossTerms,
}

fn value<T: Element>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

/// `L_cl + L_match + L_mlm` (or the subset in `objectives`) on one batch.
/// `tlm` supplies the concatenated, masked pairs when `objectives.tlm` is set.
pub fn total_loss<T: Element>(
    model: &mut Model<'_, T>,
    batch: &CrossViewBatch,
    objectives: Objectives,
    negatives: Negatives<'_>,
    tlm: Option<(&TokenBatch, &[MlmTarget])>,
) -> Result<LossOutput> {
    let kind = batch.kind;
    let n = batch.len();
    let mut terms = LossTerms::default();
    let mut parts: Vec<Var> = Vec::new();

    let needs_other =
        objectives.contrastive || objectives.matching || (objectives.mlm && !objectives.tlm);
    let other: Option<ViewFeatures> = if needs_other {
        Some(match &batch.other {
            OtherView::Images(imgs) => model.encode_image(imgs)?,
            OtherView::Text(t) => model.encode_text(t)?,
        })
    } else {
        None
    };

    if objectives.contrastive || objectives.matching {
        let other = other.as_ref().expect("encoded above");
        let text = model.encode_text(&batch.text)?;
        let pa = model.project_w(text.pooled)?;
        let pb = match kind {
            ViewKind::CrossModal => model.project_v(other.pooled)?,
            ViewKind::CrossLingual => model.project_w(other.pooled)?,
        };
        let sim = model.similarity(pa, pb)?;
        if objectives.contrastive {
            let l = contrastive_loss(model.tape, sim)?;
            terms.contrastive = Some(value(model.tape, l));
            parts.push(l);
        }
        if objectives.matching {
            let sampled;
            let neg = match negatives {
                Negatives::Fixed(h) => h,
                Negatives::Sampled(mode, rng) => {
                    let s = model.tape.value(sim).to_f64_vec();
                    sampled = sample_hard_negatives(&s, n, mode, rng)?;
                    &sampled
                }
            };
            let ids: Vec<usize> = (0..n).collect();
            let text_rows: Vec<usize> = ids
                .iter()
                .chain(&ids)
                .chain(&neg.for_cols)
                .copied()
                .collect();
            let other_rows: Vec<usize> = ids
                .iter()
                .chain(&neg.for_rows)
                .chain(&ids)
                .copied()
                .collect();
            let t = model.select(&text, &text_rows)?;
            let o = model.select(other, &other_rows)?;
            let fused = model.fuse(&t, &o, kind)?;
            let scores = model.match_scores(fused)?;
            let pos = model.tape.slice(scores, 0, 0, n)?;
            let neg_b = model.tape.slice(scores, 0, n, n)?;
            let neg_a = model.tape.slice(scores, 0, 2 * n, n)?;
            let l = matching_loss(model.tape, pos, neg_b, neg_a)?;
            terms.matching = Some(value(model.tape, l));
            parts.push(l);
        }
    }

    if objectives.tlm {
        if kind != ViewKind::CrossLingual {
            return Err(Error::Invalid(
                "translation LM applies to cross-lingual batches only".into(),
            ));
        }
        let (tokens, targets) =
            tlm.ok_or_else(|| Error::Invalid("translation LM inputs missing".into()))?;
        let l = tlm_loss(model, tokens, targets)?;
        terms.mlm = Some(value(model.tape, l.loss));
        terms.mlm_empty = l.empty;
        parts.push(l.loss);
    } else if objectives.mlm {
        let other = other.as_ref().expect("encoded above");
        let masked = model.encode_text(&batch.masked)?;
        let fused = model.fuse(&masked, other, kind)?;
        let l = conditional_mlm_loss(model, fused, &batch.targets)?;
        terms.mlm = Some(value(model.tape, l.loss));
        terms.mlm_empty = l.empty;
        parts.push(l.loss);
    }

    let mut total = *parts
        .first()
        .ok_or_else(|| Error::Config("no loss term selected".into()))?;
    for &p in &parts[1..] {
        total = model.tape.add(total, p)?;
    }
    terms.total = value(model.tape, total);
    Ok(LossOutput { total, terms })
}
