use rand::seq::index::sample;
use rand::Rng;

use super::corpus::Split;
use super::language::{with_cls, PAD, SEP};
use super::masking::mask_tokens;
use crate::error::{Error, Result};
use crate::model::{TokenBatch, ViewKind};
use crate::nn::Image;
use crate::objectives::MlmTarget;

/// The non-text side of a pair.
#[derive(Clone, Debug, PartialEq)]
pub enum OtherView {
    Images(Vec<Image>),
    Text(TokenBatch),
}

/// Homogeneous batch of paired views. `text` is the fusion query side and the
/// side that gets masked; contrastive and matching terms read `text`, only the
/// conditional MLM term reads `masked`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewBatch {
    pub kind: ViewKind,
    pub text: TokenBatch,
    pub masked: TokenBatch,
    pub targets: Vec<MlmTarget>,
    pub other: OtherView,
}

impl CrossViewBatch {
    pub fn len(&self) -> usize {
        self.text.batch
    }

    pub fn is_empty(&self) -> bool {
        self.text.batch == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Probability that a step draws a cross-lingual batch.
    pub mix_ratio: f64,
    pub mask_rate: f64,
    /// Restricts cross-modal pairs to captions in this language.
    pub caption_language: Option<usize>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            mix_ratio: 0.5,
            mask_rate: 0.15,
            caption_language: None,
        }
    }
}

fn mask_rows(
    seqs: &[Vec<usize>],
    rate: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<(TokenBatch, Vec<MlmTarget>)> {
    let mut masked = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for (row, s) in seqs.iter().enumerate() {
        let (m, slots) = mask_tokens(s, rate, vocab_size, rng)?;
        masked.push(m);
        targets.extend(slots.into_iter().map(|t| MlmTarget {
            row,
            pos: t.pos,
            token: t.token,
        }));
    }
    Ok((TokenBatch::from_sequences(&masked, PAD)?, targets))
}

/// Image-caption batch over caption records `captions` of `split`.
pub fn cross_modal_batch(
    split: &Split,
    captions: &[usize],
    vocab_size: usize,
    mask_rate: f64,
    mask_rng: &mut impl Rng,
) -> Result<CrossViewBatch> {
    let seqs: Vec<Vec<usize>> = captions
        .iter()
        .map(|&c| with_cls(&split.captions[c].ids))
        .collect();
    let images = captions
        .iter()
        .map(|&c| split.image(split.captions[c].scene).clone())
        .collect();
    let (masked, targets) = mask_rows(&seqs, mask_rate, vocab_size, mask_rng)?;
    Ok(CrossViewBatch {
        kind: ViewKind::CrossModal,
        text: TokenBatch::from_sequences(&seqs, PAD)?,
        masked,
        targets,
        other: OtherView::Images(images),
    })
}

/// Sentence-translation batch; `swap[i]` makes side b of pair i the masked
/// query side.
pub fn cross_lingual_batch(
    split: &Split,
    pairs: &[usize],
    swap: &[bool],
    vocab_size: usize,
    mask_rate: f64,
    mask_rng: &mut impl Rng,
) -> Result<CrossViewBatch> {
    let mut a = Vec::with_capacity(pairs.len());
    let mut b = Vec::with_capacity(pairs.len());
    for (&p, &s) in pairs.iter().zip(swap) {
        let r = &split.parallel[p];
        let (x, y) = if s {
            (&r.ids_b, &r.ids_a)
        } else {
            (&r.ids_a, &r.ids_b)
        };
        a.push(with_cls(x));
        b.push(with_cls(y));
    }
    let (masked, targets) = mask_rows(&a, mask_rate, vocab_size, mask_rng)?;
    Ok(CrossViewBatch {
        kind: ViewKind::CrossLingual,
        text: TokenBatch::from_sequences(&a, PAD)?,
        masked,
        targets,
        other: OtherView::Text(TokenBatch::from_sequences(&b, PAD)?),
    })
}

/// Draws the view kind, then `batch_size` distinct examples of that kind.
pub fn make_batch(
    split: &Split,
    vocab_size: usize,
    opts: &BatchOptions,
    batch_rng: &mut impl Rng,
    mask_rng: &mut impl Rng,
) -> Result<CrossViewBatch> {
    if !(0.0..=1.0).contains(&opts.mix_ratio) {
        return Err(Error::Config(format!(
            "mix_ratio {} outside [0, 1]",
            opts.mix_ratio
        )));
    }
    let lingual = batch_rng.random_bool(opts.mix_ratio);
    let pool: Vec<usize> = if lingual {
        (0..split.parallel.len()).collect()
    } else {
        match opts.caption_language {
            Some(l) => split.captions_in(l),
            None => (0..split.captions.len()).collect(),
        }
    };
    let kind = if lingual {
        ViewKind::CrossLingual
    } else {
        ViewKind::CrossModal
    };
    if pool.is_empty() {
        return Err(Error::Invalid(format!(
            "split {} has no {kind} examples",
            split.name
        )));
    }
    if opts.batch_size == 0 || opts.batch_size > pool.len() {
        return Err(Error::Config(format!(
            "batch size {} needs 1..={} {kind} examples in split {}",
            opts.batch_size,
            pool.len(),
            split.name
        )));
    }
    let picks: Vec<usize> = sample(batch_rng, pool.len(), opts.batch_size)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    if lingual {
        let swap: Vec<bool> = (0..picks.len())
            .map(|_| batch_rng.random_bool(0.5))
            .collect();
        cross_lingual_batch(split, &picks, &swap, vocab_size, opts.mask_rate, mask_rng)
    } else {
        cross_modal_batch(split, &picks, vocab_size, opts.mask_rate, mask_rng)
    }
}

/// `[CLS] a [SEP] b` for every pair of a cross-lingual batch, masked afresh
/// over both sentences.
pub fn tlm_inputs(
    batch: &CrossViewBatch,
    vocab_size: usize,
    mask_rate: f64,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<(TokenBatch, Vec<MlmTarget>)> {
    let OtherView::Text(other) = &batch.other else {
        return Err(Error::Invalid(
            "translation LM needs a cross-lingual batch".into(),
        ));
    };
    let seqs: Vec<Vec<usize>> = (0..batch.len())
        .map(|i| {
            let mut s = batch.text.sequence(i);
            s.push(SEP);
            s.extend_from_slice(&other.sequence(i)[1..]);
            s
        })
        .collect();
    if let Some(s) = seqs.iter().find(|s| s.len() > max_len) {
        return Err(Error::Invalid(format!(
            "concatenated pair of {} tokens exceeds {max_len}",
            s.len()
        )));
    }
    mask_rows(&seqs, mask_rate, vocab_size, rng)
}
