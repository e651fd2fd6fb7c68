//! The two-encoder, shared-fusion model and its heads.
//!
//! Text features are always the query stream of the fusion stack; the other
//! view (image patches or a second sentence) supplies keys and values.

mod checkpoint;
mod forward;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BlockConfig;

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint, TensorArchive};
pub use forward::{BoundParams, Model, ViewFeatures};
pub use weights::{param_shapes, ModelWeights, ParamCounts};

/// Parameter counts of the full-size reference configurations.
pub const FULL_BASE_PARAMS: u64 = 420_000_000;
pub const FULL_LARGE_PARAMS: u64 = 970_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Output at the prepended [CLS] slot.
    Cls,
    /// Mean over patch outputs (images only; text always pools at [CLS]).
    Mean,
}

/// The pairing a batch represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    /// Image and caption.
    CrossModal,
    /// Sentence and translation.
    CrossLingual,
}

impl ViewKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::CrossModal => "cross_modal",
            ViewKind::CrossLingual => "cross_lingual",
        }
    }

    /// Parameter-name suffix of the unshared fusion weights.
    pub(crate) fn key(self) -> &'static str {
        match self {
            ViewKind::CrossModal => "cm",
            ViewKind::CrossLingual => "cl",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_modal" => Ok(ViewKind::CrossModal),
            "cross_lingual" => Ok(ViewKind::CrossLingual),
            other => Err(Error::Invalid(format!("unknown view kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CclmConfig {
    pub img_layers: usize,
    pub txt_layers: usize,
    pub fusion_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Longest token sequence the text position table covers.
    pub max_text_len: usize,
    pub pool_mode: PoolMode,
    pub share_cross_attn: bool,
    pub share_ffn: bool,
    pub temperature_init: f64,
    pub dropout: f64,
}

impl CclmConfig {
    /// Small enough to finite-difference a whole batch.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            img_layers: 3,
            txt_layers: 3,
            fusion_layers: 2,
            d: 64,
            heads: 4,
            ffn_dim: 256,
            proj_dim: 32,
            vocab_size,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            max_text_len: 32,
            pool_mode: PoolMode::Cls,
            share_cross_attn: true,
            share_ffn: true,
            temperature_init: 0.07,
            dropout: 0.0,
        }
    }

    /// Full-size base shape (plain patch encoder in place of the original
    /// hierarchical one). Reference only; far too large to train here.
    pub fn full_base() -> Self {
        Self {
            img_layers: 12,
            txt_layers: 12,
            fusion_layers: 6,
            d: 768,
            heads: 12,
            ffn_dim: 3072,
            proj_dim: 256,
            vocab_size: 250_002,
            patch_size: 32,
            image_size: 224,
            channels: 3,
            max_text_len: 64,
            ..Self::desk(0)
        }
    }

    pub fn full_large() -> Self {
        Self {
            img_layers: 24,
            txt_layers: 24,
            d: 1024,
            heads: 16,
            ffn_dim: 4096,
            ..Self::full_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.img_layers == 0 || self.txt_layers == 0 || self.fusion_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.proj_dim == 0 || self.proj_dim > self.d {
            return fail(format!(
                "proj_dim {} must be in 1..={}",
                self.proj_dim, self.d
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.channels == 0 {
            return fail("vocab_size, max_text_len and channels must be positive".into());
        }
        if !(self.temperature_init > 0.0) {
            return fail(format!(
                "temperature_init {} must be positive",
                self.temperature_init
            ));
        }
        self.block().validate()
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            hidden_dim: self.d,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout,
        }
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image sequence length without [CLS].
    pub fn tiles(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// A right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    /// `batch × len`, row-major.
    pub ids: Vec<usize>,
    /// False at padding.
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Pads every sequence with `pad` to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::Invalid(
                "token batch needs at least one non-empty sequence".into(),
            ));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Invalid("empty sequence in token batch".into()));
            }
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(Self {
            batch: seqs.len(),
            len,
            ids,
            valid,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Unpadded sequence `i`.
    pub fn sequence(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .zip(&self.valid[i * self.len..])
            .filter(|(_, &v)| v)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Rows `rows`, in order, re-padded to their own maximum length.
    pub fn select(&self, rows: &[usize], pad: usize) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = rows.iter().map(|&r| self.sequence(r)).collect();
        Self::from_sequences(&seqs, pad)
    }
}
