//! Transformer building blocks on top of the tape.
//!
//! Activations are laid out `(batch, seq, hidden)`. Blocks are pre-norm:
//!
//! ```text
//! x = x + SelfAttn(LN(x))
//! x = x + CrossAttn(LN(x), other)      (fusion layers only)
//! x = x + FFN(LN(x))
//! ```

pub mod patch;
pub mod text;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use patch::{interpolate_pos_embed, patch_embed, patchify, Image};
pub use text::text_embed;

pub const LN_EPS: f64 = 1e-5;

/// Width and head layout shared by every layer of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Which key positions of each sequence in a batch may be attended to.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMask {
    pub batch: usize,
    pub len: usize,
    /// `batch × len`, true for real tokens.
    pub valid: Vec<bool>,
}

impl KeyMask {
    pub fn all_valid(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            valid: vec![true; batch * len],
        }
    }

    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(Error::Shape(format!(
                "key mask of {} entries for batch {batch} × len {len}",
                valid.len()
            )));
        }
        Ok(Self { batch, len, valid })
    }

    /// Rows `ids` of this mask, in order.
    pub fn select(&self, ids: &[usize]) -> Self {
        let mut valid = Vec::with_capacity(ids.len() * self.len);
        for &i in ids {
            valid.extend_from_slice(&self.valid[i * self.len..(i + 1) * self.len]);
        }
        Self {
            batch: ids.len(),
            len: self.len,
            valid,
        }
    }

    /// Flat `(batch·heads, queries, len)` mask, true where attention is blocked.
    fn blocked(&self, heads: usize, queries: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * heads * queries * self.len);
        for b in 0..self.batch {
            let row = &self.valid[b * self.len..(b + 1) * self.len];
            for _ in 0..heads * queries {
                out.extend(row.iter().map(|&v| !v));
            }
        }
        out
    }
}

/// Resolves parameter names to tape variables.
pub trait ParamSource {
    fn var(&self, name: &str) -> Result<Var>;
}

/// Dense map `x · W + b`, `W` stored `(in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: src.var(&format!("{prefix}.w"))?,
            bias: src.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn shapes(prefix: &str, input: usize, output: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{prefix}.w"), vec![input, output]),
            (format!("{prefix}.b"), vec![output]),
        ]
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let input = *shape
            .last()
            .ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let output = tape.shape(self.weight)[1];
        let rows = shape.iter().product::<usize>() / input;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, input])?
        };
        let y = tape.matmul(flat, self.weight)?;
        let b = tape.reshape(self.bias, &[1, output])?;
        let b = tape.expand(b, &[rows, output])?;
        let y = tape.add(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("nonempty") = output;
            tape.reshape(y, &out_shape)
        }
    }
}

/// Affine layer norm over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn bind(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: src.var(&format!("{prefix}.g"))?,
            beta: src.var(&format!("{prefix}.b"))?,
        })
    }

    pub fn shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{prefix}.g"), vec![d]),
            (format!("{prefix}.b"), vec![d]),
        ]
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let axis = shape.len() - 1;
        let d = shape[axis];
        let y = tape.layer_norm(x, axis, LN_EPS)?;
        let mut ones = vec![1; shape.len()];
        ones[axis] = d;
        let g = tape.reshape(self.gamma, &ones)?;
        let g = tape.expand(g, &shape)?;
        let b = tape.reshape(self.beta, &ones)?;
        let b = tape.expand(b, &shape)?;
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn bind(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            query: Linear::bind(src, &format!("{prefix}.q"))?,
            key: Linear::bind(src, &format!("{prefix}.k"))?,
            value: Linear::bind(src, &format!("{prefix}.v"))?,
            out: Linear::bind(src, &format!("{prefix}.o"))?,
        })
    }

    pub fn shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
        ["q", "k", "v", "o"]
            .iter()
            .flat_map(|p| Linear::shapes(&format!("{prefix}.{p}"), d, d))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardParams {
    pub fn bind(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            up: Linear::bind(src, &format!("{prefix}.up"))?,
            down: Linear::bind(src, &format!("{prefix}.down"))?,
        })
    }

    pub fn shapes(prefix: &str, d: usize, ffn: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Linear::shapes(&format!("{prefix}.up"), d, ffn);
        v.extend(Linear::shapes(&format!("{prefix}.down"), ffn, d));
        v
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Parameters of one encoder or fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub ln_self: LayerNorm,
    pub self_attn: AttentionParams,
    pub cross: Option<(LayerNorm, AttentionParams)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForwardParams,
}

/// Inverted dropout driven by its own random stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply<T: Element>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let scale = T::lit(1.0 / keep);
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random_bool(keep) {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

fn maybe_dropout<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Splits `(b, l, d)` into `(b·h, l, d/h)`.
fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, l, d] = tape.shape(x).to_vec()[..] else {
        return Err(Error::Shape("split_heads expects rank 3".into()));
    };
    let dh = d / heads;
    let x = tape.reshape(x, &[b, l, heads, dh])?;
    let x = tape.transpose(x, 1, 2)?;
    tape.reshape(x, &[b * heads, l, dh])
}

fn merge_heads<T: Element>(tape: &mut Tape<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let [_, l, dh] = tape.shape(x).to_vec()[..] else {
        return Err(Error::Shape("merge_heads expects rank 3".into()));
    };
    let x = tape.reshape(x, &[batch, heads, l, dh])?;
    let x = tape.transpose(x, 1, 2)?;
    tape.reshape(x, &[batch, l, heads * dh])
}

/// Output of [`multi_head_attention_with_weights`].
pub struct AttentionOutput {
    pub output: Var,
    /// Post-softmax weights, `(batch·heads, queries, keys)`.
    pub weights: Var,
}

/// Scaled dot-product attention of `queries (b, lq, d)` over
/// `keys_values (b, lk, d)`; returns `(b, lq, d)`.
pub fn multi_head_attention<T: Element>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    mask: &KeyMask,
    params: &AttentionParams,
    num_heads: usize,
) -> Result<Var> {
    Ok(
        multi_head_attention_with_weights(tape, queries, keys_values, mask, params, num_heads)?
            .output,
    )
}

pub fn multi_head_attention_with_weights<T: Element>(
    tape: &mut Tape<T>,
    queries: Var,
    keys_values: Var,
    mask: &KeyMask,
    params: &AttentionParams,
    num_heads: usize,
) -> Result<AttentionOutput> {
    let (sq, skv) = (
        tape.shape(queries).to_vec(),
        tape.shape(keys_values).to_vec(),
    );
    if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != skv[2] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: sq,
            rhs: skv,
        });
    }
    let (batch, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = skv[1];
    if mask.batch != batch || mask.len != lk {
        return Err(Error::Shape(format!(
            "attention mask is {}×{} but keys are {batch}×{lk}",
            mask.batch, mask.len
        )));
    }
    if d % num_heads != 0 {
        return Err(Error::Config(format!(
            "hidden {d} not divisible by {num_heads} heads"
        )));
    }
    let dh = d / num_heads;

    let q = params.query.forward(tape, queries)?;
    let k = params.key.forward(tape, keys_values)?;
    let v = params.value.forward(tape, keys_values)?;
    let q = split_heads(tape, q, num_heads)?;
    let k = split_heads(tape, k, num_heads)?;
    let v = split_heads(tape, v, num_heads)?;

    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let blocked = mask.blocked(num_heads, lq);
    let scores = if blocked.iter().any(|&b| b) {
        tape.masked_fill(scores, &blocked, f64::NEG_INFINITY)?
    } else {
        scores
    };
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = merge_heads(tape, ctx, batch, num_heads)?;
    let output = params.out.forward(tape, ctx)?;
    Ok(AttentionOutput { output, weights })
}

/// The other view a fusion layer attends to.
#[derive(Clone, Copy, Debug)]
pub struct CrossInput<'a> {
    pub sequence: Var,
    pub mask: &'a KeyMask,
}

/// One pre-norm layer: self-attention, optional cross-attention, FFN.
pub fn encoder_layer<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    self_mask: &KeyMask,
    cross: Option<CrossInput<'_>>,
    params: &LayerParams,
    config: &BlockConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let heads = config.num_heads;
    let h = params.ln_self.forward(tape, x)?;
    let h = multi_head_attention(tape, h, h, self_mask, &params.self_attn, heads)?;
    let h = maybe_dropout(tape, h, &mut dropout)?;
    let mut x = tape.add(x, h)?;

    if let Some(cross) = cross {
        let (ln, attn) = params.cross.as_ref().ok_or_else(|| {
            Error::Invalid("cross input given to a layer without cross-attention weights".into())
        })?;
        let h = ln.forward(tape, x)?;
        let h = multi_head_attention(tape, h, cross.sequence, cross.mask, attn, heads)?;
        let h = maybe_dropout(tape, h, &mut dropout)?;
        x = tape.add(x, h)?;
    }

    let h = params.ln_ffn.forward(tape, x)?;
    let h = params.ffn.forward(tape, h)?;
    let h = maybe_dropout(tape, h, &mut dropout)?;
    tape.add(x, h)
}

#[cfg(test)]
mod tests;
