use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::weights::{encoder_layer_prefix, fusion_variant};
use super::{CclmConfig, ModelWeights, PoolMode, TokenBatch, ViewKind};
use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::patch::PatchEmbedParams;
use crate::nn::{
    encoder_layer, patch_embed, text_embed, AttentionParams, CrossInput, Dropout,
    FeedForwardParams, Image, KeyMask, LayerNorm, LayerParams, Linear, ParamSource,
};
use crate::tensor::{Element, Tensor};

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: CclmConfig,
    vars: BTreeMap<String, Var>,
}

impl ParamSource for BoundParams {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("model has no parameter `{name}`")))
    }
}

impl BoundParams {
    /// Places every tensor on `tape`; those for which `trainable` is false
    /// become constants.
    pub fn bind<T: Element>(
        tape: &mut Tape<T>,
        weights: &ModelWeights,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.cast(), trainable(name))))
            .collect();
        Self {
            config: weights.config.clone(),
            vars,
        }
    }

    pub fn bind_all<T: Element>(tape: &mut Tape<T>, weights: &ModelWeights) -> Self {
        Self::bind(tape, weights, |_| true)
    }

    /// Wraps variables already on a tape (finite-difference harnesses create
    /// their own leaves).
    pub fn from_vars(config: CclmConfig, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            config,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients keyed by parameter name; constants are omitted.
    pub fn named_grads<T: Element>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Encoder output for one view.
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    /// `(batch, d)`.
    pub pooled: Var,
    /// `(batch, len, d)`, slot 0 is [CLS].
    pub sequence: Var,
    pub mask: KeyMask,
}

/// Forward pass of the model on one tape.
pub struct Model<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a BoundParams,
    dropout: Option<Dropout>,
}

impl<'a, T: Element> Model<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a BoundParams) -> Self {
        Self {
            tape,
            params,
            dropout: None,
        }
    }

    /// Enables dropout at the configured rate (training only).
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        let rate = self.params.config.dropout;
        self.dropout = (rate > 0.0).then_some(Dropout { rate, rng });
        self
    }

    pub fn config(&self) -> &CclmConfig {
        &self.params.config
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn layer(&self, prefix: &str, cross: Option<ViewKind>) -> Result<LayerParams> {
        let p = self.params;
        let c = &p.config;
        let (cross, ffn) = match cross {
            None => (None, FeedForwardParams::bind(p, &format!("{prefix}.ffn"))?),
            Some(kind) => {
                let xa = fusion_variant(c.share_cross_attn, kind);
                let ff = fusion_variant(c.share_ffn, kind);
                (
                    Some((
                        LayerNorm::bind(p, &format!("{prefix}.lnx"))?,
                        AttentionParams::bind(p, &format!("{prefix}.xattn.{xa}"))?,
                    )),
                    FeedForwardParams::bind(p, &format!("{prefix}.ffn.{ff}"))?,
                )
            }
        };
        Ok(LayerParams {
            ln_self: LayerNorm::bind(p, &format!("{prefix}.ln1"))?,
            self_attn: AttentionParams::bind(p, &format!("{prefix}.attn"))?,
            cross,
            ln_ffn: LayerNorm::bind(p, &format!("{prefix}.ln2"))?,
            ffn,
        })
    }

    fn tower(&mut self, tower: &str, layers: usize, mut x: Var, mask: &KeyMask) -> Result<Var> {
        let block = self.config().block();
        for i in 0..layers {
            let lp = self.layer(&encoder_layer_prefix(tower, i), None)?;
            x = encoder_layer(self.tape, x, mask, None, &lp, &block, self.dropout.as_mut())?;
        }
        LayerNorm::bind(self.params, &format!("{tower}.ln_f"))?.forward(self.tape, x)
    }

    /// `(batch, len, d)` → `(batch, d)` at slot 0.
    pub fn cls(&mut self, sequence: Var) -> Result<Var> {
        let [b, _, d] = self.tape.shape(sequence).to_vec()[..] else {
            return Err(Error::Shape(
                "cls expects a (batch, len, d) sequence".into(),
            ));
        };
        let x = self.tape.slice(sequence, 1, 0, 1)?;
        self.tape.reshape(x, &[b, d])
    }

    pub fn encode_image(&mut self, images: &[Image]) -> Result<ViewFeatures> {
        let c = self.config().clone();
        if images.is_empty() {
            return Err(Error::Invalid("encode_image on an empty batch".into()));
        }
        for im in images {
            if im.height != c.image_size || im.width != c.image_size || im.channels != c.channels {
                return Err(Error::Shape(format!(
                    "image is {}×{}×{} but the model expects {}×{}×{}",
                    im.height, im.width, im.channels, c.image_size, c.image_size, c.channels
                )));
            }
        }
        let params = PatchEmbedParams {
            proj: Linear::bind(self.params, "img.patch")?,
            cls: self.var("img.cls")?,
            pos: self.var("img.pos")?,
        };
        let x = patch_embed(self.tape, images, c.patch_size, &params)?;
        let mask = KeyMask::all_valid(images.len(), c.tiles() + 1);
        let sequence = self.tower("img", c.img_layers, x, &mask)?;
        let pooled = match c.pool_mode {
            PoolMode::Cls => self.cls(sequence)?,
            PoolMode::Mean => {
                let patches = self.tape.slice(sequence, 1, 1, c.tiles())?;
                self.tape.mean_axis(patches, 1)?
            }
        };
        Ok(ViewFeatures {
            pooled,
            sequence,
            mask,
        })
    }

    pub fn encode_text(&mut self, tokens: &TokenBatch) -> Result<ViewFeatures> {
        let c = self.config().clone();
        if tokens.len > c.max_text_len {
            return Err(Error::Invalid(format!(
                "text of length {} exceeds the maximum of {}",
                tokens.len, c.max_text_len
            )));
        }
        let tok = self.var("text.tok")?;
        let pos = self.var("text.pos")?;
        let x = text_embed(self.tape, &tokens.ids, tokens.batch, tokens.len, tok, pos)?;
        let mask = KeyMask::new(tokens.batch, tokens.len, tokens.valid.clone())?;
        let sequence = self.tower("text", c.txt_layers, x, &mask)?;
        let pooled = self.cls(sequence)?;
        Ok(ViewFeatures {
            pooled,
            sequence,
            mask,
        })
    }

    /// Fusion output `(batch, text_len, d)`: text queries attend to `other`.
    pub fn fuse(
        &mut self,
        text: &ViewFeatures,
        other: &ViewFeatures,
        kind: ViewKind,
    ) -> Result<Var> {
        let block = self.config().block();
        let mut x = text.sequence;
        for i in 0..self.config().fusion_layers {
            let lp = self.layer(&encoder_layer_prefix("fusion", i), Some(kind))?;
            let cross = CrossInput {
                sequence: other.sequence,
                mask: &other.mask,
            };
            x = encoder_layer(
                self.tape,
                x,
                &text.mask,
                Some(cross),
                &lp,
                &block,
                self.dropout.as_mut(),
            )?;
        }
        LayerNorm::bind(self.params, "fusion.ln_f")?.forward(self.tape, x)
    }

    /// Batch rows `rows` of `feats`, in order (rows may repeat).
    pub fn select(&mut self, feats: &ViewFeatures, rows: &[usize]) -> Result<ViewFeatures> {
        let shape = self.tape.shape(feats.sequence).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let flat = self.tape.reshape(feats.sequence, &[b, l * d])?;
        let seq = self.tape.embedding_gather(flat, rows)?;
        let sequence = self.tape.reshape(seq, &[rows.len(), l, d])?;
        let pooled = self.tape.embedding_gather(feats.pooled, rows)?;
        Ok(ViewFeatures {
            pooled,
            sequence,
            mask: feats.mask.select(rows),
        })
    }

    fn project(&mut self, pooled: Var, head: &str) -> Result<Var> {
        let w = self.var(head)?;
        let y = self.tape.matmul(pooled, w)?;
        self.tape.l2_normalize(y, 1)
    }

    /// Unit-norm image projection g_v.
    pub fn project_v(&mut self, pooled: Var) -> Result<Var> {
        self.project(pooled, "head.proj_v")
    }

    /// Unit-norm text projection g_w.
    pub fn project_w(&mut self, pooled: Var) -> Result<Var> {
        self.project(pooled, "head.proj_w")
    }

    /// `a · bᵀ / τ` for projected rows `a (n, p)` and `b (m, p)`.
    pub fn similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.tape.transpose(b, 0, 1)?;
        let s = self.tape.matmul(a, bt)?;
        let shape = self.tape.shape(s).to_vec();
        let log_tau = self.var("head.log_tau")?;
        let neg = self.tape.scale(log_tau, -1.0);
        let inv_tau = self.tape.exp(neg);
        let inv_tau = self.tape.reshape(inv_tau, &[1, 1])?;
        let inv_tau = self.tape.expand(inv_tau, &shape)?;
        self.tape.mul(s, inv_tau)
    }

    /// `v_trueᵀ x_cls` per fused sequence, shape `(batch)`.
    pub fn match_scores(&mut self, fused: Var) -> Result<Var> {
        let x = self.cls(fused)?;
        let d = self.config().d;
        let v = self.var("head.v_true")?;
        let v = self.tape.reshape(v, &[d, 1])?;
        let s = self.tape.matmul(x, v)?;
        let b = self.tape.shape(s)[0];
        self.tape.reshape(s, &[b])
    }

    /// `ψ(w)ᵀ x` for every vocabulary entry; `rows` is `(n, d)`, the result
    /// `(n, vocab)`. ψ is the input token table.
    pub fn mlm_logits(&mut self, rows: Var) -> Result<Var> {
        let table = self.var("text.tok")?;
        let t = self.tape.transpose(table, 0, 1)?;
        self.tape.matmul(rows, t)
    }

    /// Rows `(seq, pos)` of a `(batch, len, d)` sequence as `(n, d)`.
    pub fn gather_positions(&mut self, sequence: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let shape = self.tape.shape(sequence).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let flat = self.tape.reshape(sequence, &[b * l, d])?;
        let ids: Vec<usize> = positions
            .iter()
            .map(|&(r, p)| {
                if r < b && p < l {
                    Ok(r * l + p)
                } else {
                    Err(Error::IndexOutOfRange {
                        op: "gather_positions",
                        index: r * l + p,
                        limit: b * l,
                    })
                }
            })
            .collect::<Result<_>>()?;
        self.tape.embedding_gather(flat, &ids)
    }
}
