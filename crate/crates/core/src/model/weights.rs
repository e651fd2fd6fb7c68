use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::{CclmConfig, ViewKind};
use crate::error::{Error, Result};
use crate::nn::patch::interpolate_pos_table;
use crate::nn::{AttentionParams, FeedForwardParams, LayerNorm, Linear};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Std of embedding tables, position tables and other vector parameters.
const INIT_STD: f64 = 0.02;

/// Projection matrices use `1/sqrt(fan_in)`. With every matrix at
/// [`INIT_STD`] the cross-view interaction starts near zero and the matching
/// loss sits at `ln 2` for hundreds of steps.
fn init_std(name: &str, shape: &[usize]) -> f64 {
    let matrix = name.ends_with(".w") || name.starts_with("head.proj_");
    if matrix && shape.len() == 2 {
        1.0 / (shape[0] as f64).sqrt()
    } else {
        INIT_STD
    }
}

/// Every learnable tensor, addressed by a stable dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: CclmConfig,
    params: BTreeMap<String, Tensor<f32>>,
}

/// Scalar parameter counts per top-level group (`img`, `text`, `fusion`,
/// `head`).
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
}

pub(crate) fn encoder_layer_prefix(tower: &str, i: usize) -> String {
    format!("{tower}.layers.{i}")
}

/// Suffix of a fusion layer's cross-attention or FFN set for `kind`.
pub(crate) fn fusion_variant(shared: bool, kind: ViewKind) -> &'static str {
    if shared {
        "shared"
    } else {
        kind.key()
    }
}

fn variants(shared: bool) -> Vec<&'static str> {
    if shared {
        vec!["shared"]
    } else {
        vec![ViewKind::CrossModal.key(), ViewKind::CrossLingual.key()]
    }
}

/// Names and shapes of every parameter `config` implies, in a fixed order.
pub fn param_shapes(config: &CclmConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ffn) = (config.d, config.ffn_dim);
    let mut v = Vec::new();
    let encoder = |v: &mut Vec<(String, Vec<usize>)>, tower: &str, layers: usize| {
        for i in 0..layers {
            let p = encoder_layer_prefix(tower, i);
            v.extend(LayerNorm::shapes(&format!("{p}.ln1"), d));
            v.extend(AttentionParams::shapes(&format!("{p}.attn"), d));
            v.extend(LayerNorm::shapes(&format!("{p}.ln2"), d));
            v.extend(FeedForwardParams::shapes(&format!("{p}.ffn"), d, ffn));
        }
        v.extend(LayerNorm::shapes(&format!("{tower}.ln_f"), d));
    };

    let patch_in = config.patch_size * config.patch_size * config.channels;
    v.extend(Linear::shapes("img.patch", patch_in, d));
    v.push(("img.cls".into(), vec![d]));
    v.push(("img.pos".into(), vec![config.tiles() + 1, d]));
    encoder(&mut v, "img", config.img_layers);

    v.push(("text.tok".into(), vec![config.vocab_size, d]));
    v.push(("text.pos".into(), vec![config.max_text_len, d]));
    encoder(&mut v, "text", config.txt_layers);

    for i in 0..config.fusion_layers {
        let p = encoder_layer_prefix("fusion", i);
        v.extend(LayerNorm::shapes(&format!("{p}.ln1"), d));
        v.extend(AttentionParams::shapes(&format!("{p}.attn"), d));
        v.extend(LayerNorm::shapes(&format!("{p}.lnx"), d));
        for var in variants(config.share_cross_attn) {
            v.extend(AttentionParams::shapes(&format!("{p}.xattn.{var}"), d));
        }
        v.extend(LayerNorm::shapes(&format!("{p}.ln2"), d));
        for var in variants(config.share_ffn) {
            v.extend(FeedForwardParams::shapes(&format!("{p}.ffn.{var}"), d, ffn));
        }
    }
    v.extend(LayerNorm::shapes("fusion.ln_f", d));

    v.push(("head.proj_v".into(), vec![d, config.proj_dim]));
    v.push(("head.proj_w".into(), vec![d, config.proj_dim]));
    v.push(("head.v_true".into(), vec![d]));
    v.push(("head.log_tau".into(), vec![1]));
    v
}

fn counts<'a>(items: impl Iterator<Item = (&'a str, usize)>) -> ParamCounts {
    let mut groups = BTreeMap::new();
    let mut total = 0;
    for (name, n) in items {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *groups.entry(group).or_insert(0) += n;
        total += n;
    }
    ParamCounts { groups, total }
}

impl ParamCounts {
    /// Counts implied by a configuration, without allocating weights.
    pub fn for_config(config: &CclmConfig) -> Self {
        let shapes = param_shapes(config);
        counts(shapes.iter().map(|(n, s)| (n.as_str(), s.iter().product())))
    }
}

impl ModelWeights {
    /// Fresh weights. Each tensor draws from its own `init/<name>` substream,
    /// so toggling a sharing flag leaves every common tensor unchanged.
    pub fn init(config: &CclmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name == "head.log_tau" {
                    vec![config.temperature_init.ln() as f32]
                } else if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, init_std(&name, &shape)).expect("valid std");
                    let mut rng = substream(seed, &format!("init/{name}"), 0);
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// A model with no parameters at all.
    pub fn empty(config: &CclmConfig) -> Self {
        Self {
            config: config.clone(),
            params: BTreeMap::new(),
        }
    }

    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(
        config: CclmConfig,
        params: BTreeMap<String, Tensor<f32>>,
    ) -> Self {
        Self { config, params }
    }

    /// Assembles weights from named tensors, checking them against `config`.
    pub fn from_tensors(config: CclmConfig, params: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let w = Self { config, params };
        w.check_shapes()?;
        Ok(w)
    }

    /// Errors on the first parameter (in name order) whose presence or
    /// shape disagrees with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let expected: BTreeMap<String, Vec<usize>> =
            param_shapes(&self.config).into_iter().collect();
        let mut names: Vec<&String> = expected.keys().chain(self.params.keys()).collect();
        names.sort();
        names.dedup();
        for name in names {
            let want = expected.get(name).cloned().unwrap_or_default();
            let found = self
                .params
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_default();
            if want != found {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: want,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    /// Replaces an existing tensor of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCounts {
        counts(self.params.iter().map(|(n, t)| (n.as_str(), t.len())))
    }

    /// Learned temperature τ.
    pub fn temperature(&self) -> Option<f64> {
        self.params
            .get("head.log_tau")
            .map(|t| (t.data()[0] as f64).exp())
    }

    /// Copy adapted to a new input resolution: the patch position grid is
    /// bilinearly resampled, every other tensor is kept.
    pub fn with_image_size(&self, image_size: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.image_size = image_size;
        config.validate()?;
        let mut out = self.clone();
        out.config = config;
        if let Some(pos) = self.params.get("img.pos") {
            let resized = interpolate_pos_table(pos, out.config.grid())?;
            out.params.insert("img.pos".into(), resized);
        }
        out.check_shapes()?;
        Ok(out)
    }
}
