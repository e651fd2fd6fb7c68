use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelWeights, TensorArchive};
use crate::tensor::Tensor;

/// Floor on the learned temperature: τ ≥ 0.001.
pub const MIN_LOG_TAU: f32 = -6.907_755_4;

const OPTIM_MANIFEST: &str = "optim.json";
const OPTIM_BLOB: &str = "optim.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            grad_clip: None,
        }
    }
}

/// Full-scale pre-training schedule.
pub const REFERENCE_PEAK_LR: f64 = 1e-4;
pub const REFERENCE_WARMUP_STEPS: u64 = 2500;
pub const REFERENCE_WEIGHT_DECAY: f64 = 0.02;

/// Linear warm-up from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`. Past `total` the rate is 0.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup).max(1) as f64
}

/// AdamW moments for every parameter that has been updated at least once.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    /// Updates applied so far.
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f32]> {
        self.v.get(name).map(Vec::as_slice)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in map {
                tensors.insert(
                    format!("{prefix}/{name}"),
                    Tensor::new(vec![data.len()], data.clone())?,
                );
            }
        }
        let meta = serde_json::json!({ "config": self.config, "step": self.step });
        TensorArchive { meta, tensors }.save(dir, OPTIM_MANIFEST, OPTIM_BLOB)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let archive = TensorArchive::load(dir, OPTIM_MANIFEST, OPTIM_BLOB)?;
        let field = |k: &str| {
            archive
                .meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state has no `{k}`")))
        };
        let mut state = Self::new(serde_json::from_value(field("config")?)?);
        state.step = serde_json::from_value(field("step")?)?;
        for (key, t) in archive.tensors {
            let (prefix, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer entry `{key}`")))?;
            let map = match prefix {
                "m" => &mut state.m,
                "v" => &mut state.v,
                _ => return Err(Error::Checkpoint(format!("bad optimizer entry `{key}`"))),
            };
            map.insert(name.to_string(), t.into_data());
        }
        Ok(state)
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update at learning rate `lr` of every parameter in `grads`.
/// Parameters without a gradient are left untouched.
pub fn adamw_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if w.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: w.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let c = state.config.clone();
    let clip = match c.grad_clip {
        Some(max) if max > 0.0 => {
            let n = global_norm(grads);
            if n > max {
                max / n
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let w = weights.get_mut(name).expect("checked above");
        let decay = if w.rank() >= 2 { c.weight_decay } else { 0.0 };
        let n = w.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((p, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi as f64 * clip;
            let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
            let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
            let pv = *p as f64;
            *p = (pv - lr * (update + decay * pv)) as f32;
        }
        if name == "head.log_tau" {
            for p in w.data_mut() {
                *p = p.max(MIN_LOG_TAU);
            }
        }
    }
    Ok(())
}
