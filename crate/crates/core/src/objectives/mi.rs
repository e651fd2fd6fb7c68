//! Empirical check of the InfoNCE mutual-information lower bound on small
//! discrete joints.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::info_nce;
use crate::error::{Error, Result};

const MAX_OUTCOMES: usize = 64;

/// A joint distribution over `rows × cols` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    /// Normalizes non-negative `weights` (row-major).
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > MAX_OUTCOMES || cols > MAX_OUTCOMES {
            return Err(Error::Invalid(format!(
                "joint must be between 1×1 and {MAX_OUTCOMES}×{MAX_OUTCOMES}"
            )));
        }
        if weights.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} weights for a {rows}×{cols} joint",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid(
                "joint weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid("joint has zero mass".into()));
        }
        Ok(Self {
            rows,
            cols,
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Product of two marginals.
    pub fn independent(pa: &[f64], pb: &[f64]) -> Result<Self> {
        let w = pa
            .iter()
            .flat_map(|&a| pb.iter().map(move |&b| a * b))
            .collect();
        Self::new(pa.len(), pb.len(), w)
    }

    /// Uniform over the diagonal of a `k × k` grid.
    pub fn identity(k: usize) -> Result<Self> {
        let w = (0..k * k)
            .map(|i| if i / k == i % k { 1.0 } else { 0.0 })
            .collect();
        Self::new(k, k, w)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn p(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.cols + b]
    }

    pub fn marginal_a(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|a| (0..self.cols).map(|b| self.p(a, b)).sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|b| (0..self.rows).map(|a| self.p(a, b)).sum())
            .collect()
    }

    /// Exact I(A; B) in nats.
    pub fn mutual_information(&self) -> f64 {
        let (pa, pb) = (self.marginal_a(), self.marginal_b());
        let mut mi = 0.0;
        for a in 0..self.rows {
            for b in 0..self.cols {
                let p = self.p(a, b);
                if p > 0.0 {
                    mi += p * (p / (pa[a] * pb[b])).ln();
                }
            }
        }
        mi
    }

    /// `log p(a, b) / (p(a) p(b))`, the optimal critic; −∞ off the support.
    pub fn log_density_ratio(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.marginal_a(), self.marginal_b());
        let p = self.p(a, b);
        if p == 0.0 {
            f64::NEG_INFINITY
        } else {
            (p / (pa[a] * pb[b])).ln()
        }
    }
}

/// How a batch of N pairs is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchSampling {
    /// Independent draws from the joint.
    #[default]
    Iid,
    /// Draws from the joint conditioned on all `a` values being distinct.
    DistinctA,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    /// Mean over trials of `ln N − InfoNCE`.
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
    pub trials: usize,
}

/// Monte Carlo estimate of `ln N − E[InfoNCE]` for `critic` on batches of
/// `n` pairs drawn from `joint`.
pub fn mi_lower_bound_estimate(
    joint: &DiscreteJoint,
    critic: impl Fn(usize, usize) -> f64,
    n: usize,
    trials: usize,
    sampling: BatchSampling,
    rng: &mut impl Rng,
) -> Result<MiEstimate> {
    if n == 0 || trials == 0 {
        return Err(Error::Invalid(
            "batch size and trial count must be positive".into(),
        ));
    }
    let support = joint.marginal_a().iter().filter(|&&p| p > 0.0).count();
    if sampling == BatchSampling::DistinctA && n > support {
        return Err(Error::Invalid(format!(
            "cannot draw {n} distinct a values from a support of {support}"
        )));
    }
    let dist = WeightedIndex::new(&joint.probs).map_err(|e| Error::Invalid(e.to_string()))?;
    let ln_n = (n as f64).ln();
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n);
        let mut used = HashSet::new();
        while pairs.len() < n {
            let k = dist.sample(rng);
            let (a, b) = (k / joint.cols, k % joint.cols);
            if sampling == BatchSampling::DistinctA && !used.insert(a) {
                continue;
            }
            pairs.push((a, b));
        }
        let mut loss = 0.0;
        for (i, &(a, _)) in pairs.iter().enumerate() {
            let row: Vec<f64> = pairs.iter().map(|&(_, b)| critic(a, b)).collect();
            loss += info_nce(&row, i)?;
        }
        samples.push(ln_n - loss / n as f64);
    }
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    Ok(MiEstimate {
        estimate: mean,
        std_error: (var / trials as f64).sqrt(),
        n,
        trials,
    })
}
