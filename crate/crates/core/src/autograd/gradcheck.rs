//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Step used by the built-in checks. Checks run in `f64`, where a step this
/// small keeps truncation error well under the 1e-3 budget without running
/// into rounding noise.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error budget every gradient check must meet.
pub const TOLERANCE: f64 = 1e-3;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, drawn without
    /// replacement; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl FdOptions {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item()?.as_f64())
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences over every coordinate of every input.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, inputs, &FdOptions::new(eps))
}

pub fn finite_diff_check_with<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    opts: &FdOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference eps must be positive, got {}",
            opts.eps
        )));
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param leaf has a gradient");
        let n = inputs[idx].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = inputs[idx].data()[c];
            probe[idx].data_mut()[c] = T::lit(orig.as_f64() + opts.eps);
            let plus = evaluate(&f, &probe)?;
            probe[idx].data_mut()[c] = T::lit(orig.as_f64() - opts.eps);
            let minus = evaluate(&f, &probe)?;
            probe[idx].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[c].as_f64();
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((idx, c));
            }
        }
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    let err = (analytic - numeric).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// `Σ y ⊙ w` for a fixed random `w`, turning any tensor into a scalar with a
/// non-trivial gradient.
fn probe_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Builds one random instance of a primitive wrapped into a scalar function
/// and checks it against central differences (in `f64`).
pub fn check_primitive(op: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<GradCheckReport> {
    check_primitive_with_fault(op, rng, eps, None)
}

/// As [`check_primitive`], optionally sabotaging one backward rule.
#[doc(hidden)]
pub fn check_primitive_with_fault(
    op: &str,
    rng: &mut ChaCha8Rng,
    eps: f64,
    fault: Option<&str>,
) -> Result<GradCheckReport> {
    let rank = rng.random_range(1..=3);
    let mut shape = random_shape(rng, rank);
    let axis = rng.random_range(0..rank);
    if op == "layer_norm" {
        // With two entries and near-equal values the normalized output is a
        // near-step function; central differences are meaningless there.
        shape[axis] = shape[axis].max(3);
    }
    let x = random_tensor(rng, &shape);
    let y = random_tensor(rng, &shape);

    let wrap = |f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, inputs: Vec<Tensor<f64>>| {
        let fault = fault.map(str::to_owned);
        finite_diff_check(
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                if let Some(op) = &fault {
                    tape.corrupt_backward_rule(op)?;
                }
                f(tape, vars)
            },
            &inputs,
            eps,
        )
    };

    match op {
        "add" | "sub" | "mul" => {
            let w = random_tensor(rng, &shape);
            let op = op.to_owned();
            wrap(
                Box::new(move |t, v| {
                    let out = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    probe_sum(t, out, &w)
                }),
                vec![x, y],
            )
        }
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            let w = random_tensor(rng, &shape);
            wrap(
                Box::new(move |t, v| {
                    let out = t.scale(v[0], c);
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let batched = rng.random_bool(0.5);
            let (sa, sb, so) = if batched {
                let b = rng.random_range(1..=3);
                (vec![b, m, k], vec![b, k, n], vec![b, m, n])
            } else {
                (vec![m, k], vec![k, n], vec![m, n])
            };
            let a = random_tensor(rng, &sa);
            let b = random_tensor(rng, &sb);
            let w = random_tensor(rng, &so);
            wrap(
                Box::new(move |t, v| {
                    let out = t.matmul(v[0], v[1])?;
                    probe_sum(t, out, &w)
                }),
                vec![a, b],
            )
        }
        "transpose" => {
            let other = rng.random_range(0..rank);
            let mut out_shape = shape.clone();
            out_shape.swap(axis, other);
            let w = random_tensor(rng, &out_shape);
            wrap(
                Box::new(move |t, v| {
                    let out = t.transpose(v[0], axis, other)?;
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "concat" => {
            let mut s2 = shape.clone();
            s2[axis] = rng.random_range(1..=3);
            let x2 = random_tensor(rng, &s2);
            let mut so = shape.clone();
            so[axis] += s2[axis];
            let w = random_tensor(rng, &so);
            wrap(
                Box::new(move |t, v| {
                    let out = t.concat(&[v[0], v[1], v[0]], axis)?;
                    let first = t.slice(out, axis, 0, so[axis])?;
                    probe_sum(t, first, &w)
                }),
                vec![x, x2],
            )
        }
        "slice" => {
            let extent = shape[axis];
            let start = rng.random_range(0..extent);
            let len = rng.random_range(1..=extent - start);
            let mut so = shape.clone();
            so[axis] = len;
            let w = random_tensor(rng, &so);
            wrap(
                Box::new(move |t, v| {
                    let out = t.slice(v[0], axis, start, len)?;
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "reshape" => {
            let n = x.len();
            let w = random_tensor(rng, &[n]);
            wrap(
                Box::new(move |t, v| {
                    let out = t.reshape(v[0], &[n])?;
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "expand" => {
            let mut src = shape.clone();
            src[axis] = 1;
            let xs = random_tensor(rng, &src);
            let w = random_tensor(rng, &shape);
            let target = shape.clone();
            wrap(
                Box::new(move |t, v| {
                    let out = t.expand(v[0], &target)?;
                    probe_sum(t, out, &w)
                }),
                vec![xs],
            )
        }
        "sum" | "mean" => {
            let mean = op == "mean";
            wrap(
                Box::new(move |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(if mean { t.mean(sq) } else { t.sum(sq) })
                }),
                vec![x],
            )
        }
        "sum_axis" | "mean_axis" => {
            let mean = op == "mean_axis";
            let mut so = shape.clone();
            so.remove(axis);
            if so.is_empty() {
                so.push(1);
            }
            let w = random_tensor(rng, &so);
            wrap(
                Box::new(move |t, v| {
                    let out = if mean {
                        t.mean_axis(v[0], axis)?
                    } else {
                        t.sum_axis(v[0], axis)?
                    };
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "exp" | "log" | "gelu" => {
            let op = op.to_owned();
            let w = random_tensor(rng, &shape);
            let input = if op == "log" {
                x.map(|v| v.abs() + 0.5)
            } else {
                x
            };
            wrap(
                Box::new(move |t, v| {
                    let out = match op.as_str() {
                        "exp" => t.exp(v[0]),
                        "log" => t.log(v[0]),
                        _ => t.gelu(v[0]),
                    };
                    probe_sum(t, out, &w)
                }),
                vec![input],
            )
        }
        "softmax" | "layer_norm" | "l2_normalize" => {
            let op = op.to_owned();
            let w = random_tensor(rng, &shape);
            wrap(
                Box::new(move |t, v| {
                    let out = match op.as_str() {
                        "softmax" => t.softmax(v[0], axis)?,
                        "layer_norm" => t.layer_norm(v[0], axis, 1e-5)?,
                        _ => t.l2_normalize(v[0], axis)?,
                    };
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "embedding_gather" => {
            let (rows, d) = (rng.random_range(1..=5), rng.random_range(1..=4));
            let table = random_tensor(rng, &[rows, d]);
            let n = rng.random_range(1..=6);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
            let w = random_tensor(rng, &[n, d]);
            wrap(
                Box::new(move |t, v| {
                    let out = t.embedding_gather(v[0], &ids)?;
                    probe_sum(t, out, &w)
                }),
                vec![table],
            )
        }
        "masked_fill" => {
            let mask: Vec<bool> = (0..x.len()).map(|_| rng.random_bool(0.3)).collect();
            let w = random_tensor(rng, &shape);
            wrap(
                Box::new(move |t, v| {
                    let out = t.masked_fill(v[0], &mask, -3.0)?;
                    probe_sum(t, out, &w)
                }),
                vec![x],
            )
        }
        "cross_entropy_from_logits" => {
            let (rows, classes) = (rng.random_range(1..=5), rng.random_range(1..=6));
            let logits = random_tensor(rng, &[rows, classes]);
            let targets: Vec<Option<usize>> = (0..rows)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..classes)))
                .collect();
            wrap(
                Box::new(move |t, v| t.cross_entropy_from_logits(v[0], &targets)),
                vec![logits],
            )
        }
        other => Err(Error::Invalid(format!("unknown primitive {other:?}"))),
    }
}
