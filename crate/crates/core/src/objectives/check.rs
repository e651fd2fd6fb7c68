use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{
    check_primitive_with_fault, finite_diff_check_with, FdOptions, GradCheckReport, DEFAULT_EPS,
    TOLERANCE,
};
use crate::autograd::{Var, PRIMITIVES};
use crate::data::{build_corpus, make_batch, BatchOptions, CorpusSpec, CrossViewBatch};
use crate::error::Result;
use crate::model::{BoundParams, CclmConfig, Model, ModelWeights, ViewKind};
use crate::rng::substream;
use crate::tensor::Tensor;

use super::{total_loss, HardNegatives, Negatives, Objectives};

/// Finite-difference check of the composed objective through the whole model.
///
/// Runs in `f64` with `negatives` held fixed, so that the loss is a smooth
/// function of the parameters. Every parameter tensor is probed, up to
/// `opts.max_coords_per_input` coordinates each.
pub fn total_loss_gradcheck(
    weights: &ModelWeights,
    batch: &CrossViewBatch,
    objectives: Objectives,
    negatives: &HardNegatives,
    opts: &FdOptions,
) -> Result<GradCheckReport> {
    let names: Vec<String> = weights.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = weights.iter().map(|(_, t)| t.cast()).collect();
    let config = weights.config.clone();
    finite_diff_check_with(
        |tape, vars: &[Var]| {
            let params = BoundParams::from_vars(
                config.clone(),
                names.iter().cloned().zip(vars.iter().copied()),
            );
            let mut model = Model::new(tape, &params);
            Ok(total_loss(
                &mut model,
                batch,
                objectives,
                Negatives::Fixed(negatives),
                None,
            )?
            .total)
        },
        &inputs,
        opts,
    )
}

/// Name of the parameter at input index `idx` of a [`total_loss_gradcheck`]
/// report.
pub fn param_name(weights: &ModelWeights, idx: usize) -> Option<&str> {
    weights.iter().nth(idx).map(|(n, _)| n)
}

/// One row of [`gradient_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Where the worst coordinate sits, when known.
    pub worst: Option<String>,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per primitive.
    pub trials: usize,
    /// Coordinates probed per parameter tensor in the total-loss checks.
    pub coords_per_param: usize,
    /// Sabotage this primitive's backward rule in the primitive checks.
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 200,
            coords_per_param: 2,
            fault: None,
        }
    }
}

/// Checks every autograd primitive, then the composed objective through a
/// `model`-shaped network on one 2-example image-caption batch and one
/// 2-example translation batch drawn from a small corpus in `data`'s
/// languages.
pub fn gradient_suite(
    model: &CclmConfig,
    data: &CorpusSpec,
    opts: &SuiteOptions,
) -> Result<Vec<SuiteCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for &op in PRIMITIVES {
        let mut worst = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
        };
        for _ in 0..opts.trials.max(1) {
            let r = check_primitive_with_fault(op, &mut rng, DEFAULT_EPS, opts.fault.as_deref())?;
            worst.coords_checked += r.coords_checked;
            if !(r.max_rel_error <= worst.max_rel_error) {
                worst.max_rel_error = r.max_rel_error;
            }
        }
        out.push(SuiteCheck {
            name: op.to_string(),
            max_rel_error: worst.max_rel_error,
            coords_checked: worst.coords_checked,
            worst: None,
        });
    }

    let spec = CorpusSpec {
        seed: opts.seed,
        train_scenes: 16,
        dev_scenes: 2,
        test_scenes: 2,
        parallel_pairs: 16,
        image_size: model.image_size,
        ..data.clone()
    };
    let corpus = build_corpus(&spec)?;
    let v = corpus.vocab.len();
    let config = CclmConfig {
        vocab_size: v,
        dropout: 0.0,
        ..model.clone()
    };
    let weights = ModelWeights::init(&config, opts.seed)?;
    let forced = HardNegatives {
        for_rows: vec![1, 0],
        for_cols: vec![1, 0],
    };
    let fd = FdOptions {
        eps: DEFAULT_EPS,
        max_coords_per_input: Some(opts.coords_per_param),
        seed: opts.seed,
    };
    for (mix, kind) in [(0.0, ViewKind::CrossModal), (1.0, ViewKind::CrossLingual)] {
        let bo = BatchOptions {
            batch_size: 2,
            mix_ratio: mix,
            mask_rate: 0.5,
            caption_language: None,
        };
        let mut brng = substream(opts.seed, "gradcheck/batching", 0);
        let mut mrng = substream(opts.seed, "gradcheck/masking", 0);
        let batch = make_batch(&corpus.train, v, &bo, &mut brng, &mut mrng)?;
        let r = total_loss_gradcheck(&weights, &batch, Objectives::PRETRAIN, &forced, &fd)?;
        out.push(SuiteCheck {
            name: format!("total_loss/{kind}"),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
            worst: r
                .worst
                .and_then(|(i, _)| param_name(&weights, i))
                .map(str::to_string),
        });
    }
    Ok(out)
}
