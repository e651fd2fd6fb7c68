use rand::Rng;

use super::language::{MASK, NUM_SPECIAL};
use crate::error::{Error, Result};

/// One masked slot of a sequence: its position and original token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedSlot {
    pub pos: usize,
    pub token: usize,
}

/// Masks each non-special position independently with probability `rate`.
/// A masked slot becomes [MASK] (80%), a random non-special token (10%) or
/// stays as is (10%); all three are recorded.
pub fn mask_tokens(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<MaskedSlot>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!(
            "mask rate {rate} must lie strictly between 0 and 1"
        )));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Config("vocabulary has no maskable tokens".into()));
    }
    let mut out = ids.to_vec();
    let mut slots = Vec::new();
    for (pos, &tok) in ids.iter().enumerate() {
        if tok < NUM_SPECIAL || !rng.random_bool(rate) {
            continue;
        }
        let r: f64 = rng.random();
        out[pos] = if r < 0.8 {
            MASK
        } else if r < 0.9 {
            rng.random_range(NUM_SPECIAL..vocab_size)
        } else {
            tok
        };
        slots.push(MaskedSlot { pos, token: tok });
    }
    Ok((out, slots))
}
