use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Token plus learned absolute position embeddings for a padded batch of
/// `batch × len` ids; returns `(batch, len, d)`.
pub fn text_embed<T: Element>(
    tape: &mut Tape<T>,
    ids: &[usize],
    batch: usize,
    len: usize,
    token_table: Var,
    pos_table: Var,
) -> Result<Var> {
    if ids.len() != batch * len {
        return Err(Error::Shape(format!(
            "{} ids for batch {batch} × len {len}",
            ids.len()
        )));
    }
    let max_len = tape.shape(pos_table)[0];
    if len > max_len {
        return Err(Error::Invalid(format!(
            "sequence length {len} exceeds the maximum of {max_len}"
        )));
    }
    let d = tape.shape(token_table)[1];
    let tok = tape.embedding_gather(token_table, ids)?;
    let tok = tape.reshape(tok, &[batch, len, d])?;
    let pos = tape.slice(pos_table, 0, 0, len)?;
    let pos = tape.reshape(pos, &[1, len, d])?;
    let pos = tape.expand(pos, &[batch, len, d])?;
    tape.add(tok, pos)
}
