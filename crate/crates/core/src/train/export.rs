use std::io::Write;

use crate::data::{with_cls, Split, PAD};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Model, ModelWeights, TokenBatch};
use crate::Tape;

/// Leading columns of the embedding table; `d` value columns `e0..` follow.
pub const EMBEDDING_HEADER_PREFIX: [&str; 4] = ["item_id", "modality", "language", "example_id"];

/// Writes the pooled [CLS] embedding of every image and every caption of
/// `split` as a tab-separated table with a header row. Images come first;
/// their language column is `-`. Returns the number of data rows.
pub fn export_embeddings(
    weights: &ModelWeights,
    split: &Split,
    language_names: &[String],
    out: &mut impl Write,
) -> Result<usize> {
    let d = weights.config.d;
    let io = |e: std::io::Error| Error::Invalid(format!("writing embeddings: {e}"));
    let mut header: Vec<String> = EMBEDDING_HEADER_PREFIX
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d).map(|i| format!("e{i}")));
    writeln!(out, "{}", header.join("\t")).map_err(io)?;

    let mut tape = Tape::<f32>::new();
    let params = BoundParams::bind(&mut tape, weights, |_| false);
    let mut model = Model::new(&mut tape, &params);
    let mut rows = 0;
    let mut emit = |out: &mut dyn Write,
                    modality: &str,
                    language: &str,
                    example: usize,
                    v: &[f32]|
     -> Result<()> {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(
            out,
            "{rows}\t{modality}\t{language}\t{example}\t{}",
            vals.join("\t")
        )
        .map_err(io)?;
        rows += 1;
        Ok(())
    };

    if !split.images().is_empty() {
        let f = model.encode_image(split.images())?;
        let pooled = model.tape.value(f.pooled).clone();
        for (i, s) in split.scenes.iter().enumerate() {
            emit(out, "image", "-", s.id, &pooled.data()[i * d..(i + 1) * d])?;
        }
    }
    for l in split.caption_languages() {
        let caps = split.captions_in(l);
        let lang = language_names
            .get(l)
            .ok_or_else(|| Error::Invalid(format!("no name for language {l}")))?;
        let seqs: Vec<Vec<usize>> = caps
            .iter()
            .map(|&c| with_cls(&split.captions[c].ids))
            .collect();
        let f = model.encode_text(&TokenBatch::from_sequences(&seqs, PAD)?)?;
        let pooled = model.tape.value(f.pooled).clone();
        for (i, &c) in caps.iter().enumerate() {
            let example = split.scenes[split.captions[c].scene].id;
            emit(
                out,
                "text",
                lang,
                example,
                &pooled.data()[i * d..(i + 1) * d],
            )?;
        }
    }
    Ok(rows)
}
