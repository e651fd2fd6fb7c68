//! Synthetic multilingual, multimodal corpus with exact ground truth.
//!
//! Scenes of coloured shapes on a 4×4 grid are rendered as images and
//! described in several artificial languages. Each language relabels the same
//! concept tokens through its own bijection onto a private alphabet, so
//! translations are exact and no surface token is shared between languages.

mod batch;
mod corpus;
mod language;
mod masking;
mod scene;

pub use batch::{
    cross_lingual_batch, cross_modal_batch, make_batch, tlm_inputs, BatchOptions, CrossViewBatch,
    OtherView,
};
pub use corpus::{
    build_corpus, CaptionRecord, CorpusManifest, CorpusSpec, ParallelRecord, SceneRecord, Split,
    SyntheticCorpus, CORPUS_FILE, CORPUS_MANIFEST,
};
pub use language::{
    build_languages, caption, concept_name, concepts_to_scene, make_parallel_pair, parse_caption,
    scene_to_concepts, with_cls, SyntheticLanguage, Vocab, WordOrder, CLS, MASK, MAX_LANGUAGES,
    NUM_CONCEPTS, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK,
};
pub use masking::{mask_tokens, MaskedSlot};
pub use scene::{
    render_scene, render_scene_bytes, Color, ConceptScene, SceneObject, Shape, CELLS, GRID,
    MAX_OBJECTS,
};
