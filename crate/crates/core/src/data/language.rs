use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, ConceptScene, SceneObject, Shape, CELLS};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Concept tokens: 6 colors, 4 shapes, `at`, 16 cells, `and`.
pub const NUM_CONCEPTS: usize = 6 + 4 + 1 + CELLS + 1;
const COLOR_BASE: usize = 0;
const SHAPE_BASE: usize = 6;
const AT: usize = 10;
const CELL_BASE: usize = 11;
const AND: usize = CELL_BASE + CELLS;

/// Language-specific consonant sets; languages never share a consonant, so
/// their surface vocabularies are disjoint.
const CONSONANTS: [[char; 5]; 4] = [
    ['b', 'c', 'd', 'f', 'g'],
    ['h', 'j', 'k', 'l', 'm'],
    ['n', 'p', 'q', 'r', 's'],
    ['t', 'v', 'w', 'x', 'z'],
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
pub const MAX_LANGUAGES: usize = CONSONANTS.len();

/// Human-readable name of concept `c`.
pub fn concept_name(c: usize) -> String {
    match c {
        _ if c < SHAPE_BASE => format!("{:?}", Color::ALL[c - COLOR_BASE]).to_lowercase(),
        _ if c < AT => format!("{:?}", Shape::ALL[c - SHAPE_BASE]).to_lowercase(),
        AT => "at".into(),
        _ if c < AND => format!("cell{}", c - CELL_BASE),
        AND => "and".into(),
        _ => "?".into(),
    }
}

/// Concept sentence: `<color> <shape> at <cell>` per object, joined by `and`.
pub fn scene_to_concepts(scene: &ConceptScene) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, o) in scene.objects().iter().enumerate() {
        if i > 0 {
            out.push(AND);
        }
        out.push(
            COLOR_BASE
                + Color::ALL
                    .iter()
                    .position(|&c| c == o.color)
                    .expect("palette"),
        );
        out.push(
            SHAPE_BASE
                + Shape::ALL
                    .iter()
                    .position(|&s| s == o.shape)
                    .expect("shape set"),
        );
        out.push(AT);
        out.push(CELL_BASE + o.cell);
    }
    out
}

pub fn concepts_to_scene(concepts: &[usize]) -> Result<ConceptScene> {
    let bad = || Error::Invalid(format!("not a scene description: {concepts:?}"));
    let mut objects = Vec::new();
    for (i, chunk) in concepts.split(|&c| c == AND).enumerate() {
        let [color, shape, at, cell] = chunk else {
            return Err(bad());
        };
        let ok = *color < SHAPE_BASE
            && (SHAPE_BASE..AT).contains(shape)
            && *at == AT
            && (CELL_BASE..AND).contains(cell);
        if !ok || i >= 3 {
            return Err(bad());
        }
        objects.push(SceneObject {
            color: Color::ALL[*color],
            shape: Shape::ALL[shape - SHAPE_BASE],
            cell: cell - CELL_BASE,
        });
    }
    ConceptScene::new(objects)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    Identity,
    /// The whole sentence is reversed.
    Reverse,
}

/// A bijective relabeling of concept tokens plus a word-order rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub id: usize,
    pub name: String,
    pub order: WordOrder,
    /// Surface word for each concept.
    pub words: Vec<String>,
    /// Vocabulary id for each concept.
    pub ids: Vec<usize>,
}

impl SyntheticLanguage {
    fn apply_order(&self, mut v: Vec<usize>) -> Vec<usize> {
        if self.order == WordOrder::Reverse {
            v.reverse();
        }
        v
    }

    /// Surface ids for a concept sentence (no [CLS]).
    pub fn realize(&self, concepts: &[usize]) -> Vec<usize> {
        self.apply_order(concepts.iter().map(|&c| self.ids[c]).collect())
    }

    /// Inverse of [`Self::realize`].
    pub fn concepts(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let inverse: HashMap<usize, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(c, &id)| (id, c))
            .collect();
        let concepts = ids
            .iter()
            .map(|id| {
                inverse.get(id).copied().ok_or_else(|| {
                    Error::Invalid(format!("token {id} is not in language {}", self.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.apply_order(concepts))
    }
}

/// Specials followed by every language's surface words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[?]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds `orders.len()` languages and their shared vocabulary.
pub fn build_languages(
    orders: &[WordOrder],
    rng: &mut impl Rng,
) -> Result<(Vec<SyntheticLanguage>, Vocab)> {
    if orders.is_empty() || orders.len() > MAX_LANGUAGES {
        return Err(Error::Config(format!(
            "between 1 and {MAX_LANGUAGES} languages are supported"
        )));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut langs = Vec::new();
    for (l, &order) in orders.iter().enumerate() {
        let mut words: Vec<String> = Vec::new();
        for &c1 in &CONSONANTS[l] {
            for &v1 in &VOWELS {
                for &c2 in &CONSONANTS[l] {
                    for &v2 in &VOWELS {
                        words.push([c1, v1, c2, v2].iter().collect());
                    }
                }
            }
        }
        words.shuffle(rng);
        words.truncate(NUM_CONCEPTS);
        // Vocabulary ids follow alphabetical order of the surface words, so
        // id position says nothing about the concept.
        let mut sorted = words.clone();
        sorted.sort();
        let base = tokens.len();
        let ids = words
            .iter()
            .map(|w| base + sorted.binary_search(w).expect("present"))
            .collect();
        tokens.extend(sorted);
        langs.push(SyntheticLanguage {
            id: l,
            name: format!("L{l}"),
            order,
            words,
            ids,
        });
    }
    Ok((langs, Vocab { tokens }))
}

/// Surface ids of a scene description in `lang` (no [CLS]).
pub fn caption(
    scene: &ConceptScene,
    lang: &SyntheticLanguage,
    max_len: usize,
) -> Result<Vec<usize>> {
    let ids = lang.realize(&scene_to_concepts(scene));
    if ids.len() + 1 > max_len {
        return Err(Error::Invalid(format!(
            "caption of {} tokens exceeds {max_len} with [CLS]",
            ids.len()
        )));
    }
    Ok(ids)
}

pub fn parse_caption(ids: &[usize], lang: &SyntheticLanguage) -> Result<ConceptScene> {
    concepts_to_scene(&lang.concepts(ids)?)
}

/// Exact translations of one concept sentence.
pub fn make_parallel_pair(
    concepts: &[usize],
    a: &SyntheticLanguage,
    b: &SyntheticLanguage,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.id == b.id {
        return Err(Error::Invalid(format!(
            "parallel pair needs two languages, got {} twice",
            a.name
        )));
    }
    if concepts.len() + 1 > max_len {
        return Err(Error::Invalid(format!(
            "sentence of {} tokens exceeds {max_len} with [CLS]",
            concepts.len()
        )));
    }
    Ok((a.realize(concepts), b.realize(concepts)))
}

/// `[CLS]` followed by `ids`.
pub fn with_cls(ids: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(CLS);
    v.extend_from_slice(ids);
    v
}
