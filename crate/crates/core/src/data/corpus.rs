use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::language::{
    build_languages, caption, make_parallel_pair, scene_to_concepts, SyntheticLanguage, Vocab,
    WordOrder,
};
use super::scene::{bytes_to_image, render_scene_bytes, ConceptScene};
use crate::error::{Error, Result};
use crate::nn::Image;
use crate::rng::substream;

/// Everything that determines a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// One entry per language; language 0 is listed first.
    pub word_orders: Vec<WordOrder>,
    /// The language holding all multimodal training pairs.
    pub pivot: usize,
    pub train_scenes: usize,
    pub dev_scenes: usize,
    pub test_scenes: usize,
    /// Parallel sentence pairs between the pivot and each other language.
    pub parallel_pairs: usize,
    pub image_size: usize,
    /// Caption limit including [CLS].
    pub caption_max_len: usize,
    /// Parallel-sentence limit including [CLS].
    pub parallel_max_len: usize,
    /// Store rasters in the split files instead of re-rendering on load.
    pub inline_images: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            word_orders: vec![WordOrder::Identity, WordOrder::Identity, WordOrder::Reverse],
            pivot: 0,
            train_scenes: 512,
            dev_scenes: 64,
            test_scenes: 64,
            parallel_pairs: 512,
            image_size: 32,
            caption_max_len: 16,
            parallel_max_len: 32,
            inline_images: false,
        }
    }
}

impl CorpusSpec {
    pub fn transfer_languages(&self) -> Vec<usize> {
        (0..self.word_orders.len())
            .filter(|&l| l != self.pivot)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    /// Unique across all splits.
    pub id: usize,
    pub scene: ConceptScene,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    /// Index into the split's scene list.
    pub scene: usize,
    pub language: usize,
    /// Surface ids without [CLS].
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub lang_a: usize,
    pub lang_b: usize,
    pub ids_a: Vec<usize>,
    pub ids_b: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub scenes: Vec<SceneRecord>,
    pub captions: Vec<CaptionRecord>,
    pub parallel: Vec<ParallelRecord>,
    #[serde(skip)]
    images: Vec<Image>,
}

impl Split {
    pub fn image(&self, scene: usize) -> &Image {
        &self.images[scene]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// Caption indices in `language`, in scene order.
    pub fn captions_in(&self, language: usize) -> Vec<usize> {
        (0..self.captions.len())
            .filter(|&i| self.captions[i].language == language)
            .collect()
    }

    /// Languages with at least one caption, ascending.
    pub fn caption_languages(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.captions.iter().map(|c| c.language).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Keeps the first `n` scenes and their captions; drops parallel pairs.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.scenes.len());
        Self {
            name: format!("{}[..{n}]", self.name),
            scenes: self.scenes[..n].to_vec(),
            captions: self
                .captions
                .iter()
                .filter(|c| c.scene < n)
                .cloned()
                .collect(),
            parallel: Vec::new(),
            images: self.images[..n.min(self.images.len())].to_vec(),
        }
    }

    /// The same split with only the captions in `languages`.
    pub fn with_languages(&self, languages: &[usize]) -> Self {
        Self {
            captions: self
                .captions
                .iter()
                .filter(|c| languages.contains(&c.language))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Re-renders every scene at `size`.
    pub fn render(&mut self, size: usize) -> Result<()> {
        self.images = self
            .scenes
            .iter()
            .map(|s| bytes_to_image(&render_scene_bytes(&s.scene, size)?, size))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Copy rendered at another resolution.
    pub fn rendered_at(&self, size: usize) -> Result<Self> {
        let mut s = self.clone();
        s.render(size)?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub languages: Vec<SyntheticLanguage>,
    pub vocab: Vocab,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    if spec.pivot >= spec.word_orders.len() {
        return Err(Error::Config(format!(
            "pivot language {} is not defined",
            spec.pivot
        )));
    }
    let (languages, vocab) = build_languages(
        &spec.word_orders,
        &mut substream(spec.seed, "corpus/languages", 0),
    )?;
    let mut rng = substream(spec.seed, "corpus/scenes", 0);
    let transfer = spec.transfer_languages();
    let text_only = spec.parallel_pairs * transfer.len();
    let needed = spec.train_scenes + spec.dev_scenes + spec.test_scenes + text_only;
    let mut seen = HashSet::new();
    let mut scenes = Vec::with_capacity(needed);
    let mut attempts = 0usize;
    while scenes.len() < needed {
        attempts += 1;
        if attempts > 100 * needed + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {needed} distinct scenes"
            )));
        }
        let s = ConceptScene::random(&mut rng);
        if seen.insert(s.clone()) {
            scenes.push(s);
        }
    }
    let mut drawn = scenes.into_iter().enumerate();
    let mut take = |n: usize| -> Vec<SceneRecord> {
        drawn
            .by_ref()
            .take(n)
            .map(|(id, scene)| SceneRecord { id, scene })
            .collect()
    };
    let train_scenes = take(spec.train_scenes);
    let dev_scenes = take(spec.dev_scenes);
    let test_scenes = take(spec.test_scenes);
    let text_scenes = take(text_only);

    let captions_for = |scenes: &[SceneRecord], langs: &[usize]| -> Result<Vec<CaptionRecord>> {
        let mut out = Vec::new();
        for &l in langs {
            for (i, s) in scenes.iter().enumerate() {
                let ids = caption(&s.scene, &languages[l], spec.caption_max_len)?;
                out.push(CaptionRecord {
                    scene: i,
                    language: l,
                    ids,
                });
            }
        }
        Ok(out)
    };
    let all_langs: Vec<usize> = (0..languages.len()).collect();

    let mut parallel = Vec::with_capacity(text_only);
    for (k, &t) in transfer.iter().enumerate() {
        for s in &text_scenes[k * spec.parallel_pairs..(k + 1) * spec.parallel_pairs] {
            let concepts = scene_to_concepts(&s.scene);
            let (ids_a, ids_b) = make_parallel_pair(
                &concepts,
                &languages[spec.pivot],
                &languages[t],
                spec.parallel_max_len,
            )?;
            parallel.push(ParallelRecord {
                lang_a: spec.pivot,
                lang_b: t,
                ids_a,
                ids_b,
            });
        }
    }

    let split = |name: &str,
                 scenes: Vec<SceneRecord>,
                 langs: &[usize],
                 parallel: Vec<ParallelRecord>|
     -> Result<Split> {
        let captions = captions_for(&scenes, langs)?;
        let mut s = Split {
            name: name.into(),
            scenes,
            captions,
            parallel,
            images: Vec::new(),
        };
        s.render(spec.image_size)?;
        Ok(s)
    };
    let corpus = SyntheticCorpus {
        train: split("train", train_scenes, &[spec.pivot], parallel)?,
        dev: split("dev", dev_scenes, &all_langs, Vec::new())?,
        test: split("test", test_scenes, &all_langs, Vec::new())?,
        spec: spec.clone(),
        languages,
        vocab,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub const CORPUS_FILE: &str = "corpus.json";
pub const CORPUS_MANIFEST: &str = "manifest.json";
const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: CorpusSpec,
    languages: Vec<SyntheticLanguage>,
    vocab: Vocab,
}

#[derive(Serialize)]
struct SplitOut<'a> {
    #[serde(flatten)]
    split: &'a Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct SplitIn {
    #[serde(flatten)]
    split: Split,
    #[serde(default)]
    images: Option<Vec<String>>,
}

/// Seed, per-file SHA-256 and a combined content digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    pub digest: String,
}

fn combined_digest(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, d) in files {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(d.as_bytes());
        h.update(*b"\n");
    }
    hex::encode(h.finalize())
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Invalid(format!(
                "unknown split `{other}` (expected train, dev or test)"
            ))),
        }
    }

    /// Checks split disjointness and that transfer languages carry no
    /// multimodal training data.
    pub fn validate(&self) -> Result<()> {
        let ids = |s: &Split| s.scenes.iter().map(|r| r.id).collect::<HashSet<_>>();
        let scenes = |s: &Split| {
            s.scenes
                .iter()
                .map(|r| r.scene.clone())
                .collect::<HashSet<_>>()
        };
        for (a, b) in [
            (&self.train, &self.dev),
            (&self.train, &self.test),
            (&self.dev, &self.test),
        ] {
            if !ids(a).is_disjoint(&ids(b)) || !scenes(a).is_disjoint(&scenes(b)) {
                return Err(Error::Invalid(format!(
                    "splits {} and {} overlap",
                    a.name, b.name
                )));
            }
        }
        if self
            .train
            .captions
            .iter()
            .any(|c| c.language != self.spec.pivot)
        {
            return Err(Error::Invalid(
                "transfer-language captions found in the multimodal train split".into(),
            ));
        }
        Ok(())
    }

    fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let header = CorpusHeader {
            spec: self.spec.clone(),
            languages: self.languages.clone(),
            vocab: self.vocab.clone(),
        };
        let mut out = vec![(CORPUS_FILE.to_string(), serde_json::to_vec_pretty(&header)?)];
        for name in SPLITS {
            let split = self.split(name)?;
            let images = if self.spec.inline_images {
                Some(
                    split
                        .scenes
                        .iter()
                        .map(|s| {
                            Ok(hex::encode(render_scene_bytes(
                                &s.scene,
                                self.spec.image_size,
                            )?))
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            out.push((
                format!("{name}.json"),
                serde_json::to_vec(&SplitOut { split, images })?,
            ));
        }
        Ok(out)
    }

    /// Content digest of the serialized corpus.
    pub fn digest(&self) -> Result<String> {
        let files = self
            .files()?
            .into_iter()
            .map(|(n, b)| (n, sha(&b)))
            .collect();
        Ok(combined_digest(&files))
    }

    pub fn save(&self, dir: &Path) -> Result<CorpusManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (name, bytes) in self.files()? {
            let p = dir.join(&name);
            fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            files.insert(name, sha(&bytes));
        }
        let manifest = CorpusManifest {
            seed: self.spec.seed,
            digest: combined_digest(&files),
            files,
        };
        let p = dir.join(CORPUS_MANIFEST);
        fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }

    /// Loads a saved corpus, refusing files whose digests disagree with the
    /// manifest.
    pub fn load(dir: &Path) -> Result<(Self, CorpusManifest)> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: CorpusManifest = serde_json::from_slice(&read(CORPUS_MANIFEST)?)?;
        let mut blobs = BTreeMap::new();
        for (name, want) in &manifest.files {
            let bytes = read(name)?;
            let got = sha(&bytes);
            if &got != want {
                return Err(Error::Invalid(format!(
                    "digest mismatch for {name}: manifest {want}, file {got}"
                )));
            }
            blobs.insert(name.clone(), bytes);
        }
        if combined_digest(&manifest.files) != manifest.digest {
            return Err(Error::Invalid(
                "corpus manifest digest is inconsistent with its file list".into(),
            ));
        }
        let blob = |name: &str| {
            blobs
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("corpus manifest does not list {name}")))
        };
        let header: CorpusHeader = serde_json::from_slice(blob(CORPUS_FILE)?)?;
        let mut splits = Vec::new();
        for name in SPLITS {
            let SplitIn { mut split, images } =
                serde_json::from_slice(blob(&format!("{name}.json"))?)?;
            match images {
                Some(hexes) => {
                    split.images = hexes
                        .iter()
                        .map(|h| {
                            let bytes = hex::decode(h)
                                .map_err(|e| Error::Invalid(format!("bad image hex: {e}")))?;
                            bytes_to_image(&bytes, header.spec.image_size)
                        })
                        .collect::<Result<_>>()?;
                }
                None => split.render(header.spec.image_size)?,
            }
            splits.push(split);
        }
        let [train, dev, test] = <[Split; 3]>::try_from(splits).expect("three splits");
        let corpus = Self {
            spec: header.spec,
            languages: header.languages,
            vocab: header.vocab,
            train,
            dev,
            test,
        };
        corpus.validate()?;
        Ok((corpus, manifest))
    }
}
