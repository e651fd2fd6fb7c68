//! Two-stage image-text retrieval: projection similarity shortlists, fusion
//! match scores re-rank.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{with_cls, Split, PAD};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Model, ModelWeights, TokenBatch, ViewFeatures, ViewKind};
use crate::nn::Image;
use crate::Tape;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        (self.r1 + self.r5 + self.r10) / 3.0
    }

    fn from_ranking(ranking: &[Vec<usize>], truth: &[usize]) -> Self {
        let [r1, r5, r10] = RECALL_KS.map(|k| recall_at(ranking, truth, k));
        Self { r1, r5, r10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageResult {
    pub language: String,
    pub image_to_text: Recall,
    pub text_to_image: Recall,
    /// Mean of R@1/5/10 over both directions.
    pub average_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    /// Images (and texts per language) in the split.
    pub items: usize,
    pub top_k: usize,
    pub pivot: String,
    pub languages: Vec<LanguageResult>,
    /// Average recall relative to the pivot language; empty when the pivot
    /// scores zero.
    pub transfer_gap: BTreeMap<String, f64>,
    /// `(step, total loss)` samples of the run that produced the weights.
    pub loss_curve: Vec<(u64, f64)>,
}

impl EvalReport {
    pub fn language(&self, name: &str) -> Option<&LanguageResult> {
        self.languages.iter().find(|l| l.language == name)
    }

    /// Mean average recall over every language except the pivot.
    pub fn transfer_average_recall(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .languages
            .iter()
            .filter(|l| l.language != self.pivot)
            .map(|l| l.average_recall)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "split {} (M={}, top_k={})\nlanguage  i2t R@1  R@5    R@10   t2i R@1  R@5    R@10   avg    gap\n",
            self.split, self.items, self.top_k
        );
        for l in &self.languages {
            let gap = self
                .transfer_gap
                .get(&l.language)
                .map_or("-".to_string(), |g| format!("{g:.3}"));
            let pivot = if l.language == self.pivot { "*" } else { " " };
            let _ = writeln!(
                s,
                "{:<8}{pivot} {:.3}    {:.3}  {:.3}  {:.3}    {:.3}  {:.3}  {:.3}  {gap}",
                l.language,
                l.image_to_text.r1,
                l.image_to_text.r5,
                l.image_to_text.r10,
                l.text_to_image.r1,
                l.text_to_image.r5,
                l.text_to_image.r10,
                l.average_recall,
            );
        }
        s
    }
}

/// Final candidate orderings, one list per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rankings {
    pub image_to_text: Vec<Vec<usize>>,
    pub text_to_image: Vec<Vec<usize>>,
}

/// Indices by descending score, ties broken by ascending index.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Ranks `cands` candidates for each of `queries` queries. Stage 1 orders by
/// the row-major `sim`; stage 2 asks `rerank` to score the top `top_k`
/// (passed in ascending index order) and reorders them by that score. The
/// rest keep their stage-1 order behind them. `top_k` is clamped to
/// `1..=cands`.
pub fn two_stage_rank(
    sim: &[f64],
    queries: usize,
    cands: usize,
    top_k: usize,
    mut rerank: impl FnMut(usize, &[usize]) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<usize>>> {
    if sim.len() != queries * cands || cands == 0 {
        return Err(Error::Shape(format!(
            "{} scores for {queries} queries × {cands} candidates",
            sim.len()
        )));
    }
    let k = top_k.clamp(1, cands);
    (0..queries)
        .map(|q| {
            let order = order_desc(&sim[q * cands..(q + 1) * cands]);
            let mut short = order[..k].to_vec();
            short.sort_unstable();
            let scores = rerank(q, &short)?;
            if scores.len() != k {
                return Err(Error::Shape(format!(
                    "re-ranker returned {} scores for {k} candidates",
                    scores.len()
                )));
            }
            let mut ranked: Vec<usize> =
                order_desc(&scores).into_iter().map(|i| short[i]).collect();
            ranked.extend_from_slice(&order[k..]);
            Ok(ranked)
        })
        .collect()
}

/// Fraction of queries whose true candidate is among the first `k`.
pub fn recall_at(ranking: &[Vec<usize>], truth: &[usize], k: usize) -> f64 {
    if ranking.is_empty() {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|c| c == *t))
        .count();
    hits as f64 / ranking.len() as f64
}

fn dot_matrix(a: &[f32], b: &[f32], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..p)
                .map(|k| a[i * p + k] as f64 * b[j * p + k] as f64)
                .sum();
        }
    }
    out
}

/// Rankings for `images` against `texts` (token ids including [CLS]).
pub fn rank_retrieval(
    weights: &ModelWeights,
    images: &[Image],
    texts: &[Vec<usize>],
    top_k: usize,
) -> Result<Rankings> {
    let (n_img, n_txt) = (images.len(), texts.len());
    let mut tape = Tape::<f32>::new();
    let params = BoundParams::bind(&mut tape, weights, |_| false);
    let p = weights.config.proj_dim;
    let (img, txt, sim) = {
        let mut m = Model::new(&mut tape, &params);
        let img = m.encode_image(images)?;
        let txt = m.encode_text(&TokenBatch::from_sequences(texts, PAD)?)?;
        let pv = m.project_v(img.pooled)?;
        let pw = m.project_w(txt.pooled)?;
        let sim = dot_matrix(
            m.tape.value(pv).data(),
            m.tape.value(pw).data(),
            n_img,
            n_txt,
            p,
        );
        (img, txt, sim)
    };
    let base = tape.len();
    let mut score = |text_rows: Vec<usize>, img_rows: Vec<usize>| -> Result<Vec<f64>> {
        let mut m = Model::new(&mut tape, &params);
        let t: ViewFeatures = m.select(&txt, &text_rows)?;
        let o = m.select(&img, &img_rows)?;
        let fused = m.fuse(&t, &o, ViewKind::CrossModal)?;
        let s = m.match_scores(fused)?;
        let out = m.tape.value(s).to_f64_vec();
        tape.truncate(base);
        Ok(out)
    };
    let image_to_text = two_stage_rank(&sim, n_img, n_txt, top_k, |q, c| {
        score(c.to_vec(), vec![q; c.len()])
    })?;
    let mut sim_t = vec![0.0; sim.len()];
    for i in 0..n_img {
        for j in 0..n_txt {
            sim_t[j * n_img + i] = sim[i * n_txt + j];
        }
    }
    let text_to_image = two_stage_rank(&sim_t, n_txt, n_img, top_k, |q, c| {
        score(vec![q; c.len()], c.to_vec())
    })?;
    Ok(Rankings {
        image_to_text,
        text_to_image,
    })
}

/// Retrieval on every caption language of `split`. Each language must
/// caption every scene exactly once. Images are taken as rendered in the
/// split, so they must match the model's input size.
pub fn retrieval_eval(
    weights: &ModelWeights,
    split: &Split,
    language_names: &[String],
    pivot: usize,
    top_k: usize,
) -> Result<EvalReport> {
    let m = split.scenes.len();
    if split.images().len() != m {
        return Err(Error::Invalid(format!(
            "split {} has not been rendered",
            split.name
        )));
    }
    let name = |l: usize| {
        language_names
            .get(l)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no name for language {l}")))
    };
    let mut languages = Vec::new();
    for l in split.caption_languages() {
        let caps = split.captions_in(l);
        let scenes: Vec<usize> = caps.iter().map(|&c| split.captions[c].scene).collect();
        let mut seen = vec![false; m];
        for &s in &scenes {
            seen[s] = true;
        }
        if caps.len() != m || seen.iter().any(|s| !s) {
            return Err(Error::Invalid(format!(
                "language {} must caption each of the {m} scenes in split {} exactly once",
                name(l)?,
                split.name
            )));
        }
        let texts: Vec<Vec<usize>> = caps
            .iter()
            .map(|&c| with_cls(&split.captions[c].ids))
            .collect();
        let r = rank_retrieval(weights, split.images(), &texts, top_k)?;
        // Image i's caption in this language is the text whose scene is i.
        let mut text_of_scene = vec![0; m];
        for (j, &s) in scenes.iter().enumerate() {
            text_of_scene[s] = j;
        }
        let i2t = Recall::from_ranking(&r.image_to_text, &text_of_scene);
        let t2i = Recall::from_ranking(&r.text_to_image, &scenes);
        languages.push(LanguageResult {
            language: name(l)?,
            image_to_text: i2t,
            text_to_image: t2i,
            average_recall: (i2t.mean() + t2i.mean()) / 2.0,
        });
    }
    let mut report = EvalReport {
        split: split.name.clone(),
        items: m,
        top_k: top_k.clamp(1, m.max(1)),
        pivot: name(pivot)?,
        languages,
        transfer_gap: BTreeMap::new(),
        loss_curve: Vec::new(),
    };
    report.transfer_gap = transfer_gap(&report).unwrap_or_default();
    Ok(report)
}

/// `avg_recall(lang) / avg_recall(pivot)` for every language in the report.
pub fn transfer_gap(report: &EvalReport) -> Result<BTreeMap<String, f64>> {
    let pivot = report.language(&report.pivot).ok_or_else(|| {
        Error::Invalid(format!("report has no results for pivot {}", report.pivot))
    })?;
    if !(pivot.average_recall > 0.0) {
        return Err(Error::Invalid(
            "pivot language has zero average recall".into(),
        ));
    }
    Ok(report
        .languages
        .iter()
        .map(|l| (l.language.clone(), l.average_recall / pivot.average_recall))
        .collect())
}
