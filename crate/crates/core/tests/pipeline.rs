use cclm::data::{build_corpus, CorpusSpec, SyntheticCorpus};
use cclm::model::{checkpoint_digest, load_checkpoint, save_checkpoint, CclmConfig, ModelWeights};
use cclm::train::{
    finetune_retrieval, recall_at, retrieval_eval, two_stage_rank, PhaseConfig, TrainConfig,
};
use proptest::prelude::*;

fn tiny_spec() -> CorpusSpec {
    CorpusSpec {
        seed: 9,
        train_scenes: 16,
        dev_scenes: 4,
        test_scenes: 8,
        parallel_pairs: 16,
        ..CorpusSpec::default()
    }
}

#[test]
fn corpus_survives_a_round_trip_through_disk() {
    let corpus = build_corpus(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus.save(dir.path()).unwrap();
    let (loaded, again) = SyntheticCorpus::load(dir.path()).unwrap();
    assert_eq!(manifest, again);
    assert_eq!(loaded.digest().unwrap(), corpus.digest().unwrap());
    assert_eq!(loaded.test.images(), corpus.test.images());
}

#[test]
fn checkpointed_weights_evaluate_identically() {
    let corpus = build_corpus(&tiny_spec()).unwrap();
    let v = corpus.vocab.len();
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        pretrain: PhaseConfig {
            steps: 0,
            ..d.pretrain.clone()
        },
        finetune: PhaseConfig {
            steps: 3,
            batch_size: 4,
            warmup_steps: 1,
            ..d.finetune.clone()
        },
        ..d
    };
    let init = ModelWeights::init(&CclmConfig::desk(v), 1).unwrap();
    let (w, log) = finetune_retrieval(init, &corpus.train, v, corpus.spec.pivot, &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.terms.mlm.is_none()));

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &w).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, w);
    let first = checkpoint_digest(dir.path()).unwrap();
    save_checkpoint(dir.path(), &loaded).unwrap();
    assert_eq!(checkpoint_digest(dir.path()).unwrap(), first);

    let names: Vec<String> = corpus.languages.iter().map(|l| l.name.clone()).collect();
    let a = retrieval_eval(&w, &corpus.test, &names, corpus.spec.pivot, 4).unwrap();
    let b = retrieval_eval(&loaded, &corpus.test, &names, corpus.spec.pivot, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.languages.len(), corpus.languages.len());
    assert_eq!(a.transfer_gap[&a.pivot], 1.0);
}

proptest! {
    #[test]
    fn rankings_are_permutations_with_a_reranked_prefix(
        (cands, sim, rerank, k) in (1usize..12).prop_flat_map(|m| (
            Just(m),
            proptest::collection::vec(-3.0f64..3.0, m),
            proptest::collection::vec(-3.0f64..3.0, m),
            0usize..16,
        ))
    ) {
        let r = two_stage_rank(&sim, 1, cands, k, |_, c| Ok(c.iter().map(|&j| rerank[j]).collect())).unwrap();
        let ranked = &r[0];
        let mut sorted = ranked.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..cands).collect::<Vec<_>>());

        let k = k.clamp(1, cands);
        // The prefix holds exactly the stage-1 top k, ordered by the re-ranker.
        let mut by_sim: Vec<usize> = (0..cands).collect();
        by_sim.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
        let mut head = ranked[..k].to_vec();
        head.sort_unstable();
        let mut want = by_sim[..k].to_vec();
        want.sort_unstable();
        prop_assert_eq!(head, want);
        for w in ranked[..k].windows(2) {
            prop_assert!(rerank[w[0]] >= rerank[w[1]]);
        }
        prop_assert_eq!(&ranked[k..], &by_sim[k..]);

        let truth = [ranked[0]];
        prop_assert_eq!(recall_at(&r, &truth, 1), 1.0);
    }
}

#[test]
fn hundred_steps_overfit_sixteen_pairs() {
    let corpus = build_corpus(&CorpusSpec::default()).unwrap();
    let split = corpus.train.head(16);
    let v = corpus.vocab.len();
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        pretrain: PhaseConfig {
            steps: 0,
            ..d.pretrain.clone()
        },
        finetune: PhaseConfig {
            steps: 100,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 10,
            ..d.finetune.clone()
        },
        ..d
    };
    let init = ModelWeights::init(&CclmConfig::desk(v), 0).unwrap();
    let (w, log) = finetune_retrieval(init, &split, v, corpus.spec.pivot, &cfg).unwrap();
    assert!(log.last().unwrap().terms.total < 0.1 * log[0].terms.total);
    let names: Vec<String> = corpus.languages.iter().map(|l| l.name.clone()).collect();
    let report = retrieval_eval(&w, &split, &names, corpus.spec.pivot, 8).unwrap();
    let pivot = report.language(&report.pivot).unwrap();
    assert_eq!(pivot.image_to_text.r1, 1.0);
    assert_eq!(pivot.text_to_image.r1, 1.0);
}
