mod common;

use std::collections::HashSet;

use lateral_core::corpus::{Corpus, Split};
use lateral_core::evaluation::hit_rate_benchmark;
use lateral_core::providers::mock::{RuleBasedGenerator, RuleMode};
use lateral_core::providers::{Counted, GenerationParams, HashingEmbedder, OverlapReranker};
use lateral_core::retrieval::{
    build_index, retrieve_fusion, retrieve_ordinary, retrieve_ranked, RetrievalConfig, RetrievalVariant,
    ShotSelector, VectorIndex,
};
use proptest::prelude::*;

use common::{corpus, riddle, SUFFIXES};

const VOCAB: [&str; 10] = [
    "moon", "sun", "star", "tree", "leaf", "root", "bird", "wing", "song", "nest",
];

fn random_corpus() -> impl Strategy<Value = Corpus> {
    proptest::collection::vec(proptest::collection::vec(0usize..VOCAB.len(), 1..5), 1..8).prop_map(|groups| {
        let mut riddles = Vec::new();
        for (g, words) in groups.iter().enumerate() {
            for (m, (suffix, _)) in SUFFIXES.iter().enumerate() {
                let text: Vec<&str> = words.iter().map(|&w| VOCAB[w]).collect();
                riddles.push(riddle(
                    &format!("g{g}{suffix}"),
                    &format!("{} m{m}x{g}", text.join(" ")),
                    ["a", "b", "c", "d"],
                    Some(0),
                    Split::Train,
                ));
            }
        }
        corpus(riddles)
    })
}

fn index(c: &Corpus) -> VectorIndex {
    build_index(c, Split::Train, &HashingEmbedder::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranked_shots_come_from_the_cosine_pool(c in random_corpus(), q in proptest::collection::vec(0usize..VOCAB.len(), 1..4)) {
        let e = HashingEmbedder::default();
        let idx = index(&c);
        let query: Vec<&str> = q.iter().map(|&w| VOCAB[w]).collect();
        let query = query.join(" ");
        let config = RetrievalConfig { ranked_pool: 5, ..RetrievalConfig::new(RetrievalVariant::Ranked) };
        let pool: HashSet<String> = retrieve_ordinary(&idx, &e, &query, 5, &HashSet::new())
            .unwrap()
            .into_iter()
            .map(|s| s.riddle_id)
            .collect();
        let ranked = retrieve_ranked(&idx, &e, &OverlapReranker, &query, &config, &HashSet::new()).unwrap();
        prop_assert_eq!(ranked.len(), c.len().min(3));
        for (i, s) in ranked.iter().enumerate() {
            prop_assert!(pool.contains(&s.riddle_id));
            prop_assert_eq!(s.rank, i + 1);
            if i > 0 {
                prop_assert!(ranked[i - 1].score >= s.score);
            }
        }
    }

    #[test]
    fn fusion_output_is_unique_and_bounded(c in random_corpus(), pick in any::<prop::sample::Index>()) {
        let e = HashingEmbedder::default();
        let idx = index(&c);
        let r = &c.riddles()[pick.index(c.len())];
        let g = Counted::new(RuleBasedGenerator::new(RuleMode::EchoOption));
        let params = GenerationParams::new("m");
        let config = RetrievalConfig::new(RetrievalVariant::Fusion);
        let exclude = HashSet::from([r.id.as_str()]);
        let out = retrieve_fusion(&idx, &e, &OverlapReranker, &g, &params, &r.question, &config, &exclude).unwrap();
        prop_assert_eq!(g.calls(), 3);
        prop_assert!(out.candidates.len() <= 20);
        prop_assert_eq!(out.kept.len(), out.candidates.len().min(5));
        prop_assert_eq!(out.shots.len(), out.candidates.len().min(3));
        let ids: HashSet<&str> = out.kept.iter().map(|s| s.riddle_id.as_str()).collect();
        prop_assert_eq!(ids.len(), out.kept.len());
        prop_assert!(!ids.contains(r.id.as_str()));
    }

    #[test]
    fn hit_rate_lower_bound(c in random_corpus(), variant in prop_oneof![
        Just(RetrievalVariant::Ordinary),
        Just(RetrievalVariant::Ranked),
        Just(RetrievalVariant::Fusion),
    ]) {
        let e = HashingEmbedder::default();
        let idx = index(&c);
        let g = RuleBasedGenerator::new(RuleMode::EchoOption);
        let params = GenerationParams::new("m");
        let config = RetrievalConfig::new(variant);
        let selector = ShotSelector {
            index: &idx,
            embedder: &e,
            reranker: &OverlapReranker,
            generator: &g,
            params: &params,
            config: &config,
        };
        let a = hit_rate_benchmark(&selector, &c, 5, None).unwrap();
        let b = hit_rate_benchmark(&selector, &c, 5, None).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.hit_rate >= 1.0 / 3.0 - 1e-12);
        prop_assert!(a.hit_rate <= 1.0);
        prop_assert!(a.per_query.iter().all(|q| (1..=3).contains(&q.points)));
    }
}

#[test]
fn benchmark_query_limit() {
    let mut riddles = Vec::new();
    for g in 0..4 {
        for (suffix, _) in SUFFIXES {
            riddles.push(riddle(&format!("g{g}{suffix}"), &format!("w{g} x"), ["a", "b", "c", "d"], Some(0), Split::Train));
        }
    }
    let c = corpus(riddles);
    let e = HashingEmbedder::default();
    let idx = index(&c);
    let g = RuleBasedGenerator::new(RuleMode::EchoOption);
    let params = GenerationParams::new("m");
    let config = RetrievalConfig::default();
    let selector = ShotSelector {
        index: &idx,
        embedder: &e,
        reranker: &OverlapReranker,
        generator: &g,
        params: &params,
        config: &config,
    };
    let report = hit_rate_benchmark(&selector, &c, 5, Some(5)).unwrap();
    assert_eq!(report.per_query.len(), 5);
    assert_eq!(report.k, 5);
    assert_eq!(report.hit_rate, 1.0);
}

#[test]
fn benchmark_rejects_broken_groups() {
    let c = corpus(vec![riddle("solo", "q", ["a", "b", "c", "d"], Some(0), Split::Train)]);
    let e = HashingEmbedder::default();
    let idx = index(&c);
    let g = RuleBasedGenerator::new(RuleMode::EchoOption);
    let params = GenerationParams::new("m");
    let config = RetrievalConfig::default();
    let selector = ShotSelector {
        index: &idx,
        embedder: &e,
        reranker: &OverlapReranker,
        generator: &g,
        params: &params,
        config: &config,
    };
    assert!(hit_rate_benchmark(&selector, &c, 5, None).is_err());
}
