mod common;

use std::collections::HashSet;

use common::{brute_ndcg, random_graph};
use gatsy::data::{generate_synthetic, SyntheticConfig};
use gatsy::eval::{evaluate_embedding, f1_genre, mean_std, rank_by_distance, EvalReport, SeedResult};
use gatsy::graph::split_dataset;
use gatsy::model::build_model;
use gatsy::{evaluate_model, ndcg_at_k, ArtistGraph, HeldOut, ModelConfig, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ndcg_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut rng);
        let p = rng.random::<f64>();
        let relevant: HashSet<usize> = (0..n).filter(|_| rng.random::<f64>() < p).collect();
        let k = rng.random_range(1..=10);
        let got = ndcg_at_k(&ranked, &relevant, k).unwrap();
        let want = brute_ndcg(&ranked, &relevant, k);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn ndcg_rejects_zero_k() {
    assert!(ndcg_at_k(&[0], &HashSet::from([0]), 0).is_err());
}

fn ranking_strategy() -> impl Strategy<Value = (Vec<usize>, HashSet<usize>, usize)> {
    (2usize..40).prop_flat_map(|n| {
        (
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::hash_set(0..n, 1..=n),
            1..=n,
        )
    })
}

proptest! {
    #[test]
    fn ndcg_is_bounded_and_ideal_is_one((ranked, relevant, k) in ranking_strategy()) {
        let v = ndcg_at_k(&ranked, &relevant, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let mut ideal: Vec<usize> = ranked.iter().copied().filter(|i| relevant.contains(i)).collect();
        ideal.extend(ranked.iter().copied().filter(|i| !relevant.contains(i)));
        prop_assert!((ndcg_at_k(&ideal, &relevant, k).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn promoting_a_relevant_item_never_hurts((ranked, relevant, k) in ranking_strategy(), pos in 0usize..40) {
        let pos = pos % ranked.len();
        if pos == 0 || !relevant.contains(&ranked[pos]) || relevant.contains(&ranked[pos - 1]) {
            return Ok(());
        }
        let mut better = ranked.clone();
        better.swap(pos - 1, pos);
        let before = ndcg_at_k(&ranked, &relevant, k).unwrap();
        let after = ndcg_at_k(&better, &relevant, k).unwrap();
        prop_assert!(after >= before - 1e-15);
        if pos < k {
            prop_assert!(after > before);
        }
    }

    #[test]
    fn order_beyond_k_is_irrelevant((ranked, relevant, k) in ranking_strategy(), seed in any::<u64>()) {
        let mut tail = ranked[k.min(ranked.len())..].to_vec();
        tail.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut other = ranked[..k.min(ranked.len())].to_vec();
        other.extend(tail);
        prop_assert_eq!(ndcg_at_k(&ranked, &relevant, k).unwrap(), ndcg_at_k(&other, &relevant, k).unwrap());
    }
}

#[test]
fn ranking_sorts_by_distance_and_excludes_query() {
    let z = Tensor::from_rows(&[vec![0.0], vec![3.0], vec![-1.0], vec![1.0], vec![2.0]]);
    assert_eq!(rank_by_distance(&z, 0, &[0, 1, 2, 3, 4]), vec![2, 3, 4, 1]);
    assert_eq!(rank_by_distance(&z, 0, &[4, 1]), vec![4, 1]);
}

#[test]
fn evaluation_is_invariant_under_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 60;
    let g = random_graph(n, 0.1, &mut rng);
    let z = Tensor::randn(&[n, 4], &mut rng);
    let q = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5).qr().q();
    let mut moved = Tensor::zeros(&[n, 4]);
    for i in 0..n {
        for j in 0..4 {
            let v: f64 = (0..4).map(|c| q[(j, c)] * z.get(i, c)).sum();
            moved.set(i, j, v + 3.0 * j as f64 - 1.0);
        }
    }
    let queries: Vec<usize> = (0..n).collect();
    let a = evaluate_embedding(&z, &g, &queries, 10).unwrap();
    let b = evaluate_embedding(&moved, &g, &queries, 10).unwrap();
    assert_eq!(a.skipped, b.skipped);
    assert!((a.mean - b.mean).abs() < 1e-12);
}

#[test]
fn isolated_queries_are_skipped_and_k_is_capped() {
    let g = ArtistGraph::anonymous(4, [(0, 1), (1, 2)]).unwrap();
    let z = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
    let s = evaluate_embedding(&z, &g, &[0, 1, 2, 3], 200).unwrap();
    assert_eq!(s.k, 3);
    assert_eq!(s.skipped, 1);
    assert_eq!(s.per_artist.len(), 3);
    assert_eq!(s.per_artist[0], (0, 1.0));
    assert!(evaluate_embedding(&Tensor::zeros(&[3, 1]), &g, &[0], 5).is_err());
}

/// Expected nDCG of a uniformly random ranking, per query.
fn random_ranking_expectation(g: &ArtistGraph, k: usize) -> f64 {
    let n = g.node_count();
    let pool = n - 1;
    let k = k.min(pool);
    let d = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let mut total = 0.0;
    let mut count = 0;
    for q in 0..n {
        let r = g.degree(q);
        if r == 0 {
            continue;
        }
        let expected_dcg = r as f64 / pool as f64 * (1..=k).map(d).sum::<f64>();
        let idcg: f64 = (1..=k.min(r)).map(d).sum();
        total += expected_dcg / idcg;
        count += 1;
    }
    total / count as f64
}

#[test]
fn random_embeddings_score_the_random_baseline() {
    let ds = generate_synthetic(&SyntheticConfig {
        blocks: 2,
        nodes_per_block: 40,
        p_in: 0.15,
        p_out: 0.02,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let n = ds.graph.node_count();
    let queries: Vec<usize> = (0..n).collect();
    let k = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let means: Vec<f64> = (0..300)
        .map(|_| {
            let z = Tensor::randn(&[n, 8], &mut rng);
            evaluate_embedding(&z, &ds.graph, &queries, k).unwrap().mean
        })
        .collect();
    let (mc, sd) = mean_std(&means);
    let expected = random_ranking_expectation(&ds.graph, k);
    let se = sd / (means.len() as f64).sqrt();
    assert!((mc - expected).abs() < 3.0 * se, "{mc} vs {expected} (se {se})");
}

#[test]
fn neighborhood_centroids_beat_random() {
    // four disjoint cliques of five; each node sits at the mean of its
    // neighbors' one-hot vectors
    let mut edges = Vec::new();
    for c in 0..4 {
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((c * 5 + i, c * 5 + j));
            }
        }
    }
    let g = ArtistGraph::anonymous(20, edges).unwrap();
    let mut z = Tensor::zeros(&[20, 20]);
    for i in 0..20 {
        for &j in g.neighbors(i) {
            z.set(i, j, 1.0 / g.degree(i) as f64);
        }
    }
    let queries: Vec<usize> = (0..20).collect();
    let s = evaluate_embedding(&z, &g, &queries, 4).unwrap();
    assert!((s.mean - 1.0).abs() < 1e-12);
    assert!(s.mean > random_ranking_expectation(&g, 4) + 0.5);
}

#[test]
fn f1_examples() {
    let labels = [0, 0, 1, 1, 2, 2];
    let perfect = f1_genre(&labels, &labels).unwrap();
    assert_eq!((perfect.macro_f1, perfect.micro_f1), (1.0, 1.0));

    let one_class = f1_genre(&[0; 6], &labels).unwrap();
    // class 0: p = 1/3, r = 1, f1 = 1/2; classes 1 and 2 score 0
    assert!((one_class.macro_f1 - 0.5 / 3.0).abs() < 1e-15);
    assert!((one_class.micro_f1 - 1.0 / 3.0).abs() < 1e-15);

    let balanced = [0, 1, 0, 1, 0, 1, 0, 1];
    let constant = f1_genre(&[1; 8], &balanced).unwrap();
    assert!((constant.macro_f1 - 1.0 / 3.0).abs() < 1e-15);

    assert!(f1_genre(&[0], &[0, 1]).is_err());
    assert!(f1_genre(&[], &[]).is_err());
}

#[test]
fn shuffled_predictions_score_near_chance() {
    let classes = 5;
    let labels: Vec<usize> = (0..1000).map(|i| i % classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..50)
        .map(|_| {
            let mut pred = labels.clone();
            pred.shuffle(&mut rng);
            f1_genre(&pred, &labels).unwrap().macro_f1
        })
        .collect();
    let (mean, _) = mean_std(&scores);
    assert!((mean - 1.0 / classes as f64).abs() < 0.02, "{mean}");
}

#[test]
fn mean_std_uses_sample_deviation() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
}

#[test]
fn report_skips_failed_seeds() {
    let seeds = vec![
        SeedResult {
            seed: 0,
            ndcg: Some(0.4),
            f1: None,
            failure: None,
        },
        SeedResult {
            seed: 1,
            ndcg: None,
            f1: None,
            failure: Some("diverged".into()),
        },
        SeedResult {
            seed: 2,
            ndcg: Some(0.6),
            f1: None,
            failure: None,
        },
    ];
    let r = EvalReport::from_seeds("m".into(), 200, 10, seeds);
    assert!((r.ndcg_mean - 0.5).abs() < 1e-15);
    assert_eq!(r.seeds, 3);
    assert_eq!(r.f1_mean, None);
}

#[test]
fn held_out_evaluation_scores_only_held_out_nodes() {
    let ds = generate_synthetic(&SyntheticConfig {
        blocks: 2,
        nodes_per_block: 30,
        feature_dim: 8,
        p_in: 0.2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let split = split_dataset(60, 3).unwrap();
    let params = build_model(
        &ModelConfig {
            hidden_dim: 16,
            ..ModelConfig::gatsy(8)
        }
        .with_genre_head(2),
        0,
    )
    .unwrap();
    let score = evaluate_model(&params, &ds, &split, HeldOut::Test, 200).unwrap();
    assert_eq!(score.queries, split.test);
    let held: HashSet<usize> = split.test.iter().copied().collect();
    assert!(score.ranking.per_artist.iter().all(|(i, _)| held.contains(i)));
    assert_eq!(score.ranking.per_artist.len() + score.ranking.skipped, split.test.len());
    assert_eq!(score.ranking.k, split.train.len() + split.test.len() - 1);
    assert!(score.f1.is_some());
    let val = evaluate_model(&params, &ds, &split, HeldOut::Validation, 200).unwrap();
    assert_eq!(val.queries, split.validation);
}
