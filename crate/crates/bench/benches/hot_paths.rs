use std::collections::HashSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gatsy::data::{generate_synthetic, SyntheticConfig};
use gatsy::recommend::recommend_fictitious;
use gatsy::{build_model, ndcg_at_k, EmbeddingStore, FictitiousArtistSpec, ModelConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::randn(&[n, n], &mut rng);
        let b = Tensor::randn(&[n, n], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn gat_forward(c: &mut Criterion) {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let params = build_model(&ModelConfig::gatsy(ds.features.dim()), 0).unwrap();
    c.bench_function("gatsy full-graph embed (n=400)", |b| {
        b.iter(|| params.embed(black_box(&ds.features.values), &ds.graph).unwrap())
    });
}

fn ndcg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ranked: Vec<usize> = (0..5000).collect();
    ranked.shuffle(&mut rng);
    let relevant: HashSet<usize> = (0..5000).step_by(37).collect();
    c.bench_function("ndcg@200 over 5000 items", |b| {
        b.iter(|| ndcg_at_k(black_box(&ranked), &relevant, 200).unwrap())
    });
}

fn recommend(c: &mut Criterion) {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let params = build_model(&ModelConfig::gatsy(ds.features.dim()), 0).unwrap();
    let z = params.embed(&ds.features.values, &ds.graph).unwrap();
    let store = EmbeddingStore::from_parts(z, ds.graph.ids().to_vec(), ds.graph.names().to_vec(), None, String::new())
        .unwrap();
    c.bench_function("recommend k=10 (n=400)", |b| b.iter(|| store.recommend_index(black_box(17), 10)));

    let spec = FictitiousArtistSpec {
        name: "mix".into(),
        members: vec![ds.graph.id(3).to_string(), ds.graph.id(250).to_string()],
        features: None,
    };
    c.bench_function("fictitious recommend k=10 (n=400)", |b| {
        b.iter(|| recommend_fictitious(&params, &ds, black_box(&spec), 10).unwrap())
    });
}

criterion_group!(benches, matmul, gat_forward, ndcg, recommend);
criterion_main!(benches);
