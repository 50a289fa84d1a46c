//! Finite-difference checks of each differentiable op, one function per
//! op family returning the worst relative error for a seed.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, rand_t, weighted_sum};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn matmul(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)];
    gradient_check(&ps, EPS, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

pub fn elementwise(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[4, 3], &mut rng), rand_t(&[4, 3], &mut rng), rand_t(&[3], &mut rng)];
    gradient_check(&ps, EPS, |t, v| {
        let a = t.elu(v[0])?;
        let b = t.leaky_relu(v[1], 0.2)?;
        let c = t.add(a, b)?;
        let d = t.sub(c, v[1])?;
        let e = t.add_row(d, v[2])?;
        let f = t.scale(e, -1.7)?;
        let g = t.add_scalar(f, 0.3)?;
        let h = t.relu(g)?;
        weighted_sum(t, h, seed)
    })
}

pub fn indexing(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[5, 3], &mut rng), rand_t(&[5, 2], &mut rng)];
    let idx = Arc::new(vec![4, 0, 0, 2, 3, 4]);
    gradient_check(&ps, EPS, |t, v| {
        let g = t.gather_rows(v[0], idx.clone())?;
        let s = t.slice_rows(v[1], 1, 4)?;
        let s2 = t.slice_rows(v[1], 0, 3)?;
        let st = t.add(s, s2)?;
        let c = t.concat_cols(v[0], v[1])?;
        let a = weighted_sum(t, g, seed)?;
        let b = weighted_sum(t, st, seed + 1)?;
        let d = weighted_sum(t, c, seed + 2)?;
        let ab = t.add(a, b)?;
        t.add(ab, d)
    })
}

pub fn segment(seed: u64) -> f64 {
    let offsets = Arc::new(vec![0, 3, 4, 7]);
    let edge_src = Arc::new(vec![0, 1, 2, 3, 0, 2, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[7, 1], &mut rng), rand_t(&[5, 4], &mut rng)];
    gradient_check(&ps, EPS, |t, v| {
        let a = t.segment_softmax(v[0], offsets.clone())?;
        let out = t.segment_weighted_sum(a, v[1], edge_src.clone(), offsets.clone())?;
        weighted_sum(t, out, seed)
    })
}

pub fn batch_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[6, 3], &mut rng), rand_t(&[3], &mut rng), rand_t(&[3], &mut rng)];
    let train = gradient_check(&ps, EPS, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, seed)
    });
    let mean = [0.3, -0.2, 1.0];
    let var = [0.5, 2.0, 1.3];
    let eval = gradient_check(&ps, EPS, |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        weighted_sum(t, y, seed)
    });
    train.max(eval)
}

pub fn distance_and_cross_entropy(seed: u64) -> f64 {
    let labels = Arc::new(vec![2, 0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = [rand_t(&[4, 5], &mut rng), rand_t(&[4, 5], &mut rng), rand_t(&[4, 3], &mut rng)];
    gradient_check(&ps, EPS, |t, v| {
        let d = t.row_distance(v[0], v[1])?;
        let a = weighted_sum(t, d, seed)?;
        let ce = t.cross_entropy(v[2], labels.clone())?;
        t.add(a, ce)
    })
}

pub fn gatsy_triplet_loss(seed: u64) -> f64 {
    let fx = super::model::LossFixture::new(seed, 6, false);
    assert!(!fx.triplets.is_empty());
    gradient_check(fx.params.tensors(), EPS, |t, v| fx.loss(t, v))
}

pub fn gatsy_supervised_loss(seed: u64) -> f64 {
    let fx = super::model::LossFixture::new(seed, 6, true);
    gradient_check(fx.params.tensors(), EPS, |t, v| fx.loss(t, v))
}

pub type Check = fn(u64) -> f64;

pub const ALL: [(&str, Check); 8] = [
    ("matmul", matmul),
    ("elementwise", elementwise),
    ("indexing", indexing),
    ("segment softmax/sum", segment),
    ("batch norm", batch_norm),
    ("distance + cross-entropy", distance_and_cross_entropy),
    ("GATSY + triplet loss", gatsy_triplet_loss),
    ("GATSY + triplet + CE", gatsy_supervised_loss),
];
