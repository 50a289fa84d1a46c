#![allow(dead_code)]

pub mod model;
pub mod ops;

use std::collections::HashSet;

use gatsy::{ArtistGraph, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so near-zero gradients are
/// compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Central finite-difference check of every parameter element. `build`
/// records a scalar loss on a fresh tape from the parameter leaves.
/// Returns the maximum relative error observed.
pub fn gradient_check<F>(params: &[Tensor], eps: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(p.clone(), i))
            .collect();
        let loss = build(&mut tape, &vars).expect("forward");
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(p.clone(), i))
        .collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    let grads = tape.backward(loss).expect("backward").params(&shapes);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work);
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work);
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(grads[pi].data()[k], numeric));
        }
    }
    worst
}

/// Like [`gradient_check`] but only perturbs the listed `(tensor, element)`
/// coordinates.
pub fn gradient_check_at<F>(params: &[Tensor], eps: f64, coords: &[(usize, usize)], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let record = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(p.clone(), i))
            .collect();
        let loss = build(&mut tape, &vars).expect("forward");
        (tape, loss)
    };
    let (tape, loss) = record(params);
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    let grads = tape.backward(loss).expect("backward").params(&shapes);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for &(pi, k) in coords {
        let orig = params[pi].data()[k];
        work[pi].data_mut()[k] = orig + eps;
        let (t, l) = record(&work);
        let up = t.value(l).item();
        work[pi].data_mut()[k] = orig - eps;
        let (t, l) = record(&work);
        let down = t.value(l).item();
        work[pi].data_mut()[k] = orig;
        worst = worst.max(rel_err(grads[pi].data()[k], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Standard normal entries clamped to `|x| <= 3`.
pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v.clamp(-3.0, 3.0))
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient. Built from primitive ops: rows are
/// concatenated into one long row and multiplied by `w` as a column.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = tape.constant(Tensor::randn(&[r * c, 1], &mut rng));
    let mut flat = tape.slice_rows(x, 0, 1)?;
    for i in 1..r {
        let row = tape.slice_rows(x, i, i + 1)?;
        flat = tape.concat_cols(flat, row)?;
    }
    let y = tape.matmul(flat, w)?;
    tape.sum(y)
}

/// Erdős–Rényi graph on `n` anonymous nodes.
pub fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> ArtistGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    ArtistGraph::anonymous(n, edges).unwrap()
}

/// Straightforward nDCG: relevance vector, DCG over the first K positions,
/// and the ideal DCG from the relevance of every candidate sorted
/// descending.
pub fn brute_ndcg(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    let rel: Vec<f64> = ranked.iter().map(|i| if relevant.contains(i) { 1.0 } else { 0.0 }).collect();
    let dcg = |r: &[f64]| -> f64 {
        r.iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| (2f64.powf(g) - 1.0) / (i as f64 + 2.0).log2())
            .sum()
    };
    let mut ideal = vec![1.0; relevant.len()];
    ideal.resize(ranked.len().max(relevant.len()), 0.0);
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(&rel) / idcg
    }
}
