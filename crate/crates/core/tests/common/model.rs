//! A small random graph and a GATSY loss on it, shared by the gradient
//! suite and the acceptance run.

use std::sync::Arc;

use gatsy::graph::{Block, SelfEdges};
use gatsy::model::{build_model, forward_embed};
use gatsy::train::{record_combined_loss, TripletBatch};
use gatsy::{ArtistGraph, Mode, ModelConfig, ModelParams, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct LossFixture {
    pub params: ModelParams,
    pub graph: ArtistGraph,
    pub x: Tensor,
    pub triplets: TripletBatch,
    pub labels: Option<Arc<Vec<usize>>>,
    pub margin: f64,
}

impl LossFixture {
    /// 12-node random graph with a spanning path, random features and a
    /// GATSY of width `hidden` (with a 3-class head when `supervised`).
    pub fn new(seed: u64, hidden: usize, supervised: bool) -> Self {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        for _ in 0..10 {
            edges.push((rng.random_range(0..n), rng.random_range(0..n)));
        }
        let graph = ArtistGraph::anonymous(n, edges).unwrap();
        let x = Tensor::randn(&[n, 5], &mut rng);
        let mut cfg = ModelConfig {
            hidden_dim: hidden,
            ..ModelConfig::gatsy(5)
        };
        if supervised {
            cfg = cfg.with_genre_head(3);
        }
        let params = build_model(&cfg, seed).unwrap();
        let labels = supervised.then(|| Arc::new((0..n).map(|i| i % 3).collect::<Vec<_>>()));
        let mut fx = LossFixture {
            params,
            graph,
            x,
            triplets: TripletBatch::default(),
            labels,
            margin: 0.2,
        };
        fx.triplets = fx.triplets_off_kink(&mut rng);
        fx
    }

    fn embedding(&self) -> Tensor {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let z = self.record_embedding(&mut tape, &vars).unwrap();
        tape.value(z).clone()
    }

    /// One triplet per node, keeping only those whose hinge argument is at
    /// least 1e-3 away from the kink.
    fn triplets_off_kink(&self, rng: &mut ChaCha8Rng) -> TripletBatch {
        let z = self.embedding();
        let n = self.graph.node_count();
        let mut triplets = Vec::new();
        for a in 0..n {
            let nb = self.graph.neighbors(a);
            let p = nb[rng.random_range(0..nb.len())];
            let others: Vec<usize> = (0..n).filter(|&c| c != a && !self.graph.has_edge(a, c)).collect();
            if others.is_empty() {
                continue;
            }
            let q = others[rng.random_range(0..others.len())];
            let d = |i: usize, j: usize| gatsy::tensor::euclidean_distance(z.row(i), z.row(j)).unwrap();
            if (d(a, p) - d(a, q) + self.margin).abs() > 1e-3 {
                triplets.push((a, p, q));
            }
        }
        TripletBatch { triplets }
    }

    fn record_embedding(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        Ok(self.forward(tape, vars)?.0)
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var]) -> Result<(Var, Option<Var>)> {
        let blocks = vec![Block::full(&self.graph, SelfEdges::Always); self.params.gc_layers()];
        let x = tape.constant(self.x.clone());
        let out = self.params.forward(tape, vars, x, &blocks, Mode::Train)?;
        Ok((out.embedding, out.logits))
    }

    /// Summed triplet loss (plus cross-entropy when supervised) in train
    /// mode over the full graph.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let (z, logits) = self.forward(tape, vars)?;
        let scores = match (logits, &self.labels) {
            (Some(l), Some(y)) => Some((l, y.clone())),
            _ => None,
        };
        record_combined_loss(tape, z, scores, &self.triplets, self.margin)
    }
}

/// Relabels nodes so that node `i` becomes `perm[i]`.
pub fn permuted(g: &ArtistGraph, x: &Tensor, perm: &[usize]) -> (ArtistGraph, Tensor) {
    let n = g.node_count();
    let edges: Vec<(usize, usize)> = g.edges().map(|(i, j)| (perm[i], perm[j])).collect();
    let mut rows = vec![Vec::new(); n];
    for i in 0..n {
        rows[perm[i]] = x.row(i).to_vec();
    }
    (ArtistGraph::anonymous(n, edges).unwrap(), Tensor::from_rows(&rows))
}

/// Largest absolute difference between the embedding of a random 10-node
/// graph and that of a randomly relabeled copy, matched node by node.
pub fn equivariance_error(cfg: &ModelConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = super::random_graph(10, 0.3, &mut rng);
    let x = Tensor::randn(&[10, cfg.input_dim], &mut rng);
    let p = build_model(cfg, seed).unwrap();
    let mut perm: Vec<usize> = (0..10).collect();
    perm.shuffle(&mut rng);
    let (pg, px) = permuted(&g, &x, &perm);
    let z = forward_embed(&x, &g, &p).unwrap();
    let pz = forward_embed(&px, &pg, &p).unwrap();
    (0..10)
        .flat_map(|i| z.row(i).iter().zip(pz.row(perm[i])).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}
