//! Triplet mining, losses, the Adam optimizer with cosine decay, and the
//! minibatch training loop for the unsupervised and supervised regimes.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, HeldOut, DEFAULT_K};
use crate::graph::{graph_restricted_to, neighbor_sample, ArtistGraph, DatasetSplit};
use crate::model::{build_model, Mode, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Triplet margin Δ.
    pub margin: f64,
    /// Seed nodes per minibatch.
    pub batch_size: usize,
    /// Sampled neighbors per GC layer, input side first. A list shorter
    /// than the number of GC layers repeats its last entry.
    pub fanouts: Vec<usize>,
    /// Drives initialization, shuffling, neighbor and triplet sampling.
    pub seed: u64,
    /// Adds the cross-entropy term of the genre head.
    pub supervised: bool,
    pub negatives: NegativeWeighting,
    /// Score the validation split after every epoch.
    pub validate: bool,
    pub eval_k: usize,
}

impl TrainConfig {
    pub fn unsupervised() -> Self {
        TrainConfig {
            lr: 6e-5,
            weight_decay: 0.01,
            epochs: 50,
            margin: 0.2,
            batch_size: 256,
            fanouts: vec![20, 20],
            seed: 0,
            supervised: false,
            negatives: NegativeWeighting::default(),
            validate: true,
            eval_k: DEFAULT_K,
        }
    }

    pub fn supervised() -> Self {
        TrainConfig {
            weight_decay: 0.0,
            epochs: 20,
            supervised: true,
            ..Self::unsupervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("train config: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("need at least one epoch");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.weight_decay < 0.0 || self.margin < 0.0 {
            return bad("weight decay and margin must be non-negative");
        }
        if self.fanouts.contains(&0) {
            return bad("fanouts must be positive");
        }
        match self.negatives {
            NegativeWeighting::InverseDensity { floor, cutoff } if !(0.0..cutoff).contains(&floor) || cutoff > 2.0 => {
                return bad("need 0 <= floor < cutoff <= 2");
            }
            NegativeWeighting::Clipped { clip } if clip <= 0.0 => return bad("weight clip must be positive"),
            _ => {}
        }
        Ok(())
    }

    fn fanouts_for(&self, layers: usize) -> Vec<usize> {
        let last = self.fanouts.last().copied().unwrap_or(20);
        (0..layers).map(|l| self.fanouts.get(l).copied().unwrap_or(last)).collect()
    }
}

/// `(anchor, positive, negative)` rows of the current batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    fn column(&self, f: impl Fn(&(usize, usize, usize)) -> usize) -> Arc<Vec<usize>> {
        Arc::new(self.triplets.iter().map(f).collect())
    }
}

/// Log-density of the distance between two points drawn uniformly on the
/// unit sphere in `dim` dimensions, for `0 < d < 2`.
pub fn log_sphere_distance_density(d: f64, dim: usize) -> f64 {
    let n = dim as f64;
    let log_norm = (n - 2.0) * 2f64.ln() + ln_gamma((n - 1.0) / 2.0) * 2.0 - ln_gamma(n - 1.0);
    (n - 2.0) * d.ln() + (n - 3.0) / 2.0 * (1.0 - d * d / 4.0).ln() - log_norm
}

/// How negatives are weighted by their distance to the anchor, measured
/// between unit-normalized embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeWeighting {
    /// Weight `∝ 1/q(max(d, floor))`, zero from `cutoff` on. When every
    /// candidate lies beyond the cutoff the draw is uniform.
    InverseDensity { floor: f64, cutoff: f64 },
    /// Weight `min(clip, 1/q(d))`.
    Clipped { clip: f64 },
}

impl Default for NegativeWeighting {
    fn default() -> Self {
        NegativeWeighting::InverseDensity { floor: 0.5, cutoff: 1.4 }
    }
}

/// Weight `min(clip, 1/q(d))` of a single negative.
pub fn clipped_weight(d: f64, dim: usize, clip: f64) -> f64 {
    if !(d > 0.0 && d < 2.0) || dim < 3 {
        return clip;
    }
    let neg_log_q = -log_sphere_distance_density(d, dim);
    neg_log_q.min(clip.ln()).exp()
}

/// Unnormalized sampling weights for negatives at unit-sphere distances
/// `distances` from the anchor.
pub fn negative_weights(distances: &[f64], dim: usize, scheme: NegativeWeighting) -> Vec<f64> {
    match scheme {
        NegativeWeighting::Clipped { clip } => distances.iter().map(|&d| clipped_weight(d, dim, clip)).collect(),
        NegativeWeighting::InverseDensity { floor, cutoff } => {
            let log_w: Vec<Option<f64>> = distances
                .iter()
                .map(|&d| (d < cutoff).then(|| -log_sphere_distance_density(d.max(floor).max(1e-12), dim)))
                .collect();
            let max = log_w.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return vec![1.0; distances.len()];
            }
            log_w.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect()
        }
    }
}

fn unit_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Mines one triplet per anchor. The positive is a uniformly chosen
/// neighbor of the anchor in `batch_graph`; the negative is drawn from the
/// remaining non-neighbors with distance-weighted probabilities computed on
/// unit-normalized embeddings. Anchors without a neighbor or without a
/// non-neighbor are skipped.
pub fn sample_triplets(
    z: &Tensor,
    batch_graph: &ArtistGraph,
    anchors: &[usize],
    scheme: NegativeWeighting,
    seed: u64,
) -> Result<TripletBatch> {
    let n = batch_graph.node_count();
    if z.rows() != n {
        return Err(Error::invalid(format!("{} embedding rows for {} batch nodes", z.rows(), n)));
    }
    let unit = unit_rows(z);
    let dim = z.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let Some(&p) = batch_graph.neighbors(a).choose(&mut rng) else {
            continue;
        };
        let candidates: Vec<usize> = (0..n).filter(|&c| c != a && !batch_graph.has_edge(a, c)).collect();
        if candidates.is_empty() {
            continue;
        }
        let distances: Vec<f64> = candidates
            .iter()
            .map(|&c| crate::tensor::squared_distance(unit.row(a), unit.row(c)).sqrt())
            .collect();
        let weights = negative_weights(&distances, dim, scheme);
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("negative weights: {e}")))?;
        triplets.push((a, p, candidates[dist.sample(&mut rng)]));
    }
    Ok(TripletBatch { triplets })
}

/// `[d(a,p) − d(a,n) + Δ]⁺` for a single triplet.
pub fn triplet_loss(z_a: &[f64], z_p: &[f64], z_n: &[f64], margin: f64) -> Result<f64> {
    let d_ap = crate::tensor::euclidean_distance(z_a, z_p)?;
    let d_an = crate::tensor::euclidean_distance(z_a, z_n)?;
    Ok((d_ap - d_an + margin).max(0.0))
}

/// Records the summed triplet hinge loss over `triplets` (rows of `z`).
pub fn record_triplet_loss(tape: &mut Tape, z: Var, triplets: &TripletBatch, margin: f64) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = tape.gather_rows(z, triplets.column(|t| t.0))?;
    let p = tape.gather_rows(z, triplets.column(|t| t.1))?;
    let n = tape.gather_rows(z, triplets.column(|t| t.2))?;
    let d_ap = tape.row_distance(a, p)?;
    let d_an = tape.row_distance(a, n)?;
    let diff = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.sum(hinge)
}

/// Summed triplet loss plus, when class scores and labels are given, the
/// mean cross-entropy of `scores` rows against `labels`.
pub fn record_combined_loss(
    tape: &mut Tape,
    z: Var,
    scores: Option<(Var, Arc<Vec<usize>>)>,
    triplets: &TripletBatch,
    margin: f64,
) -> Result<Var> {
    let t = record_triplet_loss(tape, z, triplets, margin)?;
    match scores {
        Some((logits, labels)) => {
            let ce = tape.cross_entropy(logits, labels)?;
            tape.add(t, ce)
        }
        None => Ok(t),
    }
}

/// Evaluates the combined loss on fixed embeddings and class scores.
/// `labels` must cover every row of `scores` in supervised mode.
pub fn combined_loss(
    z: &Tensor,
    scores: Option<(&Tensor, &[Option<usize>])>,
    triplets: &TripletBatch,
    margin: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let scores = match scores {
        Some((s, labels)) => {
            let labels: Vec<usize> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| l.ok_or_else(|| Error::invalid(format!("row {i} has no label in supervised mode"))))
                .collect::<Result<_>>()?;
            Some((tape.constant(s.clone()), Arc::new(labels)))
        }
        None => None,
    };
    let loss = record_combined_loss(&mut tape, zv, scores, triplets, margin)?;
    Ok(tape.value(loss).item())
}

/// Adam moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay. A non-finite
/// gradient aborts before anything is modified.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let decay = 1.0 - lr * weight_decay;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi = *pi * decay - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `lr0 · ½ · (1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean triplet hinge loss per mined triplet.
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ce: Option<f64>,
    pub val_ndcg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
    pub triplets: usize,
    /// Minibatches without any usable triplet.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    /// Training stopped; the returned parameters are the last ones that
    /// produced a finite epoch.
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub status: TrainStatus,
}

impl TrainOutput {
    pub fn into_result(self) -> Result<(ModelParams, Vec<EpochLog>)> {
        match self.status {
            TrainStatus::Completed => Ok((self.params, self.log)),
            TrainStatus::Diverged { epoch, reason } => Err(Error::Diverged { epoch, reason }),
        }
    }
}

struct StepOutcome {
    triplet_loss: f64,
    ce: Option<f64>,
    triplets: usize,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    graph: ArtistGraph,
    features: Tensor,
    labels: Option<Vec<usize>>,
    fanouts: Vec<usize>,
    params: ModelParams,
    opt: OptimizerState,
}

impl Trainer<'_> {
    /// Returns `None` when the batch yields nothing to learn from.
    fn step(&mut self, seeds: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<Option<StepOutcome>> {
        let mut targets = seeds.to_vec();
        let mut in_batch: HashSet<usize> = seeds.iter().copied().collect();
        for &s in seeds {
            if let Some(&p) = self.graph.neighbors(s).choose(rng) {
                if in_batch.insert(p) {
                    targets.push(p);
                }
            }
        }
        let batch_graph = graph_restricted_to(&self.graph, &targets)?.graph;
        let sample_seed: u64 = rng.random();
        let triplet_seed: u64 = rng.random();

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let (blocks, inputs) = if self.fanouts.is_empty() {
            (Vec::new(), targets.clone())
        } else {
            let hood = neighbor_sample(
                &self.graph,
                &targets,
                &self.fanouts,
                sample_seed,
                self.params.self_edges(),
            )?;
            let inputs = hood.input_nodes().to_vec();
            (hood.blocks, inputs)
        };
        let x = tape.constant(self.features.select_rows(&inputs));
        let fwd = self.params.forward(&mut tape, &vars, x, &blocks, Mode::Train)?;

        let anchors: Vec<usize> = (0..seeds.len()).collect();
        let triplets = sample_triplets(
            tape.value(fwd.embedding),
            &batch_graph,
            &anchors,
            self.cfg.negatives,
            triplet_seed,
        )?;
        let scores = match (&self.labels, fwd.logits) {
            (Some(labels), Some(logits)) if self.cfg.supervised => {
                let seed_logits = tape.slice_rows(logits, 0, seeds.len())?;
                let y: Vec<usize> = seeds.iter().map(|&s| labels[s]).collect();
                Some((seed_logits, Arc::new(y)))
            }
            _ => None,
        };
        if triplets.is_empty() && scores.is_none() {
            return Ok(None);
        }
        let t_loss = record_triplet_loss(&mut tape, fwd.embedding, &triplets, self.cfg.margin)?;
        let (loss, ce) = match scores {
            Some((logits, y)) => {
                let ce = tape.cross_entropy(logits, y)?;
                (tape.add(t_loss, ce)?, Some(tape.value(ce).item()))
            }
            None => (t_loss, None),
        };
        let grads = tape.backward(loss)?;
        let grads = grads.params(&self.params.shapes());
        adam_step(self.params.tensors_mut(), &grads, &mut self.opt, lr, self.cfg.weight_decay)?;
        self.params.update_running_stats(&fwd.batch_stats);
        Ok(Some(StepOutcome {
            triplet_loss: tape.value(t_loss).item(),
            ce,
            triplets: triplets.len(),
        }))
    }
}

/// Splits shuffled nodes into batches of `size`, folding a trailing
/// batch of one node into its predecessor.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let n = order.len();
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..n];
    }
    out
}

/// Trains on the subgraph induced by the training nodes. Deterministic for
/// a fixed config. A non-finite loss or gradient stops training and
/// returns the parameters of the last completed epoch.
pub fn train(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    if model.input_dim != dataset.features.dim() {
        return Err(Error::invalid(format!(
            "model expects {} features, dataset has {}",
            model.input_dim,
            dataset.features.dim()
        )));
    }
    if cfg.supervised && !model.genre_head {
        return Err(Error::invalid("supervised training needs a model with a genre head"));
    }
    let train_sub = graph_restricted_to(&dataset.graph, &split.train)?;
    let labels = if cfg.supervised {
        let set = dataset
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("supervised training needs genre labels"))?;
        if set.vocabulary.len() != model.num_classes {
            return Err(Error::invalid(format!(
                "{} genres but the head predicts {} classes",
                set.vocabulary.len(),
                model.num_classes
            )));
        }
        let y: Vec<usize> = split
            .train
            .iter()
            .map(|&i| {
                set.labels[i].ok_or_else(|| Error::invalid(format!("training node {} has no label", dataset.graph.id(i))))
            })
            .collect::<Result<_>>()?;
        Some(y)
    } else {
        None
    };

    let params = build_model(model, cfg.seed)?;
    let opt = OptimizerState::new(params.tensors());
    let mut trainer = Trainer {
        cfg,
        features: dataset.features.values.select_rows(&split.train),
        graph: train_sub.graph,
        labels,
        fanouts: cfg.fanouts_for(model.gc_layers),
        params,
        opt,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = trainer.params.clone();
    let n_train = trainer.graph.node_count();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut ce_steps, mut triplets, mut skipped) = (0.0, 0.0, 0, 0, 0);
        let mut failure = None;
        for batch in minibatches(&order, cfg.batch_size) {
            match trainer.step(batch, lr, &mut rng) {
                Ok(Some(out)) => {
                    if !out.triplet_loss.is_finite() {
                        failure = Some("loss is not finite".to_string());
                        break;
                    }
                    loss_sum += out.triplet_loss;
                    triplets += out.triplets;
                    if let Some(ce) = out.ce {
                        ce_sum += ce;
                        ce_steps += 1;
                    }
                }
                Ok(None) => skipped += 1,
                Err(Error::NonFinite(what)) => {
                    failure = Some(format!("{what} is not finite"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = failure {
            log::warn!("training diverged in epoch {epoch}: {reason}");
            return Ok(TrainOutput {
                params: last_good,
                log,
                status: TrainStatus::Diverged { epoch, reason },
            });
        }
        let (val_ndcg, val_f1) = if cfg.validate && !split.validation.is_empty() {
            let score = evaluate_model(&trainer.params, dataset, split, HeldOut::Validation, cfg.eval_k)?;
            (Some(score.ranking.mean), score.f1.map(|f| f.macro_f1))
        } else {
            (None, None)
        };
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: if triplets > 0 { loss_sum / triplets as f64 } else { 0.0 },
            mean_ce: (ce_steps > 0).then(|| ce_sum / ce_steps as f64),
            val_ndcg,
            val_f1,
            triplets,
            skipped_steps: skipped,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} val_ndcg {:?}",
            entry.mean_loss,
            entry.val_ndcg
        );
        log.push(entry);
        last_good = trainer.params.clone();
    }
    Ok(TrainOutput {
        params: trainer.params,
        log,
        status: TrainStatus::Completed,
    })
}
