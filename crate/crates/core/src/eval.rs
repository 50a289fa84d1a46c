//! Ranking and classification metrics, the held-out evaluation protocol
//! and multi-seed model comparison.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{graph_restricted_to, ArtistGraph, DatasetSplit};
use crate::model::{count_params, ModelConfig, ModelParams};
use crate::tensor::{squared_distance, Tensor};
use crate::train::{train, TrainConfig, TrainStatus};

pub const DEFAULT_K: usize = 200;

/// Position discount `1 / log2(rank + 1)` for a 1-based rank.
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// nDCG@K with binary relevance. The ideal ordering places every relevant
/// item first, truncated at `min(k, |relevant|)`. Returns 0 when nothing
/// is relevant.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("nDCG needs K >= 1"));
    }
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok(dcg / ideal)
}

/// Pool indices ordered by Euclidean distance to `query`, ties broken by
/// index. The query itself is left out.
pub fn rank_by_distance(z: &Tensor, query: usize, pool: &[usize]) -> Vec<usize> {
    let q = z.row(query);
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&j| j != query)
        .map(|&j| (squared_distance(q, z.row(j)), j))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Per-query nDCG scores for one embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingScore {
    pub k: usize,
    /// `(node, ndcg)` for every scored query.
    pub per_artist: Vec<(usize, f64)>,
    pub mean: f64,
    /// Queries without a single true neighbor in the pool.
    pub skipped: usize,
}

/// Ranks every node of `graph` for each query and scores the ranking
/// against the query's neighbors in `graph`. `k` is capped at the pool
/// size minus one.
pub fn evaluate_embedding(z: &Tensor, graph: &ArtistGraph, queries: &[usize], k: usize) -> Result<RankingScore> {
    if z.rows() != graph.node_count() {
        return Err(Error::invalid(format!(
            "{} embedding rows for {} nodes",
            z.rows(),
            graph.node_count()
        )));
    }
    let n = graph.node_count();
    let k = k.min(n.saturating_sub(1)).max(1);
    let pool: Vec<usize> = (0..n).collect();
    let mut per_artist = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for &q in queries {
        let relevant: HashSet<usize> = graph.neighbors(q).iter().copied().collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let ranked = rank_by_distance(z, q, &pool);
        per_artist.push((q, ndcg_at_k(&ranked, &relevant, k)?));
    }
    let mean = if per_artist.is_empty() {
        0.0
    } else {
        per_artist.iter().map(|(_, s)| s).sum::<f64>() / per_artist.len() as f64
    };
    Ok(RankingScore {
        k,
        per_artist,
        mean,
        skipped,
    })
}

/// Which held-out set to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeldOut {
    Validation,
    Test,
}

/// Held-out evaluation of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScore {
    pub ranking: RankingScore,
    /// Genre f1 on the held-out nodes when the model has a class head and
    /// the dataset has labels.
    pub f1: Option<F1Scores>,
    /// Held-out queries in original node indices, aligned with `ranking`.
    pub queries: Vec<usize>,
}

/// Embeds the training nodes plus the held-out nodes over the connections
/// among them, then ranks all of them for every held-out node.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    split: &DatasetSplit,
    which: HeldOut,
    k: usize,
) -> Result<HeldOutScore> {
    let held = match which {
        HeldOut::Validation => &split.validation,
        HeldOut::Test => &split.test,
    };
    let nodes = split.train_with(held);
    let sub = graph_restricted_to(&dataset.graph, &nodes)?;
    let x = dataset.features.values.select_rows(&nodes);
    let (z, logits) = params.infer(&x, &sub.graph)?;
    let held_set: HashSet<usize> = held.iter().copied().collect();
    let local: Vec<usize> = (0..nodes.len()).filter(|&i| held_set.contains(&nodes[i])).collect();
    let mut ranking = evaluate_embedding(&z, &sub.graph, &local, k)?;
    for entry in &mut ranking.per_artist {
        entry.0 = nodes[entry.0];
    }
    let f1 = match (logits, &dataset.labels) {
        (Some(logits), Some(labels)) => {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for &i in &local {
                if let Some(y) = labels.labels[nodes[i]] {
                    pred.push(argmax(logits.row(i)));
                    truth.push(y);
                }
            }
            if truth.is_empty() {
                None
            } else {
                Some(f1_genre(&pred, &truth)?)
            }
        }
        _ => None,
    };
    Ok(HeldOutScore {
        ranking,
        f1,
        queries: local.iter().map(|&i| nodes[i]).collect(),
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Unweighted mean of per-class f1 over every class that occurs in
    /// the labels or the predictions.
    pub macro_f1: f64,
    /// Pooled over all samples; equals accuracy for single-label data.
    pub micro_f1: f64,
}

pub fn f1_genre(predictions: &[usize], labels: &[usize]) -> Result<F1Scores> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("f1 of an empty set"));
    }
    let classes = predictions.iter().chain(labels).max().copied().unwrap_or(0) + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
    }
    let correct: usize = tp.iter().sum();
    Ok(F1Scores {
        macro_f1: sum / present as f64,
        micro_f1: correct as f64 / labels.len() as f64,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ndcg: Option<f64>,
    pub f1: Option<f64>,
    /// Set when the run diverged; the seed is left out of the statistics.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub k: usize,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub f1_mean: Option<f64>,
    pub f1_std: Option<f64>,
    pub parameters: usize,
    pub seeds: usize,
    pub per_seed: Vec<SeedResult>,
}

impl EvalReport {
    pub fn from_seeds(model: String, k: usize, parameters: usize, per_seed: Vec<SeedResult>) -> Self {
        let ndcg: Vec<f64> = per_seed.iter().filter_map(|s| s.ndcg).collect();
        let f1: Vec<f64> = per_seed.iter().filter_map(|s| s.f1).collect();
        let (ndcg_mean, ndcg_std) = mean_std(&ndcg);
        let (f1_mean, f1_std) = if f1.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&f1);
            (Some(m), Some(s))
        };
        EvalReport {
            model,
            k,
            ndcg_mean,
            ndcg_std,
            f1_mean,
            f1_std,
            parameters,
            seeds: per_seed.len(),
            per_seed,
        }
    }
}

/// One model to compare: architecture plus how to train it.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains every candidate on seeds `0..n_seeds` (the seed drives both
/// initialization and sampling) and reports test nDCG per candidate.
pub fn compare_models(
    candidates: &[Candidate],
    dataset: &Dataset,
    split: &DatasetSplit,
    n_seeds: u64,
    k: usize,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut per_seed = Vec::new();
        let mut parameters = 0;
        for seed in 0..n_seeds {
            let cfg = TrainConfig {
                seed,
                ..cand.train.clone()
            };
            let out = train(dataset, &cand.model, &cfg, split)?;
            parameters = count_params(&out.params);
            let result = match out.status {
                TrainStatus::Completed => {
                    let score = evaluate_model(&out.params, dataset, split, HeldOut::Test, k)?;
                    SeedResult {
                        seed,
                        ndcg: Some(score.ranking.mean),
                        f1: score.f1.map(|f| f.macro_f1),
                        failure: None,
                    }
                }
                TrainStatus::Diverged { epoch, reason } => SeedResult {
                    seed,
                    ndcg: None,
                    f1: None,
                    failure: Some(format!("diverged in epoch {epoch}: {reason}")),
                },
            };
            log::info!("{} seed {seed}: {:?}", cand.model.label(), result.ndcg);
            per_seed.push(result);
        }
        reports.push(EvalReport::from_seeds(cand.model.label(), k, parameters, per_seed));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[usize]) -> HashSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn ndcg_worked_example() {
        let got = ndcg_at_k(&[10, 11, 12], &set(&[10, 12]), 3).unwrap();
        let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn ndcg_edges() {
        assert_eq!(ndcg_at_k(&[1, 2], &set(&[1, 2, 3]), 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[4, 5], &set(&[1]), 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[4, 5], &set(&[]), 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1], &set(&[1]), 0).is_err());
    }

    #[test]
    fn rank_ties_by_index() {
        let z = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![0.5]]);
        assert_eq!(rank_by_distance(&z, 0, &[0, 1, 2, 3]), vec![3, 1, 2]);
    }

    #[test]
    fn f1_one_class_predictions() {
        let f = f1_genre(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((f.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((f.micro_f1 - 0.5).abs() < 1e-15);
        assert_eq!(f1_genre(&[2, 1], &[2, 1]).unwrap().macro_f1, 1.0);
        assert!(f1_genre(&[], &[]).is_err());
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
