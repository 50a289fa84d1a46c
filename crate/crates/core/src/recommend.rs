//! Nearest-neighbor retrieval over a frozen embedding, fictitious-artist
//! injection and a 2-D projection for visualization.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{decode_checkpoint, ModelParams};
use crate::tensor::{squared_distance, Tensor};

/// Embeddings of every artist plus what is needed to present them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    z: Tensor,
    ids: Vec<String>,
    names: Vec<String>,
    genres: Option<Vec<Option<String>>>,
    provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendedArtist {
    pub id: String,
    pub name: String,
    pub distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub query_id: String,
    pub query_name: String,
    pub items: Vec<RecommendedArtist>,
}

/// A non-existing artist described by the artists it should resemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FictitiousArtistSpec {
    pub name: String,
    /// Ids of the existing artists the new one is connected to.
    pub members: Vec<String>,
    /// Explicit features; the mean of the members' features otherwise.
    #[serde(default)]
    pub features: Option<Vec<f64>>,
}

fn dataset_digest(hasher: &mut Sha256, dataset: &Dataset) {
    let g = &dataset.graph;
    hasher.update((g.node_count() as u64).to_le_bytes());
    for (id, name) in g.ids().iter().zip(g.names()) {
        hasher.update((id.len() as u64).to_le_bytes());
        hasher.update(id.as_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
    }
    for (i, j) in g.edges() {
        hasher.update((i as u64).to_le_bytes());
        hasher.update((j as u64).to_le_bytes());
    }
    hasher.update((dataset.features.dim() as u64).to_le_bytes());
    for v in dataset.features.values.data() {
        hasher.update(v.to_le_bytes());
    }
    if let Some(labels) = &dataset.labels {
        for g in &labels.vocabulary {
            hasher.update(g.as_bytes());
            hasher.update([0]);
        }
        for l in &labels.labels {
            hasher.update(l.map_or(u64::MAX, |c| c as u64).to_le_bytes());
        }
    }
}

fn genre_names(dataset: &Dataset) -> Option<Vec<Option<String>>> {
    dataset.labels.as_ref().map(|set| {
        set.labels
            .iter()
            .map(|l| l.map(|c| set.vocabulary[c].clone()))
            .collect()
    })
}

impl EmbeddingStore {
    /// Wraps an existing embedding. `ids`, `names` and `genres` must have
    /// one entry per row.
    pub fn from_parts(
        z: Tensor,
        ids: Vec<String>,
        names: Vec<String>,
        genres: Option<Vec<Option<String>>>,
        provenance: String,
    ) -> Result<Self> {
        let n = z.rows();
        if ids.len() != n || names.len() != n || genres.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::invalid(format!("store rows ({n}) do not match ids/names/genres")));
        }
        Ok(EmbeddingStore {
            z,
            ids,
            names,
            genres,
            provenance,
        })
    }

    /// Full-graph eval-mode embedding of `dataset` under the checkpoint in
    /// `ckpt`. The provenance hash covers the checkpoint bytes and the
    /// dataset contents.
    pub fn build(ckpt: &[u8], dataset: &Dataset) -> Result<Self> {
        let (params, _) = decode_checkpoint(ckpt)?;
        if params.config.input_dim != dataset.features.dim() {
            return Err(Error::invalid(format!(
                "checkpoint expects {} features, dataset has {}",
                params.config.input_dim,
                dataset.features.dim()
            )));
        }
        let z = params.embed(&dataset.features.values, &dataset.graph)?;
        let mut hasher = Sha256::new();
        hasher.update((ckpt.len() as u64).to_le_bytes());
        hasher.update(ckpt);
        dataset_digest(&mut hasher, dataset);
        Self::from_parts(
            z,
            dataset.graph.ids().to_vec(),
            dataset.graph.names().to_vec(),
            genre_names(dataset),
            hex::encode(hasher.finalize()),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embedding(&self) -> &Tensor {
        &self.z
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn genre(&self, i: usize) -> Option<&str> {
        self.genres.as_ref().and_then(|g| g[i].as_deref())
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn index_of_id(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Resolves an id, or else a case-insensitive exact name. Unknown or
    /// ambiguous queries fail with candidate suggestions.
    pub fn resolve(&self, query: &str) -> Result<usize> {
        if let Some(i) = self.index_of_id(query) {
            return Ok(i);
        }
        let lower = query.to_lowercase();
        let exact: Vec<usize> = (0..self.len()).filter(|&i| self.names[i].to_lowercase() == lower).collect();
        match exact.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Query {
                query: query.to_string(),
                reason: "no artist with this id or name".into(),
                candidates: self.suggest(query, 5),
            }),
            many => Err(Error::Query {
                query: query.to_string(),
                reason: format!("{} artists share this name; use an id", many.len()),
                candidates: many.iter().map(|&i| format!("{} ({})", self.names[i], self.ids[i])).collect(),
            }),
        }
    }

    /// Names closest to `query`: substring matches first, then by edit
    /// similarity.
    pub fn suggest(&self, query: &str, limit: usize) -> Vec<String> {
        let lower = query.to_lowercase();
        let mut scored: Vec<(bool, f64, usize)> = (0..self.len())
            .map(|i| {
                let name = self.names[i].to_lowercase();
                (!name.contains(&lower), -strsim::normalized_levenshtein(&lower, &name), i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        scored
            .into_iter()
            .take(limit)
            .map(|(_, _, i)| format!("{} ({})", self.names[i], self.ids[i]))
            .collect()
    }

    /// Ids or names containing `q`, case-insensitively, in node order.
    pub fn search(&self, q: &str, limit: usize) -> Vec<usize> {
        let q = q.to_lowercase();
        if q.is_empty() {
            return Vec::new();
        }
        (0..self.len())
            .filter(|&i| self.ids[i].to_lowercase().contains(&q) || self.names[i].to_lowercase().contains(&q))
            .take(limit)
            .collect()
    }

    /// The `k` rows nearest to row `query` by Euclidean distance, ascending,
    /// ties by index, skipping the query and `exclude`.
    pub fn nearest(&self, query: usize, k: usize, exclude: &HashSet<usize>) -> Vec<(usize, f64)> {
        let q = self.z.row(query);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|j| *j != query && !exclude.contains(j))
            .map(|j| (squared_distance(q, self.z.row(j)), j))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(d, j)| (j, d.sqrt())).collect()
    }

    fn present(&self, query: usize, hits: Vec<(usize, f64)>) -> Recommendation {
        Recommendation {
            query_id: self.ids[query].clone(),
            query_name: self.names[query].clone(),
            items: hits
                .into_iter()
                .map(|(j, distance)| RecommendedArtist {
                    id: self.ids[j].clone(),
                    name: self.names[j].clone(),
                    distance,
                    genre: self.genre(j).map(str::to_string),
                })
                .collect(),
        }
    }

    pub fn recommend(&self, query: &str, k: usize) -> Result<Recommendation> {
        let i = self.resolve(query)?;
        Ok(self.recommend_index(i, k))
    }

    pub fn recommend_index(&self, i: usize, k: usize) -> Recommendation {
        self.present(i, self.nearest(i, k, &HashSet::new()))
    }
}

/// Dataset with one extra node connected to the spec's members, and that
/// node's index. The input dataset is left untouched.
pub fn inject_fictitious(dataset: &Dataset, spec: &FictitiousArtistSpec) -> Result<(Dataset, usize)> {
    if spec.members.is_empty() {
        return Err(Error::invalid("a fictitious artist needs at least one member"));
    }
    let g = &dataset.graph;
    let mut members = Vec::with_capacity(spec.members.len());
    for id in &spec.members {
        let i = g.index_of(id).ok_or_else(|| Error::Query {
            query: id.clone(),
            reason: "unknown member id".into(),
            candidates: Vec::new(),
        })?;
        if !members.contains(&i) {
            members.push(i);
        }
    }
    let features = match &spec.features {
        Some(x) => x.clone(),
        None => {
            let mut mean = vec![0.0; dataset.features.dim()];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(dataset.features.values.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            mean
        }
    };
    let new = g.node_count();
    let mut id = format!("fictitious-{new}");
    while g.index_of(&id).is_some() {
        id.push('_');
    }
    let graph = g.with_extra_node(id, spec.name.clone(), &members)?;
    let feats = dataset.features.with_extra_row(&features)?;
    let labels = dataset.labels.clone().map(|mut l| {
        l.labels.push(None);
        l
    });
    Ok((Dataset::new(graph, feats, labels)?, new))
}

/// Embeds the augmented graph and returns the fictitious node's `k`
/// nearest artists, members excluded, together with the augmented store.
pub fn recommend_fictitious(
    params: &ModelParams,
    dataset: &Dataset,
    spec: &FictitiousArtistSpec,
    k: usize,
) -> Result<(Recommendation, EmbeddingStore)> {
    let (aug, new) = inject_fictitious(dataset, spec)?;
    let z = params.embed(&aug.features.values, &aug.graph)?;
    let store = EmbeddingStore::from_parts(
        z,
        aug.graph.ids().to_vec(),
        aug.graph.names().to_vec(),
        genre_names(&aug),
        String::new(),
    )?;
    let exclude: HashSet<usize> = aug.graph.neighbors(new).iter().copied().collect();
    let rec = store.present(new, store.nearest(new, k, &exclude));
    Ok((rec, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n × 2` coordinates on the first two principal components.
    pub coords: Tensor,
    /// Unit principal directions, one row per component.
    pub components: Tensor,
    /// Variance along each component.
    pub variance: [f64; 2],
}

/// PCA onto the top two principal components. Each direction is signed
/// so that its largest-magnitude entry is positive.
pub fn project_2d(z: &Tensor) -> Result<Projection> {
    let (n, m) = (z.rows(), z.cols());
    if n < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 points, got {n}")));
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (mu, v) in mean.iter_mut().zip(z.row(i)) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= n as f64);
    let centered = DMatrix::from_fn(n, m, |i, j| z.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let take = m.min(2);
    let mut components = Tensor::zeros(&[2, m]);
    let mut variance = [0.0; 2];
    for (c, &k) in order.iter().take(take).enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut lead = 0;
        for j in 0..m {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            components.set(c, j, sign * v[j]);
        }
        variance[c] = eig.eigenvalues[k].max(0.0);
    }
    let mut coords = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        for c in 0..2 {
            let x: f64 = (0..m).map(|j| centered[(i, j)] * components.get(c, j)).sum();
            coords.set(i, c, x);
        }
    }
    Ok(Projection {
        coords,
        components,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(points: &[Vec<f64>]) -> EmbeddingStore {
        let n = points.len();
        let ids: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
        let names = vec!["Alpha".into(), "Beta".into(), "beta".into(), "Gamma".into()][..n].to_vec();
        EmbeddingStore::from_parts(Tensor::from_rows(points), ids, names, None, String::new()).unwrap()
    }

    #[test]
    fn nearest_of_three_points() {
        let s = store(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 1.0]]);
        let r = s.recommend("a0", 1).unwrap();
        assert_eq!(r.items.len(), 1);
        assert_eq!(r.items[0].id, "a2");
        assert_eq!(r.items[0].distance, 1.0);
        let all = s.recommend_index(1, 10);
        assert_eq!(all.items.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), vec!["a0", "a2"]);
    }

    #[test]
    fn resolve_by_name_and_ambiguity() {
        let s = store(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(s.resolve("gamma").unwrap(), 3);
        match s.resolve("BETA") {
            Err(Error::Query { candidates, .. }) => assert_eq!(candidates.len(), 2),
            other => panic!("expected ambiguity, got {other:?}"),
        }
        match s.resolve("Gamm") {
            Err(Error::Query { candidates, .. }) => assert_eq!(candidates[0], "Gamma (a3)"),
            other => panic!("expected suggestions, got {other:?}"),
        }
        assert_eq!(s.search("ET", 10), vec![1, 2]);
        assert!(s.search("", 10).is_empty());
    }

    #[test]
    fn projection_of_planar_data_is_exact() {
        let pts = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let p = project_2d(&Tensor::from_rows(&pts)).unwrap();
        assert!(p.variance[0] >= p.variance[1]);
        for (got, want) in p.coords.data().iter().zip([2.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -1.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(project_2d(&Tensor::from_rows(&pts[..2])).is_err());
    }
}
