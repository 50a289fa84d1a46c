//! Node features, label files, on-disk dataset layout and the synthetic
//! stochastic-block-model generator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genre::GenreLabelSet;
use crate::graph::{load_graph, parse_err, ArtistGraph};
use crate::tensor::Tensor;

const FEATURE_MAGIC: &[u8; 8] = b"GTSYFEAT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Handcrafted,
    Random,
}

/// Dense `n × m` node features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(values: Tensor, kind: FeatureKind) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid(format!("features must be 2-D, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        Ok(FeatureMatrix { values, kind })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Reads the text format (`n m` header, then `n` whitespace-separated
    /// rows) or, when the file starts with the binary magic, the binary one.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.starts_with(FEATURE_MAGIC) {
            return Self::decode_binary(path, &bytes);
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| parse_err(path, 0, "features file is neither binary nor UTF-8"))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| parse_err(path, 0, "empty features file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(path, hl, "header must be `n m`")))
            .collect::<Result<_>>()?;
        let [n, m] = dims[..] else {
            return Err(parse_err(path, hl, "header must be `n m`"));
        };
        let mut data = Vec::with_capacity(n * m);
        let mut rows = 0;
        for (lineno, line) in lines {
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(path, lineno, &format!("bad number `{tok}`")))?;
                data.push(v);
            }
            if data.len() - before != m {
                return Err(parse_err(path, lineno, &format!("expected {m} values")));
            }
            rows += 1;
        }
        if rows != n {
            return Err(parse_err(path, hl, &format!("header says {n} rows, found {rows}")));
        }
        Self::new(Tensor::new(vec![n, m], data)?, FeatureKind::Handcrafted)
    }

    fn decode_binary(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(parse_err(path, 0, "truncated binary header"));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != n * m * 8 {
            return Err(parse_err(path, 0, &format!("binary body holds {} bytes, expected {}", body.len(), n * m * 8)));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(Tensor::new(vec![n, m], data)?, FeatureKind::Handcrafted)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.rows(), self.dim()));
        for i in 0..self.rows() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.values.len() * 8);
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Copy with one extra row appended.
    pub fn with_extra_row(&self, row: &[f64]) -> Result<Self> {
        if row.len() != self.dim() {
            return Err(Error::Shape {
                op: "with_extra_row",
                left: self.values.shape().to_vec(),
                right: vec![row.len()],
            });
        }
        let mut data = self.values.data().to_vec();
        data.extend_from_slice(row);
        Self::new(Tensor::new(vec![self.rows() + 1, self.dim()], data)?, self.kind)
    }
}

/// I.i.d. standard normal features.
pub fn random_features(n: usize, m: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix {
        values: Tensor::randn(&[n, m], &mut rng),
        kind: FeatureKind::Random,
    }
}

/// Graph, features and (optionally) genre labels for the same node order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: ArtistGraph,
    pub features: FeatureMatrix,
    pub labels: Option<GenreLabelSet>,
}

/// File names inside a dataset directory.
pub mod layout {
    pub const EDGES: &str = "edges.tsv";
    pub const IDS: &str = "ids.tsv";
    pub const FEATURES: &str = "features.txt";
    pub const FEATURES_BIN: &str = "features.bin";
    pub const LABELS: &str = "labels.tsv";
}

impl Dataset {
    pub fn new(graph: ArtistGraph, features: FeatureMatrix, labels: Option<GenreLabelSet>) -> Result<Self> {
        if features.rows() != graph.node_count() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.node_count()
            )));
        }
        if let Some(l) = &labels {
            if l.labels.len() != graph.node_count() {
                return Err(Error::invalid(format!(
                    "{} labels for {} nodes",
                    l.labels.len(),
                    graph.node_count()
                )));
            }
        }
        Ok(Dataset {
            graph,
            features,
            labels,
        })
    }

    pub fn load_files(edges: &Path, ids: &Path, features: &Path, labels: Option<&Path>) -> Result<Self> {
        let (graph, _) = load_graph(edges, ids)?;
        let features = FeatureMatrix::load(features)?;
        let labels = labels.map(|p| GenreLabelSet::load(p, &graph)).transpose()?;
        Self::new(graph, features, labels)
    }

    /// Loads `edges.tsv`, `ids.tsv`, `features.bin` or `features.txt`, and
    /// `labels.tsv` when present.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let bin = dir.join(layout::FEATURES_BIN);
        let features = if bin.exists() { bin } else { dir.join(layout::FEATURES) };
        let labels: Option<PathBuf> = Some(dir.join(layout::LABELS)).filter(|p| p.exists());
        Self::load_files(
            &dir.join(layout::EDGES),
            &dir.join(layout::IDS),
            &features,
            labels.as_deref(),
        )
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.graph.save(&dir.join(layout::EDGES), &dir.join(layout::IDS))?;
        self.features.save_text(&dir.join(layout::FEATURES))?;
        if let Some(l) = &self.labels {
            l.save(&dir.join(layout::LABELS), &self.graph)?;
        }
        Ok(())
    }

    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        Self::new(self.graph.clone(), features, self.labels.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-node noise added to the block mean.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            blocks: 4,
            nodes_per_block: 100,
            p_in: 0.1,
            p_out: 0.005,
            feature_dim: 32,
            noise: 0.25,
            seed: 0,
        }
    }
}

/// Stochastic block model with block-mean Gaussian features and the block
/// index as genre label. A node left without edges is attached to a
/// uniformly chosen member of its own block so every node has a neighbor.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let valid = |p: f64| (0.0..=1.0).contains(&p);
    if !valid(cfg.p_in) || !valid(cfg.p_out) || cfg.p_in <= cfg.p_out {
        return Err(Error::invalid(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.blocks == 0 || cfg.nodes_per_block < 2 || cfg.feature_dim == 0 {
        return Err(Error::invalid("need at least one block of two nodes and one feature"));
    }
    let n = cfg.blocks * cfg.nodes_per_block;
    let block_of = |i: usize| i / cfg.nodes_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            let p = if block_of(i) == block_of(j) { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    for i in 0..n {
        if degree[i] == 0 {
            let b = block_of(i);
            let mut j = i;
            while j == i {
                j = b * cfg.nodes_per_block + rng.random_range(0..cfg.nodes_per_block);
            }
            edges.push((i, j));
            degree[i] += 1;
            degree[j] += 1;
        }
    }

    let ids: Vec<String> = (0..n).map(|i| format!("syn{i:05}")).collect();
    let names: Vec<String> = (0..n)
        .map(|i| format!("Artist {} of block {}", i % cfg.nodes_per_block, block_of(i)))
        .collect();
    let (graph, _) = ArtistGraph::from_edges(ids, names, edges)?;

    let means = Tensor::randn(&[cfg.blocks, cfg.feature_dim], &mut rng);
    let mut values = Tensor::zeros(&[n, cfg.feature_dim]);
    for i in 0..n {
        let mean = means.row(block_of(i));
        for (v, mu) in values.row_mut(i).iter_mut().zip(mean) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = mu + cfg.noise * eps;
        }
    }
    let features = FeatureMatrix::new(values, FeatureKind::Handcrafted)?;

    let vocabulary: Vec<String> = (0..cfg.blocks).map(|b| format!("genre-{b}")).collect();
    let labels = GenreLabelSet {
        vocabulary,
        labels: (0..n).map(|i| Some(block_of(i))).collect(),
    };
    Dataset::new(graph, features, Some(labels))
}
