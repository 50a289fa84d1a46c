//! Undirected, unweighted artist graph in compressed sparse row form, plus
//! the structural utilities built on it: loading, statistics, node splits,
//! induced subgraphs and layer-wise neighbor sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtistGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    ids: Vec<String>,
    names: Vec<String>,
}

/// What had to be cleaned up while building a graph from raw edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl ArtistGraph {
    /// Builds a symmetric graph from an edge list over node indices.
    /// Self-loops are dropped and repeated pairs (in either direction)
    /// collapse to one undirected edge.
    pub fn from_edges(
        ids: Vec<String>,
        names: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<(Self, BuildReport)> {
        let n = ids.len();
        if names.len() != n {
            return Err(Error::invalid(format!("{} ids but {} names", n, names.len())));
        }
        let mut report = BuildReport::default();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                report.self_loops += 1;
                continue;
            }
            if !seen.insert((a.min(b), a.max(b))) {
                report.duplicates += 1;
                continue;
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        Ok((Self::from_adjacency(ids, names, adj), report))
    }

    fn from_adjacency(ids: Vec<String>, names: Vec<String>, mut adj: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        ArtistGraph {
            offsets,
            neighbors,
            ids,
            names,
        }
    }

    /// Graph with generated ids `a0, a1, ...` used as names as well.
    pub fn anonymous(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let ids: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
        Ok(Self::from_edges(ids.clone(), ids, edges)?.0)
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .filter(move |&&j| j > i)
                .map(move |&j| (i, j))
        })
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.node_count()).all(|i| {
            self.neighbors(i)
                .iter()
                .all(|&j| j != i && self.has_edge(j, i))
        })
    }

    /// Copy of the graph with one extra node connected to `members`.
    pub fn with_extra_node(&self, id: String, name: String, members: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| self.neighbors(i).to_vec()).collect();
        let mut new_row: Vec<usize> = Vec::with_capacity(members.len());
        for &m in members {
            if m >= n {
                return Err(Error::invalid(format!("member {m} out of range for {n} nodes")));
            }
            if !new_row.contains(&m) {
                new_row.push(m);
                adj[m].push(n);
            }
        }
        adj.push(new_row);
        let mut ids = self.ids.clone();
        let mut names = self.names.clone();
        ids.push(id);
        names.push(name);
        Ok(Self::from_adjacency(ids, names, adj))
    }

    /// Nodes within `hops` edges of `source` (including `source`).
    pub fn within_hops(&self, source: usize, hops: usize) -> HashSet<usize> {
        let mut seen = HashSet::from([source]);
        let mut frontier = vec![source];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in self.neighbors(u) {
                    if seen.insert(v) {
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    pub fn save(&self, edges_path: &Path, ids_path: &Path) -> Result<()> {
        let write = |path: &Path, body: &mut dyn FnMut(&mut dyn Write) -> std::io::Result<()>| {
            let file = fs::File::create(path)
                .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            let mut w = BufWriter::new(file);
            body(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        };
        write(ids_path, &mut |w| {
            for (id, name) in self.ids.iter().zip(&self.names) {
                writeln!(w, "{id}\t{name}")?;
            }
            Ok(())
        })?;
        write(edges_path, &mut |w| {
            for (i, j) in self.edges() {
                writeln!(w, "{}\t{}", self.ids[i], self.ids[j])?;
            }
            Ok(())
        })
    }
}

/// Reads an ids file (`id<TAB>display_name`, one per line, line order is
/// node order) and an edge file (`id_a<TAB>id_b`).
pub fn load_graph(edges_path: &Path, ids_path: &Path) -> Result<(ArtistGraph, BuildReport)> {
    let ids_text = read_to_string(ids_path)?;
    let mut ids = Vec::new();
    let mut names = Vec::new();
    let mut index = HashMap::new();
    for (lineno, line) in ids_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let id = parts.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(parse_err(ids_path, lineno, "missing id"));
        }
        let name = parts.next().map(str::trim).unwrap_or(id);
        if index.insert(id.to_string(), ids.len()).is_some() {
            return Err(parse_err(ids_path, lineno, &format!("duplicate id `{id}`")));
        }
        ids.push(id.to_string());
        names.push(name.to_string());
    }

    let edges_text = read_to_string(edges_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in edges_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(parse_err(edges_path, lineno, "expected `id_a<TAB>id_b`"));
        }
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::UnknownId {
                id: id.to_string(),
                path: edges_path.to_path_buf(),
                line: lineno + 1,
            })
        };
        edges.push((lookup(parts[0])?, lookup(parts[1])?));
    }
    let (graph, report) = ArtistGraph::from_edges(ids, names, edges)?;
    if report.self_loops > 0 {
        log::warn!("{}: dropped {} self-loops", edges_path.display(), report.self_loops);
    }
    Ok((graph, report))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn parse_err(path: &Path, lineno: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: lineno + 1,
        msg: msg.to_string(),
    }
}

/// Connection statistics in the layout of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    /// Undirected pairs.
    pub total_connections: usize,
    /// Directed entries of the adjacency matrix (2 × undirected).
    pub directed_connections: usize,
    /// Mean degree, i.e. directed entries / nodes.
    pub avg_connections_per_artist: f64,
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
}

impl GraphStats {
    /// Statistics from a degree multiset; quartiles use the nearest-rank
    /// convention.
    pub fn from_degrees(degrees: &[usize]) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::invalid("statistics of an empty graph"));
        }
        let mut sorted = degrees.to_vec();
        sorted.sort_unstable();
        let directed: usize = sorted.iter().sum();
        Ok(GraphStats {
            nodes: sorted.len(),
            total_connections: directed / 2,
            directed_connections: directed,
            avg_connections_per_artist: directed as f64 / sorted.len() as f64,
            q1: nearest_rank(&sorted, 0.25),
            q2: nearest_rank(&sorted, 0.50),
            q3: nearest_rank(&sorted, 0.75),
        })
    }
}

fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn compute_stats(g: &ArtistGraph) -> Result<GraphStats> {
    let degrees: Vec<usize> = (0..g.node_count()).map(|i| g.degree(i)).collect();
    GraphStats::from_degrees(&degrees)
}

/// Node-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Training nodes together with `other`, sorted.
    pub fn train_with(&self, other: &[usize]) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.train.iter().chain(other).copied().collect();
        nodes.sort_unstable();
        nodes
    }
}

/// Uniform 80/10/10 node split. Validation and test sizes are floored,
/// the remainder goes to training.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 nodes to split, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let take = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        seed,
    })
}

/// An induced subgraph and the original index of each of its nodes.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: ArtistGraph,
    pub original: Vec<usize>,
}

/// Induced subgraph on `allowed`, with nodes in the given order.
pub fn graph_restricted_to(g: &ArtistGraph, allowed: &[usize]) -> Result<Subgraph> {
    let mut local = HashMap::with_capacity(allowed.len());
    for (new, &old) in allowed.iter().enumerate() {
        if old >= g.node_count() {
            return Err(Error::invalid(format!("node {old} not in graph")));
        }
        if local.insert(old, new).is_some() {
            return Err(Error::invalid(format!("node {old} listed twice")));
        }
    }
    let adj: Vec<Vec<usize>> = allowed
        .iter()
        .map(|&old| {
            g.neighbors(old)
                .iter()
                .filter_map(|j| local.get(j).copied())
                .collect()
        })
        .collect();
    let ids = allowed.iter().map(|&i| g.ids[i].clone()).collect();
    let names = allowed.iter().map(|&i| g.names[i].clone()).collect();
    Ok(Subgraph {
        graph: ArtistGraph::from_adjacency(ids, names, adj),
        original: allowed.to_vec(),
    })
}

/// When a destination node also receives its own representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfEdges {
    Never,
    /// Only nodes that would otherwise have no incoming edge.
    IfIsolated,
    /// Every node, as the first edge of its segment.
    Always,
}

/// One message-passing layer's bipartite structure. The first `dst_count`
/// entries of `src_nodes` are the destination nodes themselves, so a
/// destination's own representation is row `i` of the source matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// Graph indices of the source nodes.
    pub src_nodes: Vec<usize>,
    pub dst_count: usize,
    /// Edge segment per destination node.
    pub offsets: Arc<Vec<usize>>,
    /// Local source index of each edge.
    pub edge_src: Arc<Vec<usize>>,
}

impl Block {
    /// Every node attends over its full neighborhood.
    pub fn full(g: &ArtistGraph, self_edges: SelfEdges) -> Self {
        let n = g.node_count();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut edge_src = Vec::with_capacity(g.neighbors.len());
        offsets.push(0);
        for i in 0..n {
            let nb = g.neighbors(i);
            match self_edges {
                SelfEdges::Always => edge_src.push(i),
                SelfEdges::IfIsolated if nb.is_empty() => edge_src.push(i),
                _ => {}
            }
            edge_src.extend_from_slice(nb);
            offsets.push(edge_src.len());
        }
        Block {
            src_nodes: (0..n).collect(),
            dst_count: n,
            offsets: Arc::new(offsets),
            edge_src: Arc::new(edge_src),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edge_src.len()
    }

    /// Local source indices feeding destination `i`.
    pub fn sources_of(&self, i: usize) -> &[usize] {
        &self.edge_src[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Destination index of each edge.
    pub fn edge_dst(&self) -> Vec<usize> {
        (0..self.dst_count)
            .flat_map(|i| std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]))
            .collect()
    }
}

/// Layer-wise sampled computation graph for a minibatch. `blocks[0]` reads
/// the input features of `blocks[0].src_nodes`; the last block produces the
/// batch nodes, in the order given to [`neighbor_sample`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledNeighborhood {
    pub blocks: Vec<Block>,
}

impl SampledNeighborhood {
    pub fn input_nodes(&self) -> &[usize] {
        &self.blocks[0].src_nodes
    }

    pub fn output_nodes(&self) -> &[usize] {
        let last = self.blocks.last().expect("at least one block");
        &last.src_nodes[..last.dst_count]
    }
}

/// Samples at most `fanouts[l]` neighbors per node, uniformly without
/// replacement, for GC layer `l` (layer 0 is closest to the input).
/// `self_edges` decides which destinations also read their own row.
pub fn neighbor_sample(
    g: &ArtistGraph,
    batch_nodes: &[usize],
    fanouts: &[usize],
    seed: u64,
    self_edges: SelfEdges,
) -> Result<SampledNeighborhood> {
    if fanouts.is_empty() {
        return Err(Error::invalid("fanouts must name at least one layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<usize> = Vec::with_capacity(batch_nodes.len());
    let mut seen = HashSet::new();
    for &b in batch_nodes {
        if b >= g.node_count() {
            return Err(Error::invalid(format!("batch node {b} not in graph")));
        }
        if seen.insert(b) {
            targets.push(b);
        }
    }

    let mut blocks = Vec::with_capacity(fanouts.len());
    for &fanout in fanouts.iter().rev() {
        let mut src_nodes = targets.clone();
        let mut local: HashMap<usize, usize> =
            targets.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut offsets = Vec::with_capacity(targets.len() + 1);
        let mut edge_src = Vec::new();
        offsets.push(0);
        for (i, &v) in targets.iter().enumerate() {
            let nb = g.neighbors(v);
            let picked: Vec<usize> = if fanout >= nb.len() {
                nb.to_vec()
            } else {
                let mut idx = index::sample(&mut rng, nb.len(), fanout).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| nb[k]).collect()
            };
            match self_edges {
                SelfEdges::Always => edge_src.push(i),
                SelfEdges::IfIsolated if picked.is_empty() => edge_src.push(i),
                _ => {}
            }
            for u in picked {
                let next = src_nodes.len();
                let slot = *local.entry(u).or_insert_with(|| {
                    src_nodes.push(u);
                    next
                });
                edge_src.push(slot);
            }
            offsets.push(edge_src.len());
        }
        blocks.push(Block {
            dst_count: targets.len(),
            src_nodes: src_nodes.clone(),
            offsets: Arc::new(offsets),
            edge_src: Arc::new(edge_src),
        });
        targets = src_nodes;
    }
    blocks.reverse();
    Ok(SampledNeighborhood { blocks })
}
