//! Genre labeling: MusicBrainz tag retrieval with an on-disk cache, a
//! fixed-size genre vocabulary, and the resolution cascade
//! votes → text similarity → neighbor mode, followed by pruning of
//! disconnected artists.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{graph_restricted_to, parse_err, read_to_string, ArtistGraph};

pub const VOCABULARY_SIZE: usize = 25;

/// One genre per node, as an index into `vocabulary`; `None` is unresolved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenreLabelSet {
    pub vocabulary: Vec<String>,
    pub labels: Vec<Option<usize>>,
}

impl GenreLabelSet {
    pub fn genre_of(&self, node: usize) -> Option<&str> {
        self.labels[node].map(|g| self.vocabulary[g].as_str())
    }

    pub fn is_complete(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// Class index per node; fails if any node is unresolved.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::invalid(format!("node {i} has no label"))))
            .collect()
    }

    /// Reads `id<TAB>genre` lines. The vocabulary is the sorted set of
    /// genres in the file; nodes without a line stay unresolved.
    pub fn load(path: &Path, graph: &ArtistGraph) -> Result<Self> {
        let text = read_to_string(path)?;
        let index: HashMap<&str, usize> = graph
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((id, genre)) = line.split_once('\t') else {
                return Err(parse_err(path, lineno, "expected `id<TAB>genre`"));
            };
            let node = *index.get(id.trim()).ok_or_else(|| Error::UnknownId {
                id: id.trim().to_string(),
                path: path.to_path_buf(),
                line: lineno + 1,
            })?;
            pairs.push((node, genre.trim().to_string()));
        }
        let mut vocabulary: Vec<String> = pairs.iter().map(|(_, g)| g.clone()).collect();
        vocabulary.sort();
        vocabulary.dedup();
        let mut labels = vec![None; graph.node_count()];
        for (node, genre) in pairs {
            labels[node] = vocabulary.binary_search(&genre).ok();
        }
        Ok(GenreLabelSet { vocabulary, labels })
    }

    pub fn to_tsv(&self, graph: &ArtistGraph) -> String {
        let mut out = String::new();
        for i in 0..graph.node_count() {
            if let Some(g) = self.genre_of(i) {
                out.push_str(graph.id(i));
                out.push('\t');
                out.push_str(g);
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: &Path, graph: &ArtistGraph) -> Result<()> {
        fs::write(path, self.to_tsv(graph)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// User-submitted genre tags of one artist with their vote counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MusicBrainzRecord {
    pub artist_id: String,
    pub tags: Vec<(String, u64)>,
}

impl MusicBrainzRecord {
    pub fn empty(artist_id: &str) -> Self {
        MusicBrainzRecord {
            artist_id: artist_id.to_string(),
            tags: Vec::new(),
        }
    }

    /// Parses an artist lookup response. Entries under `genres` come first;
    /// `tags` entries add names not already present. Names are lowercased.
    pub fn from_json(artist_id: &str, body: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Tag {
            name: String,
            #[serde(default)]
            count: i64,
        }
        #[derive(Deserialize)]
        struct Artist {
            #[serde(default)]
            genres: Vec<Tag>,
            #[serde(default)]
            tags: Vec<Tag>,
        }
        let parsed: Artist = serde_json::from_str(body)?;
        let mut tags: Vec<(String, u64)> = Vec::new();
        for t in parsed.genres.into_iter().chain(parsed.tags) {
            let name = t.name.trim().to_lowercase();
            if name.is_empty() || tags.iter().any(|(n, _)| *n == name) {
                continue;
            }
            tags.push((name, t.count.max(0) as u64));
        }
        Ok(MusicBrainzRecord {
            artist_id: artist_id.to_string(),
            tags,
        })
    }

    /// Highest-voted tag, ties broken lexicographically.
    pub fn top_tag(&self) -> Option<&str> {
        self.tags
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(n, _)| n.as_str())
    }
}

/// Where lookups go and how politely.
#[derive(Clone, Debug)]
pub struct FetchConfig {
    /// Base URL; requests go to `{base}/ws/2/artist/{id}?inc=genres+tags&fmt=json`.
    pub base_url: String,
    pub cache_dir: PathBuf,
    pub offline: bool,
    pub min_interval: Duration,
    pub retries: usize,
    pub user_agent: String,
}

impl FetchConfig {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        FetchConfig {
            base_url: "https://musicbrainz.org".to_string(),
            cache_dir: cache_dir.into(),
            offline: false,
            min_interval: Duration::from_secs(1),
            retries: 3,
            user_agent: concat!("gatsy/", env!("CARGO_PKG_VERSION"), " ( https://musicbrainz.org )").to_string(),
        }
    }
}

/// Rate-limited MusicBrainz lookups backed by a per-id JSON cache.
pub struct GenreFetcher {
    cfg: FetchConfig,
    last_call: Option<Instant>,
    agent: ureq::Agent,
}

impl GenreFetcher {
    pub fn new(cfg: FetchConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        GenreFetcher {
            cfg,
            last_call: None,
            agent,
        }
    }

    pub fn cache_path(&self, id: &str) -> PathBuf {
        let safe = id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let stem = if safe && !id.is_empty() {
            id.to_string()
        } else {
            hex::encode(Sha256::digest(id.as_bytes()))
        };
        self.cfg.cache_dir.join(format!("{stem}.json"))
    }

    pub fn fetch(&mut self, id: &str) -> MusicBrainzRecord {
        let path = self.cache_path(id);
        if let Ok(body) = fs::read_to_string(&path) {
            match MusicBrainzRecord::from_json(id, &body) {
                Ok(rec) => return rec,
                Err(e) => log::warn!("corrupt cache entry {}: {e}; refetching", path.display()),
            }
        }
        if self.cfg.offline {
            return MusicBrainzRecord::empty(id);
        }
        match self.fetch_remote(id) {
            Ok(Some(body)) => match MusicBrainzRecord::from_json(id, &body) {
                Ok(rec) => {
                    if let Err(e) = fs::create_dir_all(&self.cfg.cache_dir).and_then(|_| fs::write(&path, &body)) {
                        log::warn!("could not cache {}: {e}", path.display());
                    }
                    rec
                }
                Err(e) => {
                    log::warn!("unparseable response for {id}: {e}");
                    MusicBrainzRecord::empty(id)
                }
            },
            Ok(None) => MusicBrainzRecord::empty(id),
            Err(e) => {
                log::warn!("lookup of {id} failed: {e}");
                MusicBrainzRecord::empty(id)
            }
        }
    }

    /// `Ok(None)` for an unknown artist.
    fn fetch_remote(&mut self, id: &str) -> Result<Option<String>> {
        let url = format!(
            "{}/ws/2/artist/{}?inc=genres+tags&fmt=json",
            self.cfg.base_url.trim_end_matches('/'),
            id
        );
        let mut last_err = String::new();
        for _ in 0..=self.cfg.retries {
            if let Some(prev) = self.last_call {
                let since = prev.elapsed();
                if since < self.cfg.min_interval {
                    thread::sleep(self.cfg.min_interval - since);
                }
            }
            self.last_call = Some(Instant::now());
            match self
                .agent
                .get(&url)
                .header("User-Agent", &self.cfg.user_agent)
                .header("Accept", "application/json")
                .call()
            {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 404 || status == 400 {
                        return Ok(None);
                    }
                    if status == 200 {
                        return resp
                            .body_mut()
                            .read_to_string()
                            .map(Some)
                            .map_err(|e| Error::Http(e.to_string()));
                    }
                    last_err = format!("status {status}");
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Http(format!("{url}: {last_err}")))
    }

    pub fn fetch_all(&mut self, ids: &[String]) -> Vec<MusicBrainzRecord> {
        ids.iter().map(|id| self.fetch(id)).collect()
    }
}

/// Convenience wrapper over [`GenreFetcher`].
pub fn fetch_genres(ids: &[String], cfg: FetchConfig) -> Vec<MusicBrainzRecord> {
    GenreFetcher::new(cfg).fetch_all(ids)
}

/// Number of distinct raw genre strings across all records.
pub fn distinct_genres(records: &[MusicBrainzRecord]) -> usize {
    let mut names: Vec<&str> = records
        .iter()
        .flat_map(|r| r.tags.iter().map(|(n, _)| n.as_str()))
        .collect();
    names.sort_unstable();
    names.dedup();
    names.len()
}

/// The `size` genres with the most total votes, ties broken
/// lexicographically. Uses every genre (with a warning) if fewer exist.
pub fn build_vocabulary(records: &[MusicBrainzRecord], size: usize) -> Vec<String> {
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        for (name, votes) in &r.tags {
            *totals.entry(name).or_default() += votes;
        }
    }
    if totals.len() < size {
        log::warn!("only {} distinct genres, fewer than {size}", totals.len());
    }
    let mut ranked: Vec<(&str, u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(size).map(|(n, _)| n.to_string()).collect()
}

fn vocab_index(vocab: &[String], genre: &str) -> Option<usize> {
    vocab.iter().position(|g| g == genre)
}

/// Most-voted tag that belongs to the vocabulary.
pub fn resolve_by_votes(record: &MusicBrainzRecord, vocab: &[String]) -> Option<usize> {
    record
        .tags
        .iter()
        .filter_map(|(name, votes)| vocab_index(vocab, name).map(|g| (name, *votes, g)))
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(_, _, g)| g)
}

/// A sentence encoder: the same text always maps to the same non-zero
/// vector.
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in for a sentence encoder: each lowercase token maps
/// to a Gaussian vector seeded by its SHA-256, and a text is the sum of its
/// tokens' vectors. Texts that share words therefore land close together.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 64 }
    }
}

impl TextEmbedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut tokens = 0;
        for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let digest = Sha256::digest(tok.as_bytes());
            let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut out {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v += x;
            }
            tokens += 1;
        }
        if tokens == 0 {
            return Err(Error::invalid("cannot embed text without tokens"));
        }
        Ok(out)
    }
}

/// Vectors exported from an external encoder, one `text<TAB>v1,v2,...` per
/// line. Unknown texts are an error.
#[derive(Clone, Debug, Default)]
pub struct VectorFileEmbedder {
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorFileEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((key, vals)) = line.rsplit_once('\t') else {
                return Err(parse_err(path, lineno, "expected `text<TAB>v1,v2,...`"));
            };
            let v: Vec<f64> = vals
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| parse_err(path, lineno, &format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if v.iter().all(|x| *x == 0.0) {
                return Err(parse_err(path, lineno, "zero vector"));
            }
            vectors.insert(key.to_string(), v);
        }
        Ok(VectorFileEmbedder { vectors })
    }
}

impl TextEmbedder for VectorFileEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no vector for `{text}`")))
    }
}

pub fn genre_prompt(genre: &str, artist: &str) -> String {
    format!("{genre} is the genre played by the artist {artist}")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Maps an out-of-vocabulary genre to the vocabulary genre whose prompt
/// embedding is most cosine-similar to the raw genre's prompt for the same
/// artist. Ties go to the earlier vocabulary entry; provider failures yield
/// `None`.
pub fn resolve_by_text(
    artist_name: &str,
    raw_genre: &str,
    vocab: &[String],
    provider: &dyn TextEmbedder,
) -> Option<usize> {
    if let Some(g) = vocab_index(vocab, raw_genre) {
        return Some(g);
    }
    let query = provider.embed(&genre_prompt(raw_genre, artist_name)).ok()?;
    let mut best: Option<(usize, f64)> = None;
    for (g, genre) in vocab.iter().enumerate() {
        let v = provider.embed(&genre_prompt(genre, artist_name)).ok()?;
        let c = cosine(&query, &v);
        if !c.is_finite() {
            return None;
        }
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((g, c));
        }
    }
    best.map(|(g, _)| g)
}

/// Modal label among labeled neighbors; ties go to the lower vocabulary
/// index.
pub fn resolve_by_neighbors(node: usize, partial: &[Option<usize>], graph: &ArtistGraph) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &j in graph.neighbors(node) {
        if let Some(g) = partial[j] {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(g, _)| g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Votes,
    Text,
    Neighbors,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelingReport {
    /// How each kept node (in output order) got its label.
    pub resolution: Vec<Resolution>,
    /// Ids of nodes removed for having no connections.
    pub pruned: Vec<String>,
    pub neighbor_rounds: usize,
}

#[derive(Clone, Debug)]
pub struct FinalizedLabels {
    pub graph: ArtistGraph,
    pub labels: GenreLabelSet,
    pub report: LabelingReport,
}

/// Runs the cascade votes → text → neighbor mode (repeated until no new
/// label appears), then drops nodes without connections. Any node still
/// unresolved afterwards is an error.
pub fn finalize_labels(
    graph: &ArtistGraph,
    records: &[MusicBrainzRecord],
    vocab: &[String],
    provider: &dyn TextEmbedder,
) -> Result<FinalizedLabels> {
    let by_id: HashMap<&str, &MusicBrainzRecord> =
        records.iter().map(|r| (r.artist_id.as_str(), r)).collect();
    let n = graph.node_count();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut how: Vec<Option<Resolution>> = vec![None; n];

    for i in 0..n {
        let Some(rec) = by_id.get(graph.id(i)) else {
            continue;
        };
        if let Some(g) = resolve_by_votes(rec, vocab) {
            labels[i] = Some(g);
            how[i] = Some(Resolution::Votes);
        } else if let Some(raw) = rec.top_tag() {
            if let Some(g) = resolve_by_text(graph.name(i), raw, vocab, provider) {
                labels[i] = Some(g);
                how[i] = Some(Resolution::Text);
            }
        }
    }

    let mut rounds = 0;
    loop {
        let snapshot = labels.clone();
        let mut changed = false;
        for i in 0..n {
            if snapshot[i].is_none() {
                if let Some(g) = resolve_by_neighbors(i, &snapshot, graph) {
                    labels[i] = Some(g);
                    how[i] = Some(Resolution::Neighbors);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        rounds += 1;
    }

    let keep: Vec<usize> = (0..n).filter(|&i| graph.degree(i) > 0).collect();
    let pruned: Vec<String> = (0..n)
        .filter(|&i| graph.degree(i) == 0)
        .map(|i| graph.id(i).to_string())
        .collect();
    let unresolved: Vec<String> = keep
        .iter()
        .filter(|&&i| labels[i].is_none())
        .map(|&i| graph.id(i).to_string())
        .collect();
    if !unresolved.is_empty() {
        return Err(Error::Unresolved(unresolved));
    }
    let sub = graph_restricted_to(graph, &keep)?;
    Ok(FinalizedLabels {
        graph: sub.graph,
        labels: GenreLabelSet {
            vocabulary: vocab.to_vec(),
            labels: keep.iter().map(|&i| labels[i]).collect(),
        },
        report: LabelingReport {
            resolution: keep.iter().map(|&i| how[i].expect("resolved")).collect(),
            pruned,
            neighbor_rounds: rounds,
        },
    })
}

/// Fetches tags for every artist of `graph`, builds the vocabulary and
/// runs [`finalize_labels`].
pub fn label_artists(graph: &ArtistGraph, fetch: FetchConfig, provider: &dyn TextEmbedder) -> Result<FinalizedLabels> {
    let records = fetch_genres(graph.ids(), fetch);
    log::info!("{} distinct raw genres", distinct_genres(&records));
    let vocab = build_vocabulary(&records, VOCABULARY_SIZE);
    finalize_labels(graph, &records, &vocab, provider)
}
