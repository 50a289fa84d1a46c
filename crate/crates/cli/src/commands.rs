use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use gatsy::data::{generate_synthetic, layout, random_features, FeatureKind, SyntheticConfig};
use gatsy::eval::{compare_models, Candidate, EvalReport, SeedResult};
use gatsy::genre::{label_artists, FetchConfig, HashEmbedder, TextEmbedder, VectorFileEmbedder};
use gatsy::graph::{compute_stats, load_graph, split_dataset};
use gatsy::model::{decode_checkpoint, save_checkpoint, CheckpointMeta};
use gatsy::recommend::recommend_fictitious;
use gatsy::train::{NegativeWeighting, TrainStatus};
use gatsy::{
    count_params, evaluate_model, train, ArtistGraph, Dataset, EmbeddingStore, FictitiousArtistSpec, HeldOut,
    ModelConfig, ModelParams, Recommendation, TrainConfig,
};

use crate::args::*;

impl GraphArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf)> {
        match (&self.data, &self.edges, &self.ids) {
            (Some(dir), _, _) => Ok((dir.join(layout::EDGES), dir.join(layout::IDS))),
            (None, Some(e), Some(i)) => Ok((e.clone(), i.clone())),
            _ => bail!("give either --data DIR or both --edges and --ids"),
        }
    }

    pub fn load(&self) -> Result<ArtistGraph> {
        let (edges, ids) = self.paths()?;
        let (graph, report) = load_graph(&edges, &ids)?;
        if report.self_loops + report.duplicates > 0 {
            log::warn!(
                "dropped {} self loops and {} duplicate edges",
                report.self_loops,
                report.duplicates
            );
        }
        Ok(graph)
    }
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        let (edges, ids) = self.graph.paths()?;
        let dir = self.graph.data.as_deref();
        let features = match (&self.features, dir) {
            (Some(f), _) => f.clone(),
            (None, Some(d)) if d.join(layout::FEATURES_BIN).exists() => d.join(layout::FEATURES_BIN),
            (None, Some(d)) => d.join(layout::FEATURES),
            (None, None) => bail!("--features is required without --data"),
        };
        let labels = self
            .labels
            .clone()
            .or_else(|| dir.map(|d| d.join(layout::LABELS)).filter(|p| p.exists()));
        Dataset::load_files(&edges, &ids, &features, labels.as_deref())
            .with_context(|| format!("loading dataset from {}", edges.display()))
    }
}

impl ModelKind {
    pub fn config(self, input_dim: usize) -> ModelConfig {
        match self {
            ModelKind::Fc => ModelConfig::fc(input_dim),
            ModelKind::Sage => ModelConfig::sage(input_dim, false),
            ModelKind::SageBn => ModelConfig::sage(input_dim, true),
            ModelKind::Gatsy => ModelConfig::gatsy(input_dim),
        }
    }
}

impl HyperArgs {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let base = if self.supervised {
            TrainConfig::supervised()
        } else {
            TrainConfig::unsupervised()
        };
        TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            epochs: self.epochs.unwrap_or(base.epochs),
            margin: self.margin.unwrap_or(base.margin),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            fanouts: self.fanouts.clone().unwrap_or(base.fanouts.clone()),
            seed,
            negatives: match self.negatives {
                None | Some(NegativesKind::InverseDensity) => NegativeWeighting::default(),
                Some(NegativesKind::Clipped) => NegativeWeighting::Clipped { clip: self.clip },
            },
            validate: !self.no_validate,
            eval_k: self.eval_k.unwrap_or(base.eval_k),
            ..base
        }
    }

    pub fn model_config(&self, kind: ModelKind, dataset: &Dataset) -> Result<ModelConfig> {
        let mut cfg = kind.config(dataset.features.dim());
        if let Some(h) = self.hidden_dim {
            cfg.hidden_dim = h;
        }
        if self.supervised {
            let labels = dataset.labels.as_ref().context("--supervised needs genre labels")?;
            cfg = cfg.with_genre_head(labels.vocabulary.len());
        }
        Ok(cfg)
    }
}

fn with_random_features(dataset: Dataset, seed: u64) -> Result<Dataset> {
    let feats = random_features(dataset.graph.node_count(), dataset.features.dim(), seed);
    Ok(dataset.with_features(feats)?)
}

/// Parameters of a checkpoint and the dataset as the model saw it during
/// training (generated features are regenerated from their seed).
pub fn load_model(ckpt: &Path, data: &DataArgs) -> Result<(Vec<u8>, ModelParams, CheckpointMeta, Dataset)> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let (params, meta) = decode_checkpoint(&bytes)?;
    let mut dataset = data.load()?;
    if meta.feature_kind == Some(FeatureKind::Random) {
        let seed = meta.feature_seed.context("checkpoint trained on random features lacks their seed")?;
        dataset = with_random_features(dataset, seed)?;
    }
    if params.config.input_dim != dataset.features.dim() {
        bail!(
            "checkpoint expects {} features, dataset has {}",
            params.config.input_dim,
            dataset.features.dim()
        );
    }
    Ok((bytes, params, meta, dataset))
}

pub fn label(args: &LabelArgs) -> Result<()> {
    let (graph, _) = load_graph(&args.edges, &args.ids)?;
    let provider: Box<dyn TextEmbedder> = match args.provider.as_str() {
        "stub" => Box::new(HashEmbedder::default()),
        p => match p.strip_prefix("file:") {
            Some(path) => Box::new(VectorFileEmbedder::load(Path::new(path))?),
            None => bail!("unknown provider `{p}`; use `stub` or `file:PATH`"),
        },
    };
    let mut fetch = FetchConfig::new(&args.cache);
    fetch.offline = args.offline;
    fetch.min_interval = Duration::from_millis(args.min_interval_ms);
    if let Some(url) = &args.base_url {
        fetch.base_url = url.clone();
    }
    let out = label_artists(&graph, fetch, provider.as_ref())?;
    out.labels.save(&args.out, &out.graph)?;
    let count = |r| out.report.resolution.iter().filter(|x| **x == r).count();
    use gatsy::genre::Resolution::*;
    println!(
        "labeled {} artists (votes {}, text {}, neighbors {} over {} rounds); pruned {} without connections",
        out.graph.node_count(),
        count(Votes),
        count(Text),
        count(Neighbors),
        out.report.neighbor_rounds,
        out.report.pruned.len()
    );
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        blocks: args.blocks,
        nodes_per_block: args.nodes_per_block,
        p_in: args.p_in,
        p_out: args.p_out,
        feature_dim: args.feature_dim,
        noise: args.noise,
        seed: args.seed,
    })?;
    ds.save_dir(&args.out)?;
    println!(
        "wrote {} artists and {} connections to {}",
        ds.graph.node_count(),
        ds.graph.edge_count(),
        args.out.display()
    );
    Ok(())
}

pub fn stats(args: &GraphArgs) -> Result<()> {
    let s = compute_stats(&args.load()?)?;
    println!("artists                      {}", s.nodes);
    println!("connections (undirected)     {}", s.total_connections);
    println!("connections (directed)       {}", s.directed_connections);
    println!(
        "avg connections per artist   {:.2} (directed / n), {:.2} (undirected / n)",
        s.avg_connections_per_artist,
        s.total_connections as f64 / s.nodes as f64
    );
    println!("degree quartiles             {} / {} / {}", s.q1, s.q2, s.q3);
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut dataset = args.data.load()?;
    if args.random_features {
        dataset = with_random_features(dataset, args.feature_seed)?;
    }
    let model = args.hyper.model_config(args.model, &dataset)?;
    let cfg = args.hyper.train_config(args.seed);
    let split = split_dataset(dataset.graph.node_count(), args.split_seed)?;
    log::info!("training {} ({} parameters)", model.label(), gatsy::model::param_breakdown(&model)?.total);
    let out = train(&dataset, &model, &cfg, &split)?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for entry in &out.log {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}{}",
            entry.epoch,
            entry.lr,
            entry.mean_loss,
            entry.val_ndcg.map(|v| format!("  val nDCG {v:.4}")).unwrap_or_default()
        );
    }

    let meta = CheckpointMeta {
        train_seed: args.seed,
        split_seed: args.split_seed,
        feature_kind: Some(dataset.features.kind),
        feature_seed: args.random_features.then_some(args.feature_seed),
        epochs: out.log.len(),
        classes: match (&dataset.labels, model.genre_head) {
            (Some(l), true) => l.vocabulary.clone(),
            _ => Vec::new(),
        },
    };
    save_checkpoint(&args.out, &out.params, &meta)?;
    match out.status {
        TrainStatus::Completed => {
            println!("saved {}", args.out.display());
            Ok(())
        }
        TrainStatus::Diverged { epoch, reason } => {
            bail!(
                "training diverged in epoch {epoch} ({reason}); last finite parameters saved to {}",
                args.out.display()
            )
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let (_, params, meta, dataset) = load_model(&args.ckpt, &args.data)?;
    let split = split_dataset(dataset.graph.node_count(), args.split_seed.unwrap_or(meta.split_seed))?;
    let score = evaluate_model(&params, &dataset, &split, HeldOut::Test, args.k)?;
    let report = EvalReport::from_seeds(
        params.config.label(),
        args.k,
        count_params(&params),
        vec![SeedResult {
            seed: meta.train_seed,
            ndcg: Some(score.ranking.mean),
            f1: score.f1.map(|f| f.macro_f1),
            failure: None,
        }],
    );
    println!(
        "{}: test nDCG@{} {:.4} over {} artists ({} without reachable neighbors skipped)",
        report.model,
        args.k,
        score.ranking.mean,
        score.ranking.per_artist.len(),
        score.ranking.skipped
    );
    if let Some(f1) = report.f1_mean {
        println!("genre macro-f1 {f1:.4}");
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn compare(args: &CompareArgs) -> Result<Vec<EvalReport>> {
    let mut dataset = args.data.load()?;
    if args.random_features {
        dataset = with_random_features(dataset, args.feature_seed)?;
    }
    let split = split_dataset(dataset.graph.node_count(), args.split_seed)?;
    let candidates = args
        .models
        .iter()
        .map(|&kind| {
            Ok(Candidate {
                model: args.hyper.model_config(kind, &dataset)?,
                train: args.hyper.train_config(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = compare_models(&candidates, &dataset, &split, args.seeds, args.k)?;
    println!("{:<10} {:>12} {:>18} {:>8}", "model", "parameters", "nDCG", "failed");
    for r in &reports {
        let failed = r.per_seed.iter().filter(|s| s.failure.is_some()).count();
        println!(
            "{:<10} {:>12} {:>9.4} ± {:.4} {:>8}",
            r.model, r.parameters, r.ndcg_mean, r.ndcg_std, failed
        );
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(reports)
}

fn print_recommendation(rec: &Recommendation, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(rec)?);
        return Ok(());
    }
    println!("nearest to {} ({})", rec.query_name, rec.query_id);
    for (rank, item) in rec.items.iter().enumerate() {
        println!(
            "{:>3}. {:.6}  {}  ({}){}",
            rank + 1,
            item.distance,
            item.name,
            item.id,
            item.genre.as_deref().map(|g| format!("  [{g}]")).unwrap_or_default()
        );
    }
    Ok(())
}

pub fn recommend(args: &RecommendArgs) -> Result<Recommendation> {
    let (bytes, _, _, dataset) = load_model(&args.ckpt, &args.data)?;
    let store = EmbeddingStore::build(&bytes, &dataset)?;
    let rec = store.recommend(&args.query, args.k)?;
    print_recommendation(&rec, args.json)?;
    Ok(rec)
}

pub fn inject(args: &InjectArgs) -> Result<Recommendation> {
    let (_, params, _, dataset) = load_model(&args.ckpt, &args.data)?;
    let spec = FictitiousArtistSpec {
        name: args.name.clone(),
        members: args.members.clone(),
        features: args.feature_values.clone(),
    };
    let (rec, _) = recommend_fictitious(&params, &dataset, &spec, args.k)?;
    print_recommendation(&rec, args.json)?;
    Ok(rec)
}

pub fn serve(args: &ServeArgs) -> Result<()> {
    let (bytes, params, _, dataset) = load_model(&args.ckpt, &args.data)?;
    let state = crate::service::AppState::new(&bytes, params, dataset)?;
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.block_on(crate::service::serve(state, args.bind))
}
