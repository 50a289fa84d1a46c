//! Network definitions: an FC block followed by graph-convolution layers
//! (graph attention or mean-aggregating GraphSAGE), with optional batch
//! norm and an optional two-layer genre classifier on top of the embedding.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ArtistGraph, Block, SelfEdges};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcKind {
    /// No message passing.
    None,
    /// GraphSAGE, mean aggregator: `W·[h_i ∥ mean_j h_j] + b`.
    Sage,
    /// Single-head graph attention.
    Gat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub fc_layers: usize,
    pub gc_layers: usize,
    pub gc_kind: GcKind,
    pub attention_heads: usize,
    pub batch_norm: bool,
    /// Two FC layers mapping the embedding to `num_classes` scores.
    pub genre_head: bool,
    pub num_classes: usize,
    /// Learnable bias added after attention aggregation.
    pub gat_bias: bool,
    pub attention_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Nodes without neighbors attend to themselves instead of failing.
    pub self_include: bool,
    /// Each node is part of its own attention neighborhood.
    pub attention_self_loop: bool,
}

impl ModelConfig {
    fn base(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 256,
            fc_layers: 3,
            gc_layers: 2,
            gc_kind: GcKind::Gat,
            attention_heads: 1,
            batch_norm: true,
            genre_head: false,
            num_classes: 25,
            gat_bias: true,
            attention_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            self_include: true,
            attention_self_loop: true,
        }
    }

    /// 3 FC + 2 single-head GAT layers, batch norm after every
    /// transformation except the last.
    pub fn gatsy(input_dim: usize) -> Self {
        Self::base(input_dim)
    }

    /// Three FC layers, no graph convolution, no batch norm.
    pub fn fc(input_dim: usize) -> Self {
        ModelConfig {
            gc_layers: 0,
            gc_kind: GcKind::None,
            batch_norm: false,
            ..Self::base(input_dim)
        }
    }

    /// Three mean-aggregating GraphSAGE layers directly on the input.
    pub fn sage(input_dim: usize, batch_norm: bool) -> Self {
        ModelConfig {
            fc_layers: 0,
            gc_layers: 3,
            gc_kind: GcKind::Sage,
            batch_norm,
            ..Self::base(input_dim)
        }
    }

    pub fn with_genre_head(mut self, num_classes: usize) -> Self {
        self.genre_head = true;
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("model config: {msg}")));
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.fc_layers + self.gc_layers == 0 {
            return bad("need at least one layer");
        }
        if (self.gc_kind == GcKind::None) != (self.gc_layers == 0) {
            return bad("gc_kind none iff gc_layers = 0");
        }
        if self.gc_kind == GcKind::Gat && self.attention_heads != 1 {
            return bad("graph attention uses exactly one head");
        }
        if self.genre_head && self.num_classes < 2 {
            return bad("genre head needs at least two classes");
        }
        if !(self.attention_slope > 0.0 && self.attention_slope < 1.0) {
            return bad("attention slope must lie in (0, 1)");
        }
        Ok(())
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        let mut s = match self.gc_kind {
            GcKind::None => "fc".to_string(),
            GcKind::Sage if self.batch_norm => "sage+bn".to_string(),
            GcKind::Sage => "sage".to_string(),
            GcKind::Gat => "gatsy".to_string(),
        };
        if self.genre_head {
            s.push_str("+fc");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Transform {
    Linear { w: usize, b: usize },
    Gat { w: usize, att: usize, bias: Option<usize> },
    Sage { w: usize, b: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Stage {
    name: String,
    transform: Transform,
    bn: Option<BnSlots>,
    activation: bool,
}

/// Exponential moving averages kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All trainable tensors of a network plus its batch-norm running
/// statistics. The layer layout is derived from `config`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    running: Vec<RunningStats>,
    stages: Vec<Stage>,
    head: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fans: Vec<Option<(usize, usize)>>,
    stages: Vec<Stage>,
    head: Vec<Stage>,
    bn_widths: Vec<usize>,
}

impl Layout {
    fn slot(&mut self, name: String, shape: Vec<usize>, fan: Option<(usize, usize)>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fans.push(fan);
        self.names.len() - 1
    }

    fn bn(&mut self, prefix: &str, width: usize) -> BnSlots {
        let gamma = self.slot(format!("{prefix}.bn.gamma"), vec![width], None);
        let beta = self.slot(format!("{prefix}.bn.beta"), vec![width], None);
        self.bn_widths.push(width);
        BnSlots {
            gamma,
            beta,
            running: self.bn_widths.len() - 1,
        }
    }

    fn new(cfg: &ModelConfig) -> Self {
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            fans: Vec::new(),
            stages: Vec::new(),
            head: Vec::new(),
            bn_widths: Vec::new(),
        };
        let h = cfg.hidden_dim;
        let total = cfg.fc_layers + cfg.gc_layers;
        let mut width = cfg.input_dim;
        for k in 0..total {
            let last = k + 1 == total;
            let (prefix, transform) = if k < cfg.fc_layers {
                let p = format!("fc{k}");
                let w = l.slot(format!("{p}.weight"), vec![width, h], Some((width, h)));
                let b = l.slot(format!("{p}.bias"), vec![h], None);
                (p, Transform::Linear { w, b })
            } else {
                let g = k - cfg.fc_layers;
                match cfg.gc_kind {
                    GcKind::Gat => {
                        let p = format!("gat{g}");
                        let w = l.slot(format!("{p}.weight"), vec![width, h], Some((width, h)));
                        let att = l.slot(format!("{p}.attention"), vec![2 * h, 1], Some((2 * h, 1)));
                        let bias = cfg.gat_bias.then(|| l.slot(format!("{p}.bias"), vec![h], None));
                        (p, Transform::Gat { w, att, bias })
                    }
                    GcKind::Sage => {
                        let p = format!("sage{g}");
                        let w = l.slot(format!("{p}.weight"), vec![2 * width, h], Some((2 * width, h)));
                        let b = l.slot(format!("{p}.bias"), vec![h], None);
                        (p, Transform::Sage { w, b })
                    }
                    GcKind::None => unreachable!("validated"),
                }
            };
            let bn = (cfg.batch_norm && !last).then(|| l.bn(&prefix, h));
            l.stages.push(Stage {
                name: prefix,
                transform,
                bn,
                activation: !last,
            });
            width = h;
        }
        if cfg.genre_head {
            let w = l.slot("head0.weight".into(), vec![h, h], Some((h, h)));
            let b = l.slot("head0.bias".into(), vec![h], None);
            l.head.push(Stage {
                name: "head0".into(),
                transform: Transform::Linear { w, b },
                bn: None,
                activation: true,
            });
            let c = cfg.num_classes;
            let w = l.slot("head1.weight".into(), vec![h, c], Some((h, c)));
            let b = l.slot("head1.bias".into(), vec![c], None);
            l.head.push(Stage {
                name: "head1".into(),
                transform: Transform::Linear { w, b },
                bn: None,
                activation: false,
            });
        }
        l
    }
}

/// Glorot-uniform weights and attention vectors, zero biases and shifts,
/// unit scales. Deterministic per seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .shapes
        .iter()
        .zip(&layout.fans)
        .zip(&layout.names)
        .map(|((shape, fan), name)| match fan {
            Some((fan_in, fan_out)) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, bound, &mut rng)
            }
            None if name.ends_with(".gamma") => Tensor::ones(shape),
            None => Tensor::zeros(shape),
        })
        .collect();
    let running = layout
        .bn_widths
        .iter()
        .map(|&w| RunningStats {
            mean: vec![0.0; w],
            var: vec![1.0; w],
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        names: layout.names,
        tensors,
        running,
        stages: layout.stages,
        head: layout.head,
    })
}

/// Output of a forward pass recorded on a tape.
pub struct Forward {
    pub embedding: Var,
    pub logits: Option<Var>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl ModelParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Which blocks this model's message passing expects.
    pub fn self_edges(&self) -> SelfEdges {
        let c = &self.config;
        if c.gc_kind == GcKind::Gat && c.attention_self_loop {
            SelfEdges::Always
        } else if c.self_include {
            SelfEdges::IfIsolated
        } else {
            SelfEdges::Never
        }
    }

    /// Number of message-passing layers, i.e. how many blocks a forward
    /// pass consumes.
    pub fn gc_layers(&self) -> usize {
        self.config.gc_layers
    }

    /// Registers every tensor on `tape` as a parameter leaf (slot = index).
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t.clone(), i))
            .collect()
    }

    /// Records the forward pass. `inputs` holds one feature row per source
    /// node of `blocks[0]` (or per node when there are no GC layers);
    /// `blocks` holds one block per GC layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        inputs: Var,
        blocks: &[Block],
        mode: Mode,
    ) -> Result<Forward> {
        if blocks.len() != self.config.gc_layers {
            return Err(Error::invalid(format!(
                "{} blocks for {} GC layers",
                blocks.len(),
                self.config.gc_layers
            )));
        }
        let in_dim = tape.value(inputs).cols();
        if in_dim != self.config.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: tape.value(inputs).shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        if let Some(b) = blocks.first() {
            if tape.value(inputs).rows() != b.src_nodes.len() {
                return Err(Error::invalid(format!(
                    "{} input rows for {} source nodes",
                    tape.value(inputs).rows(),
                    b.src_nodes.len()
                )));
            }
        }
        let mut batch_stats = Vec::new();
        let mut h = inputs;
        let mut gc = 0;
        for stage in &self.stages {
            h = match stage.transform {
                Transform::Linear { w, b } => {
                    let y = tape.matmul(h, params[w])?;
                    tape.add_row(y, params[b])?
                }
                Transform::Gat { w, att, bias } => {
                    let y = self.gat(tape, params, h, &blocks[gc], w, att, bias)?;
                    gc += 1;
                    y
                }
                Transform::Sage { w, b } => {
                    let y = self.sage(tape, params, h, &blocks[gc], w, b)?;
                    gc += 1;
                    y
                }
            };
            h = self.post(tape, params, h, stage, mode, &mut batch_stats)?;
        }
        let embedding = h;
        let logits = if self.head.is_empty() {
            None
        } else {
            let mut z = embedding;
            for stage in &self.head {
                let Transform::Linear { w, b } = stage.transform else {
                    unreachable!("head is linear")
                };
                let y = tape.matmul(z, params[w])?;
                z = tape.add_row(y, params[b])?;
                z = self.post(tape, params, z, stage, mode, &mut batch_stats)?;
            }
            Some(z)
        };
        Ok(Forward {
            embedding,
            logits,
            batch_stats,
        })
    }

    fn post(
        &self,
        tape: &mut Tape,
        params: &[Var],
        mut h: Var,
        stage: &Stage,
        mode: Mode,
        batch_stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        if let Some(bn) = stage.bn {
            let eps = self.config.bn_eps;
            h = match mode {
                Mode::Train => {
                    let (y, stats) = tape.batch_norm_train(h, params[bn.gamma], params[bn.beta], eps)?;
                    batch_stats.push((bn.running, stats));
                    y
                }
                Mode::Eval => {
                    let r = &self.running[bn.running];
                    tape.batch_norm_eval(h, params[bn.gamma], params[bn.beta], &r.mean, &r.var, eps)?
                }
            };
        }
        if stage.activation {
            h = tape.elu(h)?;
        }
        Ok(h)
    }

    /// Projected features `W·h` and per-edge attention coefficients.
    fn gat_alpha(&self, tape: &mut Tape, params: &[Var], h: Var, block: &Block, w: usize, att: usize) -> Result<(Var, Var)> {
        let f_out = self.config.hidden_dim;
        let wh = tape.matmul(h, params[w])?;
        let a_dst = tape.slice_rows(params[att], 0, f_out)?;
        let a_src = tape.slice_rows(params[att], f_out, 2 * f_out)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let s_src = tape.matmul(wh, a_src)?;
        let s_dst = tape.gather_rows(s_dst, Arc::new(block.edge_dst()))?;
        let s_src = tape.gather_rows(s_src, block.edge_src.clone())?;
        let scores = tape.add(s_dst, s_src)?;
        let scores = tape.leaky_relu(scores, self.config.attention_slope)?;
        let alpha = tape.segment_softmax(scores, block.offsets.clone())?;
        Ok((wh, alpha))
    }

    #[allow(clippy::too_many_arguments)]
    fn gat(
        &self,
        tape: &mut Tape,
        params: &[Var],
        h: Var,
        block: &Block,
        w: usize,
        att: usize,
        bias: Option<usize>,
    ) -> Result<Var> {
        let (wh, alpha) = self.gat_alpha(tape, params, h, block, w, att)?;
        let out = tape.segment_weighted_sum(alpha, wh, block.edge_src.clone(), block.offsets.clone())?;
        match bias {
            Some(b) => tape.add_row(out, params[b]),
            None => Ok(out),
        }
    }

    fn sage(&self, tape: &mut Tape, params: &[Var], h: Var, block: &Block, w: usize, b: usize) -> Result<Var> {
        let mut weights = Vec::with_capacity(block.edge_count());
        for i in 0..block.dst_count {
            let deg = block.offsets[i + 1] - block.offsets[i];
            weights.extend(std::iter::repeat_n(1.0 / deg as f64, deg));
        }
        let weights = tape.constant(Tensor::new(vec![weights.len(), 1], weights)?);
        let mean = tape.segment_weighted_sum(weights, h, block.edge_src.clone(), block.offsets.clone())?;
        let own = tape.slice_rows(h, 0, block.dst_count)?;
        let cat = tape.concat_cols(own, mean)?;
        let y = tape.matmul(cat, params[w])?;
        tape.add_row(y, params[b])
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, s) in stats {
            let r = &mut self.running[*slot];
            for (rm, bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (1.0 - m) * *rm + m * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&s.var) {
                *rv = (1.0 - m) * *rv + m * bv;
            }
        }
    }

    /// Attention coefficients of GAT layer `layer` in eval mode over the
    /// full graph, one value per edge in the block's edge order.
    pub fn attention(&self, features: &Tensor, graph: &ArtistGraph, layer: usize) -> Result<(Block, Vec<f64>)> {
        if self.config.gc_kind != GcKind::Gat || layer >= self.config.gc_layers {
            return Err(Error::invalid(format!("no attention layer {layer}")));
        }
        let block = Block::full(graph, self.self_edges());
        let blocks = vec![block.clone(); self.config.gc_layers];
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let x = tape.constant(features.clone());
        let mut h = x;
        let mut stats = Vec::new();
        let mut gc = 0;
        for stage in &self.stages {
            if let Transform::Gat { w, att, .. } = stage.transform {
                if gc == layer {
                    let (_, alpha) = self.gat_alpha(&mut tape, &params, h, &block, w, att)?;
                    return Ok((block, tape.value(alpha).data().to_vec()));
                }
            }
            h = match stage.transform {
                Transform::Linear { w, b } => {
                    let y = tape.matmul(h, params[w])?;
                    tape.add_row(y, params[b])?
                }
                Transform::Gat { w, att, bias } => {
                    let y = self.gat(&mut tape, &params, h, &blocks[gc], w, att, bias)?;
                    gc += 1;
                    y
                }
                Transform::Sage { .. } => unreachable!("gat model"),
            };
            h = self.post(&mut tape, &params, h, stage, Mode::Eval, &mut stats)?;
        }
        unreachable!("layer index checked above")
    }

    /// Eval-mode embedding of every node over the full graph.
    pub fn embed(&self, features: &Tensor, graph: &ArtistGraph) -> Result<Tensor> {
        Ok(self.infer(features, graph)?.0)
    }

    /// Eval-mode embedding and class scores over the full graph.
    pub fn infer(&self, features: &Tensor, graph: &ArtistGraph) -> Result<(Tensor, Option<Tensor>)> {
        if features.rows() != graph.node_count() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.node_count()
            )));
        }
        let blocks = vec![Block::full(graph, self.self_edges()); self.config.gc_layers];
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &params, x, &blocks, Mode::Eval)?;
        let z = tape.value(out.embedding).clone();
        let logits = out.logits.map(|l| tape.value(l).clone());
        Ok((z, logits))
    }
}

/// Eval-mode embedding `Z` over the full graph.
pub fn forward_embed(x: &Tensor, graph: &ArtistGraph, params: &ModelParams) -> Result<Tensor> {
    params.embed(x, graph)
}

/// Eval-mode embedding and `n × classes` genre scores.
pub fn forward_supervised(x: &Tensor, graph: &ArtistGraph, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    if !params.config.genre_head {
        return Err(Error::invalid("model has no genre head"));
    }
    let (z, logits) = params.infer(x, graph)?;
    Ok((z, logits.expect("genre head present")))
}

/// Trainable parameter count; running statistics are not counted.
pub fn count_params(params: &ModelParams) -> usize {
    params.tensors.iter().map(Tensor::len).sum()
}

/// Per-layer parameter accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub weights: usize,
    pub bias: usize,
    pub attention: usize,
    pub batch_norm: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.bias + self.attention + self.batch_norm
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamBreakdown {
    pub model: String,
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

pub fn param_breakdown(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let l = Layout::new(config);
    let size = |slot: usize| l.shapes[slot].iter().product::<usize>();
    let mut layers = Vec::new();
    for stage in l.stages.iter().chain(&l.head) {
        let mut c = LayerCount {
            layer: stage.name.clone(),
            weights: 0,
            bias: 0,
            attention: 0,
            batch_norm: 0,
        };
        match stage.transform {
            Transform::Linear { w, b } | Transform::Sage { w, b } => {
                c.weights = size(w);
                c.bias = size(b);
            }
            Transform::Gat { w, att, bias } => {
                c.weights = size(w);
                c.attention = size(att);
                c.bias = bias.map_or(0, size);
            }
        }
        if let Some(bn) = stage.bn {
            c.batch_norm = size(bn.gamma) + size(bn.beta);
        }
        layers.push(c);
    }
    let total = layers.iter().map(LayerCount::total).sum();
    Ok(ParamBreakdown {
        model: config.label(),
        layers,
        total,
    })
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.model)?;
        writeln!(
            f,
            "  {:<8} {:>10} {:>8} {:>10} {:>8} {:>10}",
            "layer", "weights", "bias", "attention", "bn", "total"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "  {:<8} {:>10} {:>8} {:>10} {:>8} {:>10}",
                l.layer,
                l.weights,
                l.bias,
                l.attention,
                l.batch_norm,
                l.total()
            )?;
        }
        write!(f, "  {:<8} {:>51}", "total", self.total)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"GTSYCKPT";
const CKPT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// What produced a checkpoint, stored next to the config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_seed: u64,
    pub split_seed: u64,
    pub feature_kind: Option<crate::data::FeatureKind>,
    /// Seed of the generated features when `feature_kind` is random.
    #[serde(default)]
    pub feature_seed: Option<u64>,
    pub epochs: usize,
    /// Genre vocabulary the class head was trained against.
    pub classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// Binary checkpoint: magic, version, JSON header, then named
/// little-endian tensors (trainable tensors followed by running stats).
pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: params.config.clone(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);

    let mut named: Vec<(String, Vec<usize>, &[f64])> = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data()))
        .collect();
    for (i, r) in params.running.iter().enumerate() {
        named.push((format!("running{i}.mean"), vec![r.mean.len()], &r.mean));
        named.push((format!("running{i}.var"), vec![r.var.len()], &r.var));
    }
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, shape, data) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
    let mut params = build_model(&header.config, 0)?;
    let count = r.u32()? as usize;
    let mut seen = 0;
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(rest) = name.strip_prefix("running") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {name}")))?;
            let idx: usize = idx.parse().map_err(|_| Error::Checkpoint(format!("bad tensor name {name}")))?;
            let stats = params
                .running
                .get_mut(idx)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected {name}")))?;
            let target = match field {
                "mean" => &mut stats.mean,
                "var" => &mut stats.var,
                _ => return Err(Error::Checkpoint(format!("bad tensor name {name}"))),
            };
            if target.len() != data.len() {
                return Err(Error::Checkpoint(format!("{name}: wrong length")));
            }
            *target = data;
        } else {
            let t = params
                .tensor_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", t.shape())));
            }
            *t = Tensor::new(shape, data)?;
            seen += 1;
        }
    }
    if seen != params.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} of {} tensors present",
            seen,
            params.tensors.len()
        )));
    }
    Ok((params, header.meta))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
