pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod genre;
pub mod graph;
pub mod model;
pub mod recommend;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{Dataset, FeatureKind, FeatureMatrix};
pub use error::{Error, Result};
pub use genre::GenreLabelSet;
pub use graph::{ArtistGraph, DatasetSplit, GraphStats};
pub use model::{build_model, count_params, GcKind, Mode, ModelConfig, ModelParams};
pub use recommend::{EmbeddingStore, FictitiousArtistSpec, Recommendation};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainOutput};
pub use eval::{evaluate_model, ndcg_at_k, EvalReport, HeldOut};
