pub mod attention;
pub mod checkpoint;
pub mod cmat;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod measurement;
pub mod model;
pub mod synth;
pub mod trainer;

pub use attention::{AttentionBundle, AttentionMode};
pub use cmat::{cmul, csoftmax, ctanh, softmax_signed, CMat, Channel};
pub use config::{EmbeddingMode, OptimizerKind, TrainConfig};
pub use data::CorpusExample;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, Param, ParamId, ParamKind, ParamStore};
pub use model::QsanModel;
pub use trainer::{evaluate, fit, Metrics};
