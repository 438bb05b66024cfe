//! Multi-exit convolutional networks: a small autograd engine, layer
//! kernels, backbone builders with exit anchors, joint-loss training, and
//! budgeted inference over exit costs.

pub mod autograd;
pub mod backbones;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elastic;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Slot, Tape};
pub use backbones::BackboneConfig;
pub use budget::{cost_audit, select_exit, Budget, CostTable, Metric};
pub use elastic::{elasticize, prune_exits, Backbone, ElasticNetwork, ExitHead, HeadConfig, Mode};
pub use error::{Error, Result};
pub use graph::{FeatureShape, NetworkGraph};
pub use params::{Param, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use training::{LossConfig, MetricsLog, TrainConfig};
