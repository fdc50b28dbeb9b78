//! StanceMoE: a context-gated mixture of six pooling experts over token
//! representations, for three-way stance classification.
//!
//! Every forward and backward pass is written out by hand in `f64`.

pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod head;
pub mod model;
pub mod numcore;
pub mod synthetic;
pub mod textpipe;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use evaluation::{confusion, macro_metrics, ConfusionMatrix, MetricsReport};
pub use experts::{ExpertKind, ExpertMask};
pub use head::HeadVariant;
pub use model::{EncoderMode, ModelInput, ModelSpec, StanceModel};
pub use textpipe::{Label, Vocab};
pub use training::{EnsembleModel, TrainConfig};
