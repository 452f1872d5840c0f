pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod quantize;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use data::{Pair, SplitSpec, Splits};
pub use error::{RazorError, Result};
pub use losses::{Ablation, BaselineSims, LossWeights, MismatchVariant};
pub use model::{Checkpoint, CheckpointMeta, ComponentId, ComponentKind, ModelConfig, ParamMap, Tower};
pub use tensor::Tensor;
