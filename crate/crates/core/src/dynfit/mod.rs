use thiserror::Error;

pub mod data;
pub mod io;
pub mod network;
pub mod policy;
pub mod quant;
pub mod train;

pub use data::{Dataset, Sample};
pub use io::{Model, MODEL_FORMAT_VERSION};
pub use network::{
    argmax, Activation, ForwardCache, Gradients, Layer, LayerSpec, LoopShape, LossKind, Network, NeuronGroup, Shape,
    SiteMask, Tensor,
};
pub use policy::{sample_mask, DropoutPolicy, MaskSample, PolicyKind};
pub use quant::{optimize_quant_levels, quant_penalty_loss, QuantAssignment};
pub use train::{
    finetune, train, train_step, train_step_with_mask, EnergyContext, FinetuneReport, LayerPlan, StepMetrics,
    TrainConfig, TrainOutcome, TrainState, UpdateTracker,
};

use crate::intermittent::IntermittentError;

#[derive(Debug, Error)]
pub enum DynfitError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Hessian diagonal contains a non-finite value")]
    NonFiniteHessian,
    #[error("gradient contains a non-finite value")]
    NonFiniteGradient,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("exact Shapley values over {neurons} neurons exceed the limit of {max_exact}")]
    TooManyNeuronsForExact { neurons: usize, max_exact: usize },
    #[error("update ratio is undefined before the first iteration")]
    ZeroIterations,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Planning(#[from] IntermittentError),
}
