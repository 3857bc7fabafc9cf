//! Residual shrinkage network with hand-written gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod prs;
pub mod train;

pub use checkpoint::{load_model, save_model};
pub use layers::{ConvGeom, Mode};
pub use model::{prediction_from_probs, ForwardCache, PrsNet, PrsNetConfig};
pub use params::{
    adam_step, AdamConfig, AdamState, Grads, LayerKind, LayerSpec, LrSchedule, ParamId, ParamStore,
};
pub use prs::PrsBlock;
pub use train::{synthetic_dataset, DatasetSpec, EpochStats, Sample, TrainConfig, Trainer};
