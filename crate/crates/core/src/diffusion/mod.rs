//! Toy pixel-space inpainting diffusion model: schedule, dataset, U-Net,
//! training, and the feature network behind the Fréchet metric.

pub mod dataset;
pub mod features;
pub mod schedule;
pub mod train;
pub mod unet;

pub use dataset::{gen_dataset, InpaintTask, ShapeScene};
pub use features::{train_feature_net, FeatureNet, FEATURE_DIM};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleSpec};
pub use train::{train, TrainConfig};
pub use unet::{
    masked_source, unet_forward, AttnKind, Checkpoint, Params, StepAttn, UNetSpec, ATTN_LAYERS,
};
