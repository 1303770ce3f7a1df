//! Trainable stand-in for an opaque camera pipeline: an encoder–decoder
//! network with residual blocks and skip connections, trained on RAW/RGB
//! pairs and differentiated by hand for use as a gradient oracle.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, CheckpointManifest};
pub use loss::{
    ssim, ssim_arrays, total_loss, total_loss_grad, LossBreakdown, PerceptualExtractor,
    ProxyLossConfig, SsimStats,
};
pub use model::{ProxyCache, ProxyModel, MIN_PROXY_SIZE};
pub use train::{evaluate_pairs, split_pairs, train_proxy, TrainReport, TrainSchedule};
