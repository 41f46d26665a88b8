//! Data ingestion, optimisation and inference around [`crate::FaceParser`].

pub mod dataset;
pub mod optim;
pub mod schedule;
pub mod train;
pub mod tta;

pub use dataset::{load_dataset, prediction_path, DatasetManifest};
pub use schedule::{lr_at, lr_curve, TrainConfig};
pub use train::{fit, train, LossRecord, TrainOutcome};
pub use tta::{predict_tta, TTAConfig};
