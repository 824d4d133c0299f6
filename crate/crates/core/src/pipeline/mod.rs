//! Prior training, two-stage inversion, reenactment and evaluation.
//!
//! Training fits the whole prior on the toy dataset with Adam and a
//! multi-step schedule. Inversion first tunes the identity encoder to find a
//! pivot latent, then fine-tunes decoders and regressors around it.

mod avatar;
mod config;
mod evaluate;
mod invert;
mod objective;
mod optim;
mod select;
mod train;

pub use avatar::{expression_input, load_prior, reenact, save_prior, DrivingFrame, PersonalizedModel};
pub use config::{AdamConfig, InversionConfig, TrainConfig, IDENTITY_SEED, PERCEPTUAL_SEED};
pub use evaluate::{
    evaluate, evaluate_prior, frame_metrics, metrics_csv, render_prior_sample, summarize, summary_csv, write_metrics,
    MetricRow, MetricSummary, METRICS_HEADER,
};
pub use invert::{
    backproject, input_loss, invert, invert_stage1, invert_stage2, load_frames, manifest_from_dataset, read_manifest,
    write_curves, write_manifest, CurvePoint, EarlyStopping, Inversion, InversionFrame, InversionInputs, ManifestEntry,
    Stage1, Stage2, StageReport,
};
pub use objective::{Evaluation, LossTerms, MapTargets, Objective, ViewTarget};
pub use optim::Adam;
pub use select::{fibonacci_counts, neutral_index, select_frames};
pub use train::{ema_series, latest_checkpoint, read_log, train_prior, LogRow, Trainer};
