//! Base building, growing and the sequential evaluation protocol.

mod build;
mod log;
mod protocol;
mod train;
mod video;

pub use build::{
    evaluate_with_tree, grow, growth_csv, pretrain_root, segment_video, select_node, sequential_build, BuildReport,
    GrowOutcome, GrowthRow, LifelongConfig, Segmentation, VideoHook,
};
pub use log::{Action, LogEvent, RunLog};
pub use protocol::{run_protocol_with, run_sequential_protocol, ProtocolMode, ProtocolOutput};
pub use train::{
    estimate_importance, evaluate_video, frame_score, merge_importance, random_crop, reference_score, train_all,
    train_suffix, video_samples, AccumulateRule, FisherConfig, TrainConfig, TrainStats,
};
pub use video::{AccessGuard, Video};
