//! Data to checkpoints to metrics: staged training, evaluation and ablations.

mod ablate;
mod config;
mod data;
mod eval;
mod train;

use sha1::{Digest, Sha1};

pub use ablate::{run_ablations, AblationOutcome};
pub use config::{DataConfig, EvalConfig, RunConfig, SampleSettings, Stage, StageConfig};
pub use data::{
    check_dataset, encoding_for, first_pose, later_poses, motion_pixels, motion_tokens, stack, unstack_row, video_tokens,
};
pub use eval::{
    epoch_losses, evaluate, masked_psnr, mpjpe, part_iou, static_mpjpe, EpochLoss, EvalBatch, EvalModel, MetricsReport,
    RecordMetrics, ReplayOracle, Sampled, Stat,
    sample_records,
};
pub use train::{
    checkpoint_log, checkpoint_stage, model_from_checkpoint, param_bytes, pretrain_video_branch, smoothed_total,
    train_stage1, train_stage2, StepLog, StepPlan, Trainer, CHECKPOINT_KIND,
};

/// Hex SHA-1 of `bytes` framed as a git blob.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Hex SHA-1 over named blob hashes, sorted by name, in the shape of a git tree.
pub fn tree_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut entries: Vec<_> = entries.into_iter().collect();
    entries.sort();
    let mut body = Vec::new();
    for (name, hash) in entries {
        body.extend_from_slice(format!("100644 {name}\0{hash}").as_bytes());
    }
    let mut h = Sha1::new();
    h.update(format!("tree {}\0", body.len()).as_bytes());
    h.update(&body);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
