use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dualflow::Ablation;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensorad::Checkpoint;

use super::config::RunConfig;
use super::eval::{evaluate, sample_records, MetricsReport};
use super::train::{StepLog, Trainer};

/// One variant trained from the shared video checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub ablation: Ablation,
    pub stage1: Vec<StepLog>,
    pub stage2: Vec<StepLog>,
    pub losses_finite: bool,
    pub samples_valid: bool,
    pub report: MetricsReport,
}

/// Runs stage 1 and stage 2 for `steps` steps each for every variant, then
/// samples and scores `records` held-out records.
pub fn run_ablations<T: Scalar>(
    config: &RunConfig,
    train: &Dataset,
    heldout: &Dataset,
    video_ckpt: &Checkpoint,
    steps: u64,
    records: usize,
) -> Result<Vec<AblationOutcome>> {
    let mut out = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let mut cfg = config.clone();
        cfg.ablation = ablation;
        cfg.stage1.steps = steps;
        cfg.stage2.steps = steps;
        cfg.eval.records = records;
        cfg.validate()?;

        let mut s1 = Trainer::<T>::stage1(&cfg, video_ckpt)?;
        s1.run(train)?;
        let mut s2 = Trainer::<T>::stage2(&cfg, &s1.checkpoint())?;
        s2.run(train)?;

        let finite = |log: &[StepLog]| {
            log.iter().all(|l| {
                [Some(l.total), l.video, l.motion, l.smpl]
                    .into_iter()
                    .flatten()
                    .all(f64::is_finite)
            })
        };
        let indices: Vec<usize> = (0..records.min(heldout.records.len())).collect();
        let sampled = sample_records(&mut s2.model, &cfg, heldout, &indices, cfg.seed)?;
        let report = evaluate(&mut s2.model, &cfg, heldout, cfg.seed)?;
        out.push(AblationOutcome {
            ablation,
            losses_finite: finite(&s1.log) && finite(&s2.log),
            samples_valid: sampled.is_valid(cfg.model.frames, cfg.model.joints),
            stage1: s1.log,
            stage2: s2.log,
            report,
        });
    }
    Ok(out)
}
