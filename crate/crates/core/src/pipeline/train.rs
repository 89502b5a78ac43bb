//! The three training stages and their checkpoints.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, Dataset};
use crate::dualflow::{
    flow_loss, make_noisy, total_loss, velocity_target, Ablation, DualModel, ForwardInput, ModelConfig,
    MOTION_PREFIX, VIDEO_PREFIX,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorad::{AdamW, Bindings, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

use super::config::{RunConfig, Stage};
use super::data::{check_dataset, encoding_for, first_pose, later_poses, motion_tokens, stack, video_tokens};

/// Seed streams; each stage draws its per-step randomness from its own stream.
const INIT_STREAM: u64 = 100;
const STEP_STREAM: u64 = 10;

pub const CHECKPOINT_KIND: &str = "dualmotion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub video: Option<f64>,
    pub motion: Option<f64>,
    pub smpl: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    stage: Stage,
    step: u64,
    steps: u64,
    ablation: Ablation,
    dual: bool,
    /// The stage had nothing to train for this variant.
    skipped: bool,
    model: ModelConfig,
    log: Vec<StepLog>,
}

/// A model, its optimizer and the position inside one stage.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub stage: Stage,
    pub model: DualModel<T>,
    pub step: u64,
    pub log: Vec<StepLog>,
    config: RunConfig,
    opt: AdamW<T>,
    trainable: Vec<bool>,
    skipped: bool,
}

fn trainable_in(stage: Stage, ablation: Ablation, name: &str) -> bool {
    match stage {
        Stage::Pretrain => true,
        Stage::Motion => name.starts_with(MOTION_PREFIX),
        Stage::Joint => match ablation {
            Ablation::NoMotion => name.starts_with(VIDEO_PREFIX),
            Ablation::JointLatent => true,
            _ => !name.starts_with(VIDEO_PREFIX),
        },
    }
}

fn init_rng(cfg: &RunConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, stage.index()))
}

fn read_meta(ckpt: &Checkpoint) -> Result<Meta> {
    let meta: Meta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("checkpoint kind `{}`", meta.kind)));
    }
    Ok(meta)
}

fn params_from(ckpt: &Checkpoint) -> Vec<(String, Tensor<f64>)> {
    ckpt.with_prefix("param.")
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<DualModel<T>> {
    let meta = read_meta(ckpt)?;
    // Initial values are overwritten below; only the structure matters.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let video = DualModel::<T>::video_only(meta.model.clone(), &mut rng)?;
    let mut model = if meta.dual {
        DualModel::from_video(meta.model.clone(), meta.ablation, &video.params, &mut rng)?
    } else {
        video
    };
    let entries: Vec<(String, Tensor<T>)> = params_from(ckpt).into_iter().map(|(n, t)| (n, t.cast())).collect();
    model.params.load_from(&entries)?;
    Ok(model)
}

/// Stage, step and completion recorded in a checkpoint.
pub fn checkpoint_stage(ckpt: &Checkpoint) -> Result<(Stage, u64, bool)> {
    let m = read_meta(ckpt)?;
    Ok((m.stage, m.step, m.step == m.steps))
}

/// Per-step logs stored in a checkpoint.
pub fn checkpoint_log(ckpt: &Checkpoint) -> Result<Vec<StepLog>> {
    Ok(read_meta(ckpt)?.log)
}

fn require_stage(ckpt: &Checkpoint, want: Stage, cfg: &RunConfig) -> Result<Meta> {
    let meta = read_meta(ckpt)?;
    if meta.stage != want || meta.step != meta.steps {
        return Err(Error::Precondition(format!(
            "expected a finished {want:?} checkpoint, got {:?} at step {}/{}",
            meta.stage, meta.step, meta.steps
        )));
    }
    if meta.model != cfg.model {
        return Err(Error::Precondition("checkpoint model config differs from the run config".into()));
    }
    if want != Stage::Pretrain && meta.ablation != cfg.ablation {
        return Err(Error::Precondition(format!(
            "checkpoint is for variant `{}`, run config asks for `{}`",
            meta.ablation.name(),
            cfg.ablation.name()
        )));
    }
    Ok(meta)
}

/// Byte image of the parameters whose names start with `prefix`.
pub fn param_bytes<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, name, t) in store.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

impl<T: Scalar> Trainer<T> {
    fn new(config: &RunConfig, stage: Stage, model: DualModel<T>, skipped: bool) -> Self {
        let trainable: Vec<bool> = model
            .params
            .names()
            .iter()
            .map(|n| !skipped && trainable_in(stage, model.ablation, n))
            .collect();
        let opt = AdamW::new(config.stage(stage).optim, model.params.values().iter().map(|t| t.shape()));
        Self {
            stage,
            model,
            step: 0,
            log: Vec::new(),
            config: config.clone(),
            opt,
            trainable,
            skipped,
        }
    }

    /// Fresh single-branch video model.
    pub fn pretrain(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = DualModel::video_only(config.model.clone(), &mut init_rng(config, Stage::Pretrain))?;
        Ok(Self::new(config, Stage::Pretrain, model, false))
    }

    /// Variant built around a finished pretraining checkpoint.
    pub fn stage1(config: &RunConfig, video_ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        require_stage(video_ckpt, Stage::Pretrain, config)?;
        let video = model_from_checkpoint::<T>(video_ckpt)?;
        let model = DualModel::from_video(
            config.model.clone(),
            config.ablation,
            &video.params,
            &mut init_rng(config, Stage::Motion),
        )?;
        let skipped = !config.ablation.has_separate_motion_branch();
        Ok(Self::new(config, Stage::Motion, model, skipped))
    }

    /// Joint training from a finished stage-1 checkpoint.
    pub fn stage2(config: &RunConfig, stage1_ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        require_stage(stage1_ckpt, Stage::Motion, config)?;
        let model = model_from_checkpoint::<T>(stage1_ckpt)?;
        Ok(Self::new(config, Stage::Joint, model, false))
    }

    /// Continues an interrupted stage exactly where its checkpoint stopped.
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let meta = read_meta(ckpt)?;
        if meta.model != config.model || meta.ablation != config.ablation && meta.dual {
            return Err(Error::Precondition("checkpoint does not match the run config".into()));
        }
        let model = model_from_checkpoint::<T>(ckpt)?;
        let mut t = Self::new(config, meta.stage, model, meta.skipped);
        if meta.steps != t.total_steps() {
            return Err(Error::Precondition(format!(
                "checkpoint budget {} differs from configured {}",
                meta.steps,
                t.total_steps()
            )));
        }
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (_, name, value) in t.model.params.iter() {
            let get = |kind: &str| -> Result<Tensor<T>> {
                match ckpt.get(&format!("adam.{kind}.{name}")) {
                    Some(x) => Ok(x.cast()),
                    None => Ok(Tensor::zeros(value.shape())),
                }
            };
            m.push(get("m")?);
            v.push(get("v")?);
        }
        t.opt.restore(m, v, meta.step)?;
        t.step = meta.step;
        t.log = meta.log;
        Ok(t)
    }

    pub fn total_steps(&self) -> u64 {
        if self.skipped {
            0
        } else {
            self.config.stage(self.stage).steps
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn skipped(&self) -> bool {
        self.skipped
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.model.params.id(name).is_some_and(|id| self.trainable[id.0])
    }

    /// Runs until the stage budget is spent.
    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        self.run_until(self.total_steps(), data)
    }

    /// Runs until `step` (capped at the budget).
    pub fn run_until(&mut self, step: u64, data: &Dataset) -> Result<()> {
        let end = step.min(self.total_steps());
        while self.step < end {
            self.train_step(data)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = Meta {
            kind: CHECKPOINT_KIND.into(),
            stage: self.stage,
            step: self.step,
            steps: self.total_steps(),
            ablation: self.model.ablation,
            dual: self.model.dual,
            skipped: self.skipped,
            model: self.model.config.clone(),
            log: self.log.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(&meta).expect("metadata serializes"));
        for (_, name, t) in self.model.params.iter() {
            ck.push(format!("param.{name}"), t.cast());
        }
        let (m, v) = self.opt.moments();
        for (i, name) in self.model.params.names().iter().enumerate() {
            if self.trainable[i] {
                ck.push(format!("adam.m.{name}"), m[i].cast());
                ck.push(format!("adam.v.{name}"), v[i].cast());
            }
        }
        ck
    }

    /// One optimizer step. Errors carry the stage and step index.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Precondition(format!("{:?} budget already spent", self.stage)));
        }
        let step = self.step;
        let stage = self.stage;
        self.try_step(data).map_err(|e| match e {
            Error::NonFinite { .. } | Error::Numeric(_) => {
                Error::Numeric(format!("{stage:?} stage aborted at step {step}: {e}"))
            }
            other => other,
        })
    }

    fn try_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let cfg = &self.config;
        let model_cfg = &self.model.config;
        check_dataset(data, model_cfg)?;
        let sc = cfg.stage(self.stage);
        let plan = StepPlan::draw(cfg, self.stage, &self.model, self.step, data.records.len());
        let micro = sc.batch / sc.accumulation;
        let inv_k = T::lit(1.0 / sc.accumulation as f64);

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.model.params.len()];
        let mut sums = [0.0f64; 4];
        let mut present = [false; 4];
        for chunk in 0..sc.accumulation {
            let range = chunk * micro..(chunk + 1) * micro;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape);
            let terms = self.micro_loss(&mut tape, &p, data, &plan, range)?;
            for (k, v) in terms.iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += tape.value(*v).item().to_f64_lossy();
                    present[k] = true;
                }
            }
            let total = terms[0].expect("total always present");
            let mut g = tape.backward(total)?;
            for (i, slot) in grads.iter_mut().enumerate() {
                if !self.trainable[i] {
                    continue;
                }
                let gi = g.take(p[ParamId(i)]).unwrap_or_else(|| Tensor::zeros(self.model.params.values()[i].shape()));
                let gi = gi.map(|x| x * inv_k);
                *slot = Some(match slot.take() {
                    Some(acc) => acc.zip_map(&gi, |a, b| a + b)?,
                    None => gi,
                });
            }
        }
        let k = sc.accumulation as f64;
        let avg = |i: usize| present[i].then(|| sums[i] / k);
        let total = sums[0] / k;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let report = self.opt.clip_and_step(self.model.params.values_mut(), &grads)?;
        let log = StepLog {
            step: self.step,
            total,
            video: avg(1),
            motion: avg(2),
            smpl: avg(3),
            grad_norm: report.grad_norm,
            lr: report.lr,
        };
        self.step += 1;
        self.log.push(log.clone());
        Ok(log)
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let names: HashSet<&str> = self
            .model
            .params
            .names()
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.as_str())
            .collect();
        self.model.params.bind(tape, |n| names.contains(n))
    }

    /// `[total, video, motion, smpl]` loss nodes for samples `range` of the plan.
    fn micro_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        data: &Dataset,
        plan: &StepPlan<T>,
        range: std::ops::Range<usize>,
    ) -> Result<[Option<Var>; 4]> {
        let model = &self.model;
        let mc = &model.config;
        let hw = mc.tokens_per_slice();
        let encoding = encoding_for(model.ablation);
        let recs: Vec<_> = plan.records[range.clone()].iter().map(|&i| &data.records[i]).collect();
        let ts = &plan.ts[range.clone()];
        let cond: Vec<Vec<usize>> = range
            .clone()
            .zip(&recs)
            .map(|(b, r)| vec![if plan.dropped[b] { mc.null_token } else { r.condition() }])
            .collect();

        let wants_video = self.stage != Stage::Motion;
        let wants_motion = match self.stage {
            Stage::Pretrain => false,
            Stage::Motion => true,
            Stage::Joint => model.ablation.has_motion(),
        };
        let noisy = |x0s: Vec<Tensor<T>>, eps: &[Tensor<T>]| -> Result<(Tensor<T>, Tensor<T>)> {
            let mut xs = Vec::with_capacity(x0s.len());
            let mut vs = Vec::with_capacity(x0s.len());
            for ((x0, e), &t) in x0s.iter().zip(eps).zip(ts) {
                xs.push(make_noisy(x0, e, t, hw)?.x_t);
                vs.push(velocity_target(x0, e)?);
            }
            Ok((stack(&xs)?, stack(&vs)?))
        };
        let video = if wants_video {
            let x0 = recs.iter().map(|r| video_tokens::<T>(r)).collect::<Result<Vec<_>>>()?;
            Some(noisy(x0, &plan.eps_video[range.clone()])?)
        } else {
            None
        };
        let motion = if wants_motion {
            let x0 = recs
                .iter()
                .map(|r| motion_tokens::<T>(r, &data.palette, encoding))
                .collect::<Result<Vec<_>>>()?;
            Some(noisy(x0, &plan.eps_motion[range.clone()])?)
        } else {
            None
        };

        match self.stage {
            Stage::Pretrain => {
                let (x, v) = video.expect("video stream");
                let pred = model.video_forward(tape, p, &x, ts, &cond)?;
                let target = tape.constant(v);
                let l = flow_loss(tape, pred, target, hw)?;
                Ok([Some(l), Some(l), None, None])
            }
            Stage::Motion => {
                let (x, v) = motion.expect("motion stream");
                let pred = model.motion_forward(tape, p, &x, ts, &cond)?;
                let target = tape.constant(v);
                let l = flow_loss(tape, pred, target, hw)?;
                Ok([Some(l), None, Some(l), None])
            }
            Stage::Joint => {
                let (xv, vv) = video.expect("video stream");
                let m0 = stack(&recs.iter().map(|r| first_pose::<T>(r)).collect::<Vec<_>>())?;
                let out = model.forward(
                    tape,
                    p,
                    ForwardInput {
                        x_video: &xv,
                        x_motion: motion.as_ref().map(|m| &m.0),
                        ts,
                        cond: &cond,
                        m0: &m0,
                    },
                    &plan.layers,
                )?;
                let vv = tape.constant(vv);
                let motion_pair = match (out.motion_v, motion) {
                    (Some(v), Some((_, target))) => Some((v, tape.constant(target))),
                    _ => None,
                };
                let preds: Vec<Var> = out.poses.iter().map(|(_, v)| *v).collect();
                let gt = if preds.is_empty() {
                    None
                } else {
                    let g = stack(&recs.iter().map(|r| later_poses::<T>(r)).collect::<Vec<_>>())?;
                    Some(tape.constant(g))
                };
                let terms = total_loss(
                    tape,
                    (out.video_v, vv),
                    motion_pair,
                    gt.map(|g| (preds.as_slice(), g)),
                    hw,
                )?;
                Ok([Some(terms.total), Some(terms.video), terms.motion, terms.smpl])
            }
        }
    }
}

/// All randomness of one optimizer step, drawn before the batch is split.
#[derive(Debug, Clone)]
pub struct StepPlan<T> {
    pub records: Vec<usize>,
    pub dropped: Vec<bool>,
    /// Stratified: sample `b` of `B` has `t` in `[b/B, (b+1)/B)`.
    pub ts: Vec<f64>,
    /// Pose-module layers for the joint stage, ascending, always with the last selectable one.
    pub layers: Vec<usize>,
    pub eps_video: Vec<Tensor<T>>,
    pub eps_motion: Vec<Tensor<T>>,
}

impl<T: Scalar> StepPlan<T> {
    pub fn draw(cfg: &RunConfig, stage: Stage, model: &DualModel<T>, step: u64, records: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP_STREAM + stage.index(), step));
        let batch = cfg.stage(stage).batch;
        let mc = &model.config;
        let mut recs = Vec::with_capacity(batch);
        let mut dropped = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        for b in 0..batch {
            recs.push(rng.gen_range(0..records));
            dropped.push(rng.gen::<f64>() < cfg.cond_dropout);
            ts.push((b as f64 + rng.gen::<f64>()) / batch as f64);
        }
        let layers = if stage == Stage::Joint && model.pose.is_some() {
            let selectable = model.selectable_layers();
            let (last, rest) = selectable.split_last().expect("dual model has layers");
            let extra = cfg.layer_selection.min(selectable.len()) - 1;
            let mut layers: Vec<usize> = sample_indices(&mut rng, rest.len(), extra).into_iter().map(|i| rest[i]).collect();
            layers.push(*last);
            layers.sort_unstable();
            layers
        } else {
            Vec::new()
        };
        let shape = [mc.tokens(), mc.channels()];
        let uses_video = stage != Stage::Motion;
        let uses_motion = match stage {
            Stage::Pretrain => false,
            Stage::Motion => true,
            Stage::Joint => model.ablation.has_motion(),
        };
        let mut eps_video = Vec::new();
        let mut eps_motion = Vec::new();
        for _ in 0..batch {
            if uses_video {
                eps_video.push(Tensor::randn(&shape, 1.0, &mut rng));
            }
            if uses_motion {
                eps_motion.push(Tensor::randn(&shape, 1.0, &mut rng));
            }
        }
        Self {
            records: recs,
            dropped,
            ts,
            layers,
            eps_video,
            eps_motion,
        }
    }
}

/// Pretrains the video model for the configured budget.
pub fn pretrain_video_branch<T: Scalar>(config: &RunConfig, data: &Dataset) -> Result<Trainer<T>> {
    let mut t = Trainer::pretrain(config)?;
    t.run(data)?;
    Ok(t)
}

pub fn train_stage1<T: Scalar>(config: &RunConfig, data: &Dataset, video_ckpt: &Checkpoint) -> Result<Trainer<T>> {
    let mut t = Trainer::stage1(config, video_ckpt)?;
    t.run(data)?;
    Ok(t)
}

pub fn train_stage2<T: Scalar>(config: &RunConfig, data: &Dataset, stage1_ckpt: &Checkpoint) -> Result<Trainer<T>> {
    let mut t = Trainer::stage2(config, stage1_ckpt)?;
    t.run(data)?;
    Ok(t)
}

/// Mean of `total` over the `window` steps ending at `step` (inclusive).
pub fn smoothed_total(log: &[StepLog], step: usize, window: usize) -> Option<f64> {
    if step >= log.len() || window == 0 {
        return None;
    }
    let start = (step + 1).saturating_sub(window);
    let w = &log[start..=step];
    Some(w.iter().map(|l| l.total).sum::<f64>() / w.len() as f64)
}
