//! Held-out evaluation: sampled motion vs ground truth, decoded part masks,
//! and teacher-forced RGB reconstruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, PoseVector, Skeleton};
use crate::datagen::{derive_seed, Dataset, TripletRecord};
use crate::dualflow::{
    make_noisy, sample, tokens_to_latent, Ablation, Denoiser, DualModel, ModelConfig, Prediction, SampleOutput, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::latentcodec::decode_pixels;
use crate::motioncodec::{MotionColor, MotionEncoding, PartPalette};
use crate::scalar::Scalar;
use crate::tensorad::Tensor;

use super::config::RunConfig;
use super::data::{check_dataset, encoding_for, first_pose, later_poses, motion_tokens, stack, unstack_row, video_tokens};
use super::train::StepLog;

const SAMPLE_STREAM: u64 = 200;
const PSNR_STREAM: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    /// Population mean and standard deviation; `None` when empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub index: usize,
    pub family: String,
    pub mpjpe: Option<f64>,
    pub static_mpjpe: f64,
    pub psnr: Option<f64>,
    pub part_iou: Option<f64>,
    pub coverage: Option<f64>,
}

/// Mean losses over one pass worth of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: String,
    pub epoch: usize,
    pub total: f64,
    pub video: Option<f64>,
    pub motion: Option<f64>,
    pub smpl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: Ablation,
    pub mpjpe: Option<Stat>,
    /// Predicting the first pose for every frame.
    pub static_mpjpe: Stat,
    pub psnr: Option<Stat>,
    pub part_iou: Option<Stat>,
    pub coverage: Option<Stat>,
    pub losses: Vec<EpochLoss>,
    pub records: Vec<RecordMetrics>,
}

impl MetricsReport {
    /// One JSON object per line: every record, then the summary.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for l in &self.losses {
            out.push_str(&serde_json::to_string(l).expect("loss serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "ablation": self.ablation,
                "mpjpe": self.mpjpe,
                "static_mpjpe": self.static_mpjpe,
                "psnr": self.psnr,
                "part_iou": self.part_iou,
                "coverage": self.coverage,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn summary(&self) -> String {
        let f = |s: &Option<Stat>, unit: &str| match s {
            Some(s) => format!("{:.4} ± {:.4}{unit}", s.mean, s.std),
            None => "n/a".to_string(),
        };
        let mut out = format!("variant         {}\n", self.ablation.name());
        out += &format!("records         {}\n", self.records.len());
        out += &format!("MPJPE           {}\n", f(&self.mpjpe, " m"));
        out += &format!("static MPJPE    {}\n", f(&Some(self.static_mpjpe), " m"));
        out += &format!("PSNR            {}\n", f(&self.psnr, " dB"));
        out += &format!("part IoU        {}\n", f(&self.part_iou, ""));
        out += &format!("coverage        {}\n", f(&self.coverage, ""));
        out
    }
}

/// Ground truth of the records in one evaluation batch, token layout.
#[derive(Debug, Clone)]
pub struct EvalBatch<T> {
    pub video: Tensor<T>,
    pub motion: Tensor<T>,
    /// `[B, F-1, J*3]`.
    pub poses: Tensor<T>,
}

/// A denoiser that can be evaluated batch by batch.
pub trait EvalModel<T: Scalar>: Denoiser<T> {
    /// Called before each batch is sampled.
    fn begin_batch(&mut self, _batch: &EvalBatch<T>) {}

    fn ablation(&self) -> Ablation;
}

impl<T: Scalar> EvalModel<T> for DualModel<T> {
    fn ablation(&self) -> Ablation {
        self.ablation
    }
}

/// Replays the ground truth: the exact straight-path velocity and the true poses.
#[derive(Debug, Clone)]
pub struct ReplayOracle<T> {
    pub config: ModelConfig,
    current: Option<EvalBatch<T>>,
}

impl<T: Scalar> ReplayOracle<T> {
    pub fn new(config: ModelConfig) -> Self {
        Self { config, current: None }
    }
}

impl<T: Scalar> Denoiser<T> for ReplayOracle<T> {
    fn predict(
        &self,
        x_video: &Tensor<T>,
        x_motion: Option<&Tensor<T>>,
        t: f64,
        _cond: &[Vec<usize>],
        _m0: &Tensor<T>,
        want_poses: bool,
    ) -> Result<Prediction<T>> {
        let b = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Precondition("oracle has no batch".into()))?;
        let inv = T::lit(1.0 / (1.0 - t));
        let v = |x0: &Tensor<T>, x: &Tensor<T>| x0.zip_map(x, |a, b| (a - b) * inv);
        Ok(Prediction {
            video: v(&b.video, x_video)?,
            motion: x_motion.map(|m| v(&b.motion, m)).transpose()?,
            poses: want_poses.then(|| b.poses.clone()),
        })
    }

    fn null_token(&self) -> usize {
        self.config.null_token
    }

    fn has_motion(&self) -> bool {
        true
    }
}

impl<T: Scalar> EvalModel<T> for ReplayOracle<T> {
    fn begin_batch(&mut self, batch: &EvalBatch<T>) {
        self.current = Some(batch.clone());
    }

    fn ablation(&self) -> Ablation {
        Ablation::Full
    }
}

/// Joint positions for each frame, with the given root translations.
fn joint_positions(skeleton: &Skeleton, rotations: &[f64], root: Vec3<f64>) -> Result<Vec<Vec3<f64>>> {
    Ok(forward_kinematics(skeleton, &PoseVector::from_flat(rotations, root)?)?.positions())
}

/// Mean joint distance over frames `1..F`, rotations `[F-1, J*3]` against the record.
pub fn mpjpe(skeleton: &Skeleton, rec: &TripletRecord, predicted: &[f64]) -> Result<f64> {
    let (f, j3) = (rec.frames(), rec.poses.shape()[1]);
    if predicted.len() != (f - 1) * j3 {
        return Err(Error::shape("mpjpe", format!("{} values for {} frames", predicted.len(), f - 1)));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 1..f {
        let gt = rec.pose(i);
        let pred = joint_positions(skeleton, &predicted[(i - 1) * j3..i * j3], gt.root_translation)?;
        let truth = forward_kinematics(skeleton, &gt)?.positions();
        for (a, b) in pred.iter().zip(&truth) {
            sum += (*a - *b).norm();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// MPJPE of repeating the first pose.
pub fn static_mpjpe(skeleton: &Skeleton, rec: &TripletRecord) -> Result<f64> {
    let m0: Vec<f64> = first_pose::<f64>(rec).into_data();
    let repeated: Vec<f64> = (1..rec.frames()).flat_map(|_| m0.iter().copied()).collect();
    mpjpe(skeleton, rec, &repeated)
}

fn label(c: [f64; 3], palette: &PartPalette, encoding: MotionEncoding) -> Option<usize> {
    encoding.classify(MotionColor::new(c[0], c[1], c[2]), palette)
}

/// Mean over frames `1..F` of the part IoU averaged over parts present in
/// either mask, plus the predicted foreground fraction.
pub fn part_iou(
    rec: &TripletRecord,
    predicted: &Tensor<f64>,
    palette: &PartPalette,
    encoding: MotionEncoding,
) -> Result<(f64, f64)> {
    let (f, h, w) = (rec.frames(), rec.camera.height, rec.camera.width);
    if predicted.shape() != [f, h, w, 3] {
        return Err(Error::shape("part_iou", format!("{:?}", predicted.shape())));
    }
    let parts = palette.parts();
    let px = h * w;
    let mut iou_sum = 0.0;
    let mut covered = 0usize;
    for i in 1..f {
        let mut inter = vec![0usize; parts];
        let mut union = vec![0usize; parts];
        for p in 0..px {
            let k = i * px + p;
            let g = (rec.coverage.data()[k] > 0.5).then(|| {
                let c = &rec.motion.data()[k * 3..k * 3 + 3];
                let full = label([c[0].into(), c[1].into(), c[2].into()], palette, MotionEncoding::Full);
                match encoding {
                    MotionEncoding::NormalOnly => full.map(|_| 0),
                    _ => full,
                }
            });
            let g = g.flatten();
            let c = &predicted.data()[k * 3..k * 3 + 3];
            let q = label([c[0], c[1], c[2]], palette, encoding);
            if q.is_some() {
                covered += 1;
            }
            match (g, q) {
                (Some(a), Some(b)) if a == b => {
                    inter[a] += 1;
                    union[a] += 1;
                }
                (a, b) => {
                    for x in [a, b].into_iter().flatten() {
                        union[x] += 1;
                    }
                }
            }
        }
        let present: Vec<f64> = (0..parts)
            .filter(|&r| union[r] > 0)
            .map(|r| inter[r] as f64 / union[r] as f64)
            .collect();
        iou_sum += if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
    }
    Ok((iou_sum / (f - 1) as f64, covered as f64 / ((f - 1) * px) as f64))
}

/// PSNR over frames `1..F` on pixels covered in the ground truth and in `mask`.
pub fn masked_psnr(rec: &TripletRecord, predicted: &Tensor<f64>, mask: Option<&[bool]>, cap: f64) -> Option<f64> {
    let (f, px) = (rec.frames(), rec.camera.height * rec.camera.width);
    let mut se = 0.0;
    let mut n = 0usize;
    for k in px..f * px {
        if rec.coverage.data()[k] <= 0.5 || mask.is_some_and(|m| !m[k]) {
            continue;
        }
        for c in 0..3 {
            let d = predicted.data()[k * 3 + c].clamp(0.0, 1.0) - f64::from(rec.rgb.data()[k * 3 + c]);
            se += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return None;
    }
    let mse = se / n as f64;
    Some(if mse <= 0.0 { cap } else { (10.0 * (1.0 / mse).log10()).min(cap) })
}

fn decode_row<T: Scalar>(tokens: &Tensor<T>, b: usize, cfg: &ModelConfig) -> Result<Tensor<f64>> {
    let row = unstack_row(tokens, b)?;
    Ok(decode_pixels(&tokens_to_latent(&row, cfg.frames, cfg.height, cfg.width)?)?.cast())
}

fn foreground(pixels: &Tensor<f64>, palette: &PartPalette, encoding: MotionEncoding) -> Vec<bool> {
    pixels
        .data()
        .chunks_exact(3)
        .map(|c| label([c[0], c[1], c[2]], palette, encoding).is_some())
        .collect()
}

/// Groups step logs into epochs of `steps_per_epoch`.
pub fn epoch_losses(stage: &str, log: &[StepLog], steps_per_epoch: usize) -> Vec<EpochLoss> {
    let per = steps_per_epoch.max(1);
    log.chunks(per)
        .enumerate()
        .map(|(epoch, chunk)| {
            let n = chunk.len() as f64;
            let mean = |f: &dyn Fn(&StepLog) -> Option<f64>| {
                let v: Vec<f64> = chunk.iter().filter_map(f).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            EpochLoss {
                stage: stage.to_string(),
                epoch,
                total: chunk.iter().map(|l| l.total).sum::<f64>() / n,
                video: mean(&|l| l.video),
                motion: mean(&|l| l.motion),
                smpl: mean(&|l| l.smpl),
            }
        })
        .collect()
}

type Prepared<T> = (EvalBatch<T>, Tensor<T>, Vec<Vec<usize>>);

/// Ground-truth tokens, first poses and conditions of `indices`.
fn prepare_batch<T: Scalar>(data: &Dataset, indices: &[usize], encoding: MotionEncoding) -> Result<Prepared<T>> {
    let recs = indices
        .iter()
        .map(|&i| {
            data.records
                .get(i)
                .ok_or_else(|| Error::invalid(format!("record {i} out of range ({} records)", data.records.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let video = stack(&recs.iter().map(|r| video_tokens::<T>(r)).collect::<Result<Vec<_>>>()?)?;
    let motion = stack(
        &recs
            .iter()
            .map(|r| motion_tokens::<T>(r, &data.palette, encoding))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let poses = stack(&recs.iter().map(|r| later_poses::<T>(r)).collect::<Vec<_>>())?;
    let m0 = stack(&recs.iter().map(|r| first_pose::<T>(r)).collect::<Vec<_>>())?;
    let cond = recs.iter().map(|r| vec![r.condition()]).collect();
    Ok((EvalBatch { video, motion, poses }, m0, cond))
}

fn sample_prepared<T: Scalar, M: EvalModel<T>>(
    model: &M,
    config: &RunConfig,
    batch: &EvalBatch<T>,
    m0: &Tensor<T>,
    cond: &[Vec<usize>],
    seed: u64,
) -> Result<SampleOutput<T>> {
    sample(
        model,
        &batch.video,
        model.has_motion().then_some(&batch.motion),
        config.model.tokens_per_slice(),
        cond,
        m0,
        &SamplerConfig {
            steps: config.sample.steps,
            cfg_scale: config.sample.cfg_scale,
            seed: Some(seed),
            clip: config.sample.clip,
        },
    )
}

/// Decoded samples for a set of records, pixels in `[0, 1]` before clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub records: Vec<usize>,
    /// `[B, F, H, W, 3]`.
    pub video: Tensor<f64>,
    pub motion: Option<Tensor<f64>>,
    /// `[B, F-1, J*3]` axis-angle rotations of frames `1..F`.
    pub poses: Option<Tensor<f64>>,
}

impl Sampled {
    /// Finite everywhere and shaped for `frames` frames of `joints` joints.
    pub fn is_valid(&self, frames: usize, joints: usize) -> bool {
        let b = self.records.len();
        let finite = |t: &Tensor<f64>| t.data().iter().all(|v| v.is_finite());
        finite(&self.video)
            && self.video.shape()[..2] == [b, frames]
            && self.motion.as_ref().map_or(true, |m| finite(m) && m.shape() == self.video.shape())
            && self
                .poses
                .as_ref()
                .map_or(true, |p| finite(p) && p.shape() == [b, frames - 1, joints * 3])
    }
}

/// Samples `indices` of `data` as one batch from their first frames, first
/// poses and conditions.
pub fn sample_records<T: Scalar, M: EvalModel<T>>(
    model: &mut M,
    config: &RunConfig,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
) -> Result<Sampled> {
    let mc = &config.model;
    check_dataset(data, mc)?;
    let (batch, m0, cond) = prepare_batch::<T>(data, indices, encoding_for(model.ablation()))?;
    model.begin_batch(&batch);
    let out = sample_prepared(&*model, config, &batch, &m0, &cond, derive_seed(seed, SAMPLE_STREAM, 0))?;
    let decode_all = |tokens: &Tensor<T>| -> Result<Tensor<f64>> {
        let rows = (0..indices.len()).map(|b| decode_row(tokens, b, mc)).collect::<Result<Vec<_>>>()?;
        stack(&rows)
    };
    Ok(Sampled {
        records: indices.to_vec(),
        video: decode_all(&out.video)?,
        motion: out.motion.as_ref().map(decode_all).transpose()?,
        poses: out.poses.map(|p| p.cast()),
    })
}

/// Samples every held-out record from its first frame, first motion frame,
/// first pose and condition, then scores the result.
pub fn evaluate<T: Scalar, M: EvalModel<T>>(
    model: &mut M,
    config: &RunConfig,
    heldout: &Dataset,
    seed: u64,
) -> Result<MetricsReport> {
    let mc = &config.model;
    check_dataset(heldout, mc)?;
    let ablation = model.ablation();
    let encoding = encoding_for(ablation);
    let hw = mc.tokens_per_slice();
    let count = match config.eval.records {
        0 => heldout.records.len(),
        n => n.min(heldout.records.len()),
    };
    let mut records = Vec::with_capacity(count);
    for (chunk, start) in (0..count).step_by(config.eval.batch).enumerate() {
        let idx: Vec<usize> = (start..(start + config.eval.batch).min(count)).collect();
        let recs: Vec<&TripletRecord> = idx.iter().map(|&i| &heldout.records[i]).collect();
        let (batch, m0, cond) = prepare_batch::<T>(heldout, &idx, encoding)?;
        model.begin_batch(&batch);
        let out = sample_prepared(&*model, config, &batch, &m0, &cond, derive_seed(seed, SAMPLE_STREAM, chunk as u64))?;

        // Teacher-forced reconstruction from a half-noised ground truth.
        let t = config.eval.psnr_t;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PSNR_STREAM, chunk as u64));
        let noised = |x0: &Tensor<T>, rng: &mut ChaCha8Rng| -> Result<Tensor<T>> {
            let eps = Tensor::randn(x0.shape(), 1.0, rng);
            Ok(make_noisy(x0, &eps, t, hw)?.x_t)
        };
        let xv = noised(&batch.video, &mut rng)?;
        let xm = noised(&batch.motion, &mut rng)?;
        let pred = model.predict(&xv, model.has_motion().then_some(&xm), t, &cond, &m0, false)?;
        let one_minus = T::lit(1.0 - t);
        let recon = |x: &Tensor<T>, v: &Tensor<T>| x.zip_map(v, |a, b| a + one_minus * b);
        let video_hat = recon(&xv, &pred.video)?;
        let motion_hat = pred.motion.as_ref().map(|v| recon(&xm, v)).transpose()?;

        for (b, (&i, rec)) in idx.iter().zip(&recs).enumerate() {
            let static_err = static_mpjpe(&heldout.skeleton, rec)?;
            let mpjpe_v = match &out.poses {
                Some(p) => {
                    let row: Vec<f64> = unstack_row(p, b)?.data().iter().map(|v| v.to_f64_lossy()).collect();
                    Some(mpjpe(&heldout.skeleton, rec, &row)?)
                }
                None => None,
            };
            let (iou, cov) = match &out.motion {
                Some(m) => {
                    let px = decode_row(m, b, mc)?;
                    let (iou, cov) = part_iou(rec, &px, &heldout.palette, encoding)?;
                    (Some(iou), Some(cov))
                }
                None => (None, None),
            };
            let mask = motion_hat
                .as_ref()
                .map(|m| decode_row(m, b, mc).map(|px| foreground(&px, &heldout.palette, encoding)))
                .transpose()?;
            let psnr = masked_psnr(rec, &decode_row(&video_hat, b, mc)?, mask.as_deref(), config.eval.psnr_cap);
            records.push(RecordMetrics {
                index: i,
                family: rec.spec.family.name().to_string(),
                mpjpe: mpjpe_v,
                static_mpjpe: static_err,
                psnr,
                part_iou: iou,
                coverage: cov,
            });
        }
    }
    let collect = |f: &dyn Fn(&RecordMetrics) -> Option<f64>| -> Vec<f64> { records.iter().filter_map(f).collect() };
    let report = MetricsReport {
        ablation,
        mpjpe: Stat::of(&collect(&|r| r.mpjpe)),
        static_mpjpe: Stat::of(&collect(&|r| Some(r.static_mpjpe))).ok_or_else(|| Error::invalid("no held-out records"))?,
        psnr: Stat::of(&collect(&|r| r.psnr)),
        part_iou: Stat::of(&collect(&|r| r.part_iou)),
        coverage: Stat::of(&collect(&|r| r.coverage)),
        losses: Vec::new(),
        records,
    };
    let finite = |s: &Option<Stat>| s.map_or(true, |s| s.mean.is_finite() && s.std.is_finite());
    if ![report.mpjpe, report.psnr, report.part_iou, report.coverage, Some(report.static_mpjpe)]
        .iter()
        .all(finite)
    {
        return Err(Error::Numeric("non-finite metric".into()));
    }
    Ok(report)
}
