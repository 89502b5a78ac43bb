//! Records to token-layout latents and batch assembly.

use crate::datagen::{Dataset, TripletRecord};
use crate::dualflow::{latent_to_tokens, Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::latentcodec::encode_pixels;
use crate::motioncodec::{transcode, MotionColor, MotionEncoding, PartPalette};
use crate::scalar::Scalar;
use crate::tensorad::Tensor;

/// How motion frames are presented to a variant.
pub fn encoding_for(ablation: Ablation) -> MotionEncoding {
    match ablation {
        Ablation::NormalOnly => MotionEncoding::NormalOnly,
        Ablation::SemanticsOnly => MotionEncoding::SemanticsOnly,
        _ => MotionEncoding::Full,
    }
}

/// Checks that every record matches the model geometry.
pub fn check_dataset(data: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if data.records.is_empty() {
        return Err(Error::invalid("dataset has no records"));
    }
    for (i, r) in data.records.iter().enumerate() {
        let s = r.rgb.shape();
        if s != [cfg.frames, cfg.height, cfg.width, 3] {
            return Err(Error::invalid(format!(
                "record {i} is {s:?}, model expects [{}, {}, {}, 3]",
                cfg.frames, cfg.height, cfg.width
            )));
        }
        if r.poses.shape() != [cfg.frames, cfg.pose_dim()] {
            return Err(Error::invalid(format!(
                "record {i} poses {:?}, model expects {} joints",
                r.poses.shape(),
                cfg.joints
            )));
        }
        if r.condition() >= cfg.vocab || r.condition() == cfg.null_token {
            return Err(Error::invalid(format!("record {i} condition {} is not usable", r.condition())));
        }
    }
    Ok(())
}

/// `[N, C]` RGB tokens.
pub fn video_tokens<T: Scalar>(rec: &TripletRecord) -> Result<Tensor<T>> {
    Ok(latent_to_tokens(&encode_pixels(&rec.rgb.cast::<T>())?))
}

/// Motion frames re-encoded for `encoding`, background kept at zero.
pub fn motion_pixels(rec: &TripletRecord, palette: &PartPalette, encoding: MotionEncoding) -> Tensor<f32> {
    if encoding == MotionEncoding::Full {
        return rec.motion.clone();
    }
    let mut out = rec.motion.clone();
    let covered = rec.coverage.data();
    for (px, rgb) in out.data_mut().chunks_exact_mut(3).enumerate() {
        let c = if covered[px] > 0.5 {
            let src = MotionColor::new(f64::from(rgb[0]), f64::from(rgb[1]), f64::from(rgb[2]));
            transcode(src, palette, encoding)
        } else {
            MotionColor::background()
        };
        rgb.copy_from_slice(&c.to_array().map(|v| v as f32));
    }
    out
}

/// `[N, C]` motion tokens.
pub fn motion_tokens<T: Scalar>(rec: &TripletRecord, palette: &PartPalette, encoding: MotionEncoding) -> Result<Tensor<T>> {
    let px = motion_pixels(rec, palette, encoding).cast::<T>();
    Ok(latent_to_tokens(&encode_pixels(&px)?))
}

/// `[J*3]` first-frame pose.
pub fn first_pose<T: Scalar>(rec: &TripletRecord) -> Tensor<T> {
    let j3 = rec.poses.shape()[1];
    Tensor::new(vec![j3], rec.poses.data()[..j3].iter().map(|&v| T::lit(f64::from(v))).collect())
        .expect("sized from the record")
}

/// `[F-1, J*3]` poses of frames `1..F`.
pub fn later_poses<T: Scalar>(rec: &TripletRecord) -> Tensor<T> {
    let (f, j3) = (rec.poses.shape()[0], rec.poses.shape()[1]);
    Tensor::new(
        vec![f - 1, j3],
        rec.poses.data()[j3..].iter().map(|&v| T::lit(f64::from(v))).collect(),
    )
    .expect("sized from the record")
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Row `b` of a stacked tensor.
pub fn unstack_row<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let row = t.narrow(0, b, 1)?;
    let shape = t.shape()[1..].to_vec();
    row.reshape(&shape)
}
