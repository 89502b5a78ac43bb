//! Euler integration of the learned velocity field with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorad::{Tape, Tensor};

use super::model::{DualModel, ForwardInput};

/// Velocities for one evaluation, in token layout `[B, N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub video: Tensor<T>,
    pub motion: Option<Tensor<T>>,
    /// Final-layer poses `[B, F-1, J*3]`, when requested and available.
    pub poses: Option<Tensor<T>>,
}

/// Anything that predicts velocities for noised latents.
pub trait Denoiser<T: Scalar> {
    fn predict(
        &self,
        x_video: &Tensor<T>,
        x_motion: Option<&Tensor<T>>,
        t: f64,
        cond: &[Vec<usize>],
        m0: &Tensor<T>,
        want_poses: bool,
    ) -> Result<Prediction<T>>;

    fn null_token(&self) -> usize;

    fn has_motion(&self) -> bool;
}

impl<T: Scalar> Denoiser<T> for DualModel<T> {
    fn predict(
        &self,
        x_video: &Tensor<T>,
        x_motion: Option<&Tensor<T>>,
        t: f64,
        cond: &[Vec<usize>],
        m0: &Tensor<T>,
        want_poses: bool,
    ) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let ts = vec![t; x_video.shape()[0]];
        let layers = if want_poses && self.pose.is_some() {
            self.selectable_layers()
        } else {
            Vec::new()
        };
        let out = self.forward(
            &mut tape,
            &p,
            ForwardInput {
                x_video,
                x_motion,
                ts: &ts,
                cond,
                m0,
            },
            &layers,
        )?;
        Ok(Prediction {
            video: tape.value(out.video_v).clone(),
            motion: out.motion_v.map(|v| tape.value(v).clone()),
            poses: out.poses.last().map(|(_, v)| tape.value(*v).clone()),
        })
    }

    fn null_token(&self) -> usize {
        self.config.null_token
    }

    fn has_motion(&self) -> bool {
        self.dual && self.ablation.has_motion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Required; an unseeded call is refused.
    pub seed: Option<u64>,
    /// Clamp the straight-path endpoint `x_t + (1 - t) v` to `[-1, 1]`
    /// (the latent range of `[0, 1]` pixels) before each step.
    pub clip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput<T> {
    pub video: Tensor<T>,
    pub motion: Option<Tensor<T>>,
    pub poses: Option<Tensor<T>>,
}

/// `u + s (c - u)`; exactly `c` when `s == 1`.
pub fn guide<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    let s = T::lit(scale);
    cond.zip_map(uncond, |c, u| u + s * (c - u))
}

fn overwrite_clean<T: Scalar>(x: &mut Tensor<T>, clean: &Tensor<T>, clean_tokens: usize) {
    let s = x.shape().to_vec();
    let (n, c) = (s[1], s[2]);
    let src = clean.data();
    for b in 0..s[0] {
        let start = b * n * c;
        let end = start + clean_tokens * c;
        x.data_mut()[start..end].copy_from_slice(&src[start..end]);
    }
}

/// Integrates from noise at `t = 0` to data at `t = 1`. `clean_video` (and
/// `clean_motion`) carry the conditioning latent; only their first
/// `clean_tokens` tokens per sample are read.
#[allow(clippy::too_many_arguments)]
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    clean_video: &Tensor<T>,
    clean_motion: Option<&Tensor<T>>,
    clean_tokens: usize,
    cond: &[Vec<usize>],
    m0: &Tensor<T>,
    cfg: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    let seed = cfg
        .seed
        .ok_or_else(|| Error::Precondition("sampling requires an explicit seed".into()))?;
    if cfg.steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    if clean_video.rank() != 3 {
        return Err(Error::shape("sample", format!("expected [B, N, C], got {:?}", clean_video.shape())));
    }
    let use_motion = model.has_motion();
    if use_motion && clean_motion.map(|m| m.shape()) != Some(clean_video.shape()) {
        return Err(Error::shape("sample", "motion conditioning must match the video latent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xv = Tensor::randn(clean_video.shape(), 1.0, &mut rng);
    overwrite_clean(&mut xv, clean_video, clean_tokens);
    let mut xm = if use_motion {
        let mut m = Tensor::randn(clean_video.shape(), 1.0, &mut rng);
        overwrite_clean(&mut m, clean_motion.expect("checked"), clean_tokens);
        Some(m)
    } else {
        None
    };
    let null: Vec<Vec<usize>> = cond.iter().map(|c| vec![model.null_token(); c.len()]).collect();
    let dt = T::lit(1.0 / cfg.steps as f64);
    let mut poses = None;
    for k in 0..cfg.steps {
        let t = k as f64 / cfg.steps as f64;
        let last = k + 1 == cfg.steps;
        let c = model.predict(&xv, xm.as_ref(), t, cond, m0, last)?;
        let (gv, gm) = if cfg.scale_is_identity() {
            (c.video.clone(), c.motion.clone())
        } else {
            let u = model.predict(&xv, xm.as_ref(), t, &null, m0, false)?;
            let gm = match (&c.motion, &u.motion) {
                (Some(a), Some(b)) => Some(guide(a, b, cfg.cfg_scale)?),
                _ => None,
            };
            (guide(&c.video, &u.video, cfg.cfg_scale)?, gm)
        };
        let (gv, gm) = if cfg.clip {
            (clip_endpoint(&xv, &gv, t)?, gm.map(|v| clip_endpoint(xm.as_ref().expect("motion present"), &v, t)).transpose()?)
        } else {
            (gv, gm)
        };
        step(&mut xv, &gv, dt)?;
        overwrite_clean(&mut xv, clean_video, clean_tokens);
        if let (Some(x), Some(v)) = (xm.as_mut(), gm.as_ref()) {
            step(x, v, dt)?;
            overwrite_clean(x, clean_motion.expect("checked"), clean_tokens);
        }
        if last {
            poses = c.poses;
        }
    }
    Ok(SampleOutput {
        video: xv,
        motion: xm,
        poses,
    })
}

impl SamplerConfig {
    fn scale_is_identity(&self) -> bool {
        self.cfg_scale == 1.0
    }
}

/// Velocity whose endpoint from `x` at time `t < 1` is `v`'s endpoint clamped to `[-1, 1]`.
pub fn clip_endpoint<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let rem = T::lit(1.0 - t);
    let one = T::one();
    x.zip_map(v, |x, v| ((x + rem * v).max(-one).min(one) - x) / rem)
}

fn step<T: Scalar>(x: &mut Tensor<T>, v: &Tensor<T>, dt: T) -> Result<()> {
    if x.shape() != v.shape() {
        return Err(Error::shape("euler_step", format!("{:?} vs {:?}", x.shape(), v.shape())));
    }
    for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
        *a += dt * b;
    }
    if !x.is_finite() {
        return Err(Error::Numeric("sampler produced non-finite latents".into()));
    }
    Ok(())
}
