//! Invertible pixel-shuffle latent space: 4x temporal and 16x spatial
//! compression with a standalone first frame.

use crate::error::{Error, Result};
use crate::raster::Frame;
use crate::scalar::Scalar;
use crate::tensorad::Tensor;

pub const TEMPORAL: usize = 4;
pub const SPATIAL: usize = 16;
pub const LATENT_CHANNELS: usize = 3 * TEMPORAL * SPATIAL * SPATIAL;

/// Latent tensor shaped `[LATENT_CHANNELS, t_lat, h, w]` plus the pixel geometry it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock<T> {
    pub data: Tensor<T>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Latent grid `(t_lat, h, w)` for a clip, after validating its geometry.
pub fn latent_dims(frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
    if frames < 5 || frames % TEMPORAL != 1 {
        return Err(Error::invalid(format!("frame count {frames} must be >= 5 and 1 mod 4")));
    }
    if height == 0 || width == 0 || height % SPATIAL != 0 || width % SPATIAL != 0 {
        return Err(Error::invalid(format!(
            "resolution {height}x{width} must be a positive multiple of 16"
        )));
    }
    Ok(((frames - 1) / TEMPORAL + 1, height / SPATIAL, width / SPATIAL))
}

/// Source frame for slot `k` of temporal group `t`. Group 0 repeats frame 0.
#[inline]
fn source_frame(t: usize, k: usize) -> usize {
    if t == 0 {
        0
    } else {
        (t - 1) * TEMPORAL + k + 1
    }
}

#[inline]
fn channel(k: usize, y: usize, x: usize, c: usize) -> usize {
    ((k * SPATIAL + y) * SPATIAL + x) * 3 + c
}

/// Encodes `[F, H, W, 3]` pixels in `[0, 1]`.
pub fn encode_pixels<T: Scalar>(pixels: &Tensor<T>) -> Result<LatentBlock<T>> {
    let s = pixels.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("encode_pixels", format!("expected [F, H, W, 3], got {s:?}")));
    }
    let (f, hh, ww) = (s[0], s[1], s[2]);
    let (tl, h, w) = latent_dims(f, hh, ww)?;
    let src = pixels.data();
    let two = T::lit(2.0);
    let mut out = vec![T::zero(); LATENT_CHANNELS * tl * h * w];
    let plane = tl * h * w;
    for t in 0..tl {
        for k in 0..TEMPORAL {
            let fi = source_frame(t, k);
            for py in 0..hh {
                for px in 0..ww {
                    let (cy, cx) = (py / SPATIAL, px / SPATIAL);
                    let cell = (t * h + cy) * w + cx;
                    for c in 0..3 {
                        let v = src[((fi * hh + py) * ww + px) * 3 + c];
                        out[channel(k, py % SPATIAL, px % SPATIAL, c) * plane + cell] = v * two - T::one();
                    }
                }
            }
        }
    }
    Ok(LatentBlock {
        data: Tensor::new(vec![LATENT_CHANNELS, tl, h, w], out)?,
        frames: f,
        height: hh,
        width: ww,
    })
}

/// Exact inverse of [`encode_pixels`]; frame 0 comes from the first replicate.
pub fn decode_pixels<T: Scalar>(latent: &LatentBlock<T>) -> Result<Tensor<T>> {
    let (tl, h, w) = latent_dims(latent.frames, latent.height, latent.width)?;
    if latent.data.shape() != [LATENT_CHANNELS, tl, h, w] {
        return Err(Error::shape(
            "decode_pixels",
            format!(
                "latent {:?} inconsistent with {} frames at {}x{}",
                latent.data.shape(),
                latent.frames,
                latent.height,
                latent.width
            ),
        ));
    }
    let (f, hh, ww) = (latent.frames, latent.height, latent.width);
    let src = latent.data.data();
    let plane = tl * h * w;
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); f * hh * ww * 3];
    for t in 0..tl {
        let slots = if t == 0 { 1 } else { TEMPORAL };
        for k in 0..slots {
            let fi = source_frame(t, k);
            for py in 0..hh {
                for px in 0..ww {
                    let cell = (t * h + py / SPATIAL) * w + px / SPATIAL;
                    for c in 0..3 {
                        let z = src[channel(k, py % SPATIAL, px % SPATIAL, c) * plane + cell];
                        out[((fi * hh + py) * ww + px) * 3 + c] = (z + T::one()) * half;
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, hh, ww, 3], out)
}

/// Stacks frames into `[F, H, W, 3]`.
pub fn frames_to_tensor<T: Scalar>(frames: &[Frame<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        if (f.height, f.width) != (h, w) {
            return Err(Error::invalid("frames differ in size"));
        }
        data.extend_from_slice(&f.data);
    }
    Tensor::new(vec![frames.len(), h, w, 3], data)
}

/// Splits `[F, H, W, 3]` back into frames.
pub fn tensor_to_frames<T: Scalar>(pixels: &Tensor<T>) -> Result<Vec<Frame<T>>> {
    let s = pixels.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("tensor_to_frames", format!("expected [F, H, W, 3], got {s:?}")));
    }
    let n = s[1] * s[2] * 3;
    Ok(pixels
        .data()
        .chunks(n.max(1))
        .take(s[0])
        .map(|c| Frame {
            height: s[1],
            width: s[2],
            data: c.to_vec(),
        })
        .collect())
}
