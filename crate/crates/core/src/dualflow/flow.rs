//! Straight-path noising with a clean first temporal token.

use crate::error::{Error, Result};
use crate::latentcodec::LatentBlock;
use crate::scalar::Scalar;
use crate::tensorad::Tensor;

/// A noised latent in token layout `[N, C]` (or batched `[B, N, C]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample<T> {
    pub x_t: Tensor<T>,
    pub t: f64,
    pub eps: Tensor<T>,
    /// Leading tokens per sample that stay clean (temporal slice 0).
    pub clean_tokens: usize,
}

fn token_rows(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((1, n, c)),
        [b, n, c] => Ok((b, n, c)),
        _ => Err(Error::shape("flow", format!("expected [N, C] or [B, N, C], got {shape:?}"))),
    }
}

/// `x_t = (1 - t) eps + t x0`, except the first `clean_tokens` tokens of each sample keep `x0`.
pub fn make_noisy<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64, clean_tokens: usize) -> Result<NoisySample<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("make_noisy", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
    }
    let (_, n, c) = token_rows(x0.shape())?;
    if clean_tokens > n {
        return Err(Error::invalid("more clean tokens than tokens"));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let mut x_t = x0.clone();
    for (i, (x, e)) in x_t.data_mut().iter_mut().zip(eps.data()).enumerate() {
        if (i / c) % n >= clean_tokens {
            *x = a * *e + b * *x;
        }
    }
    Ok(NoisySample {
        x_t,
        t,
        eps: eps.clone(),
        clean_tokens,
    })
}

/// `x0 - eps`.
pub fn velocity_target<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    x0.zip_map(eps, |a, b| a - b)
}

/// `[C, T, h, w]` latent to `[T*h*w, C]` tokens.
pub fn latent_to_tokens<T: Scalar>(latent: &LatentBlock<T>) -> Tensor<T> {
    let s = latent.data.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let src = latent.data.data();
    let mut out = vec![T::zero(); c * n];
    for ci in 0..c {
        for j in 0..n {
            out[j * c + ci] = src[ci * n + j];
        }
    }
    Tensor::new(vec![n, c], out).expect("sized above")
}

/// Inverse of [`latent_to_tokens`].
pub fn tokens_to_latent<T: Scalar>(tokens: &Tensor<T>, frames: usize, height: usize, width: usize) -> Result<LatentBlock<T>> {
    let (tl, h, w) = crate::latentcodec::latent_dims(frames, height, width)?;
    let n = tl * h * w;
    let c = crate::latentcodec::LATENT_CHANNELS;
    if tokens.shape() != [n, c] {
        return Err(Error::shape("tokens_to_latent", format!("expected [{n}, {c}], got {:?}", tokens.shape())));
    }
    let src = tokens.data();
    let mut out = vec![T::zero(); c * n];
    for j in 0..n {
        for ci in 0..c {
            out[ci * n + j] = src[j * c + ci];
        }
    }
    Ok(LatentBlock {
        data: Tensor::new(vec![c, tl, h, w], out)?,
        frames,
        height,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Tensor<f64>, Tensor<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        (Tensor::randn(&[2, 6, 4], 1.0, &mut r), Tensor::randn(&[2, 6, 4], 1.0, &mut r))
    }

    #[test]
    fn endpoints() {
        let (x0, eps) = pair();
        assert_eq!(make_noisy(&x0, &eps, 1.0, 2).unwrap().x_t, x0);
        let s = make_noisy(&x0, &eps, 0.0, 2).unwrap();
        for b in 0..2 {
            for n in 0..6 {
                for c in 0..4 {
                    let want = if n < 2 { x0.at(&[b, n, c]) } else { eps.at(&[b, n, c]) };
                    assert_eq!(s.x_t.at(&[b, n, c]), want);
                }
            }
        }
    }

    #[test]
    fn midpoint() {
        let (x0, eps) = pair();
        let s = make_noisy(&x0, &eps, 0.5, 1).unwrap();
        for (i, v) in s.x_t.data().iter().enumerate() {
            if (i / 4) % 6 >= 1 {
                assert_eq!(*v, (x0.data()[i] + eps.data()[i]) / 2.0);
            }
        }
    }

    #[test]
    fn velocity_identities() {
        let (x0, eps) = pair();
        assert!(velocity_target(&x0, &x0).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(velocity_target(&x0, &Tensor::zeros(x0.shape())).unwrap(), x0);
        let a = 2.5;
        let lhs = velocity_target(&x0.map(|v| v * a), &eps.map(|v| v * a)).unwrap();
        let rhs = velocity_target(&x0, &eps).unwrap().map(|v| v * a);
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x0, eps) = pair();
        assert!(make_noisy(&x0, &eps, 1.5, 1).is_err());
        assert!(make_noisy(&x0, &eps.narrow(1, 0, 3).unwrap(), 0.5, 1).is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let px = Tensor::<f64>::randn(&[5, 16, 32, 3], 1.0, &mut r);
        let z = crate::latentcodec::encode_pixels(&px).unwrap();
        let tok = latent_to_tokens(&z);
        assert_eq!(tok.shape(), &[2 * 2, 3072]);
        assert_eq!(tokens_to_latent(&tok, 5, 16, 32).unwrap(), z);
    }
}
