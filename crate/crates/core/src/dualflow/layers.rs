//! Parameter groups and the graph fragments built from them.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensorad::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// How a fresh weight matrix is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Gaussian with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
}

/// Registers parameters under a name prefix.
pub struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub prefix: String,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, init: WeightInit) -> Result<Linear> {
        let w = match init {
            WeightInit::Scaled(g) => Tensor::randn(&[fan_in, fan_out], g / (fan_in as f64).sqrt(), self.rng),
            WeightInit::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = self.tensor(&format!("{name}.w"), w)?;
        let b = if bias {
            Some(self.tensor(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.tensor(&format!("{name}.gain"), Tensor::ones(&[d]))?,
            bias: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn attention(&mut self, name: &str, q_dim: usize, kv_dim: usize, heads: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), q_dim, q_dim, true, WeightInit::Scaled(1.0))?,
            // a key bias only shifts every score of a query equally, which softmax ignores
            k: self.linear(&format!("{name}.k"), kv_dim, q_dim, false, WeightInit::Scaled(1.0))?,
            v: self.linear(&format!("{name}.v"), kv_dim, q_dim, true, WeightInit::Scaled(1.0))?,
            o: self.linear(&format!("{name}.o"), q_dim, q_dim, true, WeightInit::Scaled(1.0))?,
            heads,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], self.b.map(|b| p[b]))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, Some(p[self.gain]), Some(p[self.bias]), LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `queries: [..., nq, dq]`, `context: [..., nk, dk]` with matching leading axes.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, queries: Var, context: Var) -> Result<Var> {
        let qs = tape.shape(queries).to_vec();
        let ks = tape.shape(context).to_vec();
        let r = qs.len();
        let lead: usize = qs[..r - 2].iter().product();
        let (nq, nk) = (qs[r - 2], ks[ks.len() - 2]);
        let q = self.q.apply(tape, p, queries)?;
        let d = *tape.shape(q).last().expect("projected");
        let (h, dh) = (self.heads, d / self.heads);
        let k = self.k.apply(tape, p, context)?;
        let v = self.v.apply(tape, p, context)?;
        let split = |tape: &mut Tape<T>, x: Var, n: usize| -> Result<Var> {
            let x = tape.reshape(x, &[lead, n, h, dh])?;
            tape.permute(x, &[0, 2, 1, 3])
        };
        let q = split(tape, q, nq)?;
        let k = split(tape, k, nk)?;
        let v = split(tape, v, nk)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let mut shape = qs[..r - 1].to_vec();
        shape.push(d);
        let out = tape.reshape(out, &shape)?;
        self.o.apply(tape, p, out)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        self.q.ids().chain(self.k.ids()).chain(self.v.ids()).chain(self.o.ids())
    }
}

/// One transformer block: modulated self-attention, cross-attention to the
/// condition tokens, and a modulated feed-forward layer, each residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: Attention,
    pub cross_norm: Norm,
    pub cross: Attention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DitBlock {
    pub fn build<T: Scalar, R: Rng + ?Sized>(b: &mut Builder<'_, T, R>, name: &str, d: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            modulation: b.linear(&format!("{name}.modulation"), d, 4 * d, true, WeightInit::Zeros)?,
            attn: b.attention(&format!("{name}.attn"), d, d, heads)?,
            cross_norm: b.layer_norm(&format!("{name}.cross_norm"), d)?,
            cross: b.attention(&format!("{name}.cross"), d, d, heads)?,
            ffn_in: b.linear(&format!("{name}.ffn_in"), d, ffn_mult * d, true, WeightInit::Scaled(1.0))?,
            ffn_out: b.linear(&format!("{name}.ffn_out"), ffn_mult * d, d, true, WeightInit::Scaled(1.0))?,
        })
    }

    /// Projections whose zeroing turns the block into the identity.
    pub fn residual_outputs(&self) -> [Linear; 3] {
        [self.attn.o, self.cross.o, self.ffn_out]
    }

    /// `x: [B, N, d]`, `cond: [B, Nc, d]`, `c: [B, d]` (already activated).
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var, cond: Var, c: Var) -> Result<Var> {
        let bsz = tape.shape(x)[0];
        let d = tape.shape(x)[2];
        let m = self.modulation.apply(tape, p, c)?;
        let m = tape.reshape(m, &[bsz, 1, 4 * d])?;
        let part = |tape: &mut Tape<T>, i: usize| tape.slice(m, 2, i * d, d);
        let (shift1, scale1, shift2, scale2) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?, part(tape, 3)?);

        let h = modulated_norm(tape, x, shift1, scale1)?;
        let a = self.attn.apply(tape, p, h, h)?;
        let x = tape.add(x, a)?;

        let h = self.cross_norm.apply(tape, p, x)?;
        let a = self.cross.apply(tape, p, h, cond)?;
        let x = tape.add(x, a)?;

        let h = modulated_norm(tape, x, shift2, scale2)?;
        let f = self.ffn_in.apply(tape, p, h)?;
        let f = tape.silu(f)?;
        let f = self.ffn_out.apply(tape, p, f)?;
        tape.add(x, f)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.modulation.ids().collect();
        v.extend(self.attn.ids());
        v.extend([self.cross_norm.gain, self.cross_norm.bias]);
        v.extend(self.cross.ids());
        v.extend(self.ffn_in.ids());
        v.extend(self.ffn_out.ids());
        v
    }
}

/// `norm(x) * (1 + scale) + shift` without a learned affine.
pub fn modulated_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, None, None, LN_EPS)?;
    let hs = tape.mul(h, scale)?;
    let h = tape.add(h, hs)?;
    tape.add(h, shift)
}

/// Sinusoidal features of the flow time, `[B, 2 * freqs]`.
pub fn time_features<T: Scalar>(ts: &[f64], freqs: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(ts.len() * 2 * freqs);
    for &t in ts {
        let x = t * 1000.0;
        for k in 0..freqs {
            let f = (-(10000f64.ln()) * k as f64 / freqs as f64).exp();
            data.push(T::lit((x * f).cos()));
        }
        for k in 0..freqs {
            let f = (-(10000f64.ln()) * k as f64 / freqs as f64).exp();
            data.push(T::lit((x * f).sin()));
        }
    }
    Tensor::new(vec![ts.len(), 2 * freqs], data).expect("sized above")
}

fn sinusoid_into(out: &mut [f64], pos: usize, dims: usize) {
    let pairs = dims / 2;
    for k in 0..pairs {
        let f = (-(10000f64.ln()) * k as f64 / pairs.max(1) as f64).exp();
        out[k] = (pos as f64 * f).sin();
        out[pairs + k] = (pos as f64 * f).cos();
    }
}

/// Fixed positional code for a `t x h x w` token grid, `[t*h*w, d]`.
pub fn grid_positions<T: Scalar>(t: usize, h: usize, w: usize, d: usize) -> Tensor<T> {
    let third = (d / 3) & !1;
    let dt = d - 2 * third;
    let mut data = vec![0f64; t * h * w * d];
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                let row = &mut data[((ti * h + yi) * w + xi) * d..][..d];
                sinusoid_into(&mut row[..dt], ti, dt);
                sinusoid_into(&mut row[dt..dt + third], yi, third);
                sinusoid_into(&mut row[dt + third..], xi, third);
            }
        }
    }
    Tensor::new(vec![t * h * w, d], data.into_iter().map(T::lit).collect()).expect("sized above")
}

/// Fixed positional code for `frames` rows, `[frames, d]`.
pub fn frame_positions<T: Scalar>(frames: usize, d: usize) -> Tensor<T> {
    let mut data = vec![0f64; frames * d];
    for f in 0..frames {
        sinusoid_into(&mut data[f * d..(f + 1) * d], f, d);
    }
    Tensor::new(vec![frames, d], data.into_iter().map(T::lit).collect()).expect("sized above")
}
