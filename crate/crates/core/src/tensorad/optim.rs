use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Steps of linear learning-rate ramp; zero disables it.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-2,
            max_grad_norm: 0.5,
            warmup_steps: 100,
        }
    }
}

/// What a single optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

/// AdamW moments for a fixed list of parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores saved moments and step counter.
    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::shape("adamw_restore", "moment shapes do not match parameters"));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// Learning rate applied at the next step.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.lr
        } else {
            c.lr * ((self.step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    /// Clips the global gradient norm, then applies one decoupled AdamW update.
    /// Parameters whose gradient is `None` are left untouched. A non-finite
    /// gradient rejects the whole step without changing any state.
    pub fn clip_and_step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<StepReport> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "clip_and_step",
                format!(
                    "{} params, {} grads, optimizer tracks {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        let mut sq = 0.0f64;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "clip_and_step",
                    format!("param {i}: value {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
            sq += g.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient norm overflowed".into()));
        }
        let c = self.config;
        let clip_scale = if c.max_grad_norm > 0.0 && norm > c.max_grad_norm {
            c.max_grad_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr_t, eps, scale) = (T::lit(lr), T::lit(c.eps), T::lit(clip_scale));
        let decay = T::one() - T::lit(lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gj = gj * scale;
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj = *pj * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepReport {
            grad_norm: norm,
            clip_scale,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamWConfig {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.03,
            warmup_steps: 0,
            max_grad_norm: 0.5,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let p0 = Tensor::<f64>::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut params = vec![p0.clone()];
        let mut opt = AdamW::new(cfg(), [p0.shape()]);
        opt.clip_and_step(&mut params, &[Some(Tensor::zeros(&[4]))]).unwrap();
        for (a, b) in params[0].data().iter().zip(p0.data()) {
            assert_eq!(*a, b * (1.0 - 1e-3 * 0.03));
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        let c = AdamWConfig {
            max_grad_norm: 0.0,
            ..cfg()
        };
        let p0 = Tensor::<f64>::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let g = Tensor::<f64>::new(vec![3], vec![0.02, -0.4, 1e-6]).unwrap();
        let mut params = vec![p0.clone()];
        let mut opt = AdamW::new(c, [p0.shape()]);
        opt.clip_and_step(&mut params, &[Some(g.clone())]).unwrap();
        for i in 0..3 {
            let gi = g.data()[i];
            let m = (1.0 - c.beta1) * gi;
            let v = (1.0 - c.beta2) * gi * gi;
            let mhat = m / (1.0 - c.beta1);
            let vhat = v / (1.0 - c.beta2);
            let expect = p0.data()[i] * (1.0 - c.lr * c.weight_decay) - c.lr * mhat / (vhat.sqrt() + c.eps);
            assert!((params[0].data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_scales_gradient_before_moments() {
        let g = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut params = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(cfg(), [params[0].shape()]);
        let report = opt.clip_and_step(&mut params, &[Some(g)]).unwrap();
        assert_eq!(report.grad_norm, 5.0);
        assert!((report.clip_scale - 0.1).abs() < 1e-15);
        let (m, _) = opt.moments();
        assert!((m[0].data()[0] - 0.1 * 0.3).abs() < 1e-15);
        assert!((m[0].data()[1] - 0.1 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let p0 = Tensor::<f64>::ones(&[2]);
        let mut params = vec![p0.clone()];
        let mut opt = AdamW::new(cfg(), [p0.shape()]);
        let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(opt.clip_and_step(&mut params, &[Some(bad)]).is_err());
        assert_eq!(opt.step_count(), 0);
        assert_eq!(params[0], p0);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = AdamWConfig {
            warmup_steps: 4,
            ..cfg()
        };
        let mut params = vec![Tensor::<f64>::zeros(&[1])];
        let mut opt = AdamW::new(c, [params[0].shape()]);
        let lrs: Vec<f64> = (0..6)
            .map(|_| opt.clip_and_step(&mut params, &[Some(Tensor::ones(&[1]))]).unwrap().lr)
            .collect();
        assert_eq!(lrs, vec![2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3]);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut params = vec![Tensor::<f64>::ones(&[2]), Tensor::ones(&[2])];
        let mut opt = AdamW::new(cfg(), params.iter().map(|p| p.shape()).collect::<Vec<_>>());
        opt.clip_and_step(&mut params, &[None, Some(Tensor::ones(&[2]))]).unwrap();
        assert_eq!(params[0], Tensor::ones(&[2]));
        assert_ne!(params[1], Tensor::ones(&[2]));
    }
}
