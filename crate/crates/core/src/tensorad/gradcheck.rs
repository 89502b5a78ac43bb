//! Central-difference gradient verification.

use rand::Rng;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Analytic gradients of the scalar built by `f`.
pub fn analytic_grads<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut g = tape.backward(out)?;
    Ok(vars.iter().map(|v| g.take(*v).expect("param gradient")).collect())
}

fn check_coords<F>(f: &F, params: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(f, params)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for &(p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let up = evaluate(f, &work)?;
        work[p].data_mut()[i] = orig - h;
        let down = evaluate(f, &work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[p].data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = err;
            report.worst = (p, i);
            report.worst_values = (a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    check_coords(&f, params, h, &coords)
}

/// Checks up to `per_param` random coordinates of each parameter.
pub fn grad_check_sampled<F, R>(f: F, params: &[Tensor<f64>], h: f64, per_param: usize, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut coords = Vec::new();
    for (p, t) in params.iter().enumerate() {
        if t.len() <= per_param {
            coords.extend((0..t.len()).map(|i| (p, i)));
        } else {
            coords.extend(rand::seq::index::sample(rng, t.len(), per_param).into_iter().map(|i| (p, i)));
        }
    }
    check_coords(&f, params, h, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, r)
    }

    /// Reduces any tensor to a scalar through a fixed random projection so
    /// every output coordinate carries a distinct weight.
    fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(Tensor::randn(tape.shape(x), 1.0, &mut r));
        let p = tape.mul(x, w)?;
        tape.sum(p)
    }

    #[test]
    fn linear_map_is_exact() {
        let mut r = rng();
        let a = randn(&[3, 4], &mut r);
        let rep = grad_check(
            |t, v| {
                let c = t.constant(Tensor::from_fn(&[4, 2], |i| i as f64 * 0.25 - 1.0));
                let y = t.matmul(v[0], c)?;
                project(t, y, 1)
            },
            &[a],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-9, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let rep = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &[Tensor::ones(&[3])], H).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn primitives_pass_at_1e6() {
        let mut r = rng();
        type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);
        let cases: Vec<(&str, Case)> = vec![
            (
                "matmul_batched",
                (vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 5], &mut r)], Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 2)
                })),
            ),
            (
                "matmul_shared",
                (vec![randn(&[2, 2, 3, 4], &mut r), randn(&[4, 2], &mut r)], Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 3)
                })),
            ),
            (
                "add_broadcast",
                (vec![randn(&[2, 3, 4], &mut r), randn(&[3, 1], &mut r)], Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, 4)
                })),
            ),
            (
                "mul_broadcast",
                (vec![randn(&[2, 1, 4], &mut r), randn(&[3, 4], &mut r)], Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, 5)
                })),
            ),
            (
                "scale_reshape",
                (vec![randn(&[2, 6], &mut r)], Box::new(|t, v| {
                    let y = t.scale(v[0], -1.7)?;
                    let y = t.reshape(y, &[3, 2, 2])?;
                    project(t, y, 6)
                })),
            ),
            (
                "permute",
                (vec![randn(&[2, 3, 4, 2], &mut r)], Box::new(|t, v| {
                    let y = t.permute(v[0], &[2, 0, 3, 1])?;
                    project(t, y, 7)
                })),
            ),
            (
                "slice_concat",
                (vec![randn(&[2, 5, 3], &mut r), randn(&[2, 2, 3], &mut r)], Box::new(|t, v| {
                    let s = t.slice(v[0], 1, 1, 3)?;
                    let y = t.concat(&[v[1], s, v[1]], 1)?;
                    project(t, y, 8)
                })),
            ),
            (
                "softmax",
                (vec![randn(&[3, 4, 5], &mut r)], Box::new(|t, v| {
                    let y = t.softmax(v[0], 1)?;
                    project(t, y, 9)
                })),
            ),
            (
                "layer_norm",
                (
                    vec![randn(&[2, 3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)],
                    Box::new(|t, v| {
                        let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
                        project(t, y, 10)
                    }),
                ),
            ),
            (
                "silu",
                (vec![randn(&[4, 5], &mut r)], Box::new(|t, v| {
                    let y = t.silu(v[0])?;
                    project(t, y, 11)
                })),
            ),
            (
                "embedding",
                (vec![randn(&[5, 3], &mut r)], Box::new(|t, v| {
                    let y = t.embedding(v[0], &[4, 0, 4, 2])?;
                    project(t, y, 12)
                })),
            ),
            (
                "mse",
                (vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)], Box::new(|t, v| t.mse(v[0], v[1]))),
            ),
        ];
        for (name, (params, f)) in cases {
            let rep = grad_check(|t, v| f(t, v), &params, H).unwrap();
            assert!(rep.max_rel_err <= 1e-6, "{name}: {rep:?}");
        }
    }

    #[test]
    fn composite_graph_passes_at_1e5() {
        let mut r = rng();
        let params = vec![randn(&[4, 6], &mut r), randn(&[6, 3], &mut r), randn(&[4, 3], &mut r)];
        let rep = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let p = t.softmax(h, 1)?;
                t.mse(p, v[2])
            },
            &params,
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }

    #[test]
    fn sampled_check_visits_requested_coordinates() {
        let mut r = rng();
        let params = vec![randn(&[10, 10], &mut r), randn(&[3], &mut r)];
        let rep = grad_check_sampled(
            |t, v| {
                let y = t.matmul(v[0], v[0])?;
                let s = t.sum(y)?;
                let z = t.sum(v[1])?;
                let out = t.mul(s, z)?;
                Ok(out)
            },
            &params,
            H,
            7,
            &mut r,
        )
        .unwrap();
        assert_eq!(rep.checked, 10);
        assert!(rep.max_rel_err <= 1e-6);
    }
}
