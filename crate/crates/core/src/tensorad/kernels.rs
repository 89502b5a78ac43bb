//! Raw loops behind the tape primitives.

use crate::scalar::Scalar;

/// `c (+)= op(a) * op(b)` for logical `m x k` and `k x n` operands stored row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked against the logical shapes above and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Walks every output coordinate of a broadcast, yielding
/// `(out_index, a_index, b_index)`. Strides are aligned to the output rank
/// with zeros on broadcast axes.
pub fn broadcast_walk(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out_shape.len();
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        if r == 1 {
            return;
        }
        let mut d = r - 2;
        loop {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * out_shape[d];
            base_b -= sb[d] * out_shape[d];
            idx[d] = 0;
            if d == 0 {
                return;
            }
            d -= 1;
        }
    }
}

/// Broadcast result shape plus input strides aligned to it, or `None` if incompatible.
pub fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let r = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| -> usize {
        let off = r - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let (da, db) = (dim(a, i), dim(b, i));
        out.push(match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return None,
        });
    }
    let aligned = |s: &[usize]| -> Vec<usize> {
        let full: Vec<usize> = (0..r).map(|i| dim(s, i)).collect();
        let st = super::tensor::strides(&full);
        full.iter()
            .zip(st)
            .map(|(&d, s)| if d == 1 { 0 } else { s })
            .collect()
    };
    let (sa, sb) = (aligned(a), aligned(b));
    Some((out, sa, sb))
}

/// Sum `g` (shaped like the broadcast output) back onto an input with aligned strides `s`.
pub fn reduce_to<T: Scalar>(out_shape: &[usize], s: &[usize], g: &[T], target_len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); target_len];
    if target_len == g.len() {
        acc.copy_from_slice(g);
        return acc;
    }
    let zeros = vec![0usize; s.len()];
    broadcast_walk(out_shape, s, &zeros, |o, i, _| acc[i] += g[o]);
    acc
}

pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let sa: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0usize; perm.len()];
    let mut out = vec![T::zero(); data.len()];
    broadcast_walk(&out_shape, &sa, &zeros, |o, i, _| out[o] = data[i]);
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, len, inner)` decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                y[at(k)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Neumaier-compensated sum; keeps loss reductions from drifting with term order.
pub fn compensated_sum<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (mut sum, mut comp) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
