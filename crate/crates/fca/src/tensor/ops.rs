//! Raw numeric kernels behind the tape ops. Single-threaded, row-major,
//! fixed evaluation order so identical inputs always produce bit-identical
//! outputs.

use super::{broadcast_shapes, broadcast_strides, BoolMask, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

/// out[m x n] += or = a[m x k] . b[k x n]; ikj order keeps the inner loop
/// contiguous over rows of b and out.
pub(crate) fn matmul_2d<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
}

/// out[m x k] += g[m x n] . b^T where b is [k x n]; dot products over the
/// contiguous n axis.
pub(crate) fn matmul_2d_transb<T: Scalar>(
    g: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + g_row[j] * b_row[j];
            }
            out_row[kk] = out_row[kk] + acc;
        }
    }
}

/// out[k x n] += a^T . g where a is [m x k], g is [m x n].
pub(crate) fn matmul_2d_transa<T: Scalar>(
    a: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aik * g_row[j];
            }
        }
    }
}

/// Elementwise binary op under right-aligned broadcasting.
pub(crate) fn binary_broadcast<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    kind: BinKind,
) -> Result<(Vec<usize>, Vec<T>)> {
    let apply = |x: T, y: T| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
    };
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(&x, &y)| apply(x, y)).collect();
        return Ok((a_shape.to_vec(), data));
    }
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(apply(a[off_a], b[off_b]));
        // odometer increment
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            off_a -= sa[axis] * out_shape[axis];
            off_b -= sb[axis] * out_shape[axis];
        }
    }
    Ok((out_shape, data))
}

/// Sums `data` (of `from` shape) down to `to` shape by collapsing broadcast
/// axes; used to route gradients back through broadcasting binaries.
pub(crate) fn reduce_to_shape<T: Scalar>(from: &[usize], data: &[T], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let n_out: usize = to.iter().product();
    let mut out = vec![T::zero(); n_out];
    let strides = broadcast_strides(to, from);
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in data {
        out[off] = out[off] + v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < from[axis] {
                break;
            }
            idx[axis] = 0;
            off -= strides[axis] * from[axis];
        }
    }
    out
}

/// Axis permutation with data movement; returns the permuted shape and data.
pub(crate) fn permute_data<T: Scalar>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    debug_assert_eq!(axes.len(), rank);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride of out axis i in the input buffer
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_in_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += out_in_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            off -= out_in_strides[axis] * out_shape[axis];
        }
    }
    (out_shape, out)
}

pub(crate) fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Softmax over the last axis with an optional broadcastable allow-mask.
/// Masked logits get a large negative sentinel and their outputs are forced
/// to exact zero, so masked key values can never leak through.
pub(crate) fn masked_softmax_fwd<T: Scalar>(
    shape: &[usize],
    data: &[T],
    mask: Option<&BoolMask>,
) -> Result<Vec<T>> {
    let d = *shape.last().ok_or_else(|| Error::Shape("softmax on rank-0".into()))?;
    let rows = data.len() / d;
    let mask_strides = match mask {
        Some(m) => {
            broadcast_shapes(shape, &m.shape).ok().filter(|s| s == shape).ok_or_else(|| {
                Error::Shape(format!(
                    "mask shape {:?} not broadcastable to logits {:?}",
                    m.shape, shape
                ))
            })?;
            Some(broadcast_strides(&m.shape, shape))
        }
        None => None,
    };
    let mut out = vec![T::zero(); data.len()];
    let rank = shape.len();
    let sentinel = T::mask_sentinel();
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        // base offset of (r, 0) in the mask buffer, odometer over leading axes
        let (mask_base, mask_step) = match (&mask, &mask_strides) {
            (Some(_), Some(strides)) => {
                let mut rem = r;
                let mut off = 0usize;
                for axis in (0..rank - 1).rev() {
                    let extent = shape[axis];
                    off += (rem % extent) * strides[axis];
                    rem /= extent;
                }
                (off, strides[rank - 1])
            }
            _ => (0, 0),
        };
        let allowed = |j: usize| -> bool {
            match &mask {
                Some(m) => m.data[mask_base + j * mask_step],
                None => true,
            }
        };
        let mut max = sentinel;
        let mut any = false;
        for j in 0..d {
            if allowed(j) {
                any = true;
                if row[j] > max {
                    max = row[j];
                }
            }
        }
        if !any {
            return Err(Error::Mask(format!("softmax row {r} has no allowed entry")));
        }
        let mut sum = T::zero();
        let out_row = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            if allowed(j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                sum = sum + e;
            }
        }
        for v in out_row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// dL/dx for softmax given its output y and upstream grad g:
/// dx = y * (g - sum(y * g)) per row. Masked outputs are exactly zero, so
/// their gradients are exactly zero too.
pub(crate) fn masked_softmax_bwd<T: Scalar>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for r in 0..y.len() / d {
        let ys = &y[r * d..(r + 1) * d];
        let gs = &g[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for j in 0..d {
            dot = dot + ys[j] * gs[j];
        }
        let os = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            os[j] = ys[j] * (gs[j] - dot);
        }
    }
    out
}

/// Per-last-axis normalization to zero mean, unit variance (no affine).
pub(crate) fn layer_norm_fwd<T: Scalar>(data: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut out = vec![T::zero(); data.len()];
    for r in 0..data.len() / d {
        let xs = &data[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &x in xs {
            mean = mean + x;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &x in xs {
            let c = x - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let rstd = (var + eps).sqrt().recip();
        let os = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            os[j] = (xs[j] - mean) * rstd;
        }
    }
    out
}

/// dx = rstd * (g - mean(g) - y * mean(g * y)), recomputing row stats from x.
pub(crate) fn layer_norm_bwd<T: Scalar>(x: &[T], g: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / d {
        let xs = &x[r * d..(r + 1) * d];
        let gs = &g[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in xs {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in xs {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let rstd = (var + eps).sqrt().recip();
        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for j in 0..d {
            let y = (xs[j] - mean) * rstd;
            g_mean = g_mean + gs[j];
            gy_mean = gy_mean + gs[j] * y;
        }
        g_mean = g_mean * inv_d;
        gy_mean = gy_mean * inv_d;
        let os = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let y = (xs[j] - mean) * rstd;
            os[j] = rstd * (gs[j] - g_mean - y * gy_mean);
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximated GELU.
pub(crate) fn gelu_fwd<T: Scalar>(data: &[T]) -> Vec<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    data.iter()
        .map(|&x| {
            let u = c * (x + a * x * x * x);
            half * x * (T::one() + u.tanh())
        })
        .collect()
}

pub(crate) fn gelu_bwd<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    x.iter()
        .zip(g)
        .map(|(&x, &g)| {
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            let sech2 = T::one() - t * t;
            let du = c * (T::one() + three * a * x * x);
            let dy = half * (T::one() + t) + half * x * sech2 * du;
            g * dy
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_2d(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_add_row_vector() {
        let (shape, data) = binary_broadcast(
            &[2, 3],
            &[0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0],
            &[3],
            &[10.0, 20.0, 30.0],
            BinKind::Add,
        )
        .unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data, vec![10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn reduce_collapses_broadcast_axes() {
        // grad of shape [2,3] reduced to [3] sums columns
        let out = reduce_to_shape(&[2, 3], &[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
        // ...and to [2,1] sums rows
        let out = reduce_to_shape(&[2, 3], &[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 1]);
        assert_eq!(out, vec![6.0, 15.0]);
    }

    #[test]
    fn permute_transposes() {
        let (shape, data) = permute_data(&[2, 3], &[0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(data, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let (shape2, data2) = permute_data(&shape, &data, &invert_permutation(&[1, 0]));
        assert_eq!(shape2, vec![2, 3]);
        assert_eq!(data2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn softmax_uniform_when_equal() {
        let out = masked_softmax_fwd(&[4], &[2.0f64; 4], None).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_rejected() {
        let mask = BoolMask::new(vec![2], vec![false, false]).unwrap();
        assert!(masked_softmax_fwd(&[2], &[0.0f64, 1.0], Some(&mask)).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let out = layer_norm_fwd(&[3.0f64; 5], 5, 1e-5);
        for v in out {
            assert_eq!(v, 0.0);
        }
    }
}
