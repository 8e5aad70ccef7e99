//! Layer normalization (per row) and batch normalization (per channel, NHWC).

use crate::parallel;
use crate::real::Real;

const ROW_TASK: usize = 1 << 14;

/// Returns `(y, inv_std per row)`.
pub fn layer_norm_forward<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let per = parallel::rows_per_task(rows, d, ROW_TASK);
    parallel::for_each_chunk2(&mut y, per * d, &mut inv_std, per, |c, yc, sc| {
        for (r, (yr, s)) in yc.chunks_mut(d).zip(sc.iter_mut()).enumerate() {
            let xr = &x[(c * per + r) * d..][..d];
            let n = T::from_usize(d).unwrap();
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            *s = inv;
            for j in 0..d {
                yr[j] = (xr[j] - mean) * inv * gain[j] + bias[j];
            }
        }
    });
    (y, inv_std)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Real>(x: &[T], gain: &[T], inv_std: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let n = T::from_usize(d).unwrap();
    let xhat_row = |r: usize, out: &mut [T]| {
        let xr = &x[r * d..][..d];
        let mean = xr.iter().copied().sum::<T>() / n;
        for j in 0..d {
            out[j] = (xr[j] - mean) * inv_std[r];
        }
    };
    let mut dx = vec![T::zero(); x.len()];
    let per = parallel::rows_per_task(rows, d, ROW_TASK);
    parallel::for_each_chunk(&mut dx, per * d, |c, dxc| {
        let mut xhat = vec![T::zero(); d];
        for (rr, dxr) in dxc.chunks_mut(d).enumerate() {
            let r = c * per + rr;
            xhat_row(r, &mut xhat);
            let dyr = &dy[r * d..][..d];
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..d {
                let g = dyr[j] * gain[j];
                m1 += g;
                m2 += g * xhat[j];
            }
            m1 /= n;
            m2 /= n;
            for j in 0..d {
                dxr[j] = inv_std[r] * (dyr[j] * gain[j] - m1 - xhat[j] * m2);
            }
        }
    });
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for r in 0..rows {
        xhat_row(r, &mut xhat);
        let dyr = &dy[r * d..][..d];
        for j in 0..d {
            dgain[j] += dyr[j] * xhat[j];
            dbias[j] += dyr[j];
        }
    }
    (dx, dgain, dbias)
}

/// Per-channel mean and biased variance over all rows of a `[rows, c]` buffer.
pub fn channel_stats<T: Real>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let n = T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for j in 0..c {
            let dv = row[j] - mean[j];
            var[j] += dv * dv;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Affine normalization with the given statistics. Returns `(y, inv_std)`.
pub fn batch_norm_apply<T: Real>(x: &[T], mean: &[T], var: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let c = gamma.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let per = parallel::rows_per_task(x.len() / c, c, ROW_TASK);
    parallel::for_each_chunk(&mut y, per * c, |ci, yc| {
        let base = ci * per * c;
        for (i, o) in yc.iter_mut().enumerate() {
            let j = (base + i) % c;
            *o = (x[base + i] - mean[j]) * inv_std[j] * gamma[j] + beta[j];
        }
    });
    (y, inv_std)
}

/// Backward of batch norm. With `batch_stats` the statistics are functions of
/// `x`; otherwise they are constants (evaluation mode).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Real>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let n = T::from_usize(rows).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (xr, gr) in x.chunks(c).zip(dy.chunks(c)) {
        for j in 0..c {
            let xhat = (xr[j] - mean[j]) * inv_std[j];
            dgamma[j] += gr[j] * xhat;
            dbeta[j] += gr[j];
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    let per = parallel::rows_per_task(rows, c, ROW_TASK);
    parallel::for_each_chunk(&mut dx, per * c, |ci, dxc| {
        let base = ci * per * c;
        for (i, o) in dxc.iter_mut().enumerate() {
            let j = (base + i) % c;
            let g = dy[base + i] * gamma[j];
            *o = if batch_stats {
                let xhat = (x[base + i] - mean[j]) * inv_std[j];
                // dxhat sums: Σ dy·γ = γ·dβ, Σ dy·γ·xhat = γ·dγ
                inv_std[j] * (g - gamma[j] * dbeta[j] / n - xhat * gamma[j] * dgamma[j] / n)
            } else {
                g * inv_std[j]
            };
        }
    });
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_pair() {
        let (y, _) = layer_norm_forward(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-6);
        // var = 1, so y = ±1/sqrt(1 + 1e-6)
        let want = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y[0] - want).abs() < 1e-12 && (y[1] + want).abs() < 1e-12);
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let (y, _) = layer_norm_forward(&[3.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-6);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_stats_are_biased() {
        let (m, v) = channel_stats(&[1.0f64, 10.0, 3.0, 10.0], 2);
        assert_eq!(m, vec![2.0, 10.0]);
        assert_eq!(v, vec![1.0, 0.0]);
    }
}
