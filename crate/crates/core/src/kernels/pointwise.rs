//! Elementwise activations and row softmax.

use super::attention::softmax_row;
use crate::parallel;
use crate::real::Real;

/// `sqrt(2/π)` as used by the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;
const TASK: usize = 1 << 15;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(GELU_CUBIC) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn map<T: Real>(x: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    parallel::for_each_chunk(&mut out, TASK, |c, o| {
        for (i, v) in o.iter_mut().enumerate() {
            *v = f(x[c * TASK + i]);
        }
    });
    out
}

/// `out[i] = f(x[i], g[i])`.
pub fn zip_map<T: Real>(x: &[T], g: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    parallel::for_each_chunk(&mut out, TASK, |c, o| {
        for (i, v) in o.iter_mut().enumerate() {
            let k = c * TASK + i;
            *v = f(x[k], g[k]);
        }
    });
    out
}

pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let per = parallel::rows_per_task(x.len() / n, n, TASK);
    parallel::for_each_chunk(&mut out, per * n, |_, c| {
        for row in c.chunks_mut(n) {
            softmax_row(row);
        }
    });
    out
}

pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let per = parallel::rows_per_task(y.len() / n, n, TASK);
    parallel::for_each_chunk(&mut dx, per * n, |c, dxc| {
        for (r, dr) in dxc.chunks_mut(n).enumerate() {
            let off = (c * per + r) * n;
            let (yr, gr) = (&y[off..off + n], &dy[off..off + n]);
            let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
            for j in 0..n {
                dr[j] = yr[j] * (gr[j] - dot);
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        let x = 1.0f64;
        let want = 0.5 * x * (1.0 + (0.7978845608 * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu(1.0f64) - want).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}
