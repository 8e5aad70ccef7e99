//! Raw slice kernels behind the autodiff ops.
//!
//! Everything here works on contiguous row-major buffers. Parallel splits are
//! over output rows only (see [`crate::parallel`]).

pub mod attention;
pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod resize;

use crate::parallel;
use crate::real::Real;

/// Work (in multiply-adds) below which a gemm is not split across tasks.
const GEMM_TASK_WORK: usize = 1 << 18;

/// `c[m×n] = op(a)·op(b)` (or `+=` when `accumulate`).
///
/// `a` is `[m×k]`, or `[k×m]` when `trans_a`; `b` is `[k×n]`, or `[n×k]` when
/// `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs extent");
    assert_eq!(b.len(), k * n, "gemm rhs extent");
    assert_eq!(c.len(), m * n, "gemm out extent");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = if trans_a { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
    let rows = parallel::rows_per_task(m, k * n, GEMM_TASK_WORK);
    parallel::for_each_chunk(c, rows * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * rows;
        let mr = c_chunk.len() / n;
        let a_off = if trans_a { row0 } else { row0 * k };
        // SAFETY: views are in bounds by the extent asserts above; c_chunk is a
        // disjoint mutable slice.
        unsafe {
            T::gemm(
                mr,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Strided gemm on sub-views, single task. Used inside already-parallel loops.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len(), "gemm_strided lhs view");
    assert!(last(rsb, csb, k, n) < b.len(), "gemm_strided rhs view");
    assert!(last(rsc, csc, m, n) < c.len(), "gemm_strided out view");
    // SAFETY: the asserts above bound every element the views can touch.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_operands_match_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { transpose(&a, m, k) } else { a.clone() };
            let bb = if tb { transpose(&b, k, n) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(&aa, ta, &bb, tb, &mut c, m, k, n, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_adds_onto_existing() {
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        let mut c = [10.0f64];
        gemm(&a, false, &b, false, &mut c, 1, 2, 1, true);
        assert_eq!(c[0], 21.0);
    }
}
