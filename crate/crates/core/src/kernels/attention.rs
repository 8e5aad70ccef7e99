//! Multi-head scaled dot-product attention.
//!
//! Queries are `[B, Nq, D]`, keys and values `[B, Nk, D]`. Head `h` owns
//! columns `h·D/H .. (h+1)·D/H`. Attention weights are kept as
//! `[B, H, Nq, Nk]` for the backward pass and for inspection.

use super::gemm_strided;
use crate::parallel;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns `(output [B,Nq,D], probs [B,H,Nq,Nk])`.
pub fn forward<T: Real>(q: &[T], k: &[T], v: &[T], a: AttnDims, scale: T) -> (Vec<T>, Vec<T>) {
    let (d, dh, nq, nk) = (a.dim, a.head_dim(), a.queries, a.keys);
    let mut probs = vec![T::zero(); a.batch * a.heads * nq * nk];
    let mut heads_out = vec![T::zero(); a.batch * a.heads * nq * dh];
    parallel::for_each_chunk2(&mut probs, nq * nk, &mut heads_out, nq * dh, |bh, p, o| {
        let (b, h) = (bh / a.heads, bh % a.heads);
        let qv = &q[b * nq * d + h * dh..];
        let kv = &k[b * nk * d + h * dh..];
        let vv = &v[b * nk * d + h * dh..];
        gemm_strided(nq, dh, nk, scale, qv, d, 1, kv, 1, d, T::zero(), p, nk, 1);
        for row in p.chunks_mut(nk) {
            softmax_row(row);
        }
        gemm_strided(nq, nk, dh, T::one(), p, nk, 1, vv, d, 1, T::zero(), o, dh, 1);
    });
    let mut out = vec![T::zero(); a.batch * nq * d];
    parallel::for_each_chunk(&mut out, d, |r, row| {
        let (b, i) = (r / nq, r % nq);
        for h in 0..a.heads {
            let src = &heads_out[((b * a.heads + h) * nq + i) * dh..][..dh];
            row[h * dh..(h + 1) * dh].copy_from_slice(src);
        }
    });
    (out, probs)
}

/// Returns `(dq, dk, dv)` in the input layouts.
pub fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    a: AttnDims,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, dh, nq, nk) = (a.dim, a.head_dim(), a.queries, a.keys);
    // per (b,h) scratch: dq [nq,dh] | dk [nk,dh] | dv [nk,dh] | ds [nq,nk]
    let per = nq * dh + 2 * nk * dh + nq * nk;
    let mut scratch = vec![T::zero(); a.batch * a.heads * per];
    parallel::for_each_chunk(&mut scratch, per, |bh, s| {
        let (b, h) = (bh / a.heads, bh % a.heads);
        let (dq, rest) = s.split_at_mut(nq * dh);
        let (dk, rest) = rest.split_at_mut(nk * dh);
        let (dv, ds) = rest.split_at_mut(nk * dh);
        let p = &probs[bh * nq * nk..(bh + 1) * nq * nk];
        let qv = &q[b * nq * d + h * dh..];
        let kv = &k[b * nk * d + h * dh..];
        let vv = &v[b * nk * d + h * dh..];
        let go = &dout[b * nq * d + h * dh..];
        // dV = Pᵀ dO
        gemm_strided(nk, nq, dh, T::one(), p, 1, nk, go, d, 1, T::zero(), dv, dh, 1);
        // dP = dO Vᵀ
        gemm_strided(nq, dh, nk, T::one(), go, d, 1, vv, 1, d, T::zero(), ds, nk, 1);
        for (dsr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
            let dot = dsr.iter().zip(pr).fold(T::zero(), |acc, (&g, &pp)| acc + g * pp);
            for (g, &pp) in dsr.iter_mut().zip(pr) {
                *g = pp * (*g - dot);
            }
        }
        gemm_strided(nq, nk, dh, scale, ds, nk, 1, kv, d, 1, T::zero(), dq, dh, 1);
        gemm_strided(nk, nq, dh, scale, ds, 1, nk, qv, d, 1, T::zero(), dk, dh, 1);
    });
    let gather = |n: usize, offset: usize| {
        let mut out = vec![T::zero(); a.batch * n * d];
        parallel::for_each_chunk(&mut out, d, |r, row| {
            let (b, i) = (r / n, r % n);
            for h in 0..a.heads {
                let src = &scratch[(b * a.heads + h) * per + offset + i * dh..][..dh];
                row[h * dh..(h + 1) * dh].copy_from_slice(src);
            }
        });
        out
    };
    let dq = gather(nq, 0);
    let dk = gather(nk, nq * dh);
    let dv = gather(nk, nq * dh + nk * dh);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(q: &[f64], k: &[f64], v: &[f64], a: AttnDims, scale: f64) -> Vec<f64> {
        let (d, dh) = (a.dim, a.head_dim());
        let mut out = vec![0.0; a.batch * a.queries * d];
        for b in 0..a.batch {
            for h in 0..a.heads {
                for i in 0..a.queries {
                    let scores: Vec<f64> = (0..a.keys)
                        .map(|j| {
                            (0..dh)
                                .map(|t| q[(b * a.queries + i) * d + h * dh + t] * k[(b * a.keys + j) * d + h * dh + t])
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for t in 0..dh {
                        out[(b * a.queries + i) * d + h * dh + t] =
                            (0..a.keys).map(|j| e[j] / z * v[(b * a.keys + j) * d + h * dh + t]).sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_per_head_loop_oracle() {
        let a = AttnDims { batch: 2, queries: 5, keys: 3, dim: 6, heads: 3 };
        let q: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..2 * 3 * 6).map(|i| (i as f64 * 1.3).cos()).collect();
        let v: Vec<f64> = (0..2 * 3 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
        let (out, probs) = forward(&q, &k, &v, a, 0.5);
        let want = naive(&q, &k, &v, a, 0.5);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let mut row = [1000.0f64, 0.0];
        softmax_row(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-12 && row[1] < 1e-300 + 1e-12);
    }
}
