//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use crate::parallel;
use crate::real::Real;

/// Source taps `(lo, hi, weight_hi)` for each output coordinate.
pub fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear resampling along axis 1 of a `[outer, n_in, inner]` buffer.
pub fn resize_axis<T: Real>(x: &[T], outer: usize, n_in: usize, inner: usize, n_out: usize) -> Vec<T> {
    let tp = taps(n_in, n_out);
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        for (j, &(lo, hi, w)) in tp.iter().enumerate() {
            let w = T::lit(w);
            let dst = &mut out[(o * n_out + j) * inner..][..inner];
            let a = &x[(o * n_in + lo) * inner..][..inner];
            let b = &x[(o * n_in + hi) * inner..][..inner];
            for k in 0..inner {
                dst[k] = a[k] * (T::one() - w) + b[k] * w;
            }
        }
    }
    out
}

/// `[B,H,W,C] -> [B,OH,OW,C]`.
pub fn bilinear_forward<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![T::zero(); b * oh * ow * c];
    parallel::for_each_chunk(&mut out, ow * c, |r, row| {
        let (bi, oy) = (r / oh, r % oh);
        let (y0, y1, wy) = ty[oy];
        let wy = T::lit(wy);
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let wx = T::lit(wx);
            let px = |yy: usize, xx: usize| &x[((bi * h + yy) * w + xx) * c..][..c];
            let (a, bb, cc, dd) = (px(y0, x0), px(y0, x1), px(y1, x0), px(y1, x1));
            for k in 0..c {
                let top = a[k] * (T::one() - wx) + bb[k] * wx;
                let bot = cc[k] * (T::one() - wx) + dd[k] * wx;
                row[ox * c + k] = top * (T::one() - wy) + bot * wy;
            }
        }
    });
    out
}

pub fn bilinear_backward<T: Real>(dy: &[T], b: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![T::zero(); b * h * w * c];
    // one task per sample keeps the scatter order fixed
    parallel::for_each_chunk(&mut dx, h * w * c, |bi, dxs| {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::lit(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::lit(wx);
                let g = &dy[((bi * oh + oy) * ow + ox) * c..][..c];
                for (yy, xx, wt) in [
                    (y0, x0, (T::one() - wy) * (T::one() - wx)),
                    (y0, x1, (T::one() - wy) * wx),
                    (y1, x0, wy * (T::one() - wx)),
                    (y1, x1, wy * wx),
                ] {
                    let dst = &mut dxs[(yy * w + xx) * c..][..c];
                    for k in 0..c {
                        dst[k] += g[k] * wt;
                    }
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_exact_copy() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 2).map(|i| i as f64).collect();
        assert_eq!(bilinear_forward(&x, 2, 3, 4, 2, 3, 4), x);
    }

    #[test]
    fn two_by_two_to_three_by_three_center() {
        let x = [0.0f64, 1.0, 1.0, 2.0];
        let out = bilinear_forward(&x, 1, 2, 2, 1, 3, 3);
        assert!((out[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let (b, h, w, c, oh, ow) = (1, 3, 5, 2, 4, 7);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| (i as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..b * oh * ow * c).map(|i| (i as f64 * 0.7).cos()).collect();
        let y = bilinear_forward(&x, b, h, w, c, oh, ow);
        let dx = bilinear_backward(&g, b, h, w, c, oh, ow);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
