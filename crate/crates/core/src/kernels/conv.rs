//! NHWC convolution and 2×2/stride-2 transposed convolution.
//!
//! Convolution weights are `[kh, kw, c_in, c_out]`, which is exactly the
//! `[kh·kw·c_in, c_out]` matrix the im2col rows multiply against.
//! Transposed-convolution weights are `[c_in, 2, 2, c_out]`.

use super::gemm;
use crate::parallel;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Odd square kernel with "same" padding.
    pub fn same(kernel: usize) -> Self {
        ConvGeom { kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn out_extent(&self, input: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ImageDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One sample's patch matrix `[oh·ow, k·k·c]`.
fn im2col<T: Real>(x: &[T], d: ImageDims, g: ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_extent(d.height), g.out_extent(d.width));
    let c = d.channels;
    let row_len = g.kernel * g.kernel * c;
    debug_assert_eq!(cols.len(), oh * ow * row_len);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kernel + kx) * c..][..c];
                    if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * d.width + ix as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back onto one sample's image.
fn col2im<T: Real>(cols: &[T], d: ImageDims, g: ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_extent(d.height), g.out_extent(d.width));
    let c = d.channels;
    let row_len = g.kernel * g.kernel * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= d.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= d.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * d.width + ix as usize) * c;
                    let src = &row[(ky * g.kernel + kx) * c..][..c];
                    for (o, &v) in dx[dst..dst + c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn add_bias_rows<T: Real>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    parallel::for_each_chunk(out, n * 256, |_, chunk| {
        for row in chunk.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
    });
}

/// Column sums of a `[rows, n]` buffer in row order.
pub(crate) fn sum_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    for row in x.chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    d: ImageDims,
    w: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: ConvGeom,
) -> Vec<T> {
    let (oh, ow) = (g.out_extent(d.height), g.out_extent(d.width));
    let row_len = g.kernel * g.kernel * d.channels;
    assert_eq!(w.len(), row_len * c_out, "conv weight extent");
    let mut out = vec![T::zero(); d.batch * oh * ow * c_out];
    if g.is_pointwise() {
        gemm(x, false, w, false, &mut out, d.batch * d.pixels(), d.channels, c_out, false);
    } else {
        let per_in = d.pixels() * d.channels;
        let mut cols = vec![T::zero(); oh * ow * row_len];
        for b in 0..d.batch {
            im2col(&x[b * per_in..(b + 1) * per_in], d, g, &mut cols);
            let o = &mut out[b * oh * ow * c_out..(b + 1) * oh * ow * c_out];
            gemm(&cols, false, w, false, o, oh * ow, row_len, c_out, false);
        }
    }
    if let Some(bias) = bias {
        add_bias_rows(&mut out, bias);
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` only when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    d: ImageDims,
    w: &[T],
    c_out: usize,
    g: ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (oh, ow) = (g.out_extent(d.height), g.out_extent(d.width));
    let row_len = g.kernel * g.kernel * d.channels;
    let dbias = sum_rows(dy, c_out);
    if g.is_pointwise() {
        let m = d.batch * d.pixels();
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); x.len()];
            gemm(dy, false, w, true, &mut dx, m, c_out, d.channels, false);
            dx
        });
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); w.len()];
            gemm(x, true, dy, false, &mut dw, d.channels, m, c_out, false);
            dw
        });
        return (dx, dw, dbias);
    }
    let per_in = d.pixels() * d.channels;
    let per_out = oh * ow * c_out;
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        let mut cols = vec![T::zero(); oh * ow * row_len];
        for b in 0..d.batch {
            im2col(&x[b * per_in..(b + 1) * per_in], d, g, &mut cols);
            gemm(&cols, true, &dy[b * per_out..(b + 1) * per_out], false, &mut dw, row_len, oh * ow, c_out, b > 0);
        }
        dw
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        let mut dcols = vec![T::zero(); oh * ow * row_len];
        for b in 0..d.batch {
            gemm(&dy[b * per_out..(b + 1) * per_out], false, w, true, &mut dcols, oh * ow, c_out, row_len, false);
            col2im(&dcols, d, g, &mut dx[b * per_in..(b + 1) * per_in]);
        }
        dx
    });
    (dx, dw, dbias)
}

/// `[B,H,W,Cin] -> [B,2H,2W,Cout]`, kernel 2×2, stride 2, no padding.
pub fn deconv2x2_forward<T: Real>(x: &[T], d: ImageDims, w: &[T], bias: Option<&[T]>, c_out: usize) -> Vec<T> {
    let rows = d.batch * d.pixels();
    assert_eq!(w.len(), d.channels * 4 * c_out, "deconv weight extent");
    let mut y = vec![T::zero(); rows * 4 * c_out];
    gemm(x, false, w, false, &mut y, rows, d.channels, 4 * c_out, false);
    let (oh, ow) = (2 * d.height, 2 * d.width);
    let mut out = vec![T::zero(); d.batch * oh * ow * c_out];
    let zero = vec![T::zero(); c_out];
    let bias = bias.unwrap_or(&zero);
    // one task per output row of pixels
    parallel::for_each_chunk(&mut out, ow * c_out, |r, orow| {
        let (b, oy) = (r / oh, r % oh);
        let (iy, dy) = (oy / 2, oy % 2);
        for ox in 0..ow {
            let (ix, dx) = (ox / 2, ox % 2);
            let src = &y[((b * d.height + iy) * d.width + ix) * 4 * c_out + (dy * 2 + dx) * c_out..][..c_out];
            for ((o, &v), &bb) in orow[ox * c_out..(ox + 1) * c_out].iter_mut().zip(src).zip(bias) {
                *o = v + bb;
            }
        }
    });
    out
}

pub fn deconv2x2_backward<T: Real>(
    x: &[T],
    d: ImageDims,
    w: &[T],
    c_out: usize,
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let rows = d.batch * d.pixels();
    let (oh, ow) = (2 * d.height, 2 * d.width);
    let dbias = sum_rows(dout, c_out);
    // gather the upstream gradient back into [rows, (dy,dx,o)] order
    let mut dy_mat = vec![T::zero(); rows * 4 * c_out];
    parallel::for_each_chunk(&mut dy_mat, 4 * c_out, |r, dst| {
        let b = r / d.pixels();
        let (iy, ix) = ((r % d.pixels()) / d.width, r % d.width);
        for k in 0..4 {
            let (oy, ox) = (2 * iy + k / 2, 2 * ix + k % 2);
            let src = &dout[((b * oh + oy) * ow + ox) * c_out..][..c_out];
            dst[k * c_out..(k + 1) * c_out].copy_from_slice(src);
        }
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        gemm(&dy_mat, false, w, true, &mut dx, rows, 4 * c_out, d.channels, false);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        gemm(x, true, &dy_mat, false, &mut dw, d.channels, rows, 4 * c_out, false);
        dw
    });
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(b: usize, h: usize, w: usize, c: usize) -> ImageDims {
        ImageDims { batch: b, height: h, width: w, channels: c }
    }

    fn direct_conv(x: &[f64], d: ImageDims, w: &[f64], co: usize, g: ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_extent(d.height), g.out_extent(d.width));
        let mut out = vec![0.0; d.batch * oh * ow * co];
        for b in 0..d.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut s = 0.0;
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                                    continue;
                                }
                                for c in 0..d.channels {
                                    let xv = x[((b * d.height + iy as usize) * d.width + ix as usize) * d.channels + c];
                                    let wv = w[((ky * g.kernel + kx) * d.channels + c) * co + o];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    fn scatter_deconv(x: &[f64], d: ImageDims, w: &[f64], co: usize) -> Vec<f64> {
        let (oh, ow) = (2 * d.height, 2 * d.width);
        let mut out = vec![0.0; d.batch * oh * ow * co];
        for b in 0..d.batch {
            for iy in 0..d.height {
                for ix in 0..d.width {
                    for c in 0..d.channels {
                        let xv = x[((b * d.height + iy) * d.width + ix) * d.channels + c];
                        for ky in 0..2 {
                            for kx in 0..2 {
                                for o in 0..co {
                                    out[((b * oh + 2 * iy + ky) * ow + 2 * ix + kx) * co + o] +=
                                        xv * w[((c * 2 + ky) * 2 + kx) * co + o];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 12.9898).sin() * 0.5).collect()
    }

    #[test]
    fn conv_matches_direct_oracle() {
        for &(kernel, stride) in &[(3usize, 1usize), (1, 1), (3, 2)] {
            let d = dims(2, 6, 5, 3);
            let g = ConvGeom { kernel, stride, pad: kernel / 2 };
            let x = pseudo(2 * 6 * 5 * 3, 1.0);
            let w = pseudo(kernel * kernel * 3 * 4, 2.0);
            let got = conv2d_forward(&x, d, &w, None, 4, g);
            let want = direct_conv(&x, d, &w, 4, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{kernel}x{kernel}/{stride}");
            }
        }
    }

    #[test]
    fn impulse_with_ones_kernel_gives_plateau() {
        let d = dims(1, 7, 7, 1);
        let mut x = vec![0.0f64; 49];
        x[3 * 7 + 3] = 1.0;
        let out = conv2d_forward(&x, d, &[1.0; 9], None, 1, ConvGeom::same(3));
        for y in 0..7 {
            for xx in 0..7 {
                let inside = (2..=4).contains(&y) && (2..=4).contains(&xx);
                assert_eq!(out[y * 7 + xx], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let d = dims(2, 3, 4, 5);
        let x = pseudo(2 * 3 * 4 * 5, 3.0);
        let w = pseudo(5 * 4 * 6, 4.0);
        let got = deconv2x2_forward(&x, d, &w, None, 6);
        let want = scatter_deconv(&x, d, &w, 6);
        assert_eq!(got.len(), 2 * 6 * 8 * 6);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_single_pixel_ones_kernel() {
        let out = deconv2x2_forward(&[2.5f64], dims(1, 1, 1, 1), &[1.0; 4], None, 1);
        assert_eq!(out, vec![2.5; 4]);
    }
}
