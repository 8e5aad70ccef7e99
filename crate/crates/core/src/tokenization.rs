//! Video and current tokenization with class tokens and learnable positional
//! embeddings.
//!
//! Video tokens are emitted as `[class, dilated segment, standard segment]`,
//! each segment in `(t, h, w)` row-major order. A patch flattens to
//! `(dt, dh, dw, c)` row-major. Dilated patches sample spatially at stride `d`
//! from a footprint of `(h_v - 1)·d + 1` pixels; time is never dilated. Border
//! pixels not covered by a whole patch are dropped.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::params::{Graph, ParamId, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub dilation: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry { t: 2, h: 8, w: 8, dilation: 2 }
    }
}

impl PatchGeometry {
    pub fn footprint_h(&self) -> usize {
        (self.h - 1) * self.dilation + 1
    }

    pub fn footprint_w(&self) -> usize {
        (self.w - 1) * self.dilation + 1
    }

    /// Length of a flattened patch vector for `channels` input channels.
    pub fn patch_len(&self, channels: usize) -> usize {
        self.t * self.h * self.w * channels
    }
}

/// Patch counts along each axis for both scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub n_hd: usize,
    pub n_wd: usize,
}

impl Grid {
    pub fn standard_tokens(&self) -> usize {
        self.n_t * self.n_h * self.n_w
    }

    pub fn dilated_tokens(&self) -> usize {
        self.n_t * self.n_hd * self.n_wd
    }

    /// `N_v` including the class token.
    pub fn video_tokens(&self, dilated: bool) -> usize {
        1 + self.standard_tokens() + if dilated { self.dilated_tokens() } else { 0 }
    }
}

pub fn compute_grid(frames: usize, height: usize, width: usize, geom: &PatchGeometry) -> Result<Grid> {
    if geom.t == 0 || geom.h == 0 || geom.w == 0 || geom.dilation == 0 {
        return Err(Error::Geometry(format!("patch extents and dilation must be positive: {geom:?}")));
    }
    let grid = Grid {
        n_t: frames / geom.t,
        n_h: height / geom.h,
        n_w: width / geom.w,
        n_hd: height / geom.footprint_h(),
        n_wd: width / geom.footprint_w(),
    };
    if [grid.n_t, grid.n_h, grid.n_w, grid.n_hd, grid.n_wd].contains(&0) {
        return Err(Error::InputTooSmall(format!(
            "{frames}x{height}x{width} clip yields an empty patch grid {grid:?} for {geom:?}"
        )));
    }
    Ok(grid)
}

/// Row layout of a video token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoLayout {
    pub grid: Grid,
    pub dilated: bool,
}

impl VideoLayout {
    pub fn tokens(&self) -> usize {
        self.grid.video_tokens(self.dilated)
    }

    pub fn dilated_rows(&self) -> Range<usize> {
        let n = if self.dilated { self.grid.dilated_tokens() } else { 0 };
        1..1 + n
    }

    pub fn standard_rows(&self) -> Range<usize> {
        let start = self.dilated_rows().end;
        start..start + self.grid.standard_tokens()
    }
}

/// Extents of one clip, `[T, H, W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn gather<T: Real>(clip: &[T], c: ClipDims, origin: (usize, usize, usize), geom: &PatchGeometry, step: usize, out: &mut Vec<T>) {
    let (t0, h0, w0) = origin;
    for dt in 0..geom.t {
        for dh in 0..geom.h {
            let row = ((t0 + dt) * c.height + h0 + dh * step) * c.width;
            for dw in 0..geom.w {
                let px = (row + w0 + dw * step) * c.channels;
                out.extend_from_slice(&clip[px..px + c.channels]);
            }
        }
    }
}

fn check_origin(c: ClipDims, origin: (usize, usize, usize), geom: &PatchGeometry, step: usize) -> Result<()> {
    let (t0, h0, w0) = origin;
    let fits = t0 + geom.t <= c.frames
        && h0 + (geom.h - 1) * step < c.height
        && w0 + (geom.w - 1) * step < c.width;
    if !fits {
        return Err(Error::Geometry(format!("patch at {origin:?} with step {step} overflows {c:?}")));
    }
    Ok(())
}

/// The contiguous patch with corner `(t0, h0, w0)` of one `[T, H, W, C]` clip.
pub fn extract_patch<T: Real>(clip: &Tensor<T>, t0: usize, h0: usize, w0: usize, geom: &PatchGeometry) -> Result<Vec<T>> {
    let c = clip_dims(clip.shape())?;
    check_origin(c, (t0, h0, w0), geom, 1)?;
    let mut out = Vec::with_capacity(geom.patch_len(c.channels));
    gather(clip.data(), c, (t0, h0, w0), geom, 1, &mut out);
    Ok(out)
}

/// The dilated patch with footprint corner `(t0, h0, w0)`: spatial elements
/// `h0 + a·d`, `w0 + b·d`, all frames `t0..t0+t_v`.
pub fn extract_dilated_patch<T: Real>(
    clip: &Tensor<T>,
    t0: usize,
    h0: usize,
    w0: usize,
    geom: &PatchGeometry,
) -> Result<Vec<T>> {
    let c = clip_dims(clip.shape())?;
    check_origin(c, (t0, h0, w0), geom, geom.dilation)?;
    let mut out = Vec::with_capacity(geom.patch_len(c.channels));
    gather(clip.data(), c, (t0, h0, w0), geom, geom.dilation, &mut out);
    Ok(out)
}

fn clip_dims(shape: &[usize]) -> Result<ClipDims> {
    match *shape {
        [frames, height, width, channels] => Ok(ClipDims { frames, height, width, channels }),
        _ => Err(Error::shape("video clip", format!("expected [T,H,W,C], got {shape:?}"))),
    }
}

/// Flattened patches of a `[B, T, H, W, C]` batch in token order (dilated
/// segment first when enabled), as `[B, N_v - 1, t_v·h_v·w_v·C]`.
pub fn patch_matrix<T: Real>(batch: &Tensor<T>, geom: &PatchGeometry, layout: &VideoLayout) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 5 {
        return Err(Error::shape("video batch", format!("expected [B,T,H,W,C], got {s:?}")));
    }
    let c = clip_dims(&s[1..])?;
    let g = layout.grid;
    let per_clip = c.frames * c.height * c.width * c.channels;
    let rows = layout.tokens() - 1;
    let plen = geom.patch_len(c.channels);
    let mut out = Vec::with_capacity(s[0] * rows * plen);
    let (fh, fw) = (geom.footprint_h(), geom.footprint_w());
    for clip in batch.data().chunks(per_clip) {
        if layout.dilated {
            for t in 0..g.n_t {
                for i in 0..g.n_hd {
                    for j in 0..g.n_wd {
                        gather(clip, c, (t * geom.t, i * fh, j * fw), geom, geom.dilation, &mut out);
                    }
                }
            }
        }
        for t in 0..g.n_t {
            for i in 0..g.n_h {
                for j in 0..g.n_w {
                    gather(clip, c, (t * geom.t, i * geom.h, j * geom.w), geom, 1, &mut out);
                }
            }
        }
    }
    Tensor::new([s[0], rows, plen], out)
}

/// Resamples a video positional embedding `[N, D]` from one layout to another.
/// Each scale's spatial grid is bilinearly resized per temporal slice, then the
/// temporal axis is linearly resampled; the class row is kept.
pub fn interpolate_video_pos<T: Real>(tape: &mut Tape<T>, pos: Var, from: &VideoLayout, to: &VideoLayout) -> Result<Var> {
    if from == to {
        return Ok(pos);
    }
    if from.dilated != to.dilated {
        return Err(Error::Contract("positional interpolation cannot toggle the dilated segment".into()));
    }
    let d = tape.shape(pos)[1];
    let mut parts = vec![tape.narrow(pos, 0, 0, 1)?];
    let mut scales = Vec::new();
    if from.dilated {
        scales.push((from.dilated_rows(), (from.grid.n_hd, from.grid.n_wd), (to.grid.n_hd, to.grid.n_wd)));
    }
    scales.push((from.standard_rows(), (from.grid.n_h, from.grid.n_w), (to.grid.n_h, to.grid.n_w)));
    for (rows, (h, w), (h2, w2)) in scales {
        let seg = tape.narrow(pos, 0, rows.start, rows.len())?;
        let mut x = tape.reshape(seg, &[from.grid.n_t, h, w, d])?;
        if (h, w) != (h2, w2) {
            x = tape.resize_bilinear(x, h2, w2)?;
        }
        if from.grid.n_t != to.grid.n_t {
            x = tape.reshape(x, &[1, from.grid.n_t, h2 * w2, d])?;
            x = tape.resize_bilinear(x, to.grid.n_t, h2 * w2)?;
        }
        parts.push(tape.reshape(x, &[to.grid.n_t * h2 * w2, d])?);
    }
    tape.concat(&parts, 0)
}

/// Linearly resamples a current positional embedding `[T_c + 1, D]` to a new
/// sequence length, keeping the class row.
pub fn interpolate_current_pos<T: Real>(tape: &mut Tape<T>, pos: Var, new_len: usize) -> Result<Var> {
    let (n, d) = (tape.shape(pos)[0], tape.shape(pos)[1]);
    if new_len == 0 {
        return Err(Error::EmptyInput("current sequence".into()));
    }
    if n - 1 == new_len {
        return Ok(pos);
    }
    let cls = tape.narrow(pos, 0, 0, 1)?;
    let seq = tape.narrow(pos, 0, 1, n - 1)?;
    let x = tape.reshape(seq, &[1, n - 1, 1, d])?;
    let x = tape.resize_bilinear(x, new_len, 1)?;
    let x = tape.reshape(x, &[new_len, d])?;
    tape.concat(&[cls, x], 0)
}

/// Tensor-level wrapper around [`interpolate_video_pos`].
pub fn resize_video_pos<T: Real>(pos: &Tensor<T>, from: &VideoLayout, to: &VideoLayout) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(pos.clone());
    let out = interpolate_video_pos(&mut tape, p, from, to)?;
    Ok(tape.value(out).clone())
}

/// Tensor-level wrapper around [`interpolate_current_pos`].
pub fn resize_current_pos<T: Real>(pos: &Tensor<T>, new_len: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(pos.clone());
    let out = interpolate_current_pos(&mut tape, p, new_len)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct VideoTokenizer {
    pub proj: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub geom: PatchGeometry,
    pub channels: usize,
    /// Layout the positional embedding was built for.
    pub layout: VideoLayout,
}

impl VideoTokenizer {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        geom: PatchGeometry,
        channels: usize,
        layout: VideoLayout,
        dim: usize,
    ) -> Result<Self> {
        b.scope("tok_v", |b| {
            Ok(VideoTokenizer {
                proj: b.normal("proj", &[geom.patch_len(channels), dim], ParamKind::Weight)?,
                cls: b.normal("cls", &[1, dim], ParamKind::Embedding)?,
                pos: b.normal("pos", &[layout.tokens(), dim], ParamKind::Embedding)?,
                geom,
                channels,
                layout,
            })
        })
    }

    pub fn layout_for(&self, frames: usize, height: usize, width: usize) -> Result<VideoLayout> {
        Ok(VideoLayout { grid: compute_grid(frames, height, width, &self.geom)?, dilated: self.layout.dilated })
    }

    /// `[B, T, H, W, C]` clips to `[B, N_v, D]` tokens.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, clips: &Tensor<T>) -> Result<(Var, VideoLayout)> {
        let s = clips.shape();
        if s.len() != 5 || s[4] != self.channels {
            return Err(Error::shape("tokenize_video", format!("expected [B,T,H,W,{}], got {s:?}", self.channels)));
        }
        let layout = self.layout_for(s[1], s[2], s[3])?;
        let patches = g.input(patch_matrix(clips, &self.geom, &layout)?);
        let proj = g.p(self.proj);
        let tokens = g.tape.matmul(patches, proj)?;
        let cls = g.p(self.cls);
        let cls = g.tape.repeat_batch(cls, s[0])?;
        let z = g.tape.concat(&[cls, tokens], 1)?;
        let pos = g.p(self.pos);
        let pos = interpolate_video_pos(&mut g.tape, pos, &self.layout, &layout)?;
        Ok((g.tape.add_suffix(z, pos)?, layout))
    }
}

#[derive(Clone, Debug)]
pub struct CurrentTokenizer {
    pub proj: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub phases: usize,
    pub len: usize,
}

impl CurrentTokenizer {
    pub fn new<T: Real>(b: &mut Builder<T>, phases: usize, len: usize, dim: usize) -> Result<Self> {
        b.scope("tok_c", |b| {
            Ok(CurrentTokenizer {
                proj: b.normal("proj", &[phases, dim], ParamKind::Weight)?,
                cls: b.normal("cls", &[1, dim], ParamKind::Embedding)?,
                pos: b.normal("pos", &[len + 1, dim], ParamKind::Embedding)?,
                phases,
                len,
            })
        })
    }

    /// `[B, T_c, 3]` to `[B, T_c + 1, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, current: &Tensor<T>) -> Result<Var> {
        let s = current.shape();
        if s.len() != 3 || s[2] != self.phases {
            return Err(Error::shape("tokenize_current", format!("expected [B,T_c,{}], got {s:?}", self.phases)));
        }
        let x = g.input(current.clone());
        let proj = g.p(self.proj);
        let tokens = g.tape.matmul(x, proj)?;
        let cls = g.p(self.cls);
        let cls = g.tape.repeat_batch(cls, s[0])?;
        let z = g.tape.concat(&[cls, tokens], 1)?;
        let pos = g.p(self.pos);
        let pos = interpolate_current_pos(&mut g.tape, pos, s[1])?;
        g.tape.add_suffix(z, pos)
    }
}
