//! In-memory datasets, the `FMFB` container format, and ingestion of raw
//! recordings.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "FMFB" | version u32 | count u32 | count × record
//! record = T_v u32 | H u32 | W u32 | video f32[T_v·H·W·3]
//!        | T_c u32 | current f32[T_c·3] | mask u8[H·W] | class u8
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMFB";
pub const VERSION: u32 = 1;

/// One `(video, current, mask)` triple with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T_v, H, W, 3]`.
    pub video: Tensor<f32>,
    /// `[T_c, 3]`.
    pub current: Tensor<f32>,
    /// `H·W` binary labels of the last frame (1 = anomaly).
    pub mask: Vec<u8>,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Stacked inputs and targets for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub video: Tensor<f32>,
    pub current: Tensor<f32>,
    pub masks: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(T_v, H, W, T_c)` of the first sample.
    pub fn geometry(&self) -> Option<(usize, usize, usize, usize)> {
        let s = self.samples.first()?;
        let v = s.video.shape();
        Some((v[0], v[1], v[2], s.current.shape()[0]))
    }

    /// Stacks the samples at `indices`. `frames` and `current_len` keep only the
    /// trailing frames and samples of each input.
    pub fn batch(&self, indices: &[usize], frames: Option<usize>, current_len: Option<usize>) -> Result<Batch> {
        let first = indices.first().map(|&i| &self.samples[i]).ok_or_else(|| Error::EmptyInput("batch".into()))?;
        let vshape = first.video.shape().to_vec();
        let tc_full = first.current.shape()[0];
        let tv = frames.unwrap_or(vshape[0]);
        let tc = current_len.unwrap_or(tc_full);
        if tv == 0 || tv > vshape[0] || tc == 0 || tc > tc_full {
            return Err(Error::Geometry(format!(
                "cannot keep {tv} of {} frames and {tc} of {tc_full} current samples",
                vshape[0]
            )));
        }
        let frame_len = vshape[1] * vshape[2] * vshape[3];
        let (mut video, mut current, mut masks, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            let s = &self.samples[i];
            if s.video.shape() != vshape.as_slice() || s.current.shape()[0] != tc_full {
                return Err(Error::shape("batch", "samples in a batch must share their geometry"));
            }
            video.extend_from_slice(&s.video.data()[(vshape[0] - tv) * frame_len..]);
            current.extend_from_slice(&s.current.data()[(tc_full - tc) * 3..]);
            masks.extend_from_slice(&s.mask);
            labels.push(s.label);
        }
        let b = indices.len();
        Ok(Batch {
            video: Tensor::new([b, tv, vshape[1], vshape[2], vshape[3]], video)?,
            current: Tensor::new([b, tc, 3], current)?,
            masks,
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, to_u32(self.samples.len())?)?;
        for s in &self.samples {
            let v = s.video.shape();
            if v.len() != 4 || v[3] != 3 || s.current.shape().len() != 2 || s.current.shape()[1] != 3 {
                return Err(Error::format("FMFB", "samples must be [T,H,W,3] video with [T_c,3] current"));
            }
            if s.mask.len() != v[1] * v[2] {
                return Err(Error::format("FMFB", "mask extent does not match the frame"));
            }
            for &e in &v[..3] {
                put_u32(w, to_u32(e)?)?;
            }
            put_f32s(w, s.video.data())?;
            put_u32(w, to_u32(s.current.shape()[0])?)?;
            put_f32s(w, s.current.data())?;
            w.write_all(&s.mask)?;
            w.write_all(&[s.label])?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("FMFB", "bad magic"));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::format("FMFB", format!("unsupported version {version}")));
        }
        let count = get_u32(r)? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (t, h, w) = (get_u32(r)? as usize, get_u32(r)? as usize, get_u32(r)? as usize);
            let video = Tensor::new([t, h, w, 3], get_f32s(r, t * h * w * 3)?)
                .map_err(|e| Error::format("FMFB", e.to_string()))?;
            let tc = get_u32(r)? as usize;
            let current =
                Tensor::new([tc, 3], get_f32s(r, tc * 3)?).map_err(|e| Error::format("FMFB", e.to_string()))?;
            let mut mask = vec![0u8; h * w];
            r.read_exact(&mut mask)?;
            let mut label = [0u8];
            r.read_exact(&mut label)?;
            samples.push(Sample { video, current, mask, label: label[0] });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("FMFB", "trailing bytes after the last record"));
        }
        Ok(Dataset { samples })
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format("FMFB", format!("{n} does not fit in u32")))
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn put_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Inclusive-exclusive crop rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Normalization statistics, usually measured on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
    pub current_mean: [f32; 3],
    pub current_std: [f32; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { pixel_mean: [0.0; 3], pixel_std: [1.0; 3], current_mean: [0.0; 3], current_std: [1.0; 3] }
    }

    /// Per-phase mean and population standard deviation of a `[T, 3]` current.
    pub fn current_stats(current: &[f32]) -> ([f32; 3], [f32; 3]) {
        let n = (current.len() / 3).max(1) as f64;
        let mut mean = [0.0f64; 3];
        for row in current.chunks(3) {
            for k in 0..3 {
                mean[k] += row[k] as f64 / n;
            }
        }
        let mut var = [0.0f64; 3];
        for row in current.chunks(3) {
            for k in 0..3 {
                var[k] += (row[k] as f64 - mean[k]).powi(2) / n;
            }
        }
        (mean.map(|m| m as f32), var.map(|v| v.sqrt() as f32))
    }
}

/// Describes a raw recording: 8-bit RGB frames `[frames, height, width, 3]`
/// and little-endian f32 current `[current_len, 3]` covering the same period.
#[derive(Clone, Debug)]
pub struct RawRecording {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    pub crop: Crop,
    pub stats: NormStats,
    /// Frames per output clip and current samples per output window.
    pub clip_frames: usize,
    pub clip_current: usize,
    /// Frame step between consecutive clips.
    pub stride: usize,
}

/// Cuts a raw recording into samples. Pixels are scaled to `[0, 1]`, cropped,
/// then standardized per channel; current is z-scored per phase. The current
/// window of each clip ends at the current sample simultaneous with the clip's
/// last frame. `masks`, when given, supplies one `H'·W'` mask per frame of the
/// recording (after cropping); otherwise masks are empty.
pub fn ingest_raw(video: &[u8], current: &[f32], rec: &RawRecording, masks: Option<&[Vec<u8>]>) -> Result<Vec<Sample>> {
    let (t, h, w) = (rec.frames, rec.height, rec.width);
    if video.len() != t * h * w * 3 {
        return Err(Error::Geometry(format!("video has {} bytes, declared {t}x{h}x{w}x3", video.len())));
    }
    if current.len() != rec.current_len * 3 {
        return Err(Error::Geometry(format!("current has {} values, declared {}x3", current.len(), rec.current_len)));
    }
    let c = rec.crop;
    if c.x0 >= c.x1 || c.y0 >= c.y1 || c.x1 > w || c.y1 > h {
        return Err(Error::Geometry(format!("crop {c:?} outside a {h}x{w} frame")));
    }
    if rec.clip_frames == 0 || rec.clip_frames > t || rec.clip_current == 0 || rec.stride == 0 {
        return Err(Error::Geometry("clip length and stride must be positive and fit the recording".into()));
    }
    let (ch, cw) = (c.y1 - c.y0, c.x1 - c.x0);
    if let Some(m) = masks {
        if m.len() != t || m.iter().any(|m| m.len() != ch * cw) {
            return Err(Error::Geometry(format!("expected {t} masks of {ch}x{cw}")));
        }
    }
    let st = &rec.stats;
    let mut frames = Vec::with_capacity(t * ch * cw * 3);
    for f in 0..t {
        for y in c.y0..c.y1 {
            for x in c.x0..c.x1 {
                for k in 0..3 {
                    let v = video[((f * h + y) * w + x) * 3 + k] as f32 / 255.0;
                    frames.push((v - st.pixel_mean[k]) / st.pixel_std[k]);
                }
            }
        }
    }
    let cur: Vec<f32> =
        current.iter().enumerate().map(|(i, &v)| (v - st.current_mean[i % 3]) / st.current_std[i % 3]).collect();
    let frame_len = ch * cw * 3;
    let mut out = Vec::new();
    let mut start = 0;
    while start + rec.clip_frames <= t {
        let last = start + rec.clip_frames - 1;
        // current sample simultaneous with the end of frame `last`
        let end = ((last + 1) * rec.current_len).div_ceil(t);
        if end >= rec.clip_current {
            let v = frames[start * frame_len..(last + 1) * frame_len].to_vec();
            let cw_data = cur[(end - rec.clip_current) * 3..end * 3].to_vec();
            let mask = masks.map_or_else(|| vec![0; ch * cw], |m| m[last].iter().map(|&b| u8::from(b != 0)).collect());
            let label = u8::from(mask.iter().any(|&b| b != 0));
            out.push(Sample {
                video: Tensor::new([rec.clip_frames, ch, cw, 3], v)?,
                current: Tensor::new([rec.clip_current, 3], cw_data)?,
                mask,
                label,
            });
        }
        start += rec.stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize, h: usize, w: usize, tc: usize, seed: f32) -> Sample {
        Sample {
            video: Tensor::from_fn([t, h, w, 3], |i| i as f32 * 0.001 + seed),
            current: Tensor::from_fn([tc, 3], |i| i as f32 - seed),
            mask: (0..h * w).map(|i| (i % 3 == 0) as u8).collect(),
            label: 1,
        }
    }

    #[test]
    fn container_round_trip() {
        let ds = Dataset { samples: vec![sample(2, 3, 4, 5, 0.5), sample(2, 3, 4, 5, 1.5)] };
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FMFB");
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), ds);
        buf.push(0);
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn batch_keeps_trailing_frames() {
        let ds = Dataset { samples: vec![sample(4, 2, 2, 6, 0.0)] };
        let b = ds.batch(&[0], Some(2), Some(3)).unwrap();
        assert_eq!(b.video.shape(), &[1, 2, 2, 2, 3]);
        assert_eq!(b.video.data()[0], ds.samples[0].video.at(&[2, 0, 0, 0]));
        assert_eq!(b.current.data()[0], ds.samples[0].current.at(&[3, 0]));
        assert!(ds.batch(&[0], Some(5), None).is_err());
    }

    fn raw_recording(crop: Crop) -> RawRecording {
        RawRecording {
            frames: 4,
            height: 32,
            width: 32,
            current_len: 8,
            crop,
            stats: NormStats::identity(),
            clip_frames: 2,
            clip_current: 4,
            stride: 2,
        }
    }

    #[test]
    fn ingest_crops_and_scales() {
        let video: Vec<u8> = (0..4 * 32 * 32 * 3).map(|i| (i % 256) as u8).collect();
        let current: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let rec = raw_recording(Crop { x0: 8, y0: 8, x1: 24, y1: 24 });
        let out = ingest_raw(&video, &current, &rec, None).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].video.shape(), &[2, 16, 16, 3]);
        let expect = video[((8 * 32) + 8) * 3] as f32 / 255.0;
        assert_eq!(out[0].video.data()[0], expect);
        // clip of frames 2..=3 ends with the recording, so with the last sample
        assert_eq!(out[1].current.data().last().copied(), Some(23.0));
        assert!(ingest_raw(&video, &current, &raw_recording(Crop { x0: 0, y0: 0, x1: 33, y1: 8 }), None).is_err());
        assert!(ingest_raw(&video[1..], &current, &rec, None).is_err());
    }

    #[test]
    fn z_scored_current_has_unit_stats() {
        let current: Vec<f32> = (0..300).map(|i| ((i * 37) % 101) as f32 * 0.3 + (i % 3) as f32).collect();
        let (mean, std) = NormStats::current_stats(&current);
        let rec = RawRecording {
            frames: 2,
            height: 2,
            width: 2,
            current_len: 100,
            crop: Crop { x0: 0, y0: 0, x1: 2, y1: 2 },
            stats: NormStats { current_mean: mean, current_std: std, ..NormStats::identity() },
            clip_frames: 2,
            clip_current: 100,
            stride: 1,
        };
        let out = ingest_raw(&[0u8; 24], &current, &rec, None).unwrap();
        let (m2, s2) = NormStats::current_stats(out[0].current.data());
        for k in 0..3 {
            assert!(m2[k].abs() < 1e-4 && (s2[k] - 1.0).abs() < 1e-4);
        }
    }
}
