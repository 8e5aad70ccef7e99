//! Semi-automatic labeling: keyframe boxes are interpolated across an episode,
//! rasterized, then refined against the video frame by a color-weighted median.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Onset,
    Apex,
    Offset,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onset" => Ok(Role::Onset),
            "apex" => Ok(Role::Apex),
            "offset" => Ok(Role::Offset),
            _ => Err(Error::Config(format!("unknown keyframe role `{s}` (onset, apex or offset)"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Onset => "onset",
            Role::Apex => "apex",
            Role::Offset => "offset",
        })
    }
}

/// Box with inclusive corners. Interpolated boxes carry fractional corners
/// until they are rasterized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let l = |p: f64, q: f64| p + (q - p) * t;
        BBox::new(l(a.x0, b.x0), l(a.y0, b.y0), l(a.x1, b.x1), l(a.y1, b.y1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    pub role: Role,
    pub bbox: BBox,
}

impl Keyframe {
    /// Checks corner order and that the box lies inside a `width × height` frame.
    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        let b = &self.bbox;
        let ordered = b.x0 <= b.x1 && b.y0 <= b.y1 && b.x0 >= 0.0 && b.y0 >= 0.0;
        if !ordered || b.x1 >= width as f64 || b.y1 >= height as f64 {
            return Err(Error::Geometry(format!("keyframe {} box {b:?} is not inside a {width}x{height} frame", self.frame)));
        }
        Ok(())
    }
}

/// Parses `frame_idx role x0 y0 x1 y1` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_keyframes(text: &str) -> Result<Vec<Keyframe>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("keyframe file", format!("line {}: {d}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(&format!("expected 6 fields, found {}", f.len())));
        }
        let frame = f[0].parse().map_err(|_| bad("frame index is not an integer"))?;
        let role = f[1].parse().map_err(|e: Error| bad(&e.to_string()))?;
        let c: Vec<usize> = f[2..].iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("box corners must be integers"))?;
        let bbox = BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64);
        if c[0] > c[2] || c[1] > c[3] {
            return Err(bad("box corners are out of order"));
        }
        out.push(Keyframe { frame, role, bbox });
    }
    Ok(out)
}

/// Per-frame boxes for `frames` frames. Between consecutive keyframes every
/// corner is interpolated linearly; frames before the first or after the last
/// keyframe get `None`.
pub fn propagate(keyframes: &[Keyframe], frames: usize) -> Result<Vec<Option<BBox>>> {
    if keyframes.len() < 2 {
        return Err(Error::Contract("propagation needs at least two keyframes".into()));
    }
    let mut keys = keyframes.to_vec();
    keys.sort_by_key(|k| k.frame);
    if let Some(w) = keys.windows(2).find(|w| w[0].frame == w[1].frame) {
        return Err(Error::Contract(format!("duplicate keyframe index {}", w[0].frame)));
    }
    let last = keys.last().unwrap().frame;
    if last >= frames {
        return Err(Error::Geometry(format!("keyframe {last} is beyond a {frames}-frame video")));
    }
    let mut out = vec![None; frames];
    for w in keys.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let span = (b.frame - a.frame) as f64;
        for (f, slot) in out.iter_mut().enumerate().take(b.frame + 1).skip(a.frame) {
            *slot = Some(BBox::lerp(&a.bbox, &b.bbox, (f - a.frame) as f64 / span));
        }
    }
    // keyframes themselves are copied, not recomputed
    for k in &keys {
        out[k.frame] = Some(k.bbox);
    }
    Ok(out)
}

/// Filled rectangle mask; corners round to the nearest pixel and clip to the
/// frame.
pub fn rasterize(bbox: Option<&BBox>, width: usize, height: usize) -> Vec<u8> {
    let mut mask = vec![0u8; width * height];
    let Some(b) = bbox else { return mask };
    if width == 0 || height == 0 {
        return mask;
    }
    let clip = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clip(b.x0, width), clip(b.x1, width));
    let (y0, y1) = (clip(b.y0, height), clip(b.y1, height));
    for y in y0..=y1 {
        mask[y * width + x0..=y * width + x1].fill(1);
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub radius: usize,
    /// Color scale on `[0, 1]` intensities.
    pub sigma: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { radius: 7, sigma: 0.1 }
    }
}

/// Weighted median of a binary mask over a `(2r+1)²` window clipped at the
/// frame border. Each neighbor weighs `exp(-‖g_q - g_p‖² / 2σ²)` against the
/// center's guidance color; the output is anomaly iff the anomaly weight
/// strictly exceeds the normal weight.
///
/// `guidance` is `[height, width, channels]` with values on `[0, 1]`.
pub fn refine(mask: &[u8], guidance: &[f32], width: usize, height: usize, channels: usize, cfg: RefineConfig) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(Error::shape("refine", format!("mask of {} pixels for {width}x{height}", mask.len())));
    }
    if channels == 0 || guidance.len() != width * height * channels {
        return Err(Error::shape("refine", format!("guidance of {} values for {width}x{height}x{channels}", guidance.len())));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Contract("refine expects a binary mask".into()));
    }
    if cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(Error::Config("sigma must be positive".into()));
    }
    if cfg.radius == 0 {
        return Ok(mask.to_vec());
    }
    let r = cfg.radius;
    let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let color = |i: usize| &guidance[i * channels..(i + 1) * channels];
    let mut out = vec![0u8; mask.len()];
    parallel::for_each_chunk(&mut out, width.max(1), |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let c = color(y * width + x);
            let (mut on, mut off) = (0.0f64, 0.0f64);
            for qy in y.saturating_sub(r)..(y + r + 1).min(height) {
                for qx in x.saturating_sub(r)..(x + r + 1).min(width) {
                    let q = qy * width + qx;
                    let d2: f64 = color(q).iter().zip(c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                    let w = (-d2 * inv).exp();
                    if mask[q] == 1 {
                        on += w;
                    } else {
                        off += w;
                    }
                }
            }
            *o = u8::from(on > off);
        }
    });
    Ok(out)
}
