//! Synthetic furnace clips: a flickering, smoothly textured shell with an
//! optional hotspot that ramps up and fades, three-phase current that sags
//! and gets noisier while the hotspot is active, and an optional haze layer
//! over the video only.

use std::f64::consts::{LN_2, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel response of the thermal camera to heat.
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.85, 0.7];
const TEXTURE_WAVES: usize = 4;

/// Nominal sampling rate of both modalities, samples per second.
pub const SAMPLE_RATE_HZ: f64 = 25.0;

/// Generation knobs shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    /// Duration covered by the current window, in video frames. The window
    /// ends at the last video frame.
    pub current_span_frames: f64,
    /// Probability that a sample's video is hazed, independent of its class.
    pub occlusion: f64,
    /// Blend weight of the haze field, in `[0, 1]`.
    pub haze_strength: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub flicker: f64,
    /// Range of hotspot peak intensity.
    pub blob_peak: (f64, f64),
    /// Range of the hotspot Gaussian sigma as a fraction of `min(H, W)`.
    pub blob_radius: (f64, f64),
    /// Fractional current sag at the anomaly apex.
    pub current_drop: f64,
    pub current_noise: f64,
    /// Extra current noise standard deviation at the apex.
    pub current_extra_noise: f64,
    pub sample_rate_hz: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 8,
            height: 64,
            width: 64,
            current_len: 64,
            current_span_frames: 16.0,
            occlusion: 0.0,
            haze_strength: 0.95,
            noise: 0.02,
            flicker: 0.05,
            blob_peak: (0.6, 0.8),
            blob_radius: (0.15, 0.25),
            current_drop: 0.35,
            current_noise: 0.03,
            current_extra_noise: 0.08,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }
}

impl GenConfig {
    /// Sets the clip geometry; the current window spans twice the clip.
    pub fn with_geometry(mut self, frames: usize, height: usize, width: usize, current_len: usize) -> Self {
        self.frames = frames;
        self.height = height;
        self.width = width;
        self.current_len = current_len;
        self.current_span_frames = 2.0 * frames as f64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.current_len == 0 {
            return Err(Error::Config("clip extents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion) || !(0.0..=1.0).contains(&self.haze_strength) {
            return Err(Error::Config("occlusion and haze strength must lie in [0, 1]".into()));
        }
        if self.blob_peak.0 > self.blob_peak.1 || self.blob_radius.0 > self.blob_radius.1 || self.blob_radius.0 <= 0.0 {
            return Err(Error::Config("invalid hotspot ranges".into()));
        }
        if self.current_span_frames <= 0.0 {
            return Err(Error::Config("current span must be positive".into()));
        }
        Ok(())
    }
}

/// A hotspot episode in frame coordinates; indices may lie outside the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub onset: f64,
    pub apex: f64,
    pub offset: f64,
    /// `(row, col)` of the hotspot center at frame 0.
    pub center: (f64, f64),
    /// Center displacement per frame.
    pub drift: (f64, f64),
    pub peak: f64,
    /// Gaussian sigma in pixels.
    pub radius: f64,
    pub current_drop: f64,
    pub current_extra_noise: f64,
}

impl Episode {
    /// Relative intensity: 0 outside `(onset, offset)`, 1 at the apex, linear
    /// in between.
    pub fn ramp(&self, t: f64) -> f64 {
        if t <= self.onset || t >= self.offset {
            0.0
        } else if t <= self.apex {
            (t - self.onset) / (self.apex - self.onset)
        } else {
            (self.offset - t) / (self.offset - self.apex)
        }
    }

    pub fn center_at(&self, t: f64) -> (f64, f64) {
        (self.center.0 + self.drift.0 * t, self.center.1 + self.drift.1 * t)
    }

    /// Radius of the half-maximum disc, `σ·√(2 ln 2)`.
    pub fn half_max_radius(&self) -> f64 {
        self.radius * (2.0 * LN_2).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Haze {
    pub strength: f64,
    pub level: f64,
    pub tilt: (f64, f64),
}

/// Everything needed to render one sample; rendering is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    pub current_span_frames: f64,
    pub episode: Option<Episode>,
    pub haze: Option<Haze>,
    pub background: f64,
    /// Texture waves: `(amplitude, row freq, col freq, temporal freq, phase)`.
    pub texture: Vec<(f64, f64, f64, f64, f64)>,
    pub flicker: f64,
    pub flicker_freq: f64,
    pub flicker_phase: f64,
    pub noise: f64,
    pub current_amplitude: [f64; 3],
    pub current_freq: f64,
    pub current_phase: f64,
    pub current_noise: f64,
}

impl Scenario {
    /// Draws a scenario from `cfg`, deterministically in `seed`.
    pub fn draw(cfg: &GenConfig, seed: u64, abnormal: bool, hazed: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let last = cfg.frames as f64 - 1.0;
        let texture = (0..TEXTURE_WAVES)
            .map(|_| {
                (
                    rng.random_range(0.02..0.05),
                    rng.random_range(0.3..2.0),
                    rng.random_range(0.3..2.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let background = rng.random_range(0.25..0.4);
        let flicker_freq = rng.random_range(0.05..0.25);
        let flicker_phase = rng.random_range(0.0..TAU);
        let current_amplitude = [0, 1, 2].map(|_| rng.random_range(0.9..1.1));
        let current_freq = rng.random_range(0.03..0.08);
        let current_phase = rng.random_range(0.0..TAU);
        let episode = abnormal.then(|| {
            let span = cfg.current_span_frames;
            let rise = rng.random_range(0.25..0.75) * span;
            let fall = rng.random_range(0.25..0.75) * span;
            let level: f64 = rng.random_range(0.5..1.0);
            let (onset, apex, offset) = if rng.random_bool(0.5) {
                let apex = last + (1.0 - level) * rise;
                (apex - rise, apex, apex + fall)
            } else {
                let apex = last - (1.0 - level) * fall;
                (apex - rise, apex, apex + fall)
            };
            let radius = rng.random_range(cfg.blob_radius.0..=cfg.blob_radius.1) * h.min(w);
            let margin = 1.5 * radius;
            let end = (rng.random_range(margin..(h - margin).max(margin + 1e-9)), rng.random_range(margin..(w - margin).max(margin + 1e-9)));
            let drift = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            Episode {
                onset,
                apex,
                offset,
                center: (end.0 - drift.0 * last, end.1 - drift.1 * last),
                drift,
                peak: rng.random_range(cfg.blob_peak.0..=cfg.blob_peak.1),
                radius,
                current_drop: cfg.current_drop,
                current_extra_noise: cfg.current_extra_noise,
            }
        });
        let haze = hazed.then(|| Haze {
            strength: cfg.haze_strength,
            level: rng.random_range(0.7..0.85),
            tilt: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        });
        Scenario {
            seed: rng.random(),
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            current_len: cfg.current_len,
            current_span_frames: cfg.current_span_frames,
            episode,
            haze,
            background,
            texture,
            flicker: cfg.flicker,
            flicker_freq,
            flicker_phase,
            noise: cfg.noise,
            current_amplitude,
            current_freq,
            current_phase,
            current_noise: cfg.current_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.current_len == 0 {
            return Err(Error::Config("scenario extents must be positive".into()));
        }
        if let Some(e) = &self.episode {
            if !(e.onset < e.apex && e.apex < e.offset) {
                return Err(Error::Config(format!(
                    "episode frames must satisfy onset < apex < offset, got {} {} {}",
                    e.onset, e.apex, e.offset
                )));
            }
            if e.radius <= 0.0 || e.peak <= 0.0 {
                return Err(Error::Config("hotspot radius and peak must be positive".into()));
            }
        }
        Ok(())
    }

    /// Video time of current sample `j`; the last sample coincides with the
    /// last frame.
    pub fn current_time(&self, j: usize) -> f64 {
        let step = self.current_span_frames / self.current_len as f64;
        (self.frames as f64 - 1.0) - (self.current_len - 1 - j) as f64 * step
    }

    /// Ground-truth mask of the last frame: pixels where the hotspot is at
    /// least half its own peak, empty when the hotspot is inactive.
    pub fn mask(&self) -> Vec<u8> {
        let mut mask = vec![0u8; self.height * self.width];
        let Some(e) = &self.episode else { return mask };
        let t = self.frames as f64 - 1.0;
        if e.ramp(t) <= 0.0 {
            return mask;
        }
        let (cy, cx) = e.center_at(t);
        let r2 = e.half_max_radius().powi(2);
        for y in 0..self.height {
            for x in 0..self.width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 <= r2 {
                    mask[y * self.width + x] = 1;
                }
            }
        }
        mask
    }
}

/// Renders a scenario into a sample.
pub fn generate(s: &Scenario) -> Result<Sample> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let noise = Normal::new(0.0, s.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (fh, fw) = (s.height as f64, s.width as f64);
    let mut video = Vec::with_capacity(s.frames * s.height * s.width * 3);
    for t in 0..s.frames {
        let tf = t as f64;
        let flicker = s.flicker * (TAU * s.flicker_freq * tf + s.flicker_phase).sin();
        let hot = s.episode.as_ref().map(|e| (e.peak * e.ramp(tf), e.center_at(tf), e.radius));
        for y in 0..s.height {
            for x in 0..s.width {
                let (yf, xf) = (y as f64, x as f64);
                let mut heat = s.background + flicker;
                for &(a, fy, fx, ft, ph) in &s.texture {
                    heat += a * (TAU * (fy * yf / fh + fx * xf / fw) + ft * tf + ph).cos();
                }
                if let Some((amp, (cy, cx), r)) = hot {
                    if amp > 0.0 {
                        let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                        heat += amp * (-d2 / (2.0 * r * r)).exp();
                    }
                }
                for gain in CHANNEL_GAIN {
                    let mut v = (heat * gain).clamp(0.0, 1.0);
                    if let Some(hz) = &s.haze {
                        let field = hz.level + hz.tilt.0 * (yf / fh - 0.5) + hz.tilt.1 * (xf / fw - 0.5);
                        v = (1.0 - hz.strength) * v + hz.strength * field;
                    }
                    video.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
    }
    let mut current = Vec::with_capacity(s.current_len * 3);
    for j in 0..s.current_len {
        let ramp = s.episode.as_ref().map_or(0.0, |e| e.ramp(s.current_time(j)));
        let (drop, extra) = s.episode.as_ref().map_or((0.0, 0.0), |e| (e.current_drop, e.current_extra_noise));
        for (k, &amp) in s.current_amplitude.iter().enumerate() {
            let phase = TAU * s.current_freq * j as f64 + s.current_phase + TAU * k as f64 / 3.0;
            let clean = amp * (1.0 + 0.25 * phase.sin()) * (1.0 - drop * ramp);
            let sd = s.current_noise + extra * ramp;
            current.push((clean + sd * unit.sample(&mut rng)) as f32);
        }
    }
    let mask = s.mask();
    let label = u8::from(mask.iter().any(|&m| m != 0));
    Ok(Sample {
        video: Tensor::new([s.frames, s.height, s.width, 3], video)?,
        current: Tensor::new([s.current_len, 3], current)?,
        mask,
        label,
    })
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ split) ^ index)
}

/// Counts written next to a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub normal: usize,
    pub abnormal: usize,
    pub total: usize,
    pub hazed_normal: usize,
    pub hazed_abnormal: usize,
}

impl DatasetStats {
    pub fn recount(dataset: &Dataset, hazed: &[bool]) -> Self {
        let mut s = DatasetStats { total: dataset.len(), ..Default::default() };
        for (sample, &hz) in dataset.samples.iter().zip(hazed.iter().chain(std::iter::repeat(&false))) {
            if sample.label == 1 {
                s.abnormal += 1;
                s.hazed_abnormal += usize::from(hz);
            } else {
                s.normal += 1;
                s.hazed_normal += usize::from(hz);
            }
        }
        s
    }
}

/// A generated split plus which samples were hazed.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub hazed: Vec<bool>,
    pub stats: DatasetStats,
}

/// `n` samples, half of them (rounded down) abnormal in a seeded order. `split`
/// keeps the seeds of different splits disjoint.
pub fn make_dataset(n: usize, cfg: &GenConfig, seed: u64, split: u64) -> Result<Generated> {
    if n < 2 {
        return Err(Error::Config(format!("a dataset needs at least 2 samples, got {n}")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, u64::MAX));
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut rng);
    let hazed: Vec<bool> = (0..n).map(|_| rng.random_bool(cfg.occlusion)).collect();
    let samples = crate::parallel::map_range(n, |i| {
        generate(&Scenario::draw(cfg, sample_seed(seed, split, i as u64), labels[i], hazed[i]))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset { samples };
    let stats = DatasetStats::recount(&dataset, &hazed);
    Ok(Generated { dataset, hazed, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig::default().with_geometry(4, 32, 32, 16)
    }

    #[test]
    fn normal_samples_have_empty_masks() {
        let s = generate(&Scenario::draw(&cfg(), 5, false, false)).unwrap();
        assert!(s.mask.iter().all(|&m| m == 0));
        assert_eq!(s.label, 0);
    }

    #[test]
    fn abnormal_samples_are_active_at_the_last_frame() {
        for seed in 0..20 {
            let sc = Scenario::draw(&cfg(), seed, true, false);
            let e = sc.episode.as_ref().unwrap();
            assert!(e.onset < e.apex && e.apex < e.offset);
            assert!(e.ramp(3.0) >= 0.5 - 1e-9);
            assert_eq!(generate(&sc).unwrap().label, 1);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&Scenario::draw(&cfg(), 11, true, true)).unwrap();
        let b = generate(&Scenario::draw(&cfg(), 11, true, true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_episode_order_is_rejected() {
        let mut sc = Scenario::draw(&cfg(), 1, true, false);
        let e = sc.episode.as_mut().unwrap();
        e.apex = e.offset + 1.0;
        assert!(generate(&sc).is_err());
    }

    #[test]
    fn haze_leaves_current_untouched() {
        let clear = generate(&Scenario::draw(&cfg(), 3, true, false)).unwrap();
        let mut sc = Scenario::draw(&cfg(), 3, true, false);
        sc.haze = Some(Haze { strength: 0.95, level: 0.8, tilt: (0.0, 0.0) });
        let hazed = generate(&sc).unwrap();
        assert_eq!(clear.current, hazed.current);
        assert_eq!(clear.mask, hazed.mask);
        assert_ne!(clear.video, hazed.video);
    }

    #[test]
    fn ramp_shape() {
        let e = Episode {
            onset: 0.0,
            apex: 4.0,
            offset: 12.0,
            center: (0.0, 0.0),
            drift: (0.0, 0.0),
            peak: 1.0,
            radius: 1.0,
            current_drop: 0.0,
            current_extra_noise: 0.0,
        };
        assert_eq!([e.ramp(-1.0), e.ramp(2.0), e.ramp(4.0), e.ramp(8.0), e.ramp(12.0)], [0.0, 0.5, 1.0, 0.5, 0.0]);
    }
}
