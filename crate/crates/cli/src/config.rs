//! Run configuration: defaults, overlaid by an optional TOML file, overlaid by
//! command-line flags. The resolved result is written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fmformer::model::{HeadsMode, MhcaMode, Modality, ModelConfig, Preset};
use fmformer::synth::GenConfig;
use fmformer::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub modality: Modality,
    pub dilated: bool,
    pub mhca: MhcaMode,
    pub lf: bool,
    pub heads: HeadsMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::preset(Preset::Tiny);
        ModelSection { preset: c.preset, modality: c.modality, dilated: c.dilated, mhca: c.mhca, lf: c.lf, heads: c.heads_mode }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    pub occlusion: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::default();
        DataSection {
            frames: g.frames,
            height: g.height,
            width: g.width,
            current_len: g.current_len,
            occlusion: g.occlusion,
            n_train: 256,
            n_test: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub decay_after: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            alpha: t.alpha,
            decay_after: t.decay_after,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced this file; ignored when read back.
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            out: PathBuf::from("runs"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
        }
    }
}

/// Flag values that override the file; `None` leaves the layer below intact.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub modality: Option<Modality>,
    pub dilated: Option<bool>,
    pub mhca: Option<MhcaMode>,
    pub lf: Option<bool>,
    pub heads: Option<HeadsMode>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub alpha: Option<f64>,
    pub clip_norm: Option<f64>,
    pub occlusion: Option<f64>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub current_len: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Defaults, then `file`, then `flags`.
    pub fn resolve(command: &str, file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        let f = flags.clone();
        set(&mut c.seed, f.seed);
        set(&mut c.out, f.out);
        set(&mut c.model.preset, f.preset);
        set(&mut c.model.modality, f.modality);
        set(&mut c.model.dilated, f.dilated);
        set(&mut c.model.mhca, f.mhca);
        set(&mut c.model.lf, f.lf);
        set(&mut c.model.heads, f.heads);
        set(&mut c.train.epochs, f.epochs);
        set(&mut c.train.batch, f.batch);
        set(&mut c.train.lr, f.lr);
        set(&mut c.train.alpha, f.alpha);
        set(&mut c.train.clip_norm, f.clip_norm);
        set(&mut c.data.occlusion, f.occlusion);
        set(&mut c.data.frames, f.frames);
        set(&mut c.data.height, f.height);
        set(&mut c.data.width, f.width);
        set(&mut c.data.current_len, f.current_len);
        set(&mut c.data.n_train, f.n_train);
        set(&mut c.data.n_test, f.n_test);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch == 0 {
            bail!("epochs and batch must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            bail!("learning rate must be positive, got {}", t.lr);
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            bail!("alpha must be non-negative, got {}", t.alpha);
        }
        if !(t.clip_norm >= 0.0 && t.clip_norm.is_finite()) {
            bail!("clip norm must be non-negative, got {}", t.clip_norm);
        }
        if self.data.n_train < 2 || self.data.n_test < 2 {
            bail!("each split needs at least 2 samples");
        }
        self.gen_config().validate()?;
        self.model_config(self.data.frames, self.data.height, self.data.width, self.data.current_len).validate()?;
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        let d = &self.data;
        let mut g = GenConfig::default().with_geometry(d.frames, d.height, d.width, d.current_len);
        g.occlusion = d.occlusion;
        g
    }

    /// Model settings for inputs of the given geometry.
    pub fn model_config(&self, frames: usize, height: usize, width: usize, current_len: usize) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::preset(m.preset).with_geometry(frames, height, width, current_len);
        c.modality = m.modality;
        c.dilated = m.dilated;
        c.mhca = m.mhca;
        c.lf = m.lf;
        c.heads_mode = m.heads;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            decay_after: t.decay_after,
            alpha: t.alpha,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Writes `<out>/<command>.toml`.
    pub fn persist(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{}.toml", self.command));
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "seed = 5\n[train]\nepochs = 3\nbatch = 4\n[model]\npreset = \"small\"\n").unwrap();
        let flags = Overrides { epochs: Some(9), ..Default::default() };
        let c = RunConfig::resolve("train", Some(&file), &flags).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.batch), (5, 9, 4));
        assert_eq!(c.model.preset, Preset::Small);
        assert_eq!(c.train.lr, TrainSection::default().lr);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::resolve("eval", None, &Overrides { lr: Some(1e-3), ..Default::default() }).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_fail_before_work() {
        assert!(RunConfig::resolve("train", None, &Overrides { batch: Some(0), ..Default::default() }).is_err());
        assert!(RunConfig::resolve("generate", None, &Overrides { occlusion: Some(1.5), ..Default::default() }).is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }
}
