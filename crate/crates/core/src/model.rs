//! Model configuration, presets, assembly and forward passes.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::decoder::{class_head, class_token, fuse, Blend, DenseHead, Reassemble};
use crate::encoder::{Encoder, MixerKind};
use crate::error::{Error, Result};
use crate::nn::{Builder, Mlp};
use crate::params::{Graph, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenization::{compute_grid, CurrentTokenizer, PatchGeometry, VideoLayout, VideoTokenizer};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {}"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Preset { Tiny => "tiny", Small => "small", Base => "base", Large => "large" });
keyword_enum!(
    /// Which inputs the model consumes.
    Modality { Visual => "visual", Current => "current", Cross => "cross" }
);
keyword_enum!(
    /// Cross-attention variant: both directions, current-to-visual only, or
    /// replaced by self-attention.
    MhcaMode { Uni => "uni", Bi => "bi", Off => "off" }
);
keyword_enum!(HeadsMode { Cls => "cls", Dense => "dense", Both => "both" });

impl Preset {
    /// `(D, MLP dim, heads, layers)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Tiny => (36, 144, 3, 6),
            Preset::Small => (48, 192, 3, 6),
            Preset::Base => (96, 384, 3, 6),
            Preset::Large => (96, 384, 3, 12),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: PatchGeometry,
    pub classes: usize,
    pub channels: usize,
    pub phases: usize,
    /// Clip geometry the positional embeddings are built for.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    pub modality: Modality,
    pub dilated: bool,
    pub mhca: MhcaMode,
    pub lf: bool,
    pub heads_mode: HeadsMode,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (dim, mlp_dim, heads, layers) = preset.dims();
        ModelConfig {
            preset,
            dim,
            mlp_dim,
            heads,
            layers,
            patch: PatchGeometry::default(),
            classes: 2,
            channels: 3,
            phases: 3,
            frames: 8,
            height: 64,
            width: 64,
            current_len: 64,
            modality: Modality::Cross,
            dilated: true,
            mhca: MhcaMode::Bi,
            lf: true,
            heads_mode: HeadsMode::Both,
        }
    }

    pub fn with_geometry(mut self, frames: usize, height: usize, width: usize, current_len: usize) -> Self {
        self.frames = frames;
        self.height = height;
        self.width = width;
        self.current_len = current_len;
        self
    }

    pub fn uses_video(&self) -> bool {
        self.modality != Modality::Current
    }

    pub fn uses_current(&self) -> bool {
        self.modality != Modality::Visual
    }

    /// A dense head needs video; current-only models classify only.
    pub fn has_dense(&self) -> bool {
        self.uses_video() && self.heads_mode != HeadsMode::Cls
    }

    pub fn has_cls(&self) -> bool {
        self.heads_mode != HeadsMode::Dense || !self.uses_video()
    }

    fn mixer(&self) -> MixerKind {
        match (self.modality, self.mhca) {
            (Modality::Cross, MhcaMode::Bi) => MixerKind::Bidirectional,
            (Modality::Cross, MhcaMode::Uni) => MixerKind::CurrentToVisual,
            _ => MixerKind::SelfOnly,
        }
    }

    /// Class heads present: `(video-stream head, current-stream head)`.
    fn cls_streams(&self) -> (bool, bool) {
        if !self.has_cls() {
            return (false, false);
        }
        match self.modality {
            Modality::Visual => (true, false),
            Modality::Current => (false, true),
            Modality::Cross => (true, self.lf && self.mhca != MhcaMode::Uni),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.mlp_dim == 0 || self.classes < 2 || self.channels == 0 || self.phases == 0 {
            return Err(Error::Config(format!("degenerate model dimensions in {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.uses_current() && self.current_len == 0 {
            return Err(Error::Config("current length must be positive".into()));
        }
        if self.uses_video() {
            compute_grid(self.frames, self.height, self.width, &self.patch)?;
        }
        Ok(())
    }

    pub fn video_layout(&self) -> Result<VideoLayout> {
        Ok(VideoLayout { grid: compute_grid(self.frames, self.height, self.width, &self.patch)?, dilated: self.dilated })
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let p = &self.patch;
        let fields: Vec<(&str, String)> = vec![
            ("preset", self.preset.to_string()),
            ("dim", self.dim.to_string()),
            ("mlp_dim", self.mlp_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("patch_t", p.t.to_string()),
            ("patch_h", p.h.to_string()),
            ("patch_w", p.w.to_string()),
            ("dilation", p.dilation.to_string()),
            ("classes", self.classes.to_string()),
            ("channels", self.channels.to_string()),
            ("phases", self.phases.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("current_len", self.current_len.to_string()),
            ("modality", self.modality.to_string()),
            ("dilated", on_off(self.dilated).into()),
            ("mhca", self.mhca.to_string()),
            ("lf", on_off(self.lf).into()),
            ("heads_mode", self.heads_mode.to_string()),
        ];
        fields.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::preset(Preset::Tiny);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: expected an integer, got {v:?}")));
            match k {
                "preset" => cfg.preset = v.parse()?,
                "dim" => cfg.dim = num()?,
                "mlp_dim" => cfg.mlp_dim = num()?,
                "heads" => cfg.heads = num()?,
                "layers" => cfg.layers = num()?,
                "patch_t" => cfg.patch.t = num()?,
                "patch_h" => cfg.patch.h = num()?,
                "patch_w" => cfg.patch.w = num()?,
                "dilation" => cfg.patch.dilation = num()?,
                "classes" => cfg.classes = num()?,
                "channels" => cfg.channels = num()?,
                "phases" => cfg.phases = num()?,
                "frames" => cfg.frames = num()?,
                "height" => cfg.height = num()?,
                "width" => cfg.width = num()?,
                "current_len" => cfg.current_len = num()?,
                "modality" => cfg.modality = v.parse()?,
                "dilated" => cfg.dilated = parse_on_off(k, v)?,
                "mhca" => cfg.mhca = v.parse()?,
                "lf" => cfg.lf = parse_on_off(k, v)?,
                "heads_mode" => cfg.heads_mode = v.parse()?,
                _ => return Err(Error::Config(format!("unknown model config key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn parse_on_off(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

/// Module structure; parameters live in the owning [`Model`]'s store.
#[derive(Clone, Debug)]
struct Arch {
    tok_v: Option<VideoTokenizer>,
    tok_c: Option<CurrentTokenizer>,
    encoder: Encoder,
    reassemble: Option<Reassemble>,
    blend: Option<Blend>,
    dense: Option<DenseHead>,
    head_v: Option<Mlp>,
    head_c: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Dense logits `[B, H, W, K]`.
    pub pix: Option<Var>,
    /// Per-stream class logits `[B, K]`, video stream first.
    pub cls_logits: Vec<Var>,
    /// Fused class probabilities `[B, K]`.
    pub cls: Option<Var>,
}

/// Materialized outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real = f32> {
    pub pix: Option<Tensor<T>>,
    pub cls: Option<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let arch = {
            let b = &mut Builder::new(&mut store, &mut init);
            let c = &config;
            let layout = if c.uses_video() { Some(c.video_layout()?) } else { None };
            let tok_v = layout.map(|l| VideoTokenizer::new(b, c.patch, c.channels, l, c.dim)).transpose()?;
            let tok_c = c.uses_current().then(|| CurrentTokenizer::new(b, c.phases, c.current_len, c.dim)).transpose()?;
            let encoder =
                Encoder::new(b, c.layers, c.dim, c.mlp_dim, c.heads, c.uses_video(), c.uses_current(), c.mixer())?;
            let (mut reassemble, mut blend, mut dense) = (None, None, None);
            if c.has_dense() {
                let n_t = layout.expect("video layout").grid.n_t;
                reassemble = Some(Reassemble::new(b, n_t, c.dim, c.dilated)?);
                blend = c.dilated.then(|| Blend::new(b, c.dim)).transpose()?;
                dense = Some(DenseHead::new(b, c.dim, c.patch.h, c.classes)?);
            }
            let (hv, hc) = c.cls_streams();
            let head_v = hv.then(|| class_head(b, "head_v", c.dim, c.classes)).transpose()?;
            let head_c = hc.then(|| class_head(b, "head_c", c.dim, c.classes)).transpose()?;
            Arch { tok_v, tok_c, encoder, reassemble, blend, dense, head_v, head_c }
        };
        Ok(Model { config, store, arch })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast(), arch: self.arch.clone() }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Builds the full graph. `video` is `[B, T_v, H, W, C]`, `current` is
    /// `[B, T_c, phases]`; inputs of a modality the model does not use are
    /// ignored. Geometries other than the built one go through positional
    /// embedding interpolation.
    pub fn forward(&self, g: &mut Graph<T>, video: Option<&Tensor<T>>, current: Option<&Tensor<T>>) -> Result<Outputs> {
        let a = &self.arch;
        let (mut zv, mut layout, mut size) = (None, None, (0, 0));
        if let Some(tok) = &a.tok_v {
            let v = video.ok_or_else(|| Error::Contract("this model needs a video input".into()))?;
            let (z, l) = tok.forward(g, v)?;
            zv = Some(z);
            layout = Some(l);
            size = (v.shape()[2], v.shape()[3]);
        }
        let mut zc = None;
        if let Some(tok) = &a.tok_c {
            let c = current.ok_or_else(|| Error::Contract("this model needs a current input".into()))?;
            if c.shape().len() == 3 && c.shape()[1] == 0 {
                return Err(Error::EmptyInput("current sequence".into()));
            }
            zc = Some(tok.forward(g, c)?);
        }
        if let (Some(v), Some(c)) = (video, current) {
            if a.tok_v.is_some() && a.tok_c.is_some() && v.shape()[0] != c.shape()[0] {
                return Err(Error::shape("forward", "video and current batch sizes differ"));
            }
        }
        let (zv, zc) = a.encoder.forward(g, zv, zc)?;

        let pix = match (&a.reassemble, &a.dense, zv, layout) {
            (Some(re), Some(dense), Some(z), Some(l)) => {
                let (img_d, img) = re.forward(g, z, &l)?;
                let img = match (&a.blend, img_d) {
                    (Some(blend), Some(d)) => blend.forward(g, d, img)?,
                    _ => img,
                };
                Some(dense.forward(g, img, size.0, size.1)?)
            }
            _ => None,
        };

        let mut cls_logits = Vec::new();
        for (head, z) in [(&a.head_v, zv), (&a.head_c, zc)] {
            if let (Some(head), Some(z)) = (head, z) {
                let t = class_token(g, z)?;
                cls_logits.push(head.forward(g, t)?);
            }
        }
        let cls = if cls_logits.is_empty() { None } else { Some(fuse(g, &cls_logits)?) };
        Ok(Outputs { pix, cls_logits, cls })
    }

    /// Deterministic inference with running batch-norm statistics.
    pub fn predict(&self, video: Option<&Tensor<T>>, current: Option<&Tensor<T>>) -> Result<Prediction<T>> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, video, current)?;
        Ok(Prediction {
            pix: out.pix.map(|v| g.tape.value(v).clone()),
            cls: out.cls.map(|v| g.tape.value(v).clone()),
        })
    }

    /// Inference on inputs whose length or resolution differs from the built
    /// geometry. The last video frame and last current sample are assumed to
    /// be simultaneous.
    pub fn forward_variable_length(&self, video: Option<&Tensor<T>>, current: Option<&Tensor<T>>) -> Result<Prediction<T>> {
        self.predict(video, current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let dims: Vec<_> = Preset::ALL.iter().map(|p| p.dims()).collect();
        assert_eq!(dims, vec![(36, 144, 3, 6), (48, 192, 3, 6), (96, 384, 3, 6), (96, 384, 3, 12)]);
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = ModelConfig::preset(Preset::Small).with_geometry(4, 32, 48, 20);
        cfg.modality = Modality::Visual;
        cfg.dilated = false;
        cfg.heads_mode = HeadsMode::Dense;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("dim=36\nbogus=1\n").is_err());
        assert!("diagonal".parse::<Modality>().is_err());
    }

    #[test]
    fn bad_head_count_is_rejected() {
        let mut cfg = ModelConfig::preset(Preset::Tiny);
        cfg.heads = 5;
        assert!(Model::<f32>::build(cfg, 0).is_err());
    }

    #[test]
    fn ablation_head_selection() {
        let streams = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = ModelConfig::preset(Preset::Tiny);
            f(&mut c);
            (c.cls_streams(), c.has_dense())
        };
        assert_eq!(streams(&|_| {}), ((true, true), true));
        assert_eq!(streams(&|c| c.mhca = MhcaMode::Uni), ((true, false), true));
        assert_eq!(streams(&|c| c.lf = false), ((true, false), true));
        assert_eq!(streams(&|c| c.mhca = MhcaMode::Off), ((true, true), true));
        assert_eq!(streams(&|c| c.modality = Modality::Visual), ((true, false), true));
        assert_eq!(streams(&|c| c.modality = Modality::Current), ((false, true), false));
        assert_eq!(streams(&|c| c.heads_mode = HeadsMode::Dense), ((false, false), true));
    }
}
