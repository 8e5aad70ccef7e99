//! `FMCK` checkpoints: model configuration, parameters, batch-norm statistics
//! and, optionally, optimizer state.
//!
//! ```text
//! "FMCK" | version u32 | text_len u32 | key=value text
//!        | record_count u32 | record_count × record
//! record = name_len u32 | name utf-8 | rank u32 | extents u32[rank] | f32[]
//! ```
//!
//! Records are parameters and buffers under their own names, and AdamW
//! moments under `adamw.m/<name>` and `adamw.v/<name>`. The text block holds
//! the model configuration plus `ckpt.*` progress keys.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{get_f32s, get_u32, put_f32s, put_u32};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"FMCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

fn bad(detail: impl Into<String>) -> Error {
    Error::format("FMCK", detail)
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, shape.len() as u32)?;
    for &e in shape {
        put_u32(w, e as u32)?;
    }
    put_f32s(w, data)
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let len = get_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(bad("parameter name too long"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
    let rank = get_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(format!("{name}: rank {rank}")));
    }
    let shape = (0..rank).map(|_| get_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().product::<usize>();
    let t = Tensor::new(shape, get_f32s(r, n)?).map_err(|e| bad(format!("{name}: {e}")))?;
    Ok((name, t))
}

/// Serializes a model, plus optimizer state and completed epochs when given.
pub fn write(w: &mut impl Write, model: &Model<f32>, train: Option<(&AdamW<f32>, usize)>) -> Result<()> {
    let mut text = model.config.to_kv();
    if let Some((opt, epoch)) = train {
        let c = opt.config;
        text.push_str(&format!(
            "ckpt.epoch={epoch}\nckpt.step={}\nckpt.beta1={:e}\nckpt.beta2={:e}\nckpt.eps={:e}\nckpt.weight_decay={:e}\n",
            opt.step, c.beta1, c.beta2, c.eps, c.weight_decay
        ));
    }
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    let store = &model.store;
    let mut count = store.len() + store.buffers().count();
    if train.is_some() {
        count += 2 * store.len();
    }
    put_u32(w, count as u32)?;
    for (name, p) in store.iter() {
        write_record(w, name, p.value.shape(), p.value.data())?;
    }
    for (name, b) in store.buffers() {
        write_record(w, name, b.shape(), b.data())?;
    }
    if let Some((opt, _)) = train {
        for (prefix, moments) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
            for ((name, p), m) in store.iter().zip(moments) {
                write_record(w, &format!("{prefix}{name}"), p.value.shape(), m)?;
            }
        }
    }
    Ok(())
}

/// What a checkpoint contained.
pub struct Loaded {
    pub model: Model<f32>,
    /// Optimizer state and completed epochs, when saved.
    pub train: Option<(AdamW<f32>, usize)>,
}

impl Loaded {
    pub fn into_state(self, adamw: AdamWConfig) -> TrainState {
        match self.train {
            Some((optimizer, epoch)) => TrainState { model: self.model, optimizer, epoch },
            None => TrainState::new(self.model, adamw),
        }
    }
}

pub fn read(r: &mut impl Read) -> Result<Loaded> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = get_u32(r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| bad("config block is not utf-8"))?;
    let (mut model_text, mut meta) = (String::new(), Vec::new());
    for line in text.lines() {
        match line.strip_prefix("ckpt.").and_then(|l| l.split_once('=')) {
            Some((k, v)) => meta.push((k.to_string(), v.to_string())),
            None => {
                model_text.push_str(line);
                model_text.push('\n');
            }
        }
    }
    let config = ModelConfig::from_kv(&model_text)?;
    let mut model = Model::<f32>::build(config, 0)?;
    let count = get_u32(r)? as usize;
    let n = model.store.len();
    let mut seen = vec![false; n];
    let mut moments: [Vec<Option<Vec<f32>>>; 2] = [vec![None; n], vec![None; n]];
    for _ in 0..count {
        let (name, t) = read_record(r)?;
        let (slot, base) = if let Some(b) = name.strip_prefix(M_PREFIX) {
            (Some(0), b)
        } else if let Some(b) = name.strip_prefix(V_PREFIX) {
            (Some(1), b)
        } else {
            (None, name.as_str())
        };
        if let Some(id) = model.store.id(base) {
            if model.store.value(id).shape() != t.shape() {
                return Err(bad(format!("{name}: shape {:?} vs {:?}", t.shape(), model.store.value(id).shape())));
            }
            match slot {
                Some(k) => moments[k][id.0] = Some(t.into_data()),
                None => {
                    *model.store.value_mut(id) = t;
                    seen[id.0] = true;
                }
            }
        } else if let (None, Some(buf)) = (slot, model.store.buffer_by_name_mut(base)) {
            if buf.shape() != t.shape() {
                return Err(bad(format!("{name}: shape mismatch")));
            }
            *buf = t;
        } else {
            return Err(bad(format!("unexpected record {name}")));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing parameter {}", model.store.name(crate::params::ParamId(i)))));
    }
    let train = if meta.is_empty() {
        None
    } else {
        let get = |k: &str| -> Result<&str> {
            meta.iter().find(|(mk, _)| mk == k).map(|(_, v)| v.as_str()).ok_or_else(|| bad(format!("missing ckpt.{k}")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("ckpt.{k} is not a number"))) };
        let config = AdamWConfig { beta1: num("beta1")?, beta2: num("beta2")?, eps: num("eps")?, weight_decay: num("weight_decay")? };
        let [m, v] = moments;
        let m = m.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| bad("incomplete first moments"))?;
        let v = v.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| bad("incomplete second moments"))?;
        let step = get("step")?.parse().map_err(|_| bad("ckpt.step"))?;
        let epoch = get("epoch")?.parse().map_err(|_| bad("ckpt.epoch"))?;
        Some((AdamW { config, step, m, v }, epoch))
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(Loaded { model, train })
}

pub fn save(path: &Path, model: &Model<f32>, train: Option<(&AdamW<f32>, usize)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, model, train)?;
    w.flush()?;
    Ok(())
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    save(path, &state.model, Some((&state.optimizer, state.epoch)))
}

pub fn load(path: &Path) -> Result<Loaded> {
    read(&mut BufReader::new(File::open(path)?))
}
