//! Subcommand implementations. Every file written here is read back and
//! checked before the command reports success.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fmformer::annotate::{parse_keyframes, propagate, rasterize, refine, RefineConfig};
use fmformer::checkpoint;
use fmformer::dataset::{ingest_raw, Crop, Dataset, NormStats, RawRecording};
use fmformer::metrics::{evaluate, hard_masks, length_sweep, EvalRecord, SweepRow, SWEEP_HEADER};
use fmformer::model::Model;
use fmformer::pgm::{mask_image, Image};
use fmformer::synth::{make_dataset, DatasetStats, GenConfig};
use fmformer::training::{train as run_training, AdamWConfig, TrainState, CSV_HEADER};
use serde::Serialize;

use crate::config::RunConfig;

/// Writes via a temporary file so a crash never leaves a truncated output.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> fmformer::Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    write(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(!ds.is_empty(), "{} holds no samples", path.display());
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, |p| ds.write(p))?;
    let back = Dataset::read(path).with_context(|| format!("re-reading {}", path.display()))?;
    ensure!(back.len() == ds.len(), "{} did not round-trip", path.display());
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    generator: &'a GenConfig,
    train: &'a DatasetStats,
    test: &'a DatasetStats,
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let gen = cfg.gen_config();
    let train = make_dataset(cfg.data.n_train, &gen, cfg.seed, 0)?;
    let test = make_dataset(cfg.data.n_test, &gen, cfg.seed, 1)?;
    write_dataset(&cfg.out.join("train.fmfb"), &train.dataset)?;
    write_dataset(&cfg.out.join("test.fmfb"), &test.dataset)?;
    let sidecar = Sidecar { seed: cfg.seed, generator: &gen, train: &train.stats, test: &test.stats };
    fs::write(cfg.out.join("dataset.toml"), toml::to_string(&sidecar)?)?;
    println!("{:<6} {:>8} {:>8} {:>8} {:>12} {:>14}", "split", "normal", "abnormal", "total", "hazed-normal", "hazed-abnormal");
    for (name, s) in [("train", &train.stats), ("test", &test.stats)] {
        println!(
            "{name:<6} {:>8} {:>8} {:>8} {:>12} {:>14}",
            s.normal, s.abnormal, s.total, s.hazed_normal, s.hazed_abnormal
        );
    }
    Ok(())
}

fn print_record(title: &str, rec: &EvalRecord) {
    println!("{title}\n{rec}");
}

pub fn train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, test: Option<&Path>) -> Result<()> {
    let ds = read_dataset(data)?;
    let (t, h, w, tc) = ds.geometry().expect("non-empty dataset");
    let test_ds = test.map(read_dataset).transpose()?;
    let wanted = cfg.model_config(t, h, w, tc);
    let mut state = match resume {
        Some(p) => {
            let state = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.into_state(AdamWConfig::default());
            let have = &state.model.config;
            ensure!(
                (have.frames, have.height, have.width, have.current_len) == (t, h, w, tc),
                "checkpoint geometry {}x{}x{}/{} differs from the data {t}x{h}x{w}/{tc}",
                have.frames,
                have.height,
                have.width,
                have.current_len
            );
            if *have != wanted {
                log::warn!("resuming with the architecture stored in the checkpoint; model flags are ignored");
            }
            log::info!("resuming after epoch {}", state.epoch);
            state
        }
        None => TrainState::new(Model::build(wanted, cfg.seed)?, AdamWConfig::default()),
    };
    log::info!("{} model, {} parameters", state.model.config.preset, state.model.num_params());

    let log_path = cfg.out.join("train_log.csv");
    let append = resume.is_some() && log_path.exists();
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(&log_path)?);
    if !append {
        writeln!(log, "{CSV_HEADER}")?;
    }
    let ckpt = cfg.out.join("checkpoint.fmck");
    let tc_cfg = cfg.train_config();
    let rows = run_training(&mut state, &ds, &tc_cfg, Some(&mut log as &mut dyn Write), |st, row| {
        log::info!("epoch {} loss {:.4} acc {:.4}", row.epoch, row.loss.total, row.record.class.acc);
        write_atomic(&ckpt, |p| checkpoint::save_state(p, st))
            .map_err(|e| fmformer::Error::Format { what: "checkpoint", detail: format!("{e:#}") })
    });
    log.flush()?;
    let rows = rows.with_context(|| format!("last good checkpoint: {}", ckpt.display()))?;
    // a run that was already complete still leaves a checkpoint behind
    if !ckpt.exists() {
        write_atomic(&ckpt, |p| checkpoint::save_state(p, &state))?;
    }
    let back = checkpoint::load(&ckpt)?;
    ensure!(back.model.store == state.model.store, "checkpoint did not round-trip");
    match rows.last() {
        Some(row) => {
            println!("{CSV_HEADER}\n{}", row.csv());
            print_record(&format!("running metrics, epoch {}", row.epoch), &row.record);
        }
        None => println!("nothing to do: checkpoint already has {} epochs", state.epoch),
    }
    if let Some(test) = test_ds {
        let rec = evaluate(&state.model, &test, cfg.train.batch)?;
        print_record("test split", &rec);
        write_eval_csv(&cfg.out.join("test_eval.csv"), t, tc, &rec)?;
    }
    Ok(())
}

fn write_eval_csv(path: &Path, frames: usize, current_len: usize, rec: &EvalRecord) -> Result<()> {
    let row = SweepRow { frames, current_len, record: rec.clone() };
    fs::write(path, format!("{SWEEP_HEADER}\n{}\n", row.csv())).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Default sweep grid: every even frame count up to the clip length, and
/// quarter, half and full current windows.
fn sweep_grid(frames: usize, current_len: usize) -> (Vec<usize>, Vec<usize>) {
    let f: Vec<usize> = (2..=frames).step_by(2).collect();
    let mut c: Vec<usize> = [current_len / 4, current_len / 2, current_len].into_iter().filter(|&c| c > 0).collect();
    c.dedup();
    (if f.is_empty() { vec![frames] } else { f }, c)
}

pub fn eval(cfg: &RunConfig, model: &Path, data: &Path, sweep: Option<(Vec<usize>, Vec<usize>)>) -> Result<()> {
    let model = load_model(model)?;
    let ds = read_dataset(data)?;
    let (t, _, _, tc) = ds.geometry().expect("non-empty dataset");
    let rec = evaluate(&model, &ds, cfg.train.batch)?;
    print_record(&format!("{} samples", ds.len()), &rec);
    write_eval_csv(&cfg.out.join("eval.csv"), t, tc, &rec)?;
    if let Some((frames, currents)) = sweep {
        let (df, dc) = sweep_grid(t, tc);
        let frames = if frames.is_empty() { df } else { frames };
        let currents = if currents.is_empty() { dc } else { currents };
        let rows = length_sweep(&model, &ds, cfg.train.batch, &frames, &currents)?;
        let mut text = format!("{SWEEP_HEADER}\n");
        for row in &rows {
            text.push_str(&row.csv());
            text.push('\n');
        }
        fs::write(cfg.out.join("sweep.csv"), &text)?;
        print!("{text}");
    }
    Ok(())
}

/// Mean of the RGB channels of the last frame, scaled into `0..=254` so
/// that 255 stays reserved for mask pixels.
fn last_frame_gray(video: &fmformer::Tensor<f32>) -> Vec<u8> {
    let s = video.shape();
    let frame = s[1] * s[2] * s[3];
    let last = &video.data()[(s[0] - 1) * frame..];
    last.chunks(s[3]).map(|px| ((px.iter().sum::<f32>() / s[3] as f32).clamp(0.0, 1.0) * 254.0).round() as u8).collect()
}

pub fn predict(cfg: &RunConfig, model: &Path, data: &Path, limit: Option<usize>) -> Result<()> {
    let model = load_model(model)?;
    ensure!(model.config.has_dense(), "this checkpoint has no dense head; nothing to export");
    let ds = read_dataset(data)?;
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    ensure!(n > 0, "no samples selected");
    let (_, h, w, _) = ds.geometry().expect("non-empty dataset");
    let dir = cfg.out.join("masks");
    fs::create_dir_all(&dir)?;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut mosaic = vec![0u8; rows * h * cols * w];
    let mut summary = String::from("sample,label,predicted,p_abnormal,mask_pixels\n");
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(cfg.train.batch.max(1)) {
        let b = ds.batch(chunk, None, None)?;
        let pred = model.predict(Some(&b.video), Some(&b.current))?;
        let masks = hard_masks(pred.pix.as_ref().expect("dense head"));
        for (j, &i) in chunk.iter().enumerate() {
            let mask = &masks[j * h * w..(j + 1) * h * w];
            let path = dir.join(format!("sample_{i:05}.pgm"));
            mask_image(mask, w, h)?.write(&path)?;
            let back = Image::read(&path)?;
            ensure!(back.width == w && back.height == h, "{} did not round-trip", path.display());
            let gray = last_frame_gray(&ds.samples[i].video);
            let (r, c) = (i / cols, i % cols);
            for y in 0..h {
                for x in 0..w {
                    let v = if mask[y * w + x] == 1 { 255 } else { gray[y * w + x] };
                    mosaic[(r * h + y) * cols * w + c * w + x] = v;
                }
            }
            let p = pred.cls.as_ref().map(|p| p.data()[j * p.last_dim() + 1]);
            let predicted = match p {
                Some(p) => u8::from(p > 0.5),
                None => u8::from(mask.contains(&1)),
            };
            let p_text = p.map(|p| format!("{p:.6}")).unwrap_or_else(|| "NA".into());
            let area = mask.iter().filter(|&&m| m == 1).count();
            summary.push_str(&format!("{i},{},{predicted},{p_text},{area}\n", ds.samples[i].label));
        }
    }
    Image::gray(cols * w, rows * h, mosaic)?.write(&cfg.out.join("overlay.pgm"))?;
    fs::write(cfg.out.join("predictions.csv"), summary)?;
    println!("wrote {n} masks to {} and overlay.pgm", dir.display());
    Ok(())
}

pub enum FrameSource {
    Dir(PathBuf),
    Dataset(PathBuf, usize),
}

struct Frames {
    width: usize,
    height: usize,
    channels: usize,
    /// One `[H, W, C]` guidance image per frame, on `[0, 1]`.
    guidance: Vec<Vec<f32>>,
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "pgm" || e == "ppm"));
    files.sort();
    ensure!(!files.is_empty(), "no .pgm or .ppm files in {}", dir.display());
    Ok(files)
}

fn load_frames(source: &FrameSource) -> Result<Frames> {
    match source {
        FrameSource::Dir(dir) => {
            let images = sorted_files(dir)?.iter().map(|p| Image::read(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<Vec<_>>>()?;
            let (w, h, c) = (images[0].width, images[0].height, images[0].channels);
            ensure!(images.iter().all(|i| (i.width, i.height, i.channels) == (w, h, c)), "frames differ in size or channels");
            Ok(Frames { width: w, height: h, channels: c, guidance: images.iter().map(Image::normalized).collect() })
        }
        FrameSource::Dataset(path, index) => {
            let ds = read_dataset(path)?;
            let s = ds.samples.get(*index).with_context(|| format!("sample {index} is out of range ({} samples)", ds.len()))?;
            let shape = s.video.shape();
            let len = shape[1] * shape[2] * shape[3];
            let guidance = s.video.data().chunks(len).map(<[f32]>::to_vec).collect();
            Ok(Frames { width: shape[2], height: shape[1], channels: shape[3], guidance })
        }
    }
}

pub fn annotate(cfg: &RunConfig, keyframes: &Path, source: &FrameSource, refine_cfg: RefineConfig) -> Result<()> {
    let text = fs::read_to_string(keyframes).with_context(|| format!("reading {}", keyframes.display()))?;
    let keys = parse_keyframes(&text)?;
    let frames = load_frames(source)?;
    for k in &keys {
        k.check(frames.width, frames.height)?;
    }
    let boxes = propagate(&keys, frames.guidance.len())?;
    let dir = cfg.out.join("annotations");
    fs::create_dir_all(&dir)?;
    let (mut boxed, mut area) = (0, 0);
    for (f, (bbox, guide)) in boxes.iter().zip(&frames.guidance).enumerate() {
        let coarse = rasterize(bbox.as_ref(), frames.width, frames.height);
        let mask = refine(&coarse, guide, frames.width, frames.height, frames.channels, refine_cfg)?;
        boxed += usize::from(bbox.is_some());
        area += mask.iter().filter(|&&m| m == 1).count();
        mask_image(&mask, frames.width, frames.height)?.write(&dir.join(format!("frame_{f:05}.pgm")))?;
    }
    println!("{} frames, {boxed} with a box, {area} anomaly pixels in total; masks in {}", boxes.len(), dir.display());
    Ok(())
}

pub struct RawInput {
    pub video: PathBuf,
    pub current: PathBuf,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub current_len: usize,
    pub crop: Option<[usize; 4]>,
    pub stride: Option<usize>,
    pub masks: Option<PathBuf>,
}

pub fn ingest(cfg: &RunConfig, raw: &RawInput) -> Result<()> {
    let video = fs::read(&raw.video).with_context(|| format!("reading {}", raw.video.display()))?;
    let bytes = fs::read(&raw.current).with_context(|| format!("reading {}", raw.current.display()))?;
    ensure!(bytes.len() % 4 == 0, "current file length is not a multiple of 4 bytes");
    let current: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let [x0, y0, x1, y1] = raw.crop.unwrap_or([0, 0, raw.width, raw.height]);
    let crop = Crop { x0, y0, x1, y1 };
    let masks = match &raw.masks {
        None => None,
        Some(dir) => {
            let mut out = Vec::new();
            for p in sorted_files(dir)? {
                let img = Image::read(&p)?;
                if img.channels != 1 || img.width != raw.width || img.height != raw.height {
                    bail!("{} is not a {}x{} gray mask", p.display(), raw.width, raw.height);
                }
                let cropped = (y0..y1).flat_map(|y| img.data[y * raw.width + x0..y * raw.width + x1].iter().map(|&v| u8::from(v > 127))).collect();
                out.push(cropped);
            }
            Some(out)
        }
    };
    let (current_mean, current_std) = NormStats::current_stats(&current);
    ensure!(current_std.iter().all(|&s| s > 0.0), "a current phase is constant; cannot standardize it");
    let rec = RawRecording {
        frames: raw.frames,
        height: raw.height,
        width: raw.width,
        current_len: raw.current_len,
        crop,
        stats: NormStats { current_mean, current_std, ..NormStats::identity() },
        clip_frames: cfg.data.frames,
        clip_current: cfg.data.current_len,
        stride: raw.stride.unwrap_or(cfg.data.frames),
    };
    let samples = ingest_raw(&video, &current, &rec, masks.as_deref())?;
    ensure!(!samples.is_empty(), "the recording is too short for a single clip");
    let ds = Dataset { samples };
    let path = cfg.out.join("ingested.fmfb");
    write_dataset(&path, &ds)?;
    let mut f = File::create(cfg.out.join("ingested.toml"))?;
    writeln!(f, "samples = {}\ncurrent_mean = {current_mean:?}\ncurrent_std = {current_std:?}", ds.len())?;
    println!("wrote {} clips to {}", ds.len(), path.display());
    Ok(())
}
