//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria; the
//! skipped ones print SKIP. The process exits non-zero if any criterion
//! fails.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use fmformer::annotate::{propagate, refine, BBox, Keyframe, RefineConfig, Role};
use fmformer::checkpoint;
use fmformer::dataset::Dataset;
use fmformer::metrics::{classify_metrics, evaluate, miou, ConfusionCounts, IouCounts};
use fmformer::params::{Graph, Mode};
use fmformer::synth::{make_dataset, GenConfig};
use fmformer::tokenization::{compute_grid, PatchGeometry};
use fmformer::training::{aggregate_label, loss_pixel, objective, train, EpochRow, TrainConfig, TrainState, TAU};
use fmformer::{Model, ModelConfig, Modality, Preset, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Clip geometry of the training-based criteria: `(T_v, H, W, T_c)`.
const TRAIN_GEOMETRY: (usize, usize, usize, usize) = (4, 32, 32, 32);
const SEEDS: [u64; 3] = [1, 2, 3];

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.0..1.0)).collect()
}

fn gen_config(occlusion: f64) -> GenConfig {
    let (t, h, w, c) = TRAIN_GEOMETRY;
    let mut g = GenConfig::default().with_geometry(t, h, w, c);
    g.occlusion = occlusion;
    g
}

fn model_config(preset: Preset) -> ModelConfig {
    let (t, h, w, c) = TRAIN_GEOMETRY;
    ModelConfig::preset(preset).with_geometry(t, h, w, c)
}

fn fit(cfg: ModelConfig, data: &Dataset, tc: &TrainConfig, seed: u64, label: &str) -> (TrainState, Vec<EpochRow>) {
    let t0 = Instant::now();
    let mut state = TrainState::new(Model::build(cfg, seed).expect("model builds"), tc.adamw);
    let rows = train(&mut state, data, tc, None, |_, row| {
        eprintln!("  {label} epoch {:>2} loss {:.4} acc {:.3} ({:.0}s)", row.epoch, row.loss.total, row.record.class.acc, t0.elapsed().as_secs_f64());
        Ok(())
    })
    .expect("training runs");
    (state, rows)
}

// 1 -------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::preset(Preset::Tiny).with_geometry(4, 16, 16, 8);
    let mut model = Model::<f32>::build(cfg, 3).unwrap().cast::<f64>();
    let mut r = rng(10);
    let video = Tensor::new([2, 4, 16, 16, 3], uniform(&mut r, 2 * 4 * 16 * 16 * 3)).unwrap();
    let current = Tensor::new([2, 8, 3], uniform(&mut r, 2 * 8 * 3)).unwrap();
    let mut masks = vec![0u8; 2 * 16 * 16];
    for y in 5..10 {
        for x in 6..12 {
            masks[y * 16 + x] = 1;
        }
    }
    let labels = [1u8, 0];

    let loss = |m: &Model<f64>| -> f64 {
        let mut g = Graph::new(&m.store, Mode::Train);
        let out = m.forward(&mut g, Some(&video), Some(&current)).unwrap();
        let (l, _) = objective(&mut g.tape, &out, &masks, &labels, 1.0).unwrap();
        g.tape.value(l).data()[0]
    };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let out = model.forward(&mut g, Some(&video), Some(&current)).unwrap();
        let (l, _) = objective(&mut g.tape, &out, &masks, &labels, 1.0).unwrap();
        g.tape.backward(l).unwrap();
        g.grads().into_iter().map(|o| o.expect("every parameter gets a gradient").to_vec()).collect()
    };

    let ids: Vec<_> = model.store.ids().collect();
    let per_tensor = 200usize.div_ceil(ids.len()).max(2);
    let h = 1e-3;
    let (mut checked, mut worst, mut worst_name, mut failures) = (0, 0.0f64, String::new(), 0);
    let mut modules = BTreeSet::new();
    for (i, &id) in ids.iter().enumerate() {
        let name = model.store.name(id).to_string();
        modules.insert(name.split('.').next().unwrap_or("").to_string());
        let n = model.store.value(id).len();
        for _ in 0..per_tensor.min(n) {
            let j = r.random_range(0..n);
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + h;
            let up = loss(&model);
            model.store.value_mut(id).data_mut()[j] = orig - h;
            let down = loss(&model);
            model.store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel >= 1e-5 {
                failures += 1;
            }
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{j}]");
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && checked >= 200 && secs < 300.0;
    outcome(
        pass,
        format!(
            "{checked} coordinates over {} parameter tensors ({} top-level modules), {failures} above 1e-5, worst {worst:.2e} at {worst_name}, {secs:.0}s",
            ids.len(),
            modules.len()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn attention_rows_normalized() -> Outcome {
    let cfg = ModelConfig::preset(Preset::Tiny).with_geometry(4, 16, 16, 8);
    let model = Model::<f32>::build(cfg.clone(), 4).unwrap();
    let nv = cfg.video_layout().unwrap().tokens();
    let nc = cfg.current_len + 1;
    let mut r = rng(20);
    let (mut rows, mut worst) = (0u64, 0.0f64);
    let mut kinds = BTreeSet::new();
    for _ in 0..100 {
        let b = r.random_range(1..=3);
        let video = Tensor::new([b, 4, 16, 16, 3], uniform(&mut r, b * 4 * 16 * 16 * 3).into_iter().map(|v| v as f32).collect()).unwrap();
        let current = Tensor::new([b, 8, 3], (0..b * 24).map(|_| r.random_range(-2.0f32..2.0)).collect()).unwrap();
        let mut g = Graph::inference(&model.store);
        model.forward(&mut g, Some(&video), Some(&current)).unwrap();
        for (probs, dims) in g.tape.attention_maps() {
            kinds.insert((dims.queries, dims.keys));
            for row in probs.chunks(dims.keys) {
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    let want = BTreeSet::from([(nv, nv), (nc, nc), (nv, nc), (nc, nv)]);
    let pass = worst <= 1e-6 && want.is_subset(&kinds);
    outcome(pass, format!("{rows} rows, max |sum-1| = {worst:.2e}, query/key shapes seen {kinds:?}"))
}

// 3 -------------------------------------------------------------------------

/// Counts non-overlapping placements of a `size` window along `extent`.
fn tiles(extent: usize, size: usize) -> usize {
    let (mut n, mut start) = (0, 0);
    while start + size <= extent {
        n += 1;
        start += size;
    }
    n
}

fn token_counts() -> Outcome {
    let mut r = rng(30);
    let (mut agree, mut total) = (0, 0);
    for _ in 0..200 {
        let geom = PatchGeometry { t: r.random_range(1..=3), h: r.random_range(2..=9), w: r.random_range(2..=9), dilation: r.random_range(1..=3) };
        let (frames, height, width) = (r.random_range(1..=12), r.random_range(4..=96), r.random_range(4..=96));
        let (fh, fw) = ((geom.h - 1) * geom.dilation + 1, (geom.w - 1) * geom.dilation + 1);
        let nt = tiles(frames, geom.t);
        let standard = nt * tiles(height, geom.h) * tiles(width, geom.w);
        let dilated = nt * tiles(height, fh) * tiles(width, fw);
        let empty = standard == 0 || dilated == 0;
        total += 1;
        match compute_grid(frames, height, width, &geom) {
            Ok(g) if !empty => agree += usize::from(g.video_tokens(true) == 1 + standard + dilated && g.video_tokens(false) == 1 + standard),
            Err(_) if empty => agree += 1,
            _ => {}
        }
    }
    let worked = compute_grid(4, 64, 64, &PatchGeometry::default()).map(|g| g.video_tokens(true)).unwrap_or(0);
    outcome(agree == total && worked == 161, format!("{agree}/{total} geometries agree with enumeration, worked case N_v = {worked}"))
}

// 4 -------------------------------------------------------------------------

fn shape_contract() -> Outcome {
    let mut r = rng(40);
    let video = Tensor::new([1, 8, 64, 64, 3], (0..8 * 64 * 64 * 3).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    let current = Tensor::new([1, 64, 3], (0..192).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    let mut base_params = 0;
    for &preset in Preset::ALL {
        let model = Model::<f32>::build(ModelConfig::preset(preset), 5).unwrap();
        let ok = match model.predict(Some(&video), Some(&current)) {
            Ok(p) => {
                p.pix.as_ref().map(|t| t.shape().to_vec()) == Some(vec![1, 64, 64, 2])
                    && p.cls.as_ref().map(|t| t.shape().to_vec()) == Some(vec![1, 2])
            }
            Err(_) => false,
        };
        pass &= ok;
        if preset == Preset::Base {
            base_params = model.num_params();
        }
        notes.push(format!("{preset} {} params {}", model.num_params(), if ok { "ok" } else { "BAD" }));
    }
    pass &= (930_000..=3_720_000).contains(&base_params);
    outcome(pass, notes.join(", "))
}

// 5 -------------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = make_dataset(256, &gen_config(0.0), 11, 0).unwrap().dataset;
    let tc = TrainConfig { epochs: 50, batch: 16, decay_after: 40, seed: 3, stop_at: Some((0.98, 0.90)), ..TrainConfig::default() };
    let (state, rows) = fit(model_config(Preset::Tiny), &data, &tc, 1, "overfit");
    let rec = evaluate(&state.model, &data, 32).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (acc, m) = (rec.class.acc, rec.miou().unwrap_or(0.0));
    // soft check: each loss component falls over the first five epochs, one rise allowed
    let rises = |f: fn(&EpochRow) -> f64| rows.iter().take(5).collect::<Vec<_>>().windows(2).filter(|w| f(w[1]) > f(w[0])).count();
    let (pix_rises, cls_rises) = (rises(|r| r.loss.pix), rises(|r| r.loss.cls));
    let pass = acc >= 0.98 && m >= 0.90 && rows.len() <= 50 && secs < 600.0;
    outcome(
        pass,
        format!(
            "train acc {acc:.4}, mIoU {m:.4} after {} epochs in {secs:.0}s; early-epoch loss rises pix {pix_rises} cls {cls_rises}",
            rows.len()
        ),
    )
}

// 6, 7 ----------------------------------------------------------------------

struct Scores {
    acc: f64,
    f1: f64,
    mdr: f64,
    miou: f64,
}

fn trial(cfg: ModelConfig, seed: u64, train_data: &Dataset, test: &Dataset, label: &str) -> Scores {
    let tc = TrainConfig { epochs: 30, batch: 16, decay_after: 20, seed, ..TrainConfig::default() };
    let (state, _) = fit(cfg, train_data, &tc, seed, label);
    let rec = evaluate(&state.model, test, 32).unwrap();
    let s = Scores { acc: rec.class.acc, f1: rec.class.f1, mdr: rec.class.mdr, miou: rec.miou().unwrap_or(0.0) };
    eprintln!("  {label}: acc {:.4} f1 {:.4} mdr {:.4} mIoU {:.4}", s.acc, s.f1, s.mdr, s.miou);
    s
}

fn mean(v: &[Scores], f: fn(&Scores) -> f64) -> f64 {
    v.iter().map(f).sum::<f64>() / v.len() as f64
}

const N_TRAIN: usize = 192;
const N_TEST: usize = 128;

fn cross_modal_advantage() -> Outcome {
    let (mut cross, mut visual) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let gen = gen_config(0.5);
        let train_data = make_dataset(N_TRAIN, &gen, seed, 0).unwrap().dataset;
        let test = make_dataset(N_TEST, &gen, seed, 1).unwrap().dataset;
        cross.push(trial(model_config(Preset::Base), seed, &train_data, &test, &format!("cross s{seed}")));
        let mut v = model_config(Preset::Base);
        v.modality = Modality::Visual;
        visual.push(trial(v, seed, &train_data, &test, &format!("visual s{seed}")));
    }
    let (ca, cf, cm) = (mean(&cross, |s| s.acc), mean(&cross, |s| s.f1), mean(&cross, |s| s.mdr));
    let (va, vf, vm) = (mean(&visual, |s| s.acc), mean(&visual, |s| s.f1), mean(&visual, |s| s.mdr));
    outcome(
        ca >= va && cf >= vf && cm <= vm,
        format!("cross acc {ca:.4} f1 {cf:.4} mdr {cm:.4} vs visual acc {va:.4} f1 {vf:.4} mdr {vm:.4}"),
    )
}

fn dilation_ablation() -> Outcome {
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let gen = gen_config(0.0);
        let train_data = make_dataset(N_TRAIN, &gen, seed, 0).unwrap().dataset;
        let test = make_dataset(N_TEST, &gen, seed, 1).unwrap().dataset;
        on.push(trial(model_config(Preset::Tiny), seed, &train_data, &test, &format!("dilated s{seed}")));
        let mut c = model_config(Preset::Tiny);
        c.dilated = false;
        off.push(trial(c, seed, &train_data, &test, &format!("standard s{seed}")));
    }
    let (a, b) = (mean(&on, |s| s.miou), mean(&off, |s| s.miou));
    outcome(a >= b - 0.005, format!("mIoU dilated {a:.4} vs standard {b:.4}"))
}

// 8 -------------------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros([2, 4, 4, 2]));
    let masks: Vec<u8> = (0..32).map(|i| (i % 3 == 0) as u8).collect();
    let l = loss_pixel(&mut tape, logits, &masks).unwrap();
    let ce = tape.value(l).data()[0];
    let mut g_ok = true;
    for bits in 0u8..16 {
        let mask: Vec<u8> = (0..4).map(|i| (bits >> i) & 1).collect();
        g_ok &= aggregate_label(&mask, TAU) == usize::from(bits != 0);
    }
    outcome((ce - LN_2).abs() <= 1e-6 && g_ok, format!("uniform CE {ce:.9} (ln 2 = {LN_2:.9}), aggregation over 16 masks {}", if g_ok { "exact" } else { "WRONG" }))
}

// 9 -------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut r = rng(90);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let pairs: Vec<(bool, bool)> = (0..n).map(|_| (r.random_bool(0.5), r.random_bool(0.5))).collect();
        let mut counts = ConfusionCounts::default();
        for &(p, t) in &pairs {
            counts.record(p, t);
        }
        let count = |p: bool, t: bool| pairs.iter().filter(|&&x| x == (p, t)).count() as u64;
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        mismatches += usize::from((counts.tp, counts.fp, counts.tn, counts.fn_) != (tp, fp, tn, fn_));
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let m = classify_metrics(&counts);
        for (got, want) in [
            (m.acc, div(tp + tn, n as u64)),
            (m.f1, div(2 * tp, 2 * tp + fp + fn_)),
            (m.fdr, div(fp, fp + tn)),
            (m.mdr, div(fn_, fn_ + tp)),
        ] {
            worst = worst.max((got - want).abs());
        }

        let k = r.random_range(2..=3usize);
        let images = r.random_range(1..4);
        let len = r.random_range(1..50);
        let preds: Vec<Vec<u8>> = (0..images).map(|_| (0..len).map(|_| r.random_range(0..k) as u8).collect()).collect();
        let truths: Vec<Vec<u8>> = (0..images).map(|_| (0..len).map(|_| r.random_range(0..k) as u8).collect()).collect();
        let mut acc = IouCounts::new(k);
        for (p, t) in preds.iter().zip(&truths) {
            acc.add(p, t).unwrap();
        }
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for (p, t) in preds.iter().zip(&truths) {
                for (&a, &b) in p.iter().zip(t) {
                    inter += u64::from(a == c && b == c);
                    union += u64::from(a == c || b == c);
                }
            }
            mismatches += usize::from(acc.intersection[c as usize] != inter || acc.union[c as usize] != union);
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        let p: Vec<&[u8]> = preds.iter().map(Vec::as_slice).collect();
        let t: Vec<&[u8]> = truths.iter().map(Vec::as_slice).collect();
        worst = worst.max((miou(&p, &t, k).unwrap() - want).abs());
    }
    outcome(mismatches == 0 && worst <= 1e-9, format!("1000 cases, {mismatches} count mismatches, max ratio error {worst:.1e}"))
}

// 10 ------------------------------------------------------------------------

fn annotation_tools() -> Outcome {
    let mut r = rng(100);
    let mut box_errors = 0;
    for _ in 0..100 {
        let mut frames: Vec<usize> = (0..3).map(|_| r.random_range(0..60)).collect();
        frames.sort();
        frames.dedup();
        if frames.len() < 2 {
            continue;
        }
        let keys: Vec<Keyframe> = frames
            .iter()
            .zip([Role::Onset, Role::Apex, Role::Offset])
            .map(|(&frame, role)| {
                let (x0, y0) = (r.random_range(0..40) as f64, r.random_range(0..40) as f64);
                let bbox = BBox::new(x0, y0, x0 + r.random_range(0..20) as f64, y0 + r.random_range(0..20) as f64);
                Keyframe { frame, role, bbox }
            })
            .collect();
        let boxes = propagate(&keys, 64).unwrap();
        for k in &keys {
            box_errors += usize::from(boxes[k.frame] != Some(k.bbox));
        }
        for w in keys.windows(2) {
            if (w[1].frame - w[0].frame) % 2 == 0 {
                let (a, b) = (w[0].bbox, w[1].bbox);
                let mid = BBox::new((a.x0 + b.x0) / 2.0, (a.y0 + b.y0) / 2.0, (a.x1 + b.x1) / 2.0, (a.y1 + b.y1) / 2.0);
                box_errors += usize::from(boxes[(w[0].frame + w[1].frame) / 2] != Some(mid));
            }
        }
    }

    let mut median_errors = 0;
    for _ in 0..50 {
        let (w, h) = (r.random_range(4..24), r.random_range(4..24));
        let radius = r.random_range(1..4);
        let density = r.random_range(0.1..0.9);
        let mask: Vec<u8> = (0..w * h).map(|_| u8::from(r.random_bool(density))).collect();
        let guide = vec![0.4f32; w * h];
        let got = refine(&mask, &guide, w, h, 1, RefineConfig { radius, sigma: 0.1 }).unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut window: Vec<u8> = Vec::new();
                for qy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                    for qx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                        window.push(mask[qy * w + qx]);
                    }
                }
                window.sort();
                // lower median, so an even split resolves to normal
                median_errors += usize::from(got[y * w + x] != window[(window.len() - 1) / 2]);
            }
        }
    }
    outcome(box_errors == 0 && median_errors == 0, format!("{box_errors} box mismatches, {median_errors} pixels differ from the plain median on 50 masks"))
}

// 11 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let gen = GenConfig::default().with_geometry(2, 16, 16, 8);
    let data = make_dataset(12, &gen, 5, 0).unwrap().dataset;
    let cfg = ModelConfig::preset(Preset::Tiny).with_geometry(2, 16, 16, 8);
    let tc = TrainConfig { epochs: 2, batch: 4, seed: 9, ..TrainConfig::default() };
    let digest = |seed: u64| {
        let mut state = TrainState::new(Model::build(cfg.clone(), seed).unwrap(), tc.adamw);
        train(&mut state, &data, &TrainConfig { seed, ..tc.clone() }, None, |_, _| Ok(())).unwrap();
        let mut bytes = Vec::new();
        checkpoint::write(&mut bytes, &state.model, Some((&state.optimizer, state.epoch))).unwrap();
        (Sha256::digest(&bytes).to_vec(), bytes, state)
    };
    let (h1, bytes, state) = digest(9);
    let (h2, _, _) = digest(9);
    let (h3, _, _) = digest(10);
    let loaded = checkpoint::read(&mut bytes.as_slice()).unwrap();
    let batch = data.batch(&[0, 1, 2], None, None).unwrap();
    let a = state.model.predict(Some(&batch.video), Some(&batch.current)).unwrap();
    let b = loaded.model.predict(Some(&batch.video), Some(&batch.current)).unwrap();
    let bits = |t: &Option<Tensor<f32>>| t.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let identical = bits(&a.pix) == bits(&b.pix) && bits(&a.cls) == bits(&b.cls);
    outcome(
        h1 == h2 && h1 != h3 && identical,
        format!(
            "repeat hash {}, other seed {}, reloaded forward {}",
            if h1 == h2 { "identical" } else { "DIFFERS" },
            if h1 != h3 { "differs" } else { "SAME" },
            if identical { "bitwise identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 11] = [
        ("gradient oracle", gradient_oracle),
        ("attention normalization", attention_rows_normalized),
        ("token-count oracle", token_counts),
        ("shape contract", shape_contract),
        ("overfit check", overfit),
        ("cross-modal advantage", cross_modal_advantage),
        ("dilated tokenization ablation", dilation_ablation),
        ("loss oracles", loss_oracles),
        ("metric oracles", metric_oracles),
        ("annotation tools", annotation_tools),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("SKIP {n:>2} {name}");
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!result.pass);
        println!("{} {n:>2} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
