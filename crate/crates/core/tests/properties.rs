use std::f64::consts::PI;

use fmformer::annotate::{propagate, rasterize, refine, BBox, Keyframe, RefineConfig, Role};
use fmformer::kernels::attention::{self, AttnDims};
use fmformer::metrics::{classify_metrics, ConfusionCounts, IouCounts};
use fmformer::pgm::Image;
use fmformer::synth::{GenConfig, Scenario};
use fmformer::tokenization::{compute_grid, PatchGeometry};
use fmformer::training::{aggregate_label, lr_schedule, TAU};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn enumerate(extent: usize, window: usize) -> usize {
    (0..extent).step_by(window).filter(|&s| s + window <= extent).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn token_count_matches_enumeration(
        t in 1usize..4, h in 1usize..10, w in 1usize..10, d in 1usize..4,
        frames in 1usize..16, height in 1usize..100, width in 1usize..100,
    ) {
        let geom = PatchGeometry { t, h, w, dilation: d };
        let nt = enumerate(frames, t);
        let standard = nt * enumerate(height, h) * enumerate(width, w);
        let dilated = nt * enumerate(height, (h - 1) * d + 1) * enumerate(width, (w - 1) * d + 1);
        match compute_grid(frames, height, width, &geom) {
            Ok(g) => {
                prop_assert_eq!(g.video_tokens(false), 1 + standard);
                prop_assert_eq!(g.video_tokens(true), 1 + standard + dilated);
            }
            Err(_) => prop_assert!(standard == 0 || dilated == 0),
        }
    }

    #[test]
    fn attention_rows_are_convex_weights(
        batch in 1usize..3, heads in 1usize..4, hd in 1usize..5, nq in 1usize..7, nk in 1usize..7,
        seed in any::<u64>(),
    ) {
        let d = heads * hd;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.random_range(-3.0..3.0);
        let q: Vec<f64> = (0..batch * nq * d).map(|_| next()).collect();
        let k: Vec<f64> = (0..batch * nk * d).map(|_| next()).collect();
        let v: Vec<f64> = (0..batch * nk * d).map(|_| next()).collect();
        let a = AttnDims { batch, queries: nq, keys: nk, dim: d, heads };
        let (out, probs) = attention::forward(&q, &k, &v, a, 1.0 / (hd as f64).sqrt());
        for row in probs.chunks(nk) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // each output coordinate is a weighted mean of the value column
        for b in 0..batch {
            for i in 0..nq {
                for c in 0..d {
                    let col = (0..nk).map(|j| v[(b * nk + j) * d + c]);
                    let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
                    let o = out[(b * nq + i) * d + c];
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn confusion_counts_balance(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let mut c = ConfusionCounts::default();
        for &(p, t) in &pairs {
            c.record(p, t);
        }
        let positives = pairs.iter().filter(|x| x.1).count() as u64;
        let predicted = pairs.iter().filter(|x| x.0).count() as u64;
        prop_assert_eq!(c.total(), pairs.len() as u64);
        prop_assert_eq!(c.tp + c.fn_, positives);
        prop_assert_eq!(c.tp + c.fp, predicted);
        let m = classify_metrics(&c);
        for r in [m.acc, m.f1, m.fdr, m.mdr] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn iou_union_is_inclusion_exclusion(
        classes in 2usize..4,
        pixels in prop::collection::vec((0u8..4, 0u8..4), 1..300),
    ) {
        let k = classes as u8;
        let pred: Vec<u8> = pixels.iter().map(|p| p.0 % k).collect();
        let truth: Vec<u8> = pixels.iter().map(|p| p.1 % k).collect();
        let mut acc = IouCounts::new(classes);
        acc.add(&pred, &truth).unwrap();
        for c in 0..k {
            let np = pred.iter().filter(|&&x| x == c).count() as u64;
            let nt = truth.iter().filter(|&&x| x == c).count() as u64;
            let i = acc.intersection[c as usize];
            prop_assert!(i <= np.min(nt));
            prop_assert_eq!(acc.union[c as usize], np + nt - i);
        }
        let m = acc.miou();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn any_anomalous_pixel_makes_the_clip_abnormal(mask in prop::collection::vec(0u8..2, 1..64)) {
        prop_assert_eq!(aggregate_label(&mask, TAU), usize::from(mask.contains(&1)));
    }

    #[test]
    fn learning_rate_drops_tenfold_after_the_decay_epoch(epoch in 1usize..60, after in 0usize..40) {
        let lr = lr_schedule(epoch, 5e-4, after);
        let want = if epoch <= after { 5e-4 } else { 5e-5 };
        prop_assert!((lr - want).abs() < 1e-15);
    }

    #[test]
    fn half_max_mask_area_matches_the_disc(seed in any::<u64>()) {
        let cfg = GenConfig::default();
        let s = Scenario::draw(&cfg, seed, true, false);
        let e = s.episode.as_ref().unwrap();
        let (cy, cx) = e.center_at(cfg.frames as f64 - 1.0);
        let r = e.half_max_radius();
        let inside = cy >= r && cx >= r && cy + r <= (cfg.height - 1) as f64 && cx + r <= (cfg.width - 1) as f64;
        prop_assume!(inside && e.ramp(cfg.frames as f64 - 1.0) > 0.0);
        let area = s.mask().iter().filter(|&&m| m == 1).count() as f64;
        let disc = PI * r * r;
        prop_assert!((area / disc - 1.0).abs() <= 0.3, "area {} disc {}", area, disc);
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, fill in any::<u8>()) {
        let data: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(37).wrapping_add(fill)).collect();
        let img = Image::gray(w, h, data).unwrap();
        prop_assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn propagated_boxes_stay_between_their_keyframes(
        f0 in 0usize..20, gap in 1usize..30,
        a in prop::array::uniform4(0.0f64..50.0), b in prop::array::uniform4(0.0f64..50.0),
    ) {
        let mk = |v: [f64; 4]| BBox::new(v[0], v[1], v[0] + v[2], v[1] + v[3]);
        let (ba, bb) = (mk(a), mk(b));
        let keys = [
            Keyframe { frame: f0, role: Role::Onset, bbox: ba },
            Keyframe { frame: f0 + gap, role: Role::Offset, bbox: bb },
        ];
        let boxes = propagate(&keys, f0 + gap + 5).unwrap();
        for (t, bx) in boxes.iter().enumerate() {
            if t < f0 || t > f0 + gap {
                prop_assert!(bx.is_none());
                continue;
            }
            let bx = bx.unwrap();
            for (v, lo, hi) in [(bx.x0, ba.x0, bb.x0), (bx.y0, ba.y0, bb.y0), (bx.x1, ba.x1, bb.x1), (bx.y1, ba.y1, bb.y1)] {
                prop_assert!(v >= lo.min(hi) - 1e-9 && v <= lo.max(hi) + 1e-9);
            }
        }
    }

    #[test]
    fn refine_never_grows_a_box_beyond_its_dilation(
        w in 4usize..24, h in 4usize..24, radius in 0usize..4, corner in (0usize..20, 0usize..20), size in (0usize..8, 0usize..8),
        seed in any::<u64>(),
    ) {
        let (x0, y0) = (corner.0 % w, corner.1 % h);
        let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + size.0) as f64, (y0 + size.1) as f64);
        let mask = rasterize(Some(&bbox), w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let guide: Vec<f32> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let out = refine(&mask, &guide, w, h, 3, RefineConfig { radius, sigma: 0.1 }).unwrap();
        let x1 = (x0 + size.0).min(w - 1);
        let y1 = (y0 + size.1).min(h - 1);
        for y in 0..h {
            for x in 0..w {
                let near = x + radius >= x0 && x <= x1 + radius && y + radius >= y0 && y <= y1 + radius;
                prop_assert!(near || out[y * w + x] == 0);
            }
        }
        if radius == 0 {
            prop_assert_eq!(out, mask);
        }
    }
}
