//! Joint dense and class objective, AdamW, the step learning-rate schedule and
//! the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax, hard_masks, ConfusionCounts, EvalRecord, IouCounts};
use crate::model::{Model, Outputs};
use crate::nn::BN_MOMENTUM;
use crate::params::{apply_bn_updates, Graph, Mode, ParamStore};
use crate::real::Real;
use crate::synth::splitmix;
use crate::tensor::Tensor;

/// Anomaly-pixel count threshold for the class label.
pub const TAU: f64 = 0.5;
/// Floor applied to probabilities before the log in the class loss.
pub const LOG_EPS: f64 = 1e-12;

/// Class index of a mask: 1 (abnormal) iff more than `tau` pixels are set.
pub fn aggregate_label(mask: &[u8], tau: f64) -> usize {
    let count = mask.iter().filter(|&&m| m != 0).count();
    usize::from(count as f64 > tau)
}

/// One-hot rows `[n, classes]` from hard labels; labels must be below `classes`.
pub fn one_hot<T: Real>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!("label {bad} is not a valid class of {classes}")));
    }
    Ok(Tensor::from_fn([labels.len(), classes], |i| if labels[i / classes] as usize == i % classes { T::one() } else { T::zero() }))
}

/// Mean pixel cross-entropy of logits `[B, H, W, K]` against binary masks.
pub fn loss_pixel<T: Real>(tape: &mut Tape<T>, logits: Var, masks: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let k = *s.last().unwrap();
    let pixels = tape.value(logits).len() / k;
    if masks.len() != pixels {
        return Err(Error::shape("loss_pixel", format!("{} mask pixels for logits {s:?}", masks.len())));
    }
    if masks.iter().any(|&m| m > 1) {
        return Err(Error::Contract("pixel targets must be binary".into()));
    }
    let flat = tape.reshape(logits, &[pixels, k])?;
    tape.cross_entropy(flat, &one_hot(masks, k)?)
}

/// Mean over the batch of `-Σ_k G(y)_k log p_k`, with `p` clamped at 1e-12.
pub fn loss_class<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let k = tape.value(probs).last_dim();
    let target = one_hot(labels, k)?;
    let eps = T::lit(LOG_EPS);
    if tape.value(probs).data().iter().zip(target.data()).any(|(&p, &t)| t > T::zero() && p < eps) {
        log::warn!("class probability of the true class fell below {LOG_EPS}; the log is clamped");
    }
    tape.nll(probs, &target, eps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pix: f64,
    pub cls: f64,
    pub total: f64,
}

/// Total objective `L_pix + α·L_cls` over whichever heads the model has.
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    out: &Outputs,
    masks: &[u8],
    labels: &[u8],
    alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    let pix = out.pix.map(|p| loss_pixel(tape, p, masks)).transpose()?;
    let cls = out.cls.map(|p| loss_class(tape, p, labels)).transpose()?;
    let scaled = cls.map(|c| tape.scale(c, T::lit(alpha))).transpose()?;
    let total = match (pix, scaled) {
        (Some(p), Some(c)) => tape.add(p, c)?,
        (Some(p), None) => p,
        (None, Some(c)) => c,
        (None, None) => return Err(Error::Config("model has no output heads".into())),
    };
    let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
    let breakdown = LossBreakdown { pix: read(pix), cls: read(cls), total: read(Some(total)) };
    Ok((total, breakdown))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with bias correction. Weight decay multiplies the parameter by
/// `1 - lr·wd` before the adaptive update and is skipped for biases, norm
/// affines and embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Parameters without a gradient are only decayed.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("gradient list does not match the parameter store".into()));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let decay = if store.param(id).kind.decays() { T::lit(1.0 - lr * c.weight_decay) } else { T::one() };
            let p = store.value_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] = p[j] * decay - lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => p.iter_mut().for_each(|x| *x *= decay),
            }
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: `base` through `decay_after`, then
/// `base / 10`.
pub fn lr_schedule(epoch: usize, base: f64, decay_after: usize) -> f64 {
    if epoch <= decay_after {
        base
    } else {
        base * 0.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_after: usize,
    pub alpha: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Stop once an evaluation-mode pass over the training set reaches this
    /// `(accuracy, mIoU)`; checked only after the running metrics do.
    pub stop_at: Option<(f64, f64)>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 16,
            lr: 5e-4,
            decay_after: 20,
            alpha: 1.0,
            seed: 0,
            adamw: AdamWConfig::default(),
            stop_at: None,
            clip_norm: Some(1.0),
        }
    }
}

/// Model, optimizer and progress; everything a resumable checkpoint holds.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model<f32>, adamw: AdamWConfig) -> Self {
        let optimizer = AdamW::new(&model.store, adamw);
        TrainState { model, optimizer, epoch: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub record: EvalRecord,
}

pub const CSV_HEADER: &str = "epoch,lr,loss_pix,loss_cls,loss_total,acc,f1,fdr,mdr,miou";

impl EpochRow {
    pub fn csv(&self) -> String {
        let c = &self.record.class;
        let miou = self.record.miou().map(|m| format!("{m:.6}")).unwrap_or_else(|| "NA".into());
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{miou}",
            self.epoch, self.lr, self.loss.pix, self.loss.cls, self.loss.total, c.acc, c.f1, c.fdr, c.mdr
        )
    }
}

/// Sample order of a 1-based epoch; depends only on the seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch as u64))));
    order
}

/// One optimizer step on a batch; returns the losses and the train-mode
/// predictions used for running metrics.
fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<(LossBreakdown, StepPreds)> {
    let model = &state.model;
    let mut g = Graph::new(&model.store, Mode::Train);
    let out = model.forward(&mut g, Some(&batch.video), Some(&batch.current))?;
    let (loss, breakdown) = objective(&mut g.tape, &out, &batch.masks, &batch.labels, cfg.alpha)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let preds = StepPreds {
        masks: out.pix.map(|p| hard_masks(g.tape.value(p))),
        cls: out.cls.map(|p| {
            let t = g.tape.value(p);
            t.data().chunks(t.last_dim()).map(|r| argmax(r) as u8).collect()
        }),
    };
    g.tape.backward(loss)?;
    let mut grads: Vec<Option<Vec<f32>>> = g.grads().into_iter().map(|o| o.map(<[f32]>::to_vec)).collect();
    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut grads, max)?;
    }
    let bn = g.bn_updates();
    drop(g);
    state.optimizer.update(&mut state.model.store, &grads, lr)?;
    apply_bn_updates(&mut state.model.store, &bn, BN_MOMENTUM as f32);
    Ok((breakdown, preds))
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max: f64) -> Result<f64> {
    let norm = grads.iter().flatten().flatten().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max {
        let scale = (max / norm) as f32;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

struct StepPreds {
    masks: Option<Vec<u8>>,
    cls: Option<Vec<u8>>,
}

/// Trains from `state.epoch + 1` through `cfg.epochs`, appending one CSV row
/// per epoch to `log` when given and calling `on_epoch` after each epoch.
///
/// On divergence the state is rolled back to the start of the failing epoch
/// and [`Error::Diverged`] is returned.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut on_epoch: impl FnMut(&TrainState, &EpochRow) -> Result<()>,
) -> Result<Vec<EpochRow>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rows = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let lr = lr_schedule(epoch, cfg.lr, cfg.decay_after);
        let snapshot = (state.model.store.clone(), state.optimizer.clone());
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sums = LossBreakdown::default();
        let mut counts = ConfusionCounts::default();
        let mut iou = state.model.config.has_dense().then(|| IouCounts::new(state.model.config.classes));
        for chunk in order.chunks(cfg.batch) {
            let batch = data.batch(chunk, None, None)?;
            let (loss, preds) = match train_step(state, &batch, cfg, lr) {
                Ok(r) => r,
                Err(e @ (Error::NonFinite(_) | Error::Diverged { .. })) => {
                    state.model.store = snapshot.0;
                    state.optimizer = snapshot.1;
                    return Err(Error::Diverged { epoch, detail: e.to_string() });
                }
                Err(e) => return Err(e),
            };
            let w = chunk.len() as f64 / data.len() as f64;
            sums.pix += loss.pix * w;
            sums.cls += loss.cls * w;
            sums.total += loss.total * w;
            if let (Some(acc), Some(m)) = (iou.as_mut(), preds.masks.as_ref()) {
                acc.add(m, &batch.masks)?;
            }
            let pixels = batch.masks.len() / chunk.len();
            for (i, &truth) in batch.labels.iter().enumerate() {
                let predicted = match (&preds.cls, &preds.masks) {
                    (Some(c), _) => c[i] == 1,
                    (None, Some(m)) => aggregate_label(&m[i * pixels..(i + 1) * pixels], TAU) == 1,
                    (None, None) => false,
                };
                counts.record(predicted, truth == 1);
            }
        }
        state.epoch = epoch;
        let row = EpochRow { epoch, lr, loss: sums, record: EvalRecord::from_counts(counts, iou) };
        log::info!("{}", row.csv());
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", row.csv())?;
            w.flush()?;
        }
        on_epoch(state, &row)?;
        let reached = |acc: f64, miou: Option<f64>, target: (f64, f64)| acc >= target.0 && miou.is_none_or(|m| m >= target.1);
        rows.push(row);
        if let Some(target) = cfg.stop_at {
            let last = rows.last().unwrap();
            if reached(last.record.class.acc, last.record.miou(), target) {
                let full = crate::metrics::evaluate(&state.model, data, cfg.batch)?;
                if reached(full.class.acc, full.miou(), target) {
                    log::info!("stopping after epoch {epoch}: evaluation reached {target:?}");
                    break;
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamKind, ParamStore};

    #[test]
    fn clipping_rescales_only_above_the_ceiling() {
        let mut g = vec![Some(vec![3.0f32]), None, Some(vec![0.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g[0].as_deref(), Some(&[3.0f32][..]));
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-7);
        assert!((g[2].as_ref().unwrap()[1] - 0.8).abs() < 1e-7);
        let mut bad = vec![Some(vec![f32::NAN])];
        assert!(clip_global_norm(&mut bad, 1.0).is_err());
    }

    #[test]
    fn aggregation_threshold() {
        assert_eq!(aggregate_label(&[0, 0, 0, 0], TAU), 0);
        assert_eq!(aggregate_label(&[0, 1, 0, 0], TAU), 1);
        assert_eq!(aggregate_label(&[1, 1, 1, 1], TAU), 1);
    }

    #[test]
    fn schedule_steps_down_after_twenty_epochs() {
        assert_eq!(lr_schedule(1, 5e-4, 20), 5e-4);
        assert_eq!(lr_schedule(20, 5e-4, 20), 5e-4);
        assert!((lr_schedule(21, 5e-4, 20) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(30, 5e-4, 20) - 5e-5).abs() < 1e-18);
    }

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap(), ParamKind::Weight).unwrap();
        s.add("b", Tensor::from_f64([2], &[1.0, 1.0]).unwrap(), ParamKind::Bias).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let mut s = store();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.update(&mut s, &[Some(vec![0.0; 3]), Some(vec![0.0; 2])], 5e-4).unwrap();
        let f = 1.0 - 5e-4 * 0.01;
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[f, -2.0 * f, 0.5 * f]);
        assert_eq!(s.value(s.id("b").unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&s, cfg);
        opt.update(&mut s, &[Some(vec![3.0, -0.2, 7.0]), None], 1e-2).unwrap();
        let w = s.value(s.id("w").unwrap()).data();
        for (got, (start, sign)) in w.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((got - (start - 1e-2 * sign)).abs() < 1e-8, "{got}");
        }
    }

    #[test]
    fn zero_lr_without_decay_changes_nothing() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.update(&mut s, &[Some(vec![1.0; 3]), Some(vec![1.0; 2])], 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn nan_gradient_aborts_the_step() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        assert!(opt.update(&mut s, &[Some(vec![f64::NAN, 0.0, 0.0]), None], 1e-3).is_err());
        assert_eq!(s, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn pixel_loss_oracles() {
        let mut t = Tape::<f64>::new();
        let uniform = t.param(Tensor::zeros([2, 2, 2, 2]));
        let l = loss_pixel(&mut t, uniform, &[0, 1, 1, 0, 1, 1, 1, 0]).unwrap();
        assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let mask = [1u8, 0, 0, 1];
        let sure = t.constant(Tensor::from_fn([1, 2, 2, 2], |i| if (i % 2) as u8 == mask[i / 2] { 20.0 } else { -20.0 }));
        let l = loss_pixel(&mut t, sure, &mask).unwrap();
        assert!(t.value(l).data()[0] < 1e-8);
        assert!(loss_pixel(&mut t, sure, &[0, 2, 0, 0]).is_err());
    }

    #[test]
    fn class_loss_oracles() {
        let mut t = Tape::<f64>::new();
        let half = t.constant(Tensor::full([2, 2], 0.5));
        let l = loss_class(&mut t, half, &[0, 1]).unwrap();
        assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = t.constant(Tensor::from_f64([1, 2], &[1.0 - 1e-12, 1e-12]).unwrap());
        let l = loss_class(&mut t, sure, &[0]).unwrap();
        assert!(t.value(l).data()[0] < 1e-11);
        let zero = t.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
        let l = loss_class(&mut t, zero, &[1]).unwrap();
        assert!((t.value(l).data()[0] + (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
