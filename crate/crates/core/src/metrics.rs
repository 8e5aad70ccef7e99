//! Classification and segmentation metrics, and evaluation of a model over a
//! dataset.

use std::fmt;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::aggregate_label;

/// Confusion counts with abnormal as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted_abnormal: bool, truly_abnormal: bool) {
        match (predicted_abnormal, truly_abnormal) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub acc: f64,
    pub f1: f64,
    pub fdr: f64,
    pub mdr: f64,
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} has an empty denominator; reporting 0");
        return 0.0;
    }
    num as f64 / den as f64
}

pub fn classify_metrics(c: &ConfusionCounts) -> ClassMetrics {
    ClassMetrics {
        acc: ratio(c.tp + c.tn, c.total(), "accuracy"),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "F1"),
        fdr: ratio(c.fp, c.fp + c.tn, "FDR"),
        mdr: ratio(c.fn_, c.fn_ + c.tp, "MDR"),
    }
}

/// Per-class intersection and union pixel counts accumulated over a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts { intersection: vec![0; classes], union: vec![0; classes] }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("miou", format!("{} predicted vs {} true pixels", pred.len(), truth.len())));
        }
        let k = self.union.len();
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Contract(format!("label {} outside {k} classes", p.max(t))));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// Mean IoU over classes that occur in either prediction or truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if present.is_empty() {
            log::warn!("mIoU over zero pixels; reporting 0");
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Dataset-level mIoU of paired hard-label masks.
pub fn miou(preds: &[&[u8]], truths: &[&[u8]], classes: usize) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::shape("miou", format!("{} predictions for {} masks", preds.len(), truths.len())));
    }
    let mut acc = IouCounts::new(classes);
    for (p, t) in preds.iter().zip(truths) {
        acc.add(p, t)?;
    }
    Ok(acc.miou())
}

/// Index of the largest element; ties resolve to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hard per-pixel labels from logits `[B, H, W, K]`.
pub fn hard_masks(logits: &Tensor<f32>) -> Vec<u8> {
    let k = logits.last_dim();
    logits.data().chunks(k).map(|r| argmax(r) as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub counts: ConfusionCounts,
    pub class: ClassMetrics,
    pub iou: Option<IouCounts>,
}

impl EvalRecord {
    pub fn miou(&self) -> Option<f64> {
        self.iou.as_ref().map(IouCounts::miou)
    }

    pub fn from_counts(counts: ConfusionCounts, iou: Option<IouCounts>) -> Self {
        EvalRecord { counts, class: classify_metrics(&counts), iou }
    }
}

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.class;
        writeln!(f, "{:<8} {:>8}", "metric", "value")?;
        for (name, v) in [("Acc", c.acc), ("F1", c.f1), ("FDR", c.fdr), ("MDR", c.mdr)] {
            writeln!(f, "{name:<8} {v:>8.4}")?;
        }
        match self.miou() {
            Some(m) => writeln!(f, "{:<8} {m:>8.4}", "mIoU")?,
            None => writeln!(f, "{:<8} {:>8}", "mIoU", "n/a")?,
        }
        let n = &self.counts;
        write!(f, "TP={} FP={} TN={} FN={}", n.tp, n.fp, n.tn, n.fn_)
    }
}

/// Predicted abnormality per sample: the fused class head when present,
/// otherwise aggregation of the predicted mask.
fn predicted_classes(cls: Option<&Tensor<f32>>, masks: Option<&[u8]>, batch: usize, tau: f64) -> Vec<bool> {
    match (cls, masks) {
        (Some(p), _) => p.data().chunks(p.last_dim()).map(|r| argmax(r) == 1).collect(),
        (None, Some(m)) => m.chunks(m.len() / batch).map(|mask| aggregate_label(mask, tau) == 1).collect(),
        (None, None) => vec![false; batch],
    }
}

/// Inference over `dataset` in batches. Samples are optionally cropped in time
/// to their last `frames` video frames and `current_len` current samples.
pub fn evaluate_with(
    model: &Model<f32>,
    dataset: &Dataset,
    batch: usize,
    frames: Option<usize>,
    current_len: Option<usize>,
) -> Result<EvalRecord> {
    let tau = crate::training::TAU;
    let mut counts = ConfusionCounts::default();
    let mut iou = model.config.has_dense().then(|| IouCounts::new(model.config.classes));
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let b = dataset.batch(chunk, frames, current_len)?;
        let pred = model.predict(Some(&b.video), Some(&b.current))?;
        let masks = pred.pix.as_ref().map(hard_masks);
        if let (Some(acc), Some(m)) = (iou.as_mut(), masks.as_ref()) {
            acc.add(m, &b.masks)?;
        }
        let classes = predicted_classes(pred.cls.as_ref(), masks.as_deref(), chunk.len(), tau);
        for (p, &t) in classes.into_iter().zip(&b.labels) {
            counts.record(p, t == 1);
        }
    }
    Ok(EvalRecord::from_counts(counts, iou))
}

pub fn evaluate(model: &Model<f32>, dataset: &Dataset, batch: usize) -> Result<EvalRecord> {
    evaluate_with(model, dataset, batch, None, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub frames: usize,
    pub current_len: usize,
    pub record: EvalRecord,
}

/// Evaluates every `(frames, current_len)` pair, truncating inputs from the
/// start so that the final frame and final current sample stay aligned.
pub fn length_sweep(
    model: &Model<f32>,
    dataset: &Dataset,
    batch: usize,
    frames: &[usize],
    current_lens: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &f in frames {
        for &c in current_lens {
            let record = evaluate_with(model, dataset, batch, Some(f), Some(c))?;
            rows.push(SweepRow { frames: f, current_len: c, record });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "frames,current_len,acc,f1,fdr,mdr,miou";

impl SweepRow {
    pub fn csv(&self) -> String {
        let c = &self.record.class;
        let miou = self.record.miou().map(|m| format!("{m:.6}")).unwrap_or_else(|| "NA".into());
        format!("{},{},{:.6},{:.6},{:.6},{:.6},{miou}", self.frames, self.current_len, c.acc, c.f1, c.fdr, c.mdr)
    }
}
