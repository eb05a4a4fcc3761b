//! Segmentation scores and logit-drift statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecomposedLogits, ModelState};
use crate::synthdata::{ScenarioPlan, SegSample, BACKGROUND};

/// Counts over (ground truth, prediction) for ids `0..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Matrix for background plus `num_classes` object classes.
    pub fn new(num_classes: usize) -> Self {
        let size = num_classes + 1;
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: u8, pred: u8) -> u64 {
        self.counts[gt as usize * self.size + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn check(&self, c: u8) -> Result<()> {
        if (c as usize) < self.size {
            Ok(())
        } else {
            Err(Error::UnknownClass(c))
        }
    }

    pub fn add(&mut self, gt: u8, pred: u8) -> Result<()> {
        self.check(gt)?;
        self.check(pred)?;
        self.counts[gt as usize * self.size + pred as usize] += 1;
        Ok(())
    }

    /// Accumulates a label map; ground-truth ids listed in `ignore` are skipped.
    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8], ignore: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::InvalidParams(format!(
                "label maps differ in size: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if !ignore.contains(&g) {
                self.add(g, p)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::InvalidParams("confusion matrix sizes differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// IoU of class `c` as a fraction; `None` when `c` occurs in neither the
/// ground truth nor the prediction.
pub fn iou(cm: &ConfusionMatrix, c: u8) -> Result<Option<f64>> {
    cm.check(c)?;
    let tp = cm.get(c, c);
    let (mut fp, mut fn_) = (0, 0);
    for o in 0..cm.size as u8 {
        if o != c {
            fp += cm.get(o, c);
            fn_ += cm.get(c, o);
        }
    }
    let denom = tp + fp + fn_;
    Ok((denom > 0).then(|| tp as f64 / denom as f64))
}

/// Harmonic mean of two scores; zero when either is zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u8,
    /// Percent; `None` when the class is absent from ground truth and prediction.
    pub iou: Option<f64>,
}

/// Step scores in percent. `miou_n` and `hiou` are absent at step 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub per_class: Vec<ClassIou>,
    pub miou_b: f64,
    pub miou_n: Option<f64>,
    pub miou_all: f64,
    pub hiou: Option<f64>,
}

fn mean_present(per_class: &[ClassIou], ids: &[u8]) -> Option<f64> {
    let vals: Vec<f64> = per_class
        .iter()
        .filter(|c| ids.contains(&c.class_id))
        .filter_map(|c| c.iou)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Base scores cover background plus the first-step classes; novel scores
/// cover classes added in steps `2..=t`.
pub fn summarize(cm: &ConfusionMatrix, plan: &ScenarioPlan, t: usize) -> Result<MetricsReport> {
    let seen = plan.seen_classes(t)?;
    let mut ids = vec![BACKGROUND];
    ids.extend_from_slice(&seen);
    let per_class = ids
        .iter()
        .map(|&c| Ok(ClassIou { class_id: c, iou: iou(cm, c)?.map(|v| 100.0 * v) }))
        .collect::<Result<Vec<_>>>()?;
    let mut base = vec![BACKGROUND];
    base.extend_from_slice(plan.base_classes());
    let novel: Vec<u8> = seen
        .iter()
        .copied()
        .filter(|c| !plan.base_classes().contains(c))
        .collect();
    let miou_b = mean_present(&per_class, &base).unwrap_or(0.0);
    let miou_n = if t >= 2 {
        Some(mean_present(&per_class, &novel).unwrap_or(0.0))
    } else {
        None
    };
    let miou_all = mean_present(&per_class, &ids).unwrap_or(0.0);
    Ok(MetricsReport {
        step: t,
        per_class,
        miou_b,
        miou_n,
        miou_all,
        hiou: miou_n.map(|n| harmonic_mean(miou_b, n)),
    })
}

/// Thresholded arg-max labelling of per-pixel probabilities `[HW, C]`.
///
/// A pixel whose best probability is below `tau` is background; ties go to
/// the lowest class id.
pub fn label_from_probs(probs: &[f64], classes: &[u8], tau: f64) -> Vec<u8> {
    let c = classes.len();
    probs
        .chunks(c)
        .map(|row| {
            let mut best: Option<(f64, u8)> = None;
            for (&p, &id) in row.iter().zip(classes) {
                best = match best {
                    Some((bp, bid)) if bp > p || (bp == p && bid < id) => Some((bp, bid)),
                    _ => Some((p, id)),
                };
            }
            match best {
                Some((p, id)) if p >= tau => id,
                _ => BACKGROUND,
            }
        })
        .collect()
}

/// Confusion matrix of `state` on `samples` at step `t`. Ground-truth pixels
/// of classes not yet scheduled are ignored.
pub fn evaluate(
    state: &ModelState,
    samples: &[SegSample],
    plan: &ScenarioPlan,
    t: usize,
    tau: f64,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let future = plan.future_classes(t)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in samples {
        let pred = label_from_probs(&state.probabilities(s)?, state.bank.classes(), tau);
        cm.accumulate(&s.labels, &pred, &future)?;
    }
    Ok(cm)
}

/// Per-entry normalised L2 distances between current and previous old-class
/// logits, positive scores and negative scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftStats {
    pub dz: f64,
    pub dz_plus: f64,
    pub dz_minus: f64,
}

/// Drift between paired decompositions. Each norm is divided by the square
/// root of the number of entries.
pub fn drift_between(current: &[DecomposedLogits], previous: &[DecomposedLogits]) -> Result<DriftStats> {
    if current.len() != previous.len() || current.is_empty() {
        return Err(Error::InvalidParams("drift needs equally sized, non-empty batches".into()));
    }
    let (mut sz, mut sp, mut sm, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (c, p) in current.iter().zip(previous) {
        if c.classes != p.classes || c.z.len() != p.z.len() {
            return Err(Error::InvalidParams("drift inputs cover different classes".into()));
        }
        for i in 0..c.z.len() {
            sz += (c.z[i] - p.z[i]).powi(2);
            sp += (c.z_plus[i] - p.z_plus[i]).powi(2);
            sm += (c.z_minus[i] - p.z_minus[i]).powi(2);
        }
        n += c.z.len();
    }
    let k = (n as f64).sqrt();
    Ok(DriftStats {
        dz: sz.sqrt() / k,
        dz_plus: sp.sqrt() / k,
        dz_minus: sm.sqrt() / k,
    })
}

/// Decomposes old-class logits of `model` on every sample.
pub fn decompose_batch(
    model: &ModelState,
    batch: &[SegSample],
    old_classes: &[u8],
) -> Result<Vec<DecomposedLogits>> {
    batch
        .iter()
        .map(|s| model.decompose_image(s, old_classes))
        .collect()
}

/// Drift of `current` from `previous` on the old classes of step `t`.
pub fn drift(
    current: &ModelState,
    previous: &ModelState,
    batch: &[SegSample],
    plan: &ScenarioPlan,
    t: usize,
) -> Result<DriftStats> {
    if t < 2 {
        return Err(Error::NoPreviousModel { step: t });
    }
    let old = plan.old_classes(t)?;
    drift_between(
        &decompose_batch(current, batch, &old)?,
        &decompose_batch(previous, batch, &old)?,
    )
}

/// Mean probability of `new_classes` on pixels whose ground truth is
/// background or one of `old_classes`.
pub fn false_activation(
    state: &ModelState,
    samples: &[SegSample],
    new_classes: &[u8],
    old_classes: &[u8],
) -> Result<f64> {
    let rows = state.bank.rows_of(new_classes)?;
    let c = state.bank.len();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let probs = state.probabilities(s)?;
        for (px, &gt) in s.labels.iter().enumerate() {
            if gt == BACKGROUND || old_classes.contains(&gt) {
                for &r in &rows {
                    sum += probs[px * c + r];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidParams("no background or old-class pixels".into()));
    }
    Ok(sum / n as f64)
}
