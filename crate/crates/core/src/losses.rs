//! Training objective: weighted multi-label BCE on the current classes,
//! logit distillation and decomposed (positive / negative score)
//! distillation on old classes, and the auxiliary "everything is negative"
//! term.
//!
//! Every term is normalised by the pixel count of its image. Probabilities
//! are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before each log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelState, ModelVars};
use crate::numcore::{NumError, Tape, Var};
use crate::synthdata::SegSample;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || !ok(self.gamma) || self.gamma <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "loss weights must be finite with alpha, beta >= 0 and gamma > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Frozen previous-model probabilities for the old classes of one image,
/// each `[HW, |old|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargets {
    pub pixels: usize,
    pub classes: Vec<u8>,
    pub p: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DistillTargets {
    /// Runs the frozen model `prev` on `sample` (no gradient recording).
    pub fn from_model(prev: &ModelState, sample: &SegSample, old_classes: &[u8]) -> Result<Self> {
        let d = prev.decompose_image(sample, old_classes)?;
        let s = |v: &[f64]| v.iter().map(|&x| sigmoid(x)).collect::<Vec<_>>();
        Ok(Self {
            pixels: sample.pixels(),
            classes: old_classes.to_vec(),
            p: s(&d.z),
            p_plus: s(&d.z_plus),
            p_minus: s(&d.z_minus),
        })
    }
}

/// `-(1/HW) Σ [γ t log σ(z) + (1 - t) log(1 - σ(z))]` with constant targets `t`.
fn weighted_bce(tape: &mut Tape, z: Var, targets: &[f64], gamma: f64) -> Result<Var, NumError> {
    let shape = tape.shape(z).to_vec();
    let hw = shape[0] as f64;
    let pos_w = tape.constant(shape.clone(), targets.iter().map(|t| gamma * t).collect())?;
    let neg_w = tape.constant(shape, targets.iter().map(|t| 1.0 - t).collect())?;
    // log p and log(1 - p) = log σ(-z), bounded as if p were clamped to
    // [1e-12, 1 - 1e-12]; the bound does not cut the gradient.
    let (lo, hi) = (PROB_CLAMP.ln(), (-PROB_CLAMP).ln_1p());
    let ls = tape.log_sigmoid(z)?;
    let log_p = tape.clamp_st(ls, lo, hi)?;
    let neg_z = tape.scalar_mul(z, -1.0)?;
    let ls_neg = tape.log_sigmoid(neg_z)?;
    let log_q = tape.clamp_st(ls_neg, lo, hi)?;
    let a = tape.mul(pos_w, log_p)?;
    let b = tape.mul(neg_w, log_q)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab)?;
    tape.scalar_mul(s, -1.0 / hw)
}

fn check_pair(tape: &Tape, z: Var, rows: usize, cols: usize) -> Result<(), NumError> {
    let s = tape.shape(z);
    if s != [rows, cols] {
        return Err(NumError::ShapeMismatch {
            op: "loss",
            lhs: s.to_vec(),
            rhs: vec![rows, cols],
        });
    }
    Ok(())
}

/// Weighted multi-label BCE over the current classes.
///
/// `z` is `[HW, |classes|]`; labels must lie in `classes ∪ {0}`.
pub fn mbce(tape: &mut Tape, z: Var, labels: &[u8], classes: &[u8], gamma: f64) -> Result<Var> {
    check_pair(tape, z, labels.len(), classes.len())?;
    let mut targets = Vec::with_capacity(labels.len() * classes.len());
    for &l in labels {
        if l != crate::synthdata::UNKNOWN && !classes.contains(&l) {
            let mut alphabet = vec![crate::synthdata::UNKNOWN];
            alphabet.extend_from_slice(classes);
            return Err(Error::LabelOutOfAlphabet { label: l, alphabet });
        }
        targets.extend(classes.iter().map(|&c| if c == l { 1.0 } else { 0.0 }));
    }
    Ok(weighted_bce(tape, z, &targets, gamma)?)
}

/// Distillation of full old-class logits `z` (`[HW, |old|]`) towards the
/// previous model's probabilities.
pub fn kd(tape: &mut Tape, z: Var, targets: &DistillTargets, step: usize) -> Result<Var> {
    if step < 2 {
        return Err(Error::NoPreviousModel { step });
    }
    check_pair(tape, z, targets.pixels, targets.classes.len())?;
    Ok(weighted_bce(tape, z, &targets.p, 1.0)?)
}

/// Positive and negative components of the decomposed distillation term.
#[derive(Debug, Clone, Copy)]
pub struct DkdTerms {
    pub positive: Var,
    pub negative: Var,
    pub total: Var,
}

/// Decomposed distillation: the logit distillation form applied separately
/// to `σ(z⁺)` and `σ(z⁻)`.
pub fn dkd(
    tape: &mut Tape,
    z_plus: Var,
    z_minus: Var,
    targets: &DistillTargets,
    step: usize,
) -> Result<DkdTerms> {
    if step < 2 {
        return Err(Error::NoPreviousModel { step });
    }
    let (rows, cols) = (targets.pixels, targets.classes.len());
    check_pair(tape, z_plus, rows, cols)?;
    check_pair(tape, z_minus, rows, cols)?;
    let positive = weighted_bce(tape, z_plus, &targets.p_plus, 1.0)?;
    let negative = weighted_bce(tape, z_minus, &targets.p_minus, 1.0)?;
    let total = tape.add(positive, negative)?;
    Ok(DkdTerms {
        positive,
        negative,
        total,
    })
}

/// `-(1/HW) Σ log(1 - σ(z'))`: every pixel is a negative for the auxiliary head.
pub fn ac(tape: &mut Tape, z_prime: Var) -> Result<Var> {
    let s = tape.shape(z_prime).to_vec();
    if s.len() != 2 || s[1] != 1 {
        return Err(NumError::ShapeMismatch {
            op: "ac",
            lhs: s,
            rhs: vec![0, 1],
        }
        .into());
    }
    let zeros = vec![0.0; s[0]];
    Ok(weighted_bce(tape, z_prime, &zeros, 1.0)?)
}

/// One training image with its step-remapped labels and, from step 2 on,
/// the frozen previous-model targets.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub sample: &'a SegSample,
    pub targets: Option<&'a DistillTargets>,
}

/// Class context of a step.
#[derive(Debug, Clone)]
pub struct StepClasses {
    pub step: usize,
    pub current: Vec<u8>,
    pub old: Vec<u8>,
}

/// Batch-mean loss terms recorded on the tape. `kd` and `dkd` are `None` at step 1.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mbce: Var,
    pub kd: Option<Var>,
    pub dkd: Option<Var>,
    pub ac: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`]; absent terms read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub mbce: f64,
    pub kd: f64,
    pub dkd: f64,
    pub ac: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.item(x).unwrap_or(f64::NAN);
        LossValues {
            mbce: v(self.mbce),
            kd: self.kd.map_or(0.0, v),
            dkd: self.dkd.map_or(0.0, v),
            ac: v(self.ac),
            total: v(self.total),
        }
    }
}

fn term<T>(name: &'static str, step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Num(NumError::NonFinite { .. }) => Error::NonFiniteLoss {
            term: name,
            step,
            iter: 0,
        },
        e => e,
    })
}

fn batch_mean(tape: &mut Tape, vals: &[Var]) -> Result<Var, NumError> {
    let mut acc = vals[0];
    for &v in &vals[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scalar_mul(acc, 1.0 / vals.len() as f64)
}

/// `L_mbce + α L_kd + β L_dkd + L_ac`, each averaged over the batch.
///
/// `state` supplies the class layout of the bank that `vars` was bound from.
pub fn total(
    tape: &mut Tape,
    vars: &ModelVars,
    state: &ModelState,
    batch: &[BatchItem<'_>],
    weights: &LossWeights,
    classes: &StepClasses,
) -> Result<LossTerms> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    let t = classes.step;
    let distill = t >= 2;
    let new_rows = state.bank.rows_of(&classes.current)?;
    let old_rows = if distill {
        state.bank.rows_of(&classes.old)?
    } else {
        Vec::new()
    };

    let (mut lm, mut lk, mut ld, mut la) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for item in batch {
        let img = model::image_var(tape, item.sample)?;
        let f = term("features", t, model::forward_features(tape, vars, img).map_err(Error::from))?;
        let z_new = model::class_logits(tape, f, vars, &new_rows)?;
        lm.push(term(
            "mbce",
            t,
            mbce(tape, z_new, &item.sample.labels, &classes.current, weights.gamma),
        )?);
        if distill {
            let targets = item.targets.ok_or(Error::NoPreviousModel { step: t })?;
            let z_old = model::class_logits(tape, f, vars, &old_rows)?;
            lk.push(term("kd", t, kd(tape, z_old, targets, t))?);
            let (zp, zn) = model::decompose(tape, f, vars, &old_rows)?;
            ld.push(term("dkd", t, dkd(tape, zp, zn, targets, t))?.total);
        }
        let zp = model::aux_logit(tape, f, vars)?;
        la.push(term("ac", t, ac(tape, zp))?);
    }

    let mbce_v = batch_mean(tape, &lm)?;
    let ac_v = batch_mean(tape, &la)?;
    let mut total_v = tape.add(mbce_v, ac_v)?;
    let (mut kd_v, mut dkd_v) = (None, None);
    if distill {
        let k = batch_mean(tape, &lk)?;
        let d = batch_mean(tape, &ld)?;
        let ka = tape.scalar_mul(k, weights.alpha)?;
        let db = tape.scalar_mul(d, weights.beta)?;
        total_v = tape.add(total_v, ka)?;
        total_v = tape.add(total_v, db)?;
        kd_v = Some(k);
        dkd_v = Some(d);
    }
    Ok(LossTerms {
        mbce: mbce_v,
        kd: kd_v,
        dkd: dkd_v,
        ac: ac_v,
        total: total_v,
    })
}
