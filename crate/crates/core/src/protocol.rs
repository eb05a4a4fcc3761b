//! Incremental training protocol: per-step initialisation, momentum SGD with
//! a polynomial learning-rate schedule, evaluation and drift logging.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, BatchItem, DistillTargets, LossValues, LossWeights, StepClasses};
use crate::metrics::{self, DriftStats, MetricsReport};
use crate::model::{random_head, DecomposedLogits, ModelConfig, ModelState};
use crate::numcore::{Tape, Tensor};
use crate::synthdata::{build_step, SamplePools, ScenarioPlan, SegSample, StepDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_initial: f64,
    pub gamma_incremental: f64,
    pub seed: u64,
    pub kd_on: bool,
    pub dkd_on: bool,
    pub aux_init_on: bool,
    /// Inference threshold.
    pub tau: f64,
    /// Number of validation images used for drift logging.
    pub drift_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr_initial: 0.05,
            lr_incremental: 0.005,
            momentum: 0.9,
            poly_power: 0.9,
            alpha: 5.0,
            beta: 5.0,
            gamma_initial: 2.0,
            gamma_incremental: 1.0,
            seed: 1,
            kd_on: true,
            dkd_on: true,
            aux_init_on: true,
            tau: 0.5,
            drift_images: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        // lr = 0 is allowed: it leaves every parameter untouched
        if !(self.lr_initial >= 0.0 && self.lr_incremental >= 0.0)
            || !self.lr_initial.is_finite()
            || !self.lr_incremental.is_finite()
        {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must be in [0, 1)");
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return bad("train.poly_power must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("train.tau must be in [0, 1]");
        }
        self.weights(1).validate()?;
        self.weights(2).validate()
    }

    /// Effective loss weights at step `t`; disabled terms get weight 0.
    pub fn weights(&self, t: usize) -> LossWeights {
        LossWeights {
            alpha: if self.kd_on { self.alpha } else { 0.0 },
            beta: if self.dkd_on { self.beta } else { 0.0 },
            gamma: if t == 1 {
                self.gamma_initial
            } else {
                self.gamma_incremental
            },
        }
    }

    pub fn base_lr(&self, t: usize) -> f64 {
        if t == 1 {
            self.lr_initial
        } else {
            self.lr_incremental
        }
    }

    fn step_rng(&self, t: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
        rng.set_stream(stream);
        rng
    }
}

/// `lr₀ · (1 - k/K)^power` for iteration `k` of `K`.
pub fn poly_lr(base: f64, k: usize, total: usize, power: f64) -> f64 {
    base * (1.0 - k as f64 / total as f64).powf(power)
}

/// Heavy-ball momentum: `v ← μ v + g`, `θ ← θ - lr v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, params: &[&mut Tensor]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update; returns false if any parameter became non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> bool {
        let mut finite = true;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((x, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= lr * *vi;
                finite &= x.is_finite();
            }
        }
        finite
    }
}

/// Model for step `t + 1`: backbone and old heads copied, one head per new
/// class initialised from the auxiliary classifier (or at random), and the
/// auxiliary classifier carried over.
pub fn init_step(
    prev: &ModelState,
    new_classes: &[u8],
    aux_init_on: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ModelState> {
    let mut next = prev.clone();
    next.step = prev.step + 1;
    let d = prev.feature_dim();
    for &c in new_classes {
        if next.bank.classes().contains(&c) {
            return Err(Error::ClassOverlap(c));
        }
        if aux_init_on {
            let w = prev.aux.weight.data().to_vec();
            let b = prev.aux.bias.data()[0];
            next.bank.push(c, &w, b)?;
        } else {
            let (w, b) = random_head(rng, d);
            next.bank.push(c, &w, b)?;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub l_mbce: f64,
    pub l_kd: f64,
    pub l_dkd: f64,
    pub l_ac: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub step: usize,
    pub iter: usize,
    #[serde(flatten)]
    pub stats: DriftStats,
}

/// Trained model plus traces of one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ModelState,
    pub trace: Vec<TraceRow>,
    pub drift: Vec<DriftRow>,
}

/// Frozen previous model and its decompositions on the drift probe.
pub struct PreviousModel<'a> {
    pub model: &'a ModelState,
    pub old_classes: Vec<u8>,
}

fn check_finite(v: &LossValues, step: usize, iter: usize) -> Result<()> {
    for (term, x) in [
        ("mbce", v.mbce),
        ("kd", v.kd),
        ("dkd", v.dkd),
        ("ac", v.ac),
        ("total", v.total),
    ] {
        if !x.is_finite() {
            return Err(Error::NonFiniteLoss { term, step, iter });
        }
    }
    Ok(())
}

fn with_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFiniteLoss { term, step, .. } => Error::NonFiniteLoss { term, step, iter },
        e => e,
    }
}

/// Trains `state` on one step's data with momentum SGD.
///
/// `prev` must be present exactly when `data.step >= 2`. Drift against the
/// previous model is logged on `drift_probe` before the first update and
/// after every epoch.
pub fn train_step(
    mut state: ModelState,
    data: &StepDataset,
    cfg: &TrainConfig,
    prev: Option<&PreviousModel<'_>>,
    drift_probe: &[SegSample],
) -> Result<StepOutcome> {
    cfg.validate()?;
    let t = data.step;
    if (t >= 2) != prev.is_some() {
        return Err(Error::InvalidParams(format!(
            "step {t}: previous model must be given iff step >= 2"
        )));
    }
    let classes = StepClasses {
        step: t,
        current: data.classes.clone(),
        old: prev.map(|p| p.old_classes.clone()).unwrap_or_default(),
    };
    let weights = cfg.weights(t);

    // The previous model is frozen, so its targets are fixed per image.
    let targets: Vec<Option<DistillTargets>> = match prev {
        Some(p) => data
            .samples
            .iter()
            .map(|s| DistillTargets::from_model(p.model, s, &p.old_classes).map(Some))
            .collect::<Result<_>>()?,
        None => vec![None; data.samples.len()],
    };
    let prev_probe: Option<Vec<DecomposedLogits>> = match prev {
        Some(p) if !drift_probe.is_empty() => {
            Some(metrics::decompose_batch(p.model, drift_probe, &p.old_classes)?)
        }
        _ => None,
    };
    let log_drift = |state: &ModelState, iter: usize, out: &mut Vec<DriftRow>| -> Result<()> {
        if let (Some(pp), Some(p)) = (&prev_probe, prev) {
            let cur = metrics::decompose_batch(state, drift_probe, &p.old_classes)?;
            out.push(DriftRow {
                step: t,
                iter,
                stats: metrics::drift_between(&cur, pp)?,
            });
        }
        Ok(())
    };

    let n = data.samples.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * per_epoch;
    let base_lr = cfg.base_lr(t);
    let mut rng = cfg.step_rng(t, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = MomentumSgd::new(cfg.momentum, &state.params_mut());
    let mut trace = Vec::with_capacity(total_iters);
    let mut drift = Vec::new();
    log_drift(&state, 0, &mut drift)?;

    let mut k = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    sample: &data.samples[i],
                    targets: targets[i].as_ref(),
                })
                .collect();
            let mut tape = Tape::new();
            let vars = state.bind(&mut tape, true);
            let terms = losses::total(&mut tape, &vars, &state, &batch, &weights, &classes)
                .map_err(|e| with_iter(e, k))?;
            let values = terms.values(&tape);
            check_finite(&values, t, k)?;
            let grads = tape.backward(terms.total).map_err(|e| match e {
                crate::numcore::NumError::NonFinite { .. } => Error::NonFiniteLoss {
                    term: "gradient",
                    step: t,
                    iter: k,
                },
                e => e.into(),
            })?;
            let mut params = state.params_mut();
            let g: Vec<Vec<f64>> = vars
                .all()
                .into_iter()
                .zip(params.iter())
                .map(|(v, p)| grads.get_or_zeros(v, p.len()))
                .collect();
            let lr = poly_lr(base_lr, k, total_iters, cfg.poly_power);
            if !opt.step(&mut params, &g, lr) {
                return Err(Error::NonFiniteLoss {
                    term: "parameters",
                    step: t,
                    iter: k,
                });
            }
            trace.push(TraceRow {
                step: t,
                epoch,
                iter: k,
                lr,
                l_mbce: values.mbce,
                l_kd: values.kd,
                l_dkd: values.dkd,
                l_ac: values.ac,
                l_total: values.total,
            });
            k += 1;
        }
        debug!(
            "step {t} epoch {epoch}: loss {:.5}",
            trace.last().map_or(f64::NAN, |r| r.l_total)
        );
        log_drift(&state, k, &mut drift)?;
    }
    Ok(StepOutcome {
        state,
        trace,
        drift,
    })
}

/// Label map for one image: thresholded arg-max over sigmoid probabilities.
pub fn predict(state: &ModelState, sample: &SegSample, tau: f64) -> Result<Vec<u8>> {
    Ok(metrics::label_from_probs(
        &state.probabilities(sample)?,
        state.bank.classes(),
        tau,
    ))
}

/// Everything recorded for one step of a scenario.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub state: ModelState,
    pub report: MetricsReport,
    pub trace: Vec<TraceRow>,
    pub drift: Vec<DriftRow>,
    /// Mean new-class probability on background / old-class validation
    /// pixels right after initialisation (steps >= 2).
    pub start_false_activation: Option<f64>,
    pub train_images: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub steps: Vec<StepRecord>,
}

impl ScenarioResult {
    pub fn final_report(&self) -> &MetricsReport {
        &self.steps.last().expect("scenarios have at least one step").report
    }
}

/// Runs every step of `plan`: initialise, train, evaluate.
pub fn run_scenario(
    plan: &ScenarioPlan,
    pools: &SamplePools,
    num_classes: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ScenarioResult> {
    resume_scenario(plan, pools, num_classes, model_cfg, cfg, Vec::new())
}

/// Like [`run_scenario`], but continues after the already finished leading
/// steps in `done`. Runs whose configurations agree up to a step can share
/// those steps.
pub fn resume_scenario(
    plan: &ScenarioPlan,
    pools: &SamplePools,
    num_classes: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    done: Vec<StepRecord>,
) -> Result<ScenarioResult> {
    cfg.validate()?;
    if done.len() > plan.num_steps() || done.iter().enumerate().any(|(i, r)| r.step != i + 1) {
        return Err(Error::InvalidParams("finished steps do not match the plan".into()));
    }
    let probe: Vec<SegSample> = pools.val.iter().take(cfg.drift_images).cloned().collect();
    let first = done.len() + 1;
    let mut records = done;
    for t in first..=plan.num_steps() {
        let data = build_step(&pools.train, plan, t)?;
        let new_classes = plan.classes(t)?;
        let mut init_rng = cfg.step_rng(t, 1);
        let (state, false_act) = match records.last() {
            None => (
                ModelState::init(model_cfg, new_classes, &mut init_rng)?,
                None,
            ),
            Some(prev) => {
                let s = init_step(&prev.state, new_classes, cfg.aux_init_on, &mut init_rng)?;
                let old = plan.old_classes(t)?;
                let fa = metrics::false_activation(&s, &pools.val, new_classes, &old)?;
                (s, Some(fa))
            }
        };
        info!(
            "step {t}/{}: classes {:?}, {} training images",
            plan.num_steps(),
            new_classes,
            data.samples.len()
        );
        let outcome = match records.last() {
            None => train_step(state, &data, cfg, None, &probe)?,
            Some(prev) => {
                let p = PreviousModel {
                    model: &prev.state,
                    old_classes: plan.old_classes(t)?,
                };
                train_step(state, &data, cfg, Some(&p), &probe)?
            }
        };
        let cm = metrics::evaluate(&outcome.state, &pools.val, plan, t, cfg.tau, num_classes)?;
        let report = metrics::summarize(&cm, plan, t)?;
        info!(
            "step {t}: mIoU_b {:.2} mIoU_n {} mIoU_all {:.2}",
            report.miou_b,
            report.miou_n.map_or("-".to_string(), |v| format!("{v:.2}")),
            report.miou_all
        );
        records.push(StepRecord {
            step: t,
            state: outcome.state,
            report,
            trace: outcome.trace,
            drift: outcome.drift,
            start_false_activation: false_act,
            train_images: data.samples.len(),
        });
    }
    Ok(ScenarioResult { steps: records })
}
