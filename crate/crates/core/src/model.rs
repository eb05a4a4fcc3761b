//! Feature extractor, per-class classifier bank and auxiliary classifier.
//!
//! Logits are `z(i, c) = f(i)·w(c) + b(c)`. The bias-free part splits into
//! a positive score (sum of positive products `f_k(i) w_k(c)`) and a
//! negative score (sum of negative products). The bias belongs to neither.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NumError, Sign, Tape, Tensor, Var};
use crate::synthdata::SegSample;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel counts from the input through every conv layer, e.g. `[3, 16, 16]`.
    pub channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 16],
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::InvalidParams(
                "model.channels needs >= 2 positive entries".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[3, 3, c_in, c_out]`
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Stack of 3x3 conv layers with relu between them (not after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    classes: Vec<u8>,
    /// `[C, d]`, one row per entry of `classes`.
    pub weights: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxClassifier {
    /// `[d, 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub bank: ClassifierBank,
    pub aux: AuxClassifier,
    pub step: usize,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fan-in scaled random classifier entry `(w, b)`.
pub fn random_head(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, f64) {
    (uniform(rng, d, 1.0 / (d as f64).sqrt()), 0.0)
}

impl ClassifierBank {
    pub fn new(classes: Vec<u8>, weights: Vec<f64>, bias: Vec<f64>, d: usize) -> Result<Self> {
        let c = classes.len();
        if c == 0 {
            return Err(Error::EmptyBank);
        }
        for (i, a) in classes.iter().enumerate() {
            if classes[..i].contains(a) {
                return Err(Error::ClassOverlap(*a));
            }
        }
        Ok(Self {
            classes,
            weights: Tensor::new(vec![c, d], weights)?,
            bias: Tensor::new(vec![c], bias)?,
        })
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Row indices of `classes` within the bank.
    pub fn rows_of(&self, classes: &[u8]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| {
                self.classes
                    .iter()
                    .position(|x| x == c)
                    .ok_or(Error::UnknownClass(*c))
            })
            .collect()
    }

    pub fn entry(&self, class: u8) -> Result<(&[f64], f64)> {
        let r = self.rows_of(&[class])?[0];
        let d = self.dim();
        Ok((
            &self.weights.data()[r * d..(r + 1) * d],
            self.bias.data()[r],
        ))
    }

    /// Appends an entry for a class not yet in the bank.
    pub fn push(&mut self, class: u8, w: &[f64], b: f64) -> Result<()> {
        if self.classes.contains(&class) {
            return Err(Error::ClassOverlap(class));
        }
        let d = self.dim();
        if w.len() != d {
            return Err(NumError::ShapeMismatch {
                op: "bank.push",
                lhs: vec![d],
                rhs: vec![w.len()],
            }
            .into());
        }
        let mut wd = self.weights.data().to_vec();
        wd.extend_from_slice(w);
        let mut bd = self.bias.data().to_vec();
        bd.push(b);
        self.classes.push(class);
        self.weights = Tensor::new(vec![self.classes.len(), d], wd)?;
        self.bias = Tensor::new(vec![self.classes.len()], bd)?;
        Ok(())
    }
}

impl ModelState {
    /// Fresh model: Kaiming-uniform conv kernels, zero conv biases, fan-in
    /// scaled random heads for `classes` and the auxiliary classifier.
    pub fn init(config: &ModelConfig, classes: &[u8], rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for win in config.channels.windows(2) {
            let (cin, cout) = (win[0], win[1]);
            let fan_in = 9 * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            layers.push(ConvLayer {
                kernel: Tensor::new(vec![3, 3, cin, cout], uniform(rng, 9 * cin * cout, bound))?,
                bias: Tensor::zeros(vec![cout])?,
            });
        }
        let d = config.feature_dim();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for _ in classes {
            let (hw, hb) = random_head(rng, d);
            w.extend(hw);
            b.push(hb);
        }
        let bank = ClassifierBank::new(classes.to_vec(), w, b, d)?;
        let (aw, ab) = random_head(rng, d);
        Ok(Self {
            config: config.clone(),
            backbone: Backbone { layers },
            bank,
            aux: AuxClassifier {
                weight: Tensor::new(vec![d, 1], aw)?,
                bias: Tensor::from_vec(vec![ab])?,
            },
            step: 1,
        })
    }

    /// Deterministic init from a seed.
    pub fn init_seeded(config: &ModelConfig, classes: &[u8], seed: u64) -> Result<Self> {
        Self::init(config, classes, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Named parameters in checkpoint order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &l.kernel));
            out.push((format!("conv{i}.bias"), &l.bias));
        }
        out.push(("bank.weight".into(), &self.bank.weights));
        out.push(("bank.bias".into(), &self.bank.bias));
        out.push(("aux.weight".into(), &self.aux.weight));
        out.push(("aux.bias".into(), &self.aux.bias));
        out
    }

    /// Mutable parameters, same order as [`ModelState::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.bank.weights);
        out.push(&mut self.bank.bias);
        out.push(&mut self.aux.weight);
        out.push(&mut self.aux.bias);
        out
    }

    pub fn num_backbone_params(&self) -> usize {
        2 * self.backbone.layers.len()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(&t)
        };
        let convs = self
            .backbone
            .layers
            .iter()
            .map(|l| (leaf(tape, &l.kernel), leaf(tape, &l.bias)))
            .collect();
        ModelVars {
            convs,
            bank_w: leaf(tape, &self.bank.weights),
            bank_b: leaf(tape, &self.bank.bias),
            aux_w: leaf(tape, &self.aux.weight),
            aux_b: leaf(tape, &self.aux.bias),
        }
    }

    /// Evaluates logits and their decomposition for `classes` on one image,
    /// without recording gradients.
    pub fn decompose_image(&self, sample: &SegSample, classes: &[u8]) -> Result<DecomposedLogits> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let img = image_var(&mut tape, sample)?;
        let f = forward_features(&mut tape, &vars, img)?;
        let rows = self.bank.rows_of(classes)?;
        let z = class_logits(&mut tape, f, &vars, &rows)?;
        let (zp, zn) = decompose(&mut tape, f, &vars, &rows)?;
        Ok(DecomposedLogits {
            classes: classes.to_vec(),
            z: tape.value(z).to_vec(),
            z_plus: tape.value(zp).to_vec(),
            z_minus: tape.value(zn).to_vec(),
            bias: rows.iter().map(|&r| self.bank.bias.data()[r]).collect(),
        })
    }

    /// Per-pixel sigmoid probabilities `[HW, C]` for every class in the bank.
    pub fn probabilities(&self, sample: &SegSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let img = image_var(&mut tape, sample)?;
        let f = forward_features(&mut tape, &vars, img)?;
        let z = logits(&mut tape, f, vars.bank_w, vars.bank_b)?;
        let p = tape.sigmoid(z)?;
        Ok(tape.value(p).to_vec())
    }

    /// Writes `<dir>/model.json` and `<dir>/model.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.params() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            class_ids: self.bank.classes.clone(),
            channels: self.config.channels.clone(),
            tensors,
        };
        fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("model.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob = fs::read(dir.join("model.bin"))?;
        if blob.len() % 8 != 0 {
            return Err(Error::Checkpoint("blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let config = ModelConfig {
            channels: manifest.channels.clone(),
        };
        let mut state = ModelState::init_seeded(&config, &manifest.class_ids, 0)?;
        state.step = manifest.step;
        let expected: Vec<(String, Vec<usize>)> = state
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expected != got {
            return Err(Error::Checkpoint("tensor layout does not match manifest".into()));
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(Error::Checkpoint(format!(
                "blob holds {} values, manifest needs {total}",
                values.len()
            )));
        }
        let mut off = 0;
        for t in state.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    step: usize,
    class_ids: Vec<u8>,
    channels: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub convs: Vec<(Var, Var)>,
    pub bank_w: Var,
    pub bank_b: Var,
    pub aux_w: Var,
    pub aux_b: Var,
}

impl ModelVars {
    /// Handles in the same order as [`ModelState::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.convs.iter().flat_map(|&(k, b)| [k, b]).collect();
        v.extend([self.bank_w, self.bank_b, self.aux_w, self.aux_b]);
        v
    }
}

/// Records the image of `sample` as an `[H, W, 3]` constant.
pub fn image_var(tape: &mut Tape, sample: &SegSample) -> Result<Var, NumError> {
    tape.constant(vec![sample.height, sample.width, 3], sample.image.clone())
}

/// Dense features `[HW, d]`.
pub fn forward_features(tape: &mut Tape, vars: &ModelVars, image: Var) -> Result<Var, NumError> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 {
        return Err(NumError::ShapeMismatch {
            op: "forward_features",
            lhs: shape,
            rhs: vec![0, 0, 3],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut x = image;
    let n = vars.convs.len();
    for (i, &(k, b)) in vars.convs.iter().enumerate() {
        x = tape.conv2d(x, k)?;
        x = tape.add_bias(x, b)?;
        if i + 1 < n {
            x = tape.relu(x)?;
        }
    }
    let d = *tape.shape(x).last().unwrap();
    tape.reshape(x, vec![h * w, d])
}

/// `z = f Wᵀ + b` for a `[C, d]` weight matrix and `[C]` bias.
pub fn logits(tape: &mut Tape, f: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let wt = tape.transpose(w)?;
    let z = tape.matmul(f, wt)?;
    tape.add_bias(z, b)
}

/// Logits for a subset of bank rows, `[HW, rows.len()]`.
pub fn class_logits(tape: &mut Tape, f: Var, vars: &ModelVars, rows: &[usize]) -> Result<Var, NumError> {
    let w = tape.gather(vars.bank_w, rows)?;
    let b = tape.gather(vars.bank_b, rows)?;
    logits(tape, f, w, b)
}

/// Positive and negative reasoning scores for the given bank rows, each `[HW, rows.len()]`.
pub fn decompose(
    tape: &mut Tape,
    f: Var,
    vars: &ModelVars,
    rows: &[usize],
) -> Result<(Var, Var), NumError> {
    let w = tape.gather(vars.bank_w, rows)?;
    decompose_with(tape, f, w)
}

/// Decomposition against an explicit `[C, d]` weight matrix.
pub fn decompose_with(tape: &mut Tape, f: Var, w: Var) -> Result<(Var, Var), NumError> {
    let prods = tape.pairwise_mul(f, w)?;
    let pos = tape.select_sign(prods, Sign::Positive)?;
    let neg = tape.select_sign(prods, Sign::Negative)?;
    Ok((tape.sum_last(pos)?, tape.sum_last(neg)?))
}

/// Auxiliary logit `[HW, 1]`. The features are detached, so nothing computed
/// from this value sends gradient into the backbone.
pub fn aux_logit(tape: &mut Tape, f: Var, vars: &ModelVars) -> Result<Var, NumError> {
    let fd = tape.detach(f);
    let z = tape.matmul(fd, vars.aux_w)?;
    tape.add_bias(z, vars.aux_b)
}

/// Plain values of `z`, `z⁺`, `z⁻` (each `[HW, C]`) and the bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLogits {
    pub classes: Vec<u8>,
    pub z: Vec<f64>,
    pub z_plus: Vec<f64>,
    pub z_minus: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DecomposedLogits {
    /// Largest `|z - (z⁺ + z⁻ + b)|` over all entries.
    pub fn identity_error(&self) -> f64 {
        let c = self.bias.len();
        self.z
            .iter()
            .zip(&self.z_plus)
            .zip(&self.z_minus)
            .enumerate()
            .map(|(i, ((z, p), n))| (z - (p + n + self.bias[i % c])).abs())
            .fold(0.0, f64::max)
    }
}

/// Decomposition of one feature vector against one weight vector, computed
/// directly. Returns `(z⁺, z⁻)`.
pub fn reasoning_scores(f: &[f64], w: &[f64]) -> (f64, f64) {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (a, b) in f.iter().zip(w) {
        let p = a * b;
        if p > 0.0 {
            pos += p;
        } else if p < 0.0 {
            neg += p;
        }
    }
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::check_gradients_multi;

    fn image(h: usize, w: usize, seed: u64) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SegSample {
            id: 0,
            height: h,
            width: w,
            image: (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            labels: vec![0; h * w],
        }
    }

    fn one_pixel_vars(tape: &mut Tape, f: &[f64], w: &[f64], b: f64) -> (Var, ModelVars) {
        let d = f.len();
        let fv = tape.constant(vec![1, d], f.to_vec()).unwrap();
        let wv = tape.constant(vec![1, d], w.to_vec()).unwrap();
        let bv = tape.constant(vec![1], vec![b]).unwrap();
        let aw = tape.constant(vec![d, 1], vec![0.0; d]).unwrap();
        let ab = tape.constant(vec![1], vec![0.0]).unwrap();
        (
            fv,
            ModelVars {
                convs: vec![],
                bank_w: wv,
                bank_b: bv,
                aux_w: aw,
                aux_b: ab,
            },
        )
    }

    #[test]
    fn logit_and_decomposition_example() {
        let mut tape = Tape::new();
        let (f, vars) = one_pixel_vars(&mut tape, &[1.0, -2.0, 3.0], &[2.0, 1.0, -1.0], 0.5);
        let z = class_logits(&mut tape, f, &vars, &[0]).unwrap();
        assert_eq!(tape.value(z), &[-2.5]);
        let (zp, zn) = decompose(&mut tape, f, &vars, &[0]).unwrap();
        assert_eq!(tape.value(zp), &[2.0]);
        assert_eq!(tape.value(zn), &[-5.0]);
        assert_eq!(reasoning_scores(&[1.0, -2.0, 3.0], &[2.0, 1.0, -1.0]), (2.0, -5.0));
    }

    #[test]
    fn non_negative_inputs_have_no_negative_score() {
        let mut tape = Tape::new();
        let (f, vars) = one_pixel_vars(&mut tape, &[0.3, 0.0, 2.0], &[1.0, 4.0, 0.5], 0.0);
        let (_, zn) = decompose(&mut tape, f, &vars, &[0]).unwrap();
        assert_eq!(tape.value(zn), &[0.0]);
    }

    #[test]
    fn bias_only_when_features_vanish() {
        let mut tape = Tape::new();
        let (f, vars) = one_pixel_vars(&mut tape, &[0.0, 0.0], &[2.0, -1.0], 0.75);
        let z = class_logits(&mut tape, f, &vars, &[0]).unwrap();
        assert_eq!(tape.value(z), &[0.75]);
    }

    #[test]
    fn zero_model_gives_zero_features() {
        let cfg = ModelConfig::default();
        let mut m = ModelState::init_seeded(&cfg, &[1, 2], 3).unwrap();
        for t in m.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = image(16, 16, 1);
        s.image.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let img = image_var(&mut tape, &s).unwrap();
        let f = forward_features(&mut tape, &vars, img).unwrap();
        assert_eq!(tape.shape(f), &[256, 16]);
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic_and_grad_flag_neutral() {
        let cfg = ModelConfig::default();
        let m = ModelState::init_seeded(&cfg, &[1, 2, 3], 9).unwrap();
        let s = image(16, 16, 2);
        let run = |trainable: bool| {
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, trainable);
            let img = image_var(&mut tape, &s).unwrap();
            let f = forward_features(&mut tape, &vars, img).unwrap();
            tape.value(f).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(false), run(false));
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn decomposition_identity_on_real_features() {
        let cfg = ModelConfig::default();
        let m = ModelState::init_seeded(&cfg, &[1, 2, 3], 4).unwrap();
        let d = m.decompose_image(&image(16, 16, 5), &[1, 3]).unwrap();
        assert!(d.identity_error() <= 1e-12);
        assert!(d.z_plus.iter().all(|&v| v >= 0.0));
        assert!(d.z_minus.iter().all(|&v| v <= 0.0));
        assert!(d.z_minus.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn aux_logit_is_detached_from_backbone() {
        let cfg = ModelConfig {
            channels: vec![3, 4, 4],
        };
        let m = ModelState::init_seeded(&cfg, &[1], 1).unwrap();
        let s = image(16, 16, 3);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let img = image_var(&mut tape, &s).unwrap();
        let f = forward_features(&mut tape, &vars, img).unwrap();
        let z = aux_logit(&mut tape, f, &vars).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        for &(k, b) in &vars.convs {
            assert!(g.get(k).is_none());
            assert!(g.get(b).is_none());
        }
        assert!(g.get(vars.aux_w).is_some());
    }

    #[test]
    fn aux_zero_features_give_bias() {
        let mut tape = Tape::new();
        let (f, mut vars) = one_pixel_vars(&mut tape, &[0.0, 0.0], &[1.0, 1.0], 0.0);
        vars.aux_w = tape.constant(vec![2, 1], vec![3.0, -1.0]).unwrap();
        vars.aux_b = tape.constant(vec![1], vec![-0.4]).unwrap();
        let z = aux_logit(&mut tape, f, &vars).unwrap();
        assert_eq!(tape.value(z), &[-0.4]);
    }

    #[test]
    fn aux_head_gradient_matches_finite_differences() {
        let f = Tensor::new(vec![3, 2], vec![0.4, -0.7, 1.1, 0.2, -0.5, 0.9]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![0.3, -0.8]).unwrap();
        let b = Tensor::from_vec(vec![0.1]).unwrap();
        let r = check_gradients_multi(
            |t, v| {
                let fc = t.constant(vec![3, 2], f.data().to_vec())?;
                let vars = ModelVars {
                    convs: vec![],
                    bank_w: v[0],
                    bank_b: v[1],
                    aux_w: v[0],
                    aux_b: v[1],
                };
                let z = aux_logit(t, fc, &vars)?;
                let s = t.sigmoid(z)?;
                t.sum(s)
            },
            &[w, b],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            channels: vec![3, 3, 2],
        };
        let m = ModelState::init_seeded(&cfg, &[1], 11).unwrap();
        let s = image(4, 4, 7);
        let kernels: Vec<Tensor> = m
            .backbone
            .layers
            .iter()
            .flat_map(|l| [l.kernel.clone(), l.bias.clone()])
            .collect();
        let r = check_gradients_multi(
            |t, v| {
                let img = image_var(t, &s)?;
                let vars = ModelVars {
                    convs: vec![(v[0], v[1]), (v[2], v[3])],
                    bank_w: v[0],
                    bank_b: v[1],
                    aux_w: v[0],
                    aux_b: v[1],
                };
                let f = forward_features(t, &vars, img)?;
                t.sum(f)
            },
            &kernels,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }

    #[test]
    fn bank_push_and_lookup() {
        let cfg = ModelConfig::default();
        let mut m = ModelState::init_seeded(&cfg, &[1, 2], 1).unwrap();
        m.bank.push(5, &[0.5; 16], 0.25).unwrap();
        assert_eq!(m.bank.classes(), &[1, 2, 5]);
        assert_eq!(m.bank.entry(5).unwrap(), (&[0.5; 16][..], 0.25));
        assert!(matches!(m.bank.push(2, &[0.0; 16], 0.0), Err(Error::ClassOverlap(2))));
        assert!(matches!(m.bank.rows_of(&[9]), Err(Error::UnknownClass(9))));
        assert!(matches!(
            ClassifierBank::new(vec![], vec![], vec![], 4),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ModelState::init_seeded(&ModelConfig::default(), &[1, 2, 3, 4], 5).unwrap();
        m.bank.push(6, &[0.1; 16], -0.2).unwrap();
        m.step = 2;
        m.save(dir.path()).unwrap();
        let back = ModelState::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let blob = fs::read(dir.path().join("model.bin")).unwrap();
        let n: usize = m.params().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(blob.len(), 8 * n);
        fs::write(dir.path().join("model.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(ModelState::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
