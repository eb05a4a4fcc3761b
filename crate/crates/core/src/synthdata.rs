//! Synthetic shapes dataset and incremental scenario splitting.
//!
//! Every class is drawn as one fixed (shape, hue) pair on a textured grey
//! background. Edges are hard, so label masks are pixel exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label id shared by background and every non-current class during training.
pub const UNKNOWN: u8 = 0;
/// Label id of the background class at inference.
pub const BACKGROUND: u8 = 0;
/// Hues are spaced at least 30 degrees apart.
pub const MAX_CLASSES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Fraction of the generated train pool set aside (not used for training).
    pub holdout: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            seed: 1,
            num_classes: 6,
            height: 32,
            width: 32,
            n_train: 240,
            n_val: 60,
            holdout: 0.0,
        }
    }
}

impl DataParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParams("num_classes must be >= 2".into()));
        }
        if self.num_classes > MAX_CLASSES {
            return Err(Error::TooManyClasses {
                k: self.num_classes,
                max: MAX_CLASSES,
            });
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidParams("height and width must be >= 16".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::InvalidParams("sample counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::InvalidParams("holdout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u32,
    pub height: usize,
    pub width: usize,
    /// `height x width x 3`, row major, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// `height x width` class ids.
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn contains_any(&self, classes: &[u8]) -> bool {
        self.labels.iter().any(|l| classes.contains(l))
    }

    /// Pixel count per class id present in the label map.
    pub fn histogram(&self) -> BTreeMap<u8, usize> {
        let mut h = BTreeMap::new();
        for &l in &self.labels {
            *h.entry(l).or_insert(0) += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePools {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub holdout: Vec<SegSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Ring,
}

fn class_shape(class: u8) -> ShapeKind {
    match (class - 1) % 4 {
        0 => ShapeKind::Square,
        1 => ShapeKind::Disc,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Ring,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    let hue = 360.0 * f64::from(class - 1) / num_classes as f64;
    hsv_to_rgb(hue, 0.85, 0.9)
}

/// Whether pixel `(dy, dx)` of an `s x s` box belongs to the shape.
fn shape_covers(kind: ShapeKind, s: usize, dy: usize, dx: usize) -> bool {
    let c = (s as f64 - 1.0) / 2.0;
    let (fy, fx) = (dy as f64 - c, dx as f64 - c);
    let r = s as f64 / 2.0;
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Disc => fy * fy + fx * fx <= r * r,
        ShapeKind::Triangle => fx.abs() <= (dy as f64 + 1.0) / 2.0,
        ShapeKind::Ring => {
            let d2 = fy * fy + fx * fx;
            d2 <= r * r && d2 > (0.5 * r) * (0.5 * r)
        }
    }
}

#[derive(Clone, Copy)]
struct BoxPos {
    y: usize,
    x: usize,
    s: usize,
}

impl BoxPos {
    fn separated(&self, o: &BoxPos) -> bool {
        // one pixel gap between boxes
        self.y + self.s < o.y || o.y + o.s < self.y || self.x + self.s < o.x || o.x + o.s < self.x
    }
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    id: u32,
    first_class: u8,
    p: &DataParams,
) -> SegSample {
    let (h, w) = (p.height, p.width);
    let k = p.num_classes;
    let mut image = vec![0.0; h * w * 3];
    let mut labels = vec![BACKGROUND; h * w];

    let phase = rng.gen_range(0..4usize);
    for y in 0..h {
        for x in 0..w {
            let checker = if ((y + phase) / 4 + (x + phase) / 4) % 2 == 0 { 0.08 } else { 0.0 };
            let base = 0.35 + checker;
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = base + rng.gen_range(-0.05..0.05);
            }
        }
    }

    let n_inst = rng.gen_range(1..=3usize);
    let mut classes = vec![first_class];
    let mut others: Vec<u8> = (1..=k as u8).filter(|&c| c != first_class).collect();
    others.shuffle(rng);
    classes.extend(others.into_iter().take(n_inst - 1));

    let min_side = h.min(w);
    let (smin, smax) = (min_side / 4, min_side * 7 / 16);
    let mut placed: Vec<BoxPos> = Vec::new();
    for &class in &classes {
        let mut pos = None;
        for _ in 0..50 {
            let s = rng.gen_range(smin..=smax);
            let cand = BoxPos {
                y: rng.gen_range(0..=h - s),
                x: rng.gen_range(0..=w - s),
                s,
            };
            if placed.iter().all(|b| b.separated(&cand)) {
                pos = Some(cand);
                break;
            }
        }
        let Some(b) = pos else { continue };
        placed.push(b);
        let kind = class_shape(class);
        let color = class_color(class, k);
        for dy in 0..b.s {
            for dx in 0..b.s {
                if !shape_covers(kind, b.s, dy, dx) {
                    continue;
                }
                let px = (b.y + dy) * w + b.x + dx;
                labels[px] = class;
                for ch in 0..3 {
                    let v = color[ch] + rng.gen_range(-0.03..0.03);
                    image[px * 3 + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    SegSample {
        id,
        height: h,
        width: w,
        image,
        labels,
    }
}

/// Generates train, validation and holdout pools; a pure function of `params`.
///
/// Sample `i` of each split always contains class `(i mod K) + 1`, which
/// guarantees class coverage once a split has at least `K` images.
pub fn generate(params: &DataParams) -> Result<SamplePools> {
    params.validate()?;
    let k = params.num_classes;
    let split = |stream: u64, n: usize, id0: u32| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| render_sample(&mut rng, id0 + i as u32, (i % k) as u8 + 1, params))
            .collect::<Vec<_>>()
    };
    let mut train = split(0, params.n_train, 0);
    let val = split(1, params.n_val, params.n_train as u32);
    let n_hold = (params.holdout * params.n_train as f64).floor() as usize;
    let holdout = if let Some(stride) = params.n_train.checked_div(n_hold) {
        // spread the holdout over classes by taking every m-th sample
        let stride = stride.max(1);
        let mut held = Vec::new();
        let mut kept = Vec::new();
        for (i, s) in train.into_iter().enumerate() {
            if i % stride == stride - 1 && held.len() < n_hold {
                held.push(s);
            } else {
                kept.push(s);
            }
        }
        train = kept;
        held
    } else {
        Vec::new()
    };
    Ok(SamplePools {
        train,
        val,
        holdout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Disjoint,
    Overlapped,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Disjoint => "disjoint",
            Setting::Overlapped => "overlapped",
        })
    }
}

/// Class schedule over `T` steps. Steps are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioPlan {
    schedule: Vec<Vec<u8>>,
    setting: Setting,
}

impl ScenarioPlan {
    pub fn new(schedule: Vec<Vec<u8>>, setting: Setting) -> Result<Self> {
        if schedule.is_empty() || schedule.iter().any(Vec::is_empty) {
            return Err(Error::InvalidPlan("every step needs at least one class".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in schedule.iter().flatten() {
            if c == BACKGROUND {
                return Err(Error::InvalidPlan("class 0 is reserved for background".into()));
            }
            if !seen.insert(c) {
                return Err(Error::InvalidPlan(format!("class {c} scheduled twice")));
            }
        }
        Ok(Self { schedule, setting })
    }

    /// Parses an `"Nb-Nn"` scenario over classes `1..=num_classes`.
    pub fn parse(spec: &str, num_classes: usize, setting: Setting) -> Result<Self> {
        let bad = || Error::InvalidPlan(format!("expected \"Nb-Nn\", got {spec:?}"));
        let (b, n) = spec.split_once('-').ok_or_else(bad)?;
        let nb: usize = b.trim().parse().map_err(|_| bad())?;
        let nn: usize = n.trim().parse().map_err(|_| bad())?;
        if nb == 0 || nn == 0 || nb > num_classes || !(num_classes - nb).is_multiple_of(nn) {
            return Err(Error::InvalidPlan(format!(
                "{spec} does not partition {num_classes} classes"
            )));
        }
        let mut schedule = vec![(1..=nb as u8).collect::<Vec<_>>()];
        let mut next = nb as u8 + 1;
        while (next as usize) <= num_classes {
            schedule.push((next..next + nn as u8).collect());
            next += nn as u8;
        }
        Self::new(schedule, setting)
    }

    /// A single step holding every class.
    pub fn joint(num_classes: usize) -> Result<Self> {
        Self::new(vec![(1..=num_classes as u8).collect()], Setting::Overlapped)
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn num_steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn schedule(&self) -> &[Vec<u8>] {
        &self.schedule
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.len() {
            return Err(Error::InvalidPlan(format!(
                "step {t} outside 1..={}",
                self.schedule.len()
            )));
        }
        Ok(())
    }

    /// `C_t`.
    pub fn classes(&self, t: usize) -> Result<&[u8]> {
        self.check_step(t)?;
        Ok(&self.schedule[t - 1])
    }

    /// Classes learned before step `t`.
    pub fn old_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.schedule[..t - 1].concat())
    }

    /// Classes learned up to and including step `t`.
    pub fn seen_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.schedule[..t].concat())
    }

    /// Classes scheduled after step `t`.
    pub fn future_classes(&self, t: usize) -> Result<Vec<u8>> {
        self.check_step(t)?;
        Ok(self.schedule[t..].concat())
    }

    pub fn base_classes(&self) -> &[u8] {
        &self.schedule[0]
    }

    pub fn all_classes(&self) -> Vec<u8> {
        self.schedule.concat()
    }
}

#[derive(Debug, Clone)]
pub struct StepDataset {
    pub step: usize,
    pub classes: Vec<u8>,
    pub unknown: u8,
    pub samples: Vec<SegSample>,
}

impl StepDataset {
    /// The label alphabet `C_t ∪ {c_u}`.
    pub fn alphabet(&self) -> Vec<u8> {
        let mut a = vec![self.unknown];
        a.extend_from_slice(&self.classes);
        a
    }
}

/// Filters and relabels `pool` for step `t` of `plan`.
pub fn build_step(pool: &[SegSample], plan: &ScenarioPlan, t: usize) -> Result<StepDataset> {
    let current = plan.classes(t)?.to_vec();
    let future = plan.future_classes(t)?;
    let samples: Vec<SegSample> = pool
        .iter()
        .filter(|s| s.contains_any(&current))
        .filter(|s| plan.setting() == Setting::Overlapped || !s.contains_any(&future))
        .map(|s| {
            let mut s = s.clone();
            for l in &mut s.labels {
                if !current.contains(l) {
                    *l = UNKNOWN;
                }
            }
            s
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyStep {
            step: t,
            setting: plan.setting(),
        });
    }
    Ok(StepDataset {
        step: t,
        classes: current,
        unknown: UNKNOWN,
        samples,
    })
}

#[derive(Serialize)]
struct ManifestEntry {
    id: u32,
    image: String,
    labels: String,
    histogram: BTreeMap<u8, usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    split: &'a str,
    height: usize,
    width: usize,
    samples: Vec<ManifestEntry>,
}

fn write_split(dir: &Path, split: &str, samples: &[SegSample]) -> Result<()> {
    let out = dir.join(split);
    fs::create_dir_all(&out)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("{:05}.ppm", s.id);
        let labels = format!("{:05}.pgm", s.id);
        let mut ppm = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
        ppm.extend(s.image.iter().map(|v| (v * 255.0).round() as u8));
        fs::write(out.join(&image), ppm)?;
        let mut pgm = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
        pgm.extend_from_slice(&s.labels);
        fs::write(out.join(&labels), pgm)?;
        entries.push(ManifestEntry {
            id: s.id,
            image,
            labels,
            histogram: s.histogram(),
        });
    }
    let (height, width) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    let manifest = Manifest {
        split,
        height,
        width,
        samples: entries,
    };
    let mut f = fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes each split as PPM images, PGM label maps and a JSON manifest.
pub fn export_pools(pools: &SamplePools, dir: &Path) -> Result<()> {
    write_split(dir, "train", &pools.train)?;
    write_split(dir, "val", &pools.val)?;
    if !pools.holdout.is_empty() {
        write_split(dir, "holdout", &pools.holdout)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DataParams {
        DataParams {
            seed,
            n_train: 48,
            n_val: 12,
            ..DataParams::default()
        }
    }

    fn sample_with(labels: &[u8]) -> SegSample {
        SegSample {
            id: 0,
            height: 1,
            width: labels.len(),
            image: vec![0.5; labels.len() * 3],
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn same_seed_same_pools() {
        assert_eq!(generate(&small(1)).unwrap(), generate(&small(1)).unwrap());
        assert_ne!(generate(&small(1)).unwrap(), generate(&small(2)).unwrap());
    }

    #[test]
    fn every_class_in_train_and_val() {
        let p = DataParams::default();
        let pools = generate(&p).unwrap();
        for c in 1..=6u8 {
            assert!(pools.train.iter().any(|s| s.labels.contains(&c)));
            let n_val = pools.val.iter().filter(|s| s.labels.contains(&c)).count();
            assert!(n_val >= p.n_val / p.num_classes, "class {c}: {n_val}");
        }
    }

    #[test]
    fn values_in_range() {
        let pools = generate(&small(3)).unwrap();
        for s in pools.train.iter().chain(&pools.val) {
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.labels.iter().all(|&l| (l as usize) <= 6));
            assert_eq!(s.image.len(), s.labels.len() * 3);
            let classes: Vec<u8> = s.histogram().keys().copied().filter(|&c| c != 0).collect();
            assert!((1..=3).contains(&classes.len()));
        }
    }

    #[test]
    fn too_many_classes() {
        let p = DataParams {
            num_classes: 13,
            ..small(1)
        };
        assert!(matches!(generate(&p), Err(Error::TooManyClasses { .. })));
    }

    #[test]
    fn holdout_is_split_off() {
        let p = DataParams {
            holdout: 0.25,
            ..small(1)
        };
        let pools = generate(&p).unwrap();
        assert_eq!(pools.holdout.len(), 12);
        assert_eq!(pools.train.len(), 36);
    }

    #[test]
    fn parse_plans() {
        let p = ScenarioPlan::parse("4-1", 6, Setting::Overlapped).unwrap();
        assert_eq!(p.schedule(), &[vec![1, 2, 3, 4], vec![5], vec![6]]);
        let p = ScenarioPlan::parse("3-1", 6, Setting::Disjoint).unwrap();
        assert_eq!(p.num_steps(), 4);
        assert_eq!(p.old_classes(3).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(p.future_classes(3).unwrap(), vec![6]);
        assert!(ScenarioPlan::parse("4-3", 6, Setting::Disjoint).is_err());
        assert!(ScenarioPlan::parse("x", 6, Setting::Disjoint).is_err());
        assert!(ScenarioPlan::new(vec![vec![1], vec![1]], Setting::Disjoint).is_err());
    }

    #[test]
    fn overlapped_relabels_other_classes() {
        let plan = ScenarioPlan::new(vec![vec![1, 2, 3, 4], vec![5], vec![6]], Setting::Overlapped)
            .unwrap();
        let pool = vec![sample_with(&[0, 5, 2, 5])];
        let step = build_step(&pool, &plan, 2).unwrap();
        assert_eq!(step.samples[0].labels, vec![0, 5, 0, 5]);
    }

    #[test]
    fn disjoint_drops_future_classes() {
        let plan =
            ScenarioPlan::new(vec![vec![1, 3], vec![5], vec![2]], Setting::Disjoint).unwrap();
        let pool = vec![sample_with(&[5, 2]), sample_with(&[5, 1])];
        let step = build_step(&pool, &plan, 2).unwrap();
        assert_eq!(step.samples.len(), 1);
        assert_eq!(step.samples[0].labels, vec![5, 0]);

        let only_future = vec![sample_with(&[5, 2])];
        assert!(matches!(
            build_step(&only_future, &plan, 2),
            Err(Error::EmptyStep { step: 2, setting: Setting::Disjoint })
        ));
    }

    #[test]
    fn export_writes_netpbm() {
        let dir = tempfile::tempdir().unwrap();
        let pools = generate(&DataParams {
            n_train: 3,
            n_val: 2,
            ..DataParams::default()
        })
        .unwrap();
        export_pools(&pools, dir.path()).unwrap();
        let ppm = fs::read(dir.path().join("train/00000.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(ppm.len(), 13 + 32 * 32 * 3);
        let pgm = fs::read(dir.path().join("val/00003.pgm")).unwrap();
        assert_eq!(&pgm[13..], pools.val[0].labels.as_slice());
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("train/manifest.json")).unwrap())
                .unwrap();
        assert_eq!(m["samples"].as_array().unwrap().len(), 3);
    }
}
