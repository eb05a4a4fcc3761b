//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions are usable (and tested) natively; the `js_*`
//! wrappers are what the page imports.

use wasm_bindgen::prelude::*;

use ciss::metrics::{harmonic_mean, label_from_probs};
use ciss::model::reasoning_scores;
use ciss::synthdata::{generate, DataParams, BACKGROUND};

const LABEL_COLOURS: [[u8; 3]; 13] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// A rendered scene: RGBA image, RGBA label map and raw labels.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    width: usize,
    height: usize,
    image: Vec<u8>,
    label_map: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn label_rgba(&self) -> Vec<u8> {
        self.label_map.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

pub fn label_colour(label: u8) -> [u8; 3] {
    LABEL_COLOURS[label as usize % LABEL_COLOURS.len()]
}

/// Renders training scene `index` of the synthetic task with `num_classes`
/// classes at `size` x `size` pixels.
pub fn render_scene(seed: u64, num_classes: usize, size: usize, index: usize) -> Result<Scene, String> {
    let n = index + 1;
    let pools = generate(&DataParams {
        seed,
        num_classes,
        height: size,
        width: size,
        n_train: n.max(num_classes),
        n_val: 1,
        holdout: 0.0,
    })
    .map_err(|e| e.to_string())?;
    let s = &pools.train[index];
    let image = s
        .image
        .chunks(3)
        .flat_map(|p| [to_byte(p[0]), to_byte(p[1]), to_byte(p[2]), 255])
        .collect();
    let label_map = s
        .labels
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = label_colour(l);
            [r, g, b, 255]
        })
        .collect();
    Ok(Scene {
        width: s.width,
        height: s.height,
        image,
        label_map,
        labels: s.labels.clone(),
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[z, z_plus, z_minus]` of one pixel and one classifier, followed by the
/// per-channel products.
pub fn decompose(f: &[f64], w: &[f64], b: f64) -> Result<Vec<f64>, String> {
    if f.len() != w.len() || f.is_empty() {
        return Err(format!("feature and weight lengths differ or are empty ({} vs {})", f.len(), w.len()));
    }
    let (zp, zn) = reasoning_scores(f, w);
    let z: f64 = f.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
    let mut out = vec![z, zp, zn];
    out.extend(f.iter().zip(w).map(|(a, c)| a * c));
    Ok(out)
}

/// Label of one pixel from class probabilities for classes `1..=n`.
pub fn predict_pixel(probs: &[f64], tau: f64) -> u8 {
    let classes: Vec<u8> = (1..=probs.len() as u8).collect();
    label_from_probs(probs, &classes, tau).first().copied().unwrap_or(BACKGROUND)
}

#[wasm_bindgen(js_name = renderScene)]
pub fn js_render_scene(seed: u32, num_classes: usize, size: usize, index: usize) -> Result<Scene, JsError> {
    render_scene(seed as u64, num_classes, size, index).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = decompose)]
pub fn js_decompose(f: &[f64], w: &[f64], b: f64) -> Result<Vec<f64>, JsError> {
    decompose(f, w, b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = predictPixel)]
pub fn js_predict_pixel(probs: &[f64], tau: f64) -> u8 {
    predict_pixel(probs, tau)
}

#[wasm_bindgen(js_name = harmonicIou)]
pub fn js_harmonic_iou(miou_b: f64, miou_n: f64) -> f64 {
    harmonic_mean(miou_b, miou_n)
}

#[wasm_bindgen(js_name = labelColour)]
pub fn js_label_colour(label: u8) -> Vec<u8> {
    label_colour(label).to_vec()
}
