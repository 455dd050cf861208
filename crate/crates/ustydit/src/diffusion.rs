//! Rectified-flow training and inference: straight-path interpolation
//! between data and noise, velocity regression, Euler integration back to
//! the data endpoint, and the stylize pipeline wiring content edges and
//! style patches into the model.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::imaging::{canny, crop_patches, resize_bilinear, EdgeMap, ImageBuffer};
use crate::model::{forward_loss, forward_velocity, Conditions, Model, TapeParams};
use crate::numerics::{Precision, Tape};
use crate::tokenizer::{pixels_to_image, unpatchify};
use crate::util::par_map;
use crate::{Error, Result};

pub const CANNY_LOW: f64 = 100.0;
pub const CANNY_HIGH: f64 = 200.0;

/// x_t = (1−t)·x₀ + t·ε
pub fn flow_interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Dimension("flow_interpolate length mismatch".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("t {t} outside [0,1]")));
    }
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect())
}

/// v* = ε − x₀
pub fn velocity_target(x0: &[f64], eps: &[f64]) -> Vec<f64> {
    eps.iter().zip(x0).map(|(e, a)| e - a).collect()
}

/// One training example: source style image plus its derived conditions.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    /// source at 2× base resolution
    pub source: ImageBuffer,
    /// resized global style image at base resolution; also the
    /// reconstruction target
    pub global: ImageBuffer,
    pub crops: Vec<ImageBuffer>,
    pub canny: EdgeMap,
    pub prompt: String,
}

/// Manifest line: {id, image_path, prompt}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub prompt: String,
}

/// Derive the training conditions from a source image: resize to 2× base
/// if needed, resize to base for the global view and reconstruction
/// target, extract its edges, crop n base-sized patches from the source.
pub fn build_train_item(
    model_cfg: &crate::tokenizer::ModelConfig,
    id: &str,
    source: &ImageBuffer,
    prompt: &str,
    seed: u64,
) -> Result<TrainItem> {
    let base = model_cfg.base_resolution;
    let want = 2 * base;
    let source = if source.width == want && source.height == want {
        source.to_rgb()
    } else {
        resize_bilinear(&source.to_rgb(), want, want)?
    };
    let global = resize_bilinear(&source, base, base)?;
    let edge = canny(&global, CANNY_LOW, CANNY_HIGH)?;
    let crops = crop_patches(&source, base, model_cfg.n_patches, seed)?;
    Ok(TrainItem {
        id: id.to_string(),
        source,
        global,
        crops,
        canny: edge,
        prompt: prompt.to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Plain stochastic gradient with momentum.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub step_size: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(step_size: f64, momentum: f64) -> Self {
        SgdMomentum {
            step_size,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &HashMap<String, Vec<f64>>) {
        for name in model.store.names() {
            let Some(g) = grads.get(&name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = model.store.get_mut(&name).unwrap();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                p.data[i] -= self.step_size * v[i];
            }
        }
        model.store.quantize(Precision::F32);
    }
}

/// Per-item randomness for one step, drawn up front so the batch can be
/// evaluated on worker threads without changing the result.
struct ItemDraw {
    t: f64,
    lambda: f64,
    eps: Vec<f64>,
}

/// One full-batch training step: per item, sample t and λ, noise the
/// target, regress the velocity; average loss and gradients; one
/// momentum-SGD update. Returns the batch loss.
pub fn training_step(
    model: &mut Model,
    items: &[TrainItem],
    opt: &mut SgdMomentum,
    rng: &mut ChaCha8Rng,
    parallelism: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Parameter("empty training batch".into()));
    }
    let cfg = model.cfg.clone();
    let px = cfg.base_resolution * cfg.base_resolution * 3;
    let draws: Vec<ItemDraw> = items
        .iter()
        .map(|_| ItemDraw {
            t: rng.gen_range(0.0..1.0),
            lambda: rng.gen_range(0.0..=1.0),
            eps: (0..px).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect();

    let work: Vec<(usize, &TrainItem)> = items.iter().enumerate().collect();
    let store = &model.store;
    type ItemResult = Result<(f64, HashMap<String, Vec<f64>>)>;
    let results: Vec<ItemResult> = par_map(work, parallelism, |(i, item)| {
            let draw = &draws[i];
            let x0 = &item.global.values;
            let x_t = flow_interpolate(x0, &draw.eps, draw.t)?;
            let target = velocity_target(x0, &draw.eps);
            let cond = Conditions {
                style_global: item.global.clone(),
                style_locals: item.crops.clone(),
                canny: item.canny.clone(),
                prompt: item.prompt.clone(),
                lambda: draw.lambda,
            };
            let mut tape = Tape::new(Precision::F32);
            let mut tp = TapeParams::new(store);
            let loss = forward_loss(&mut tape, &mut tp, &cfg, &x_t, &target, &cond, draw.t)?;
            let loss_val = tape.scalar(loss);
            let grads = tape.backward(loss)?;
            Ok((loss_val, tp.collect_grads(&grads)))
        });

    // serial, index-ordered accumulation keeps results independent of the
    // parallelism degree
    let scale = 1.0 / items.len() as f64;
    let mut total_loss = 0.0;
    let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss * scale;
        for (name, g) in grads {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(&g) {
                *a += b * scale;
            }
        }
    }
    if !total_loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {total_loss}")));
    }
    opt.step(model, &acc);
    Ok(total_loss)
}

/// Anything that predicts a pixel-space velocity field.
pub trait VelocityField {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// The trained model evaluated under fixed conditions.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub cond: Conditions,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let mut tape = Tape::new(Precision::F32);
        let mut tp = TapeParams::new(&self.model.store);
        let out = forward_velocity(&mut tape, &mut tp, cfg, x, &self.cond, t, true)?;
        let grid = (cfg.grid_edge(), cfg.grid_edge());
        unpatchify(tape.data(out), grid, cfg.patch_px, 3)
    }
}

/// Euler-integrate the velocity field from pure noise at t=1 back to t=0
/// in `steps` uniform steps. Returns raw pixels (unclamped).
pub fn sample_field<F: VelocityField>(
    field: &F,
    pixel_count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Parameter("steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..pixel_count)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Dimension("velocity length mismatch".into()));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
    }
    Ok(x)
}

/// Sample an image from the trained model under the given conditions.
pub fn sample(model: &Model, cond: Conditions, steps: usize, seed: u64) -> Result<ImageBuffer> {
    let base = model.cfg.base_resolution;
    let field = ModelField { model, cond };
    let pixels = sample_field(&field, base * base * 3, steps, seed)?;
    pixels_to_image(&pixels, base, base, 3)
}

/// Full inference pipeline: content edges condition structure, the style
/// image conditions appearance. Small style inputs take the duplication
/// path instead of cropping. Returns the output image and the conditioning
/// edge map.
#[allow(clippy::too_many_arguments)]
pub fn stylize(
    model: &Model,
    content: &ImageBuffer,
    style: &ImageBuffer,
    lambda: f64,
    prompt: &str,
    steps: usize,
    seed: u64,
) -> Result<(ImageBuffer, EdgeMap)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0,1]")));
    }
    let cfg = &model.cfg;
    let base = cfg.base_resolution;

    let content_base = resize_bilinear(&content.to_rgb(), base, base)?;
    let edge = canny(&content_base, CANNY_LOW, CANNY_HIGH)?;

    let style_rgb = style.to_rgb();
    let global = resize_bilinear(&style_rgb, base, base)?;
    let locals = if style_rgb.width >= 2 * base && style_rgb.height >= 2 * base {
        crop_patches(&style_rgb, base, cfg.n_patches, seed)?
    } else {
        vec![global.clone(); cfg.n_patches]
    };

    let cond = Conditions {
        style_global: global,
        style_locals: locals,
        canny: edge.clone(),
        prompt: prompt.to_string(),
        lambda,
    };
    let out = sample(model, cond, steps, seed)?;
    Ok((out, edge))
}

/// Precision/recall F1 between the edge pixels of two maps.
pub fn edge_f1(predicted: &EdgeMap, target: &EdgeMap) -> Result<f64> {
    if predicted.width != target.width || predicted.height != target.height {
        return Err(Error::Dimension("edge map dimensions differ".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (p, t) in predicted.values.iter().zip(&target.values) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 && fp == 0 && fn_ == 0 {
        return Ok(1.0); // both empty
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}
