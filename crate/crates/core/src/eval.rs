//! Accuracy, Grad-CAM saliency and resource accounting.

use std::fmt;
use std::path::{Path, PathBuf};

use kiop_tape::{crop_resize_tensor, CropBox, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{KiopError, Result};
use crate::geometry::VisualPrompt;
use crate::models::{ForwardOptions, FrozenModel};

/// Top-1 accuracy of `chain` (a batch → logits function) over `split`.
pub fn accuracy(split: &Split, batch: usize, mut chain: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    if split.is_empty() {
        return Err(KiopError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, labels) in split.chunks(batch) {
        let pred = chain(&x)?.argmax_rows()?;
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Grad-CAM maps for a batch of prompted inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// `[n, side, side]`, min-max normalized per image into `[0, 1]`.
    pub heatmaps: Tensor,
    /// The prompted inputs the maps were computed on, `[n, c, side, side]`.
    pub composite: Tensor,
    pub layer: String,
    pub classes: Vec<usize>,
}

/// Grad-CAM of model A behind rings `1..=depth`. `layer` names a stage and
/// defaults to the last one; `class` defaults to each image's top logit.
pub fn gradcam(
    x: &Tensor,
    model_a: &FrozenModel,
    prompt: &VisualPrompt,
    depth: usize,
    layer: Option<&str>,
    class: Option<usize>,
) -> Result<GradCam> {
    let net = model_a.net();
    let names = net.stage_names();
    let layer = layer.unwrap_or_else(|| names.last().copied().unwrap_or_default()).to_string();
    let k = net.stage_index(&layer)?;
    let composite = prompt.compose_tensor(x, depth)?;
    let (n, _, side, _) = composite.dims4()?;

    let g = Graph::new();
    let (act, _) = net.run_stages(&g, g.constant(composite.clone()), 0..k + 1, ForwardOptions::eval())?;
    let act = act.to_tensor();
    let g = Graph::new();
    let a = g.param(act.clone());
    let logits = net.forward_from(&g, a, k + 1, ForwardOptions::eval())?.logits;
    let classes = match class {
        Some(c) if c >= net.class_count() => return Err(KiopError::InvalidLabel { label: c, classes: net.class_count() }),
        Some(c) => vec![c; n],
        None => logits.to_tensor().argmax_rows()?,
    };
    let score = logits.pick(&classes)?.sum_all();
    let grad = g.backward(score)?.get_or_zeros(a);

    let (_, c, h, w) = act.dims4()?;
    let hw = h * w;
    let mut cam = vec![0.0f32; n * hw];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let weight = grad.data()[off..off + hw].iter().sum::<f32>() / hw as f32;
            for (o, v) in cam[i * hw..(i + 1) * hw].iter_mut().zip(&act.data()[off..off + hw]) {
                *o += weight * v;
            }
        }
    }
    let cam = Tensor::new([n, 1, h, w], cam.into_iter().map(|v| v.max(0.0)).collect())?;
    let up = crop_resize_tensor(&cam, &vec![CropBox::full(h); n], side)?;
    let mut maps = up.into_data();
    for m in maps.chunks_mut(side * side) {
        let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for v in m.iter_mut() {
            *v = if span > 1e-12 { (*v - lo) / span } else { 0.0 };
        }
    }
    Ok(GradCam { heatmaps: Tensor::new([n, side, side], maps)?, composite, layer, classes })
}

impl GradCam {
    /// Writes `heatmap_<i>.png` (8-bit grayscale) and `composite_<i>.png`
    /// (per-image min-max RGB) for every image.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| KiopError::io(dir, e))?;
        let (n, c, side, _) = self.composite.dims4()?;
        let plane = side * side;
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let heat = &self.heatmaps.data()[i * plane..(i + 1) * plane];
            let gray = image::GrayImage::from_vec(side as u32, side as u32, heat.iter().map(|v| to_u8(*v)).collect())
                .expect("buffer matches dimensions");
            let path = dir.join(format!("heatmap_{i}.png"));
            gray.save(&path).map_err(|e| KiopError::Ingest { path: path.clone(), detail: e.to_string() })?;
            out.push(path);

            let img = &self.composite.data()[i * c * plane..(i + 1) * c * plane];
            let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(1e-12);
            let mut rgb = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    rgb.push(to_u8((img[ch.min(c - 1) * plane + p] - lo) / span));
                }
            }
            let rgb = image::RgbImage::from_vec(side as u32, side as u32, rgb).expect("buffer matches dimensions");
            let path = dir.join(format!("composite_{i}.png"));
            rgb.save(&path).map_err(|e| KiopError::Ingest { path: path.clone(), detail: e.to_string() })?;
            out.push(path);
        }
        Ok(out)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResources {
    pub id: String,
    pub arch: String,
    pub params: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub sides: Vec<usize>,
    pub trainable_params: usize,
    /// Size of the prompt checkpoint: header plus four bytes per live value.
    pub prompt_bytes: usize,
    pub models: Vec<ModelResources>,
}

pub fn resource_report(prompt: &VisualPrompt, models: &[&FrozenModel]) -> ResourceReport {
    ResourceReport {
        sides: prompt.partition().sides().to_vec(),
        trainable_params: prompt.param_count(),
        prompt_bytes: prompt.checkpoint_len(),
        models: models
            .iter()
            .map(|m| ModelResources {
                id: m.id().to_string(),
                arch: m.net().arch.clone(),
                params: m.net().param_count(),
                bytes: m.net().stored_bytes(),
            })
            .collect(),
    }
}

impl fmt::Display for ResourceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "prompt {:?}: {} trainable parameters, {} bytes", self.sides, self.trainable_params, self.prompt_bytes)?;
        for m in &self.models {
            writeln!(f, "model {} ({}): {} parameters, {} bytes", m.id, m.arch, m.params, m.bytes)?;
        }
        Ok(())
    }
}
