use kiop_tape::{CropBox, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed::Rng;

/// Random resized crop followed by a horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub min_scale: f32,
    pub max_scale: f32,
    pub min_ratio: f32,
    pub max_ratio: f32,
    pub flip_p: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { min_scale: 0.6, max_scale: 1.0, min_ratio: 3.0 / 4.0, max_ratio: 4.0 / 3.0, flip_p: 0.5 }
    }
}

impl AugmentConfig {
    /// One crop box per image, drawn from `rng`.
    pub fn boxes(&self, n: usize, side: usize, rng: &mut Rng) -> Vec<CropBox> {
        let s = side as f32;
        (0..n)
            .map(|_| {
                let area = rng.random_range(self.min_scale..=self.max_scale) * s * s;
                let log_ratio = rng.random_range(self.min_ratio.ln()..=self.max_ratio.ln());
                let ratio = log_ratio.exp();
                let width = (area * ratio).sqrt().min(s);
                let height = (area / ratio).sqrt().min(s);
                let x0 = rng.random_range(0.0..=s - width);
                let y0 = rng.random_range(0.0..=s - height);
                let flip = rng.random::<f32>() < self.flip_p;
                CropBox { x0, y0, width, height, flip }
            })
            .collect()
    }

    /// Differentiable augmentation of `[n, c, s, s]`; output side equals input side.
    pub fn apply<'g>(&self, x: Var<'g>, rng: &mut Rng) -> Result<Var<'g>> {
        let shape = x.shape();
        let boxes = self.boxes(shape[0], shape[3], rng);
        Ok(x.crop_resize(&boxes, shape[3])?)
    }

    pub fn apply_tensor(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let boxes = self.boxes(x.shape()[0], x.shape()[3], rng);
        Ok(kiop_tape::crop_resize_tensor(x, &boxes, x.shape()[3])?)
    }
}
