use kiop_tape::{Graph, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{KiopError, Result};
use crate::seed;

/// `z → dense → BN → (up2 → conv → BN → LeakyReLU) ×2 → conv → tanh · scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub z_dim: usize,
    pub side: usize,
    pub channels: usize,
    pub width: usize,
    pub output_scale: f32,
    /// Weights in binding order.
    pub params: Vec<Tensor>,
}

const EPS: f32 = 1e-5;

impl Generator {
    /// Deterministic initialization from `seed`.
    pub fn init(z_dim: usize, side: usize, channels: usize, width: usize, output_scale: f32, seed: u64) -> Result<Self> {
        if side % 4 != 0 || side == 0 || width < 2 {
            return Err(KiopError::Config(format!("generator needs side divisible by 4 and width >= 2 (side {side}, width {width})")));
        }
        let mut rng = seed::rng(seed, &[]);
        let init = side / 4;
        let half = width / 2;
        let mut normal = |shape: Vec<usize>, fan_in: usize| {
            let d = Normal::new(0.0, (1.0 / fan_in as f32).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| d.sample(&mut rng))
        };
        let params = vec![
            normal(vec![width * init * init, z_dim], z_dim),
            Tensor::zeros([width * init * init]),
            Tensor::full([width], 1.0),
            Tensor::zeros([width]),
            normal(vec![width, width, 3, 3], width * 9),
            Tensor::full([width], 1.0),
            Tensor::zeros([width]),
            normal(vec![half, width, 3, 3], width * 9),
            Tensor::full([half], 1.0),
            Tensor::zeros([half]),
            normal(vec![channels, half, 3, 3], half * 9),
            Tensor::zeros([channels]),
        ];
        Ok(Self { z_dim, side, channels, width, output_scale, params })
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Images `[n, channels, side, side]` from latents `[n, z_dim]`.
    pub fn forward<'g>(&self, p: &[Var<'g>], z: Var<'g>) -> Result<Var<'g>> {
        let n = z.shape()[0];
        let init = self.side / 4;
        let h = z.linear(p[0], p[1])?.reshape(vec![n, self.width, init, init])?;
        let h = h.batch_norm_train(p[2], p[3], EPS)?;
        let h = h.upsample_nearest(2)?.conv2d(p[4], None, 1, 1)?.batch_norm_train(p[5], p[6], EPS)?.leaky_relu(0.2);
        let h = h.upsample_nearest(2)?.conv2d(p[7], None, 1, 1)?.batch_norm_train(p[8], p[9], EPS)?.leaky_relu(0.2);
        Ok(h.conv2d(p[10], Some(p[11]), 1, 1)?.tanh().scale(self.output_scale))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}
