use kiop_tape::{Graph, Tensor, Var};
use rand::Rng as _;

use crate::error::Result;
use crate::losses::l2_normalize;
use crate::seed;

/// Projection head over pooled teacher features: `d → hidden → ReLU → out`,
/// L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: Vec<Tensor>,
}

impl Discriminator {
    pub fn init(feature_dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::stream::DISCRIMINATOR]);
        let mut uniform = |shape: [usize; 2]| {
            let bound = 1.0 / (shape[1] as f32).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let params = vec![uniform([hidden, feature_dim]), Tensor::zeros([hidden]), uniform([out, hidden]), Tensor::zeros([out])];
        Self { params }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    pub fn embed<'g>(p: &[Var<'g>], features: Var<'g>) -> Result<Var<'g>> {
        let h = features.linear(p[0], p[1])?.relu();
        l2_normalize(h.linear(p[2], p[3])?)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}
