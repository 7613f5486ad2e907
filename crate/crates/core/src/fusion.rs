//! Label mapping and the prompted forward chains.

use kiop_tape::{CropBox, Graph, Tensor, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{KiopError, Result};
use crate::geometry::{BoundPrompt, VisualPrompt};
use crate::models::{FrozenModel, ForwardOutput};
use crate::seed;

/// Receiver class `j` reads source logit `indices[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub indices: Vec<usize>,
    pub source_classes: usize,
    pub seed: u64,
}

impl LabelMapping {
    /// Distinct indices drawn without replacement.
    pub fn random(source_classes: usize, target: usize, seed: u64) -> Result<Self> {
        if target == 0 || target > source_classes {
            return Err(KiopError::MappingInfeasible { source_classes, target });
        }
        let mut rng = seed::rng(seed, &[seed::stream::MAPPING]);
        let indices = index::sample(&mut rng, source_classes, target).into_vec();
        Ok(Self { indices, source_classes, seed })
    }

    pub fn identity(classes: usize) -> Self {
        Self { indices: (0..classes).collect(), source_classes: classes, seed: 0 }
    }

    pub fn target_classes(&self) -> usize {
        self.indices.len()
    }

    pub fn apply<'g>(&self, logits: Var<'g>) -> Result<Var<'g>> {
        self.check_width(&logits.shape())?;
        Ok(logits.select_cols(&self.indices)?)
    }

    pub fn apply_tensor(&self, logits: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.apply(g.constant(logits.clone()))?.to_tensor())
    }

    fn check_width(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.source_classes {
            return Err(KiopError::ShapeMismatch(format!(
                "mapping expects logits [n, {}], got {shape:?}",
                self.source_classes
            )));
        }
        Ok(())
    }
}

/// `model(compose(x, prompt, depth))`.
pub fn chain_forward<'g>(
    g: &'g Graph,
    model: &FrozenModel,
    prompt: &BoundPrompt<'g>,
    x: Var<'g>,
    depth: usize,
) -> Result<ForwardOutput<'g>> {
    let canvas = prompt.compose(fit_hole(x, prompt.partition().hole())?, depth)?;
    model.forward(g, canvas)
}

/// Bilinear resize of square inputs whose side differs from the image hole.
fn fit_hole(x: Var<'_>, hole: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    if shape.len() == 4 && shape[2] == shape[3] && shape[3] != hole {
        return Ok(x.crop_resize(&vec![CropBox::full(shape[3]); shape[0]], hole)?);
    }
    Ok(x)
}

/// A prompted chain: model A behind rings `1..=depth`, optionally remapped.
#[derive(Clone, Copy, Debug)]
pub struct Chain<'a> {
    pub model: &'a FrozenModel,
    pub prompt: &'a VisualPrompt,
    pub depth: usize,
    pub mapping: Option<&'a LabelMapping>,
}

impl Chain<'_> {
    /// Logits with the prompt held constant.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let bound = self.prompt.bind(g, false);
        let logits = chain_forward(g, self.model, &bound, x, self.depth)?.logits;
        match self.mapping {
            Some(m) => m.apply(logits),
            None => Ok(logits),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.forward(&g, g.constant(x.clone()))?.to_tensor())
    }
}

/// Model A behind the core ring.
pub fn sma_forward<'g>(g: &'g Graph, model_a: &FrozenModel, prompt: &BoundPrompt<'g>, x: Var<'g>) -> Result<Var<'g>> {
    Ok(chain_forward(g, model_a, prompt, x, 1)?.logits)
}

/// Model A behind rings `1..=depth`, read out through `mapping`.
pub fn smb_forward<'g>(
    g: &'g Graph,
    model_a: &FrozenModel,
    prompt: &BoundPrompt<'g>,
    mapping: &LabelMapping,
    x: Var<'g>,
    depth: usize,
) -> Result<Var<'g>> {
    mapping.apply(chain_forward(g, model_a, prompt, x, depth)?.logits)
}

/// Graph-free logits of a prompted chain, with an optional mapping.
pub fn chain_logits(
    model: &FrozenModel,
    prompt: &VisualPrompt,
    x: &Tensor,
    depth: usize,
    mapping: Option<&LabelMapping>,
) -> Result<Tensor> {
    Chain { model, prompt, depth, mapping }.logits(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_by_hand() {
        let m = LabelMapping { indices: vec![2, 0], source_classes: 3, seed: 0 };
        let out = m.apply_tensor(&Tensor::new([1, 3], vec![0.1, 0.5, 0.2]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.2, 0.1]);
    }

    #[test]
    fn mapping_contracts() {
        assert_eq!(LabelMapping::random(1, 1, 9).unwrap().indices, vec![0]);
        assert_eq!(LabelMapping::random(100, 10, 5).unwrap(), LabelMapping::random(100, 10, 5).unwrap());
        let mut perm = LabelMapping::random(10, 10, 3).unwrap().indices;
        perm.sort_unstable();
        assert_eq!(perm, (0..10).collect::<Vec<_>>());
        assert!(matches!(LabelMapping::random(5, 6, 0), Err(KiopError::MappingInfeasible { .. })));
    }

    #[test]
    fn width_mismatch() {
        let m = LabelMapping::identity(4);
        assert!(matches!(m.apply_tensor(&Tensor::zeros([2, 3])), Err(KiopError::ShapeMismatch(_))));
    }
}
