//! Classifier definitions, the frozen-model registry entry, and weight files.

mod network;
pub mod store;
pub mod zoo;

use std::fmt::Write as _;

use kiop_tape::{CropBox, Graph, Tensor, Var};
use sha2::{Digest, Sha256};

pub use network::{BatchNorm, BnMode, Conv, Dense, ForwardOptions, ForwardOutput, GlobalPool, Layer, Network, Stage};

use crate::error::{KiopError, Result};

/// SHA-256 over every tensor name, shape and value.
pub fn digest(net: &Network) -> String {
    let mut h = Sha256::new();
    h.update(net.arch.as_bytes());
    for (name, t) in net.named_tensors() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        hash_tensor(&mut h, t);
    }
    hex(h)
}

/// SHA-256 over the shapes and values of `tensors`, in order.
pub fn tensors_digest<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        hash_tensor(&mut h, t);
    }
    hex(h)
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    h.update((t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

fn hex(h: Sha256) -> String {
    let mut out = String::with_capacity(64);
    for b in h.finalize().iter() {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

/// Fails with `FrozenViolation` when `net` no longer hashes to `expected`.
pub fn verify_digest(id: &str, net: &Network, expected: &str) -> Result<()> {
    let actual = digest(net);
    if actual != expected {
        return Err(KiopError::FrozenViolation { id: id.to_string(), expected: expected.to_string(), actual });
    }
    Ok(())
}

/// A registered classifier. The network is only reachable by shared reference.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    id: String,
    dataset: String,
    net: Network,
    digest: String,
    native_side: usize,
    resize_to_native: bool,
}

impl FrozenModel {
    pub fn register(id: impl Into<String>, net: Network, native_side: usize) -> Self {
        let digest = digest(&net);
        Self { id: id.into(), dataset: String::new(), net, digest, native_side, resize_to_native: false }
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self
    }

    /// Resample every input to the native side before the first stage.
    pub fn with_resize_to_native(mut self, on: bool) -> Self {
        self.resize_to_native = on;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dataset(&self) -> &str {
        &self.dataset
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn class_count(&self) -> usize {
        self.net.class_count()
    }

    pub fn native_side(&self) -> usize {
        self.native_side
    }

    pub fn resize_to_native(&self) -> bool {
        self.resize_to_native
    }

    /// Running statistics of every BN layer.
    pub fn bn_stats(&self) -> Vec<(&Tensor, &Tensor)> {
        self.net.batch_norms().into_iter().map(|bn| (&bn.running_mean, &bn.running_var)).collect()
    }

    fn prepare<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(KiopError::ShapeMismatch(format!("expected a square image batch, got {shape:?}")));
        }
        if self.resize_to_native && shape[2] != self.native_side {
            let boxes = vec![CropBox::full(shape[2]); shape[0]];
            return Ok(x.crop_resize(&boxes, self.native_side)?);
        }
        Ok(x)
    }

    /// Eval-mode pass; gradients flow to the input only.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<ForwardOutput<'g>> {
        let x = self.prepare(x)?;
        self.net.forward(g, x, ForwardOptions::eval())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.forward(&g, g.constant(x.clone()))?.logits.to_tensor())
    }

    pub fn assert_frozen(&self) -> Result<()> {
        verify_digest(&self.id, &self.net, &self.digest)
    }
}
