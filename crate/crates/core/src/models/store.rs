//! Flat weight container and model manifests.
//!
//! Container layout (little-endian): magic `KIOPW1`, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims, float32 payload.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use kiop_tape::Tensor;
use serde::{Deserialize, Serialize};

use super::{digest, zoo, FrozenModel, Network};
use crate::error::{KiopError, Result};

const MAGIC: &[u8; 6] = b"KIOPW1";

pub fn encode(net: &Network) -> Vec<u8> {
    let tensors = net.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<HashMap<String, Tensor>> {
    let corrupt = |m: String| KiopError::CorruptCheckpoint(m);
    let mut rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| corrupt("bad weight magic".into()))?;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(KiopError::CorruptCheckpoint("truncated weight file".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("non-UTF-8 tensor name".into()))?;
        let rank = u32_at(take(4)?);
        let shape = (0..rank).map(|_| take(4).map(u32_at)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = take(4 * numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes in weight file", rest.len())));
    }
    Ok(out)
}

/// Overwrites every tensor of `net` from `tensors`, which must match exactly.
pub fn fill(net: &mut Network, mut tensors: HashMap<String, Tensor>) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = net.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        let t = tensors.remove(name).ok_or_else(|| KiopError::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(KiopError::CorruptCheckpoint(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
        }
        values.push(t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(KiopError::CorruptCheckpoint(format!("unexpected tensor {extra}")));
    }
    let mut values = values.into_iter();
    for_each_tensor_mut(net, |t| *t = values.next().expect("same count"));
    Ok(())
}

/// Visits tensors in [`Network::named_tensors`] order.
fn for_each_tensor_mut(net: &mut Network, mut f: impl FnMut(&mut Tensor)) {
    fn walk(layers: &mut [super::Layer], f: &mut impl FnMut(&mut Tensor)) {
        for layer in layers {
            match layer {
                super::Layer::Conv(c) => {
                    f(&mut c.weight);
                    if let Some(b) = c.bias.as_mut() {
                        f(b);
                    }
                }
                super::Layer::BatchNorm(bn) => {
                    f(&mut bn.gamma);
                    f(&mut bn.beta);
                    f(&mut bn.running_mean);
                    f(&mut bn.running_var);
                }
                super::Layer::Residual { body, shortcut } => {
                    walk(body, f);
                    walk(shortcut, f);
                }
                _ => {}
            }
        }
    }
    for stage in &mut net.stages {
        walk(&mut stage.layers, &mut f);
    }
    f(&mut net.head.weight);
    f(&mut net.head.bias);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub id: String,
    pub arch: String,
    pub class_count: usize,
    pub dataset: String,
    pub digest: String,
    pub native_side: usize,
    #[serde(default)]
    pub resize_to_native: bool,
    /// Weight container, relative to the manifest's directory.
    pub weights: PathBuf,
}

/// Writes `<dir>/<id>.weights` and `<dir>/<id>.json`; returns the manifest path.
pub fn save_model(model: &FrozenModel, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| KiopError::io(dir, e))?;
    let weights = PathBuf::from(format!("{}.weights", model.id()));
    let wpath = dir.join(&weights);
    std::fs::write(&wpath, encode(model.net())).map_err(|e| KiopError::io(&wpath, e))?;
    let manifest = ModelManifest {
        id: model.id().to_string(),
        arch: model.net().arch.clone(),
        class_count: model.class_count(),
        dataset: model.dataset().to_string(),
        digest: model.digest().to_string(),
        native_side: model.native_side(),
        resize_to_native: model.resize_to_native(),
        weights,
    };
    let mpath = dir.join(format!("{}.json", model.id()));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(|e| KiopError::io(&mpath, e))?;
    Ok(mpath)
}

/// Loads a manifest and its weights, checking the recorded digest.
pub fn load_model(manifest: impl AsRef<Path>) -> Result<FrozenModel> {
    let mpath = manifest.as_ref();
    let text = std::fs::read_to_string(mpath).map_err(|e| KiopError::io(mpath, e))?;
    let m: ModelManifest =
        serde_json::from_str(&text).map_err(|e| KiopError::Config(format!("{}: {e}", mpath.display())))?;
    let wpath = mpath.parent().unwrap_or(Path::new(".")).join(&m.weights);
    let bytes = std::fs::read(&wpath).map_err(|e| KiopError::io(&wpath, e))?;
    let mut net = zoo::build(&m.arch, m.class_count, 0)?;
    fill(&mut net, decode(&bytes)?)?;
    let actual = digest(&net);
    if actual != m.digest {
        return Err(KiopError::CorruptCheckpoint(format!(
            "{}: digest {actual} does not match manifest {}",
            m.id, m.digest
        )));
    }
    Ok(FrozenModel::register(m.id, net, m.native_side)
        .with_dataset(m.dataset)
        .with_resize_to_native(m.resize_to_native))
}
