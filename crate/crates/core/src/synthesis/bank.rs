use std::path::{Path, PathBuf};

use kiop_tape::Tensor;
use rand::Rng as _;

use crate::error::{KiopError, Result};
use crate::seed::Rng;

/// One committed synthesis batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BankBatch {
    pub images: Tensor,
    pub targets: Vec<usize>,
    pub round: usize,
}

/// Append-only store of committed batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataBank {
    batches: Vec<BankBatch>,
    len: usize,
}

const SHARD_MAGIC: &[u8; 6] = b"KIOPB1";

impl DataBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of stored samples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batches(&self) -> &[BankBatch] {
        &self.batches
    }

    pub fn append(&mut self, images: Tensor, targets: Vec<usize>, round: usize) -> Result<()> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || n != targets.len() {
            return Err(KiopError::ShapeMismatch(format!("{} targets for images {:?}", targets.len(), images.shape())));
        }
        if let Some(first) = self.batches.first() {
            if first.images.shape()[1..] != images.shape()[1..] {
                return Err(KiopError::ShapeMismatch(format!(
                    "bank holds {:?} images, got {:?}",
                    &first.images.shape()[1..],
                    &images.shape()[1..]
                )));
            }
        }
        self.len += n;
        self.batches.push(BankBatch { images, targets, round });
        Ok(())
    }

    fn locate(&self, mut i: usize) -> (&BankBatch, usize) {
        for b in &self.batches {
            if i < b.targets.len() {
                return (b, i);
            }
            i -= b.targets.len();
        }
        unreachable!("index within bank length")
    }

    /// Gathers samples by global index.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = self.batches.first().ok_or(KiopError::EmptyBank)?;
        let per = first.images.numel() / first.targets.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len {
                return Err(KiopError::ShapeMismatch(format!("bank index {i} out of {}", self.len)));
            }
            let (b, j) = self.locate(i);
            data.extend_from_slice(&b.images.data()[j * per..(j + 1) * per]);
            targets.push(b.targets[j]);
        }
        let mut shape = first.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, targets))
    }

    /// Uniform sample with replacement; returns the indices used too.
    pub fn sample_indices(&self, count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(KiopError::EmptyBank);
        }
        Ok((0..count).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.sample_indices(count, rng)?;
        self.gather(&idx)
    }

    /// One uniformly chosen committed batch, truncated to `cap` samples.
    pub fn random_batch(&self, cap: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.batches.is_empty() {
            return Err(KiopError::EmptyBank);
        }
        let b = &self.batches[rng.random_range(0..self.batches.len())];
        let n = b.targets.len().min(cap.max(1));
        Ok(b.images.narrow0(0, n)?)
    }

    /// Every stored sample, in commit order.
    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len).collect();
        self.gather(&idx)
    }

    /// Writes `shard_<round>.bin` per batch into `dir`.
    pub fn save_shards(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| KiopError::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.batches.len());
        for b in &self.batches {
            let path = dir.join(format!("shard_{:06}.bin", b.round));
            std::fs::write(&path, encode_shard(b)).map_err(|e| KiopError::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Loads every `shard_*.bin` in `dir`, ordered by file name.
    pub fn load_shards(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| KiopError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("shard_") && n.ends_with(".bin")))
            .collect();
        files.sort();
        let mut bank = Self::new();
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| KiopError::io(&f, e))?;
            let b = decode_shard(&bytes).map_err(|m| KiopError::CorruptCheckpoint(format!("{}: {m}", f.display())))?;
            bank.append(b.images, b.targets, b.round)?;
        }
        Ok(bank)
    }
}

/// Magic, `u32` round, `u32` n/c/h/w, float32 images, int32 targets.
fn encode_shard(b: &BankBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + 4 * (b.images.numel() + b.targets.len()));
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&(b.round as u32).to_le_bytes());
    for &d in b.images.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in b.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &t in &b.targets {
        out.extend_from_slice(&(t as i32).to_le_bytes());
    }
    out
}

fn decode_shard(bytes: &[u8]) -> std::result::Result<BankBatch, String> {
    let body = bytes.strip_prefix(SHARD_MAGIC.as_slice()).ok_or("bad shard magic")?;
    if body.len() < 20 {
        return Err("truncated shard header".into());
    }
    let word = |i: usize| u32::from_le_bytes(body[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let round = word(0);
    let shape = vec![word(1), word(2), word(3), word(4)];
    let numel: usize = shape.iter().product();
    let payload = &body[20..];
    if payload.len() != 4 * (numel + shape[0]) {
        return Err(format!("expected {} payload bytes, found {}", 4 * (numel + shape[0]), payload.len()));
    }
    let (img, tgt) = payload.split_at(4 * numel);
    let data = img.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mut targets = Vec::with_capacity(shape[0]);
    for c in tgt.chunks_exact(4) {
        let t = i32::from_le_bytes(c.try_into().expect("4 bytes"));
        targets.push(usize::try_from(t).map_err(|_| format!("negative target {t}"))?);
    }
    let images = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok(BankBatch { images, targets, round })
}
