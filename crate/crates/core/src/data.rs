//! Dataset ingestion: IDX pairs, CIFAR binaries, class-subfolder trees and the
//! procedural toy family.
//!
//! Every split is stored normalized (per-channel mean/std from the dataset
//! manifest), with three channels, at the prompt's image-hole side.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use kiop_tape::{crop_resize_tensor, CropBox, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KiopError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[n, 3, side, side]`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Rows `idx` as a new batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select0(idx)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Contiguous chunks of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let len = size.min(n - start);
            (self.images.narrow0(start, len).expect("in range"), &self.labels[start..start + len])
        })
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split { images: self.images.narrow0(0, n).expect("in range"), labels: self.labels[..n].to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    /// Side of the source images before resizing to the hole.
    pub native_side: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Idx,
    Cifar10,
    Cifar100,
    Folder,
    Toy,
}

/// Describes where a dataset lives and how it was normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub id: String,
    pub format: DatasetFormat,
    /// Root directory; unused for the toy family.
    #[serde(default)]
    pub path: PathBuf,
    /// Per-channel mean and std of the unit-range pixels; grayscale sources
    /// repeat one value.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default)]
    pub toy: Option<ToyConfig>,
}

impl DatasetManifest {
    pub fn toy(id: impl Into<String>, cfg: ToyConfig) -> Self {
        Self { id: id.into(), format: DatasetFormat::Toy, path: PathBuf::new(), mean: TOY_MEAN, std: TOY_STD, toy: Some(cfg) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KiopError::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| KiopError::Config(format!("{}: {e}", path.display())))?;
        if m.path.is_relative() && m.format != DatasetFormat::Toy {
            m.path = path.parent().unwrap_or(Path::new(".")).join(&m.path);
        }
        Ok(m)
    }
}

/// Loads and normalizes a dataset, resizing to `hole`.
pub fn ingest(manifest: &DatasetManifest, hole: usize) -> Result<Dataset> {
    if manifest.std.iter().any(|&s| s <= 0.0) {
        return Err(KiopError::Config(format!("{}: std must be positive", manifest.id)));
    }
    let raw = match manifest.format {
        DatasetFormat::Toy => {
            let cfg = manifest.toy.clone().ok_or_else(|| KiopError::Config(format!("{}: toy settings missing", manifest.id)))?;
            toy_raw(&cfg)
        }
        DatasetFormat::Idx => read_idx(&manifest.path)?,
        DatasetFormat::Cifar10 => read_cifar(&manifest.path, false)?,
        DatasetFormat::Cifar100 => read_cifar(&manifest.path, true)?,
        DatasetFormat::Folder => read_folder(&manifest.path)?,
    };
    let finish = |split: RawSplit| -> Result<Split> {
        let images = normalize(to_three_channels(split.images)?, &manifest.mean, &manifest.std);
        Ok(Split { images: resize(&images, hole)?, labels: split.labels })
    };
    let native_side = raw.train.images.shape()[2];
    Ok(Dataset {
        id: manifest.id.clone(),
        train: finish(raw.train)?,
        test: finish(raw.test)?,
        classes: raw.classes,
        native_side,
        mean: manifest.mean,
        std: manifest.std,
    })
}

/// Unit-range pixels before normalization.
struct RawSplit {
    images: Tensor,
    labels: Vec<usize>,
}

struct RawDataset {
    train: RawSplit,
    test: RawSplit,
    classes: usize,
}

fn to_three_channels(x: Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    match c {
        3 => Ok(x),
        1 => {
            let d = x.data();
            let plane = h * w;
            let mut out = Vec::with_capacity(n * 3 * plane);
            for b in 0..n {
                for _ in 0..3 {
                    out.extend_from_slice(&d[b * plane..(b + 1) * plane]);
                }
            }
            Ok(Tensor::new([n, 3, h, w], out)?)
        }
        other => Err(KiopError::UnsupportedModel(format!("{other}-channel images"))),
    }
}

fn normalize(mut x: Tensor, mean: &[f32; 3], std: &[f32; 3]) -> Tensor {
    let shape = x.shape().to_vec();
    let plane = shape[2] * shape[3];
    for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        let c = i % 3;
        for v in chunk {
            *v = (*v - mean[c]) / std[c];
        }
    }
    x
}

/// Bilinear resize of a square batch; identity when sides match.
pub fn resize(x: &Tensor, side: usize) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    if h != w {
        return Err(KiopError::ShapeMismatch(format!("non-square images {h}x{w}")));
    }
    if h == side {
        return Ok(x.clone());
    }
    Ok(crop_resize_tensor(x, &vec![CropBox::full(h); n], side)?)
}

fn ingest_err(path: &Path, detail: impl Into<String>) -> KiopError {
    KiopError::Ingest { path: path.to_path_buf(), detail: detail.into() }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ingest_err(path, e.to_string()))
}

fn be_u32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

/// Parses an IDX image file (magic 0x00000803) into `[n, 1, rows, cols]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0803 {
        return Err(ingest_err(path, "not an IDX image file"));
    }
    let (n, rows, cols) = (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12));
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(ingest_err(path, format!("expected {} pixel bytes, found {}", n * rows * cols, body.len())));
    }
    Ok(Tensor::new([n, 1, rows, cols], body.iter().map(|&b| b as f32 / 255.0).collect())?)
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0801 {
        return Err(ingest_err(path, "not an IDX label file"));
    }
    let n = be_u32(bytes, 4);
    let body = &bytes[8..];
    if body.len() != n {
        return Err(ingest_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read_idx(root: &Path) -> Result<RawDataset> {
    let split = |img: &str, lab: &str| -> Result<RawSplit> {
        let (ip, lp) = (root.join(img), root.join(lab));
        let images = parse_idx_images(&read_file(&ip)?, &ip)?;
        let labels = parse_idx_labels(&read_file(&lp)?, &lp)?;
        if labels.len() != images.shape()[0] {
            return Err(ingest_err(root, "image and label counts differ"));
        }
        Ok(RawSplit { images, labels })
    };
    let train = split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    Ok(RawDataset { train, test, classes })
}

/// Parses CIFAR binary records: label byte(s) then 3072 channel-planar pixels.
pub fn parse_cifar(bytes: &[u8], fine_labels: bool, path: &Path) -> Result<RawSplitParts> {
    let label_bytes = if fine_labels { 2 } else { 1 };
    let record = label_bytes + 3072;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(ingest_err(path, format!("length {} is not a multiple of {record}", bytes.len())));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(record) {
        labels.push(r[label_bytes - 1] as usize);
        pixels.extend(r[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(RawSplitParts { images: Tensor::new([n, 3, 32, 32], pixels)?, labels })
}

/// Decoded images and labels of one file.
pub struct RawSplitParts {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn read_cifar(root: &Path, hundred: bool) -> Result<RawDataset> {
    let load = |names: &[String]| -> Result<RawSplit> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for name in names {
            let p = root.join(name);
            let part = parse_cifar(&read_file(&p)?, hundred, &p)?;
            labels.extend(part.labels);
            parts.push(part.images);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(RawSplit { images: Tensor::cat0(&refs)?, labels })
    };
    let (train, test) = if hundred {
        (load(&["train.bin".into()])?, load(&["test.bin".into()])?)
    } else {
        let names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
        (load(&names)?, load(&["test_batch.bin".into()])?)
    };
    Ok(RawDataset { train, test, classes: if hundred { 100 } else { 10 } })
}

/// `root/{train,test}/<class>/<image>`; classes are the sorted subfolder names
/// of `train`.
fn read_folder(root: &Path) -> Result<RawDataset> {
    let classes = sorted_dirs(&root.join("train"))?;
    if classes.is_empty() {
        return Err(ingest_err(root, "no class folders under train/"));
    }
    let load = |split: &str| -> Result<RawSplit> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(split).join(class);
            if !dir.exists() {
                continue;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| ingest_err(&dir, e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f).map_err(|e| ingest_err(&f, e.to_string()))?.to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                if *dims.get_or_insert((w, h)) != (w, h) || w != h {
                    return Err(ingest_err(&f, "images must be square and equally sized"));
                }
                let raw = img.as_raw();
                for c in 0..3 {
                    pixels.extend((0..w * h).map(|i| raw[i * 3 + c] as f32 / 255.0));
                }
                labels.push(label);
            }
        }
        let (w, _) = dims.ok_or_else(|| ingest_err(root, format!("no images in {split}/")))?;
        Ok(RawSplit { images: Tensor::new([labels.len(), 3, w, w], pixels)?, labels })
    };
    Ok(RawDataset { train: load("train")?, test: load("test")?, classes: classes.len() })
}

fn sorted_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| ingest_err(dir, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}

/// Settings of the procedural grating family. Each seed fixes ten class
/// prototypes (tint, orientation, frequency); samples jitter them and add
/// random phase, contrast, brightness and pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_test")]
    pub test: usize,
}

fn default_train() -> usize {
    5000
}

fn default_test() -> usize {
    1000
}

impl ToyConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, train: default_train(), test: default_test() }
    }
}

pub const TOY_SIDE: usize = 32;
pub const TOY_CLASSES: usize = 10;
pub const TOY_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const TOY_STD: [f32; 3] = [0.25, 0.25, 0.25];

struct Prototype {
    angle: f32,
    freq: f32,
    color: [f32; 3],
}

fn prototypes(seed: u64) -> Vec<Prototype> {
    let mut rng = seed::rng(seed, &[seed::stream::DATA, 0]);
    let offset = rng.random_range(0.0..PI / TOY_CLASSES as f32);
    let mut bins: Vec<usize> = (0..TOY_CLASSES).collect();
    rand::seq::SliceRandom::shuffle(bins.as_mut_slice(), &mut rng);
    bins.into_iter()
        .map(|b| Prototype {
            angle: offset + b as f32 * PI / TOY_CLASSES as f32,
            freq: rng.random_range(1.5..4.0),
            color: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        })
        .collect()
}

fn toy_split(protos: &[Prototype], seed: u64, split: u64, n: usize) -> RawSplit {
    let s = TOY_SIDE;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let jitter = Normal::new(0.0f32, 1.0).expect("unit normal");
    for i in 0..n {
        let mut rng = seed::rng(seed, &[seed::stream::DATA, 1 + split, i as u64]);
        let label = i % protos.len();
        let p = &protos[label];
        let angle = p.angle + jitter.sample(&mut rng) * 0.05;
        let freq = p.freq * (1.0 + 0.05 * jitter.sample(&mut rng));
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.15..0.25);
        let brightness = rng.random_range(-0.05..0.05);
        let (ca, sa) = (angle.cos(), angle.sin());
        let k = 2.0 * PI * freq / s as f32;
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let wave = (k * (x as f32 * ca + y as f32 * sa) + phase).sin();
                    let v = 0.5 + 0.2 * p.color[c] + brightness + contrast * wave + 0.05 * jitter.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    RawSplit { images: Tensor::new([n, 3, s, s], pixels).expect("sized"), labels }
}

fn toy_raw(cfg: &ToyConfig) -> RawDataset {
    let protos = prototypes(cfg.seed);
    RawDataset {
        train: toy_split(&protos, cfg.seed, 0, cfg.train),
        test: toy_split(&protos, cfg.seed, 1, cfg.test),
        classes: TOY_CLASSES,
    }
}

/// The procedural dataset with seed `seed`, normalized and at the native 32 side.
pub fn toy_dataset(id: &str, cfg: ToyConfig) -> Dataset {
    ingest(&DatasetManifest::toy(id, cfg), TOY_SIDE).expect("toy data is well formed")
}
