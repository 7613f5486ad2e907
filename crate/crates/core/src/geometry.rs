//! Ring-partitioned padding prompts.
//!
//! A partition `[s_0, s_1, ..., s_n]` describes nested, centered squares. The
//! innermost `s_0` square is the image hole; ring `i` (1-based) is the band
//! between the centered `s_{i-1}` square and the `s_i` square. Composing at
//! depth `d` yields an `s_d` canvas whose hole holds the image and whose
//! rings `1..=d` hold prompt pixels verbatim.

use std::io::Write;
use std::path::Path;

use kiop_tape::{Graph, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{KiopError, Result};
use crate::seed;

const MAGIC: &[u8; 5] = b"KIOP1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingPartition {
    sides: Vec<usize>,
    channels: usize,
}

impl RingPartition {
    /// Validates `sides` (strictly increasing, positive, at least two entries,
    /// even ring widths so every ring stays centered).
    pub fn new(sides: &[usize], channels: usize) -> Result<Self> {
        if sides.len() < 2 {
            return Err(KiopError::InvalidPartition(format!(
                "need an image hole and at least one ring, got {sides:?}"
            )));
        }
        if sides[0] == 0 || channels == 0 {
            return Err(KiopError::InvalidPartition(format!(
                "sides and channels must be positive ({sides:?}, {channels} channels)"
            )));
        }
        for w in sides.windows(2) {
            if w[1] <= w[0] {
                return Err(KiopError::InvalidPartition(format!("sides not strictly increasing: {sides:?}")));
            }
            if (w[1] - w[0]) % 2 != 0 {
                return Err(KiopError::InvalidPartition(format!(
                    "ring {} -> {} has odd width and cannot be centered",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { sides: sides.to_vec(), channels })
    }

    /// Image hole 32, core ring out to 36, periphery out to 128.
    pub fn default_two_model() -> Self {
        Self::new(&[32, 36, 128], 3).expect("valid default")
    }

    /// Adds a third ring out to 224 for a second receiver.
    pub fn default_three_model() -> Self {
        Self::new(&[32, 36, 128, 224], 3).expect("valid default")
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rings(&self) -> usize {
        self.sides.len() - 1
    }

    pub fn hole(&self) -> usize {
        self.sides[0]
    }

    pub fn outer(&self) -> usize {
        *self.sides.last().expect("non-empty")
    }

    /// Canvas side at `depth`.
    pub fn side(&self, depth: usize) -> Result<usize> {
        self.check_depth(depth)?;
        Ok(self.sides[depth])
    }

    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if depth == 0 || depth > self.rings() {
            return Err(KiopError::InvalidDepth { depth, rings: self.rings() });
        }
        Ok(())
    }

    /// Live pixels of ring `i` (1-based), per channel.
    pub fn ring_pixels(&self, ring: usize) -> usize {
        let (outer, inner) = (self.sides[ring], self.sides[ring - 1]);
        outer * outer - inner * inner
    }

    pub fn param_count(&self) -> usize {
        (1..=self.rings()).map(|i| self.channels * self.ring_pixels(i)).sum()
    }

    /// `[1, s_i, s_i]` indicator of ring `i` on its own grid.
    pub fn ring_mask(&self, ring: usize) -> Tensor {
        let (outer, inner) = (self.sides[ring], self.sides[ring - 1]);
        let off = (outer - inner) / 2;
        Tensor::from_fn([1, outer, outer], |idx| {
            let (y, x) = (idx / outer, idx % outer);
            let inside = (off..off + inner).contains(&y) && (off..off + inner).contains(&x);
            if inside {
                0.0
            } else {
                1.0
            }
        })
    }

    /// Row-major scan of ring `i`: top band, bottom band, left band, right band.
    pub fn ring_scan(&self, ring: usize) -> Vec<(usize, usize)> {
        let (outer, inner) = (self.sides[ring], self.sides[ring - 1]);
        let off = (outer - inner) / 2;
        let mut out = Vec::with_capacity(self.ring_pixels(ring));
        for y in 0..off {
            out.extend((0..outer).map(|x| (y, x)));
        }
        for y in off + inner..outer {
            out.extend((0..outer).map(|x| (y, x)));
        }
        for y in off..off + inner {
            out.extend((0..off).map(|x| (y, x)));
        }
        for y in off..off + inner {
            out.extend((off + inner..outer).map(|x| (y, x)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    #[default]
    Zeros,
    Uniform {
        lo: f32,
        hi: f32,
    },
}

/// Learnable ring pixels. Entries outside a ring's live band are kept at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompt {
    partition: RingPartition,
    rings: Vec<Tensor>,
    masks: Vec<Tensor>,
}

impl VisualPrompt {
    pub fn init(partition: RingPartition, scheme: PromptInit, seed: u64) -> Self {
        let masks: Vec<Tensor> = (1..=partition.rings()).map(|i| partition.ring_mask(i)).collect();
        let rings = (1..=partition.rings())
            .map(|i| {
                let side = partition.sides[i];
                let mut grid = Tensor::zeros([partition.channels, side, side]);
                if let PromptInit::Uniform { lo, hi } = scheme {
                    let mut rng = seed::rng(seed, &[seed::stream::INIT, i as u64]);
                    let scan = partition.ring_scan(i);
                    let data = grid.data_mut();
                    for c in 0..partition.channels {
                        for &(y, x) in &scan {
                            data[(c * side + y) * side + x] = rng.random_range(lo..=hi);
                        }
                    }
                }
                grid
            })
            .collect();
        Self { partition, rings, masks }
    }

    pub fn partition(&self) -> &RingPartition {
        &self.partition
    }

    /// Ring `i` grid (1-based), `[channels, s_i, s_i]`.
    pub fn ring(&self, ring: usize) -> &Tensor {
        &self.rings[ring - 1]
    }

    pub fn mask(&self, ring: usize) -> &Tensor {
        &self.masks[ring - 1]
    }

    pub fn rings_mut(&mut self) -> Vec<&mut Tensor> {
        self.rings.iter_mut().collect()
    }

    pub fn param_count(&self) -> usize {
        self.partition.param_count()
    }

    /// Live values of ring `i` in checkpoint scan order, channel-major.
    pub fn live_params(&self, ring: usize) -> Vec<f32> {
        let side = self.partition.sides[ring];
        let scan = self.partition.ring_scan(ring);
        let grid = self.rings[ring - 1].data();
        let mut out = Vec::with_capacity(scan.len() * self.partition.channels);
        for c in 0..self.partition.channels {
            out.extend(scan.iter().map(|&(y, x)| grid[(c * side + y) * side + x]));
        }
        out
    }

    /// Registers the ring grids on `g`, as parameters when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundPrompt<'g> {
        let rings = self
            .rings
            .iter()
            .map(|r| if trainable { g.param(r.clone()) } else { g.constant(r.clone()) })
            .collect();
        let masks = self.masks.iter().map(|m| g.constant(m.clone())).collect();
        BoundPrompt { partition: self.partition.clone(), rings, masks }
    }

    /// Composes without recording gradients.
    pub fn compose_tensor(&self, x: &Tensor, depth: usize) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let out = bound.compose(g.constant(x.clone()), depth)?;
        Ok(out.to_tensor())
    }

    /// Copy with every value clamped to `[lo, hi]`, for display only.
    pub fn clamped(&self, lo: f32, hi: f32) -> Self {
        let mut out = self.clone();
        for r in &mut out.rings {
            *r = r.map(|v| v.clamp(lo, hi));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.partition;
        let mut out = Vec::with_capacity(self.checkpoint_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(p.channels as u32).to_le_bytes());
        out.extend_from_slice(&(p.rings() as u32).to_le_bytes());
        for &s in &p.sides {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for i in 1..=p.rings() {
            for v in self.live_params(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Exact size of [`VisualPrompt::to_bytes`].
    pub fn checkpoint_len(&self) -> usize {
        MAGIC.len() + 8 + 4 * self.partition.sides.len() + 4 * self.param_count()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| KiopError::CorruptCheckpoint(m.to_string());
        let mut cursor = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| corrupt("bad magic"))?;
        let mut read_u32 = |what: &str| -> Result<usize> {
            if cursor.len() < 4 {
                return Err(corrupt(&format!("truncated {what}")));
            }
            let (head, rest) = cursor.split_at(4);
            cursor = rest;
            Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")) as usize)
        };
        let channels = read_u32("channel count")?;
        let rings = read_u32("ring count")?;
        if rings == 0 || rings > 64 {
            return Err(corrupt(&format!("implausible ring count {rings}")));
        }
        let sides = (0..=rings).map(|_| read_u32("sides")).collect::<Result<Vec<_>>>()?;
        let partition = RingPartition::new(&sides, channels).map_err(|e| corrupt(&e.to_string()))?;
        let mut prompt = Self::init(partition, PromptInit::Zeros, 0);
        let header = MAGIC.len() + 8 + 4 * sides.len();
        if bytes.len() != prompt.checkpoint_len() {
            return Err(corrupt(&format!(
                "expected {} bytes for partition {sides:?}, found {}",
                prompt.checkpoint_len(),
                bytes.len()
            )));
        }
        let mut values = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for i in 1..=rings {
            let side = sides[i];
            let scan = prompt.partition.ring_scan(i);
            let grid = prompt.rings[i - 1].data_mut();
            for c in 0..channels {
                for &(y, x) in &scan {
                    grid[(c * side + y) * side + x] = values.next().expect("length checked");
                }
            }
        }
        Ok(prompt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| KiopError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| KiopError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| KiopError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A prompt whose rings are recorded on a graph.
pub struct BoundPrompt<'g> {
    partition: RingPartition,
    rings: Vec<Var<'g>>,
    masks: Vec<Var<'g>>,
}

impl<'g> BoundPrompt<'g> {
    pub fn partition(&self) -> &RingPartition {
        &self.partition
    }

    /// Ring `i` handle (1-based).
    pub fn ring(&self, ring: usize) -> Var<'g> {
        self.rings[ring - 1]
    }

    pub fn rings(&self) -> &[Var<'g>] {
        &self.rings
    }

    /// Places `x` (`[n, c, s_0, s_0]`) in the hole of an `s_depth` canvas with
    /// rings `1..=depth` around it.
    pub fn compose(&self, x: Var<'g>, depth: usize) -> Result<Var<'g>> {
        let p = &self.partition;
        p.check_depth(depth)?;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != p.channels || shape[2] != p.hole() || shape[3] != p.hole() {
            return Err(KiopError::ShapeMismatch(format!(
                "compose expects [n, {}, {h}, {h}], got {shape:?}",
                p.channels,
                h = p.hole()
            )));
        }
        let side = p.sides[depth];
        let mut canvas = x.pad_center(side)?;
        for i in 1..=depth {
            let live = self.rings[i - 1].mul(self.masks[i - 1])?;
            canvas = canvas.add(live.pad_center(side)?)?;
        }
        Ok(canvas)
    }
}
