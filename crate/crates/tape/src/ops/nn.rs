//! Convolution, pooling, dense layers, softmax and normalization kernels.

use crate::graph::{Backward, BackwardCtx, Var};
use crate::tensor::Tensor;
use crate::{Result, TapeError};

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index addressed by the stride pairs lies inside the
    // slices; callers pass strides that describe dense row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(TapeError::Shape(format!(
                "conv kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f32], out: &mut [f32]) {
        let l = self.cols();
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let dst = &mut out[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let l = self.cols();
        for ch in 0..self.c {
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let n = x.shape()[0];
        let o = w.shape()[0];
        let geo = self.geom;
        let (rows, l) = (geo.rows(), geo.cols());
        let in_plane = geo.c * geo.h * geo.w;
        let g = ctx.grad.data();
        let mut dx = ctx.needs[0].then(|| vec![0.0f32; x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![0.0f32; w.numel()]);
        let mut cols = vec![0.0f32; rows * l];
        let mut dcols = vec![0.0f32; rows * l];
        for s in 0..n {
            let gs = &g[s * o * l..(s + 1) * o * l];
            if let Some(dw) = dw.as_mut() {
                geo.im2col(&x.data()[s * in_plane..(s + 1) * in_plane], &mut cols);
                gemm(o, l, rows, gs, (l, 1), &cols, (1, l), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, o, l, w.data(), (1, rows), gs, (l, 1), 0.0, &mut dcols);
                geo.col2im(&dcols, &mut dx[s * in_plane..(s + 1) * in_plane]);
            }
        }
        let db = (self.has_bias && ctx.needs.get(2).copied().unwrap_or(false)).then(|| {
            let mut db = vec![0.0f32; o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g[(s * o + oc) * l..(s * o + oc + 1) * l].iter().sum::<f32>();
                }
            }
            Tensor::from_parts(vec![o], db)
        });
        let mut out = vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        ];
        if self.has_bias {
            out.push(db);
        }
        Ok(out)
    }
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut dx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
        let d = dx.data_mut();
        for (o, &src) in self.argmax.iter().enumerate() {
            d[src] += ctx.grad.data()[o];
        }
        Ok(vec![Some(dx)])
    }
}

struct Upsample {
    factor: usize,
}

impl Backward for Upsample {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4()?;
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let g = ctx.grad.data();
        let mut dx = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    dx[p * h * w + (y / f) * w + x / f] += g[p * oh * ow + y * ow + x];
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
    }
}

struct GlobalAvgPool;

impl Backward for GlobalAvgPool {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4()?;
        let hw = h * w;
        let g = ctx.grad.data();
        let mut dx = vec![0.0f32; n * c * hw];
        for p in 0..n * c {
            let v = g[p] / hw as f32;
            dx[p * hw..(p + 1) * hw].fill(v);
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
    }
}

struct GlobalMaxPool {
    argmax: Vec<usize>,
}

impl Backward for GlobalMaxPool {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4()?;
        let hw = h * w;
        let g = ctx.grad.data();
        let mut dx = vec![0.0f32; n * c * hw];
        for (p, &a) in self.argmax.iter().enumerate() {
            dx[p * hw + a] = g[p];
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
    }
}

struct Linear;

impl Backward for Linear {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, d) = x.dims2()?;
        let o = w.shape()[0];
        let g = ctx.grad.data();
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; n * d];
            gemm(n, o, d, g, (o, 1), w.data(), (d, 1), 0.0, &mut dx);
            Tensor::from_parts(vec![n, d], dx)
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0f32; o * d];
            gemm(o, n, d, g, (1, o), x.data(), (d, 1), 0.0, &mut dw);
            Tensor::from_parts(vec![o, d], dw)
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![0.0f32; o];
            for r in 0..n {
                for (j, acc) in db.iter_mut().enumerate() {
                    *acc += g[r * o + j];
                }
            }
            Tensor::from_parts(vec![o], db)
        });
        Ok(vec![dx, dw, db])
    }
}

struct Matmul;

impl Backward for Matmul {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k) = a.dims2()?;
        let n = b.shape()[1];
        let g = ctx.grad.data();
        let da = ctx.needs[0].then(|| {
            let mut da = vec![0.0f32; m * k];
            gemm(m, n, k, g, (n, 1), b.data(), (1, n), 0.0, &mut da);
            Tensor::from_parts(vec![m, k], da)
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![0.0f32; k * n];
            gemm(k, m, n, a.data(), (1, k), g, (n, 1), 0.0, &mut db);
            Tensor::from_parts(vec![k, n], db)
        });
        Ok(vec![da, db])
    }
}

struct LogSoftmax;

impl Backward for LogSoftmax {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (r, c) = ctx.output.dims2()?;
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let mut dx = vec![0.0f32; r * c];
        for i in 0..r {
            let row = i * c..(i + 1) * c;
            let gsum: f32 = g[row.clone()].iter().sum();
            for j in row {
                dx[j] = g[j] - y[j].exp() * gsum;
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![r, c], dx))])
    }
}

/// `(n, c, spatial)` view used by the per-channel kernels.
fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TapeError::Shape(format!("channel op needs rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, c, s) = channel_view(x.shape())?;
    let d = x.data();
    let m = (n * s) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            acc += d[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += d[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|&v| (v as f64 - mu) * (v as f64 - mu))
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    Ok((mean, var))
}

struct ChannelMean;

impl Backward for ChannelMean {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let (n, c, s) = channel_view(x.shape())?;
        let g = ctx.grad.data();
        let inv = 1.0 / (n * s) as f32;
        let mut dx = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                dx[(b * c + ch) * s..(b * c + ch + 1) * s].fill(g[ch] * inv);
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct ChannelVar;

impl Backward for ChannelVar {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let (n, c, s) = channel_view(x.shape())?;
        let (mean, _) = channel_moments(x)?;
        let g = ctx.grad.data();
        let scale = 2.0 / (n * s) as f32;
        let d = x.data();
        let mut dx = vec![0.0f32; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dx[i] = scale * g[ch] * (d[i] - mean[ch]);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct BatchNormTrain {
    eps: f32,
}

impl Backward for BatchNormTrain {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, c, s) = channel_view(x.shape())?;
        let (mean, var) = channel_moments(x)?;
        let d = x.data();
        let g = ctx.grad.data();
        let m = (n * s) as f32;
        let mut dx = vec![0.0f32; x.numel()];
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + self.eps).sqrt();
            let (mut sg, mut sgx) = (0.0f32, 0.0f32);
            for b in 0..n {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    sg += g[i];
                    sgx += g[i] * (d[i] - mean[ch]) * inv_std;
                }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
            let k = gamma.data()[ch] * inv_std / m;
            for b in 0..n {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    let xhat = (d[i] - mean[ch]) * inv_std;
                    dx[i] = k * (m * g[i] - sg - xhat * sgx);
                }
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            ctx.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

struct ChannelAffine;

impl Backward for ChannelAffine {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, scale) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, c, s) = channel_view(x.shape())?;
        let (d, g, sc) = (x.data(), ctx.grad.data(), scale.data());
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dx[i] = g[i] * sc[ch];
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let mut dscale = vec![0.0f32; c];
        let mut dshift = vec![0.0f32; c];
        if ctx.needs[1] || ctx.needs[2] {
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dscale[ch] += g[i] * d[i];
                        dshift[ch] += g[i];
                    }
                }
            }
        }
        Ok(vec![
            dx,
            ctx.needs[1].then(|| Tensor::from_parts(vec![c], dscale)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c], dshift)),
        ])
    }
}

/// Source window of one resampled output, in input pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f32,
    pub y0: f32,
    pub width: f32,
    pub height: f32,
    pub flip: bool,
}

impl CropBox {
    pub fn full(side: usize) -> Self {
        Self { x0: 0.0, y0: 0.0, width: side as f32, height: side as f32, flip: false }
    }
}

/// Bilinear taps `(lo, hi, weight_hi)` for each output coordinate.
fn taps(start: f32, extent: f32, in_len: usize, out_len: usize, flip: bool) -> Vec<(usize, usize, f32)> {
    let step = extent / out_len as f32;
    (0..out_len)
        .map(|o| {
            let o = if flip { out_len - 1 - o } else { o };
            let src = (start + (o as f32 + 0.5) * step - 0.5).clamp(0.0, (in_len - 1) as f32);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f32)
        })
        .collect()
}

struct CropResize {
    ys: Vec<Vec<(usize, usize, f32)>>,
    xs: Vec<Vec<(usize, usize, f32)>>,
}

fn resample(x: &Tensor, ys: &[Vec<(usize, usize, f32)>], xs: &[Vec<(usize, usize, f32)>], out: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let d = x.data();
    let mut o = vec![0.0f32; n * c * out * out];
    for b in 0..n {
        for ch in 0..c {
            let plane = &d[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut o[(b * c + ch) * out * out..(b * c + ch + 1) * out * out];
            for (oy, &(y0, y1, wy)) in ys[b].iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs[b].iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    dst[oy * out + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out, out], o))
}

impl Backward for CropResize {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4()?;
        let out = self.ys[0].len();
        let g = ctx.grad.data();
        let mut dx = vec![0.0f32; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let plane = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let src = &g[(b * c + ch) * out * out..(b * c + ch + 1) * out * out];
                for (oy, &(y0, y1, wy)) in self.ys[b].iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in self.xs[b].iter().enumerate() {
                        let v = src[oy * out + ox];
                        plane[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                        plane[y0 * w + x1] += v * (1.0 - wy) * wx;
                        plane[y1 * w + x0] += v * wy * (1.0 - wx);
                        plane[y1 * w + x1] += v * wy * wx;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))])
    }
}

/// Bilinear resampling of per-sample windows; usable outside a graph.
pub fn crop_resize_tensor(x: &Tensor, boxes: &[CropBox], out: usize) -> Result<Tensor> {
    let (ys, xs) = plan_crops(x, boxes, out)?;
    resample(x, &ys, &xs, out)
}

type Taps = Vec<Vec<(usize, usize, f32)>>;

fn plan_crops(x: &Tensor, boxes: &[CropBox], out: usize) -> Result<(Taps, Taps)> {
    let (n, _, h, w) = x.dims4()?;
    if boxes.len() != n || out == 0 {
        return Err(TapeError::Shape(format!("crop_resize needs {n} boxes, got {}", boxes.len())));
    }
    let ys = boxes.iter().map(|b| taps(b.y0, b.height, h, out, false)).collect();
    let xs = boxes.iter().map(|b| taps(b.x0, b.width, w, out, b.flip)).collect();
    Ok((ys, xs))
}

impl<'g> Var<'g> {
    /// 2-D convolution over `[n, c, h, w]` with a square `[o, c, k, k]` kernel.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        let (out, geom) = {
            let x = self.value();
            let w = weight.value();
            let (n, c, h, wd) = x.dims4()?;
            let (o, wc, kh, kw) = w.dims4()?;
            if wc != c || kh != kw {
                return Err(TapeError::Shape(format!(
                    "conv weight {:?} incompatible with input {:?}",
                    w.shape(),
                    x.shape()
                )));
            }
            let geom = ConvGeom::new(c, h, wd, kh, stride, pad)?;
            let (rows, l) = (geom.rows(), geom.cols());
            let mut cols = vec![0.0f32; rows * l];
            let mut out = vec![0.0f32; n * o * l];
            let in_plane = c * h * wd;
            for s in 0..n {
                geom.im2col(&x.data()[s * in_plane..(s + 1) * in_plane], &mut cols);
                gemm(o, rows, l, w.data(), (rows, 1), &cols, (l, 1), 0.0, &mut out[s * o * l..(s + 1) * o * l]);
            }
            if let Some(b) = bias {
                let b = b.value();
                if b.shape() != [o] {
                    return Err(TapeError::Shape(format!("conv bias {:?} for {o} outputs", b.shape())));
                }
                for s in 0..n {
                    for (oc, &bv) in b.data().iter().enumerate() {
                        out[(s * o + oc) * l..(s * o + oc + 1) * l].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
            (Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out), geom)
        };
        let rule = Box::new(Conv2d { geom, has_bias: bias.is_some() });
        Ok(match bias {
            Some(b) => self.graph.record(out, &[self, weight, b], rule),
            None => self.graph.record(out, &[self, weight], rule),
        })
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(self, k: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (out, argmax) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let geom = ConvGeom::new(1, h, w, k, stride, pad)?;
            let (oh, ow) = (geom.oh, geom.ow);
            let d = x.data();
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut at = p * h * w;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = p * h * w + iy as usize * w + ix as usize;
                                if d[idx] > best {
                                    best = d[idx];
                                    at = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
            (Tensor::from_parts(vec![n, c, oh, ow], out), argmax)
        };
        Ok(self.graph.record(out, &[self], Box::new(MaxPool { argmax })))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let (oh, ow) = (h * factor, w * factor);
            let d = x.data();
            let mut out = vec![0.0f32; n * c * oh * ow];
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[p * oh * ow + y * ow + xx] = d[p * h * w + (y / factor) * w + xx / factor];
                    }
                }
            }
            Tensor::from_parts(vec![n, c, oh, ow], out)
        };
        Ok(self.graph.record(out, &[self], Box::new(Upsample { factor })))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            let d = x.data();
            let data = (0..n * c).map(|p| d[p * hw..(p + 1) * hw].iter().sum::<f32>() / hw as f32).collect();
            Tensor::from_parts(vec![n, c], data)
        };
        Ok(self.graph.record(out, &[self], Box::new(GlobalAvgPool)))
    }

    /// `[n, c, h, w] -> [n, c]`; the gradient goes to the first maximum.
    pub fn global_max_pool(self) -> Result<Var<'g>> {
        let (out, argmax) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            if hw == 0 {
                return Err(TapeError::Shape("global_max_pool over an empty plane".into()));
            }
            let d = x.data();
            let mut argmax = Vec::with_capacity(n * c);
            let mut data = Vec::with_capacity(n * c);
            for p in 0..n * c {
                let plane = &d[p * hw..(p + 1) * hw];
                let (mut best, mut at) = (plane[0], 0);
                for (i, &v) in plane.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                argmax.push(at);
                data.push(best);
            }
            (Tensor::from_parts(vec![n, c], data), argmax)
        };
        Ok(self.graph.record(out, &[self], Box::new(GlobalMaxPool { argmax })))
    }

    /// `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        let out = {
            let x = self.value();
            let w = weight.value();
            let b = bias.value();
            let (n, d) = x.dims2()?;
            let (o, wd) = w.dims2()?;
            if wd != d || b.shape() != [o] {
                return Err(TapeError::Shape(format!(
                    "linear {:?}/{:?} incompatible with input {:?}",
                    w.shape(),
                    b.shape(),
                    x.shape()
                )));
            }
            let mut out = vec![0.0f32; n * o];
            for r in 0..n {
                out[r * o..(r + 1) * o].copy_from_slice(b.data());
            }
            gemm(n, d, o, x.data(), (d, 1), w.data(), (1, d), 1.0, &mut out);
            Tensor::from_parts(vec![n, o], out)
        };
        Ok(self.graph.record(out, &[self, weight, bias], Box::new(Linear)))
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs)?;
        let out = {
            let a = self.value();
            let b = rhs.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(TapeError::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0f32; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.graph.record(out, &[self, rhs], Box::new(Matmul)))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            let d = x.data();
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                // f64 with log1p over all but the max keeps near-zero outputs accurate
                let top = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                let m = row[top] as f64;
                let rest: f64 = (0..c).filter(|&j| j != top).map(|j| (row[j] as f64 - m).exp()).sum();
                let lse = m + rest.ln_1p();
                for j in 0..c {
                    out[i * c + j] = (row[j] as f64 - lse) as f32;
                }
            }
            Tensor::from_parts(vec![r, c], out)
        };
        Ok(self.graph.record(out, &[self], Box::new(LogSoftmax)))
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        Ok(self.log_softmax()?.exp())
    }

    /// Per-channel batch mean, `[n, c, ...] -> [c]`.
    pub fn channel_mean(self) -> Result<Var<'g>> {
        let (mean, _) = channel_moments(&self.value())?;
        let c = mean.len();
        Ok(self.graph.record(Tensor::from_parts(vec![c], mean), &[self], Box::new(ChannelMean)))
    }

    /// Per-channel biased batch variance, `[n, c, ...] -> [c]`.
    pub fn channel_var(self) -> Result<Var<'g>> {
        let (_, var) = channel_moments(&self.value())?;
        let c = var.len();
        Ok(self.graph.record(Tensor::from_parts(vec![c], var), &[self], Box::new(ChannelVar)))
    }

    /// Batch normalization with batch statistics.
    pub fn batch_norm_train(self, gamma: Var<'g>, beta: Var<'g>, eps: f32) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (n, c, s) = channel_view(x.shape())?;
            let (mean, var) = channel_moments(&x)?;
            let (gm, bt) = (gamma.value(), beta.value());
            if gm.shape() != [c] || bt.shape() != [c] {
                return Err(TapeError::Shape(format!("batch norm affine for {c} channels")));
            }
            let d = x.data();
            let mut out = vec![0.0f32; x.numel()];
            for ch in 0..c {
                let inv_std = 1.0 / (var[ch] + eps).sqrt();
                let (g0, b0) = (gm.data()[ch], bt.data()[ch]);
                for b in 0..n {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        out[i] = (d[i] - mean[ch]) * inv_std * g0 + b0;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.graph.record(out, &[self, gamma, beta], Box::new(BatchNormTrain { eps })))
    }

    /// `x * scale[c] + shift[c]` per channel.
    pub fn channel_affine(self, scale: Var<'g>, shift: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (n, c, s) = channel_view(x.shape())?;
            let (sc, sh) = (scale.value(), shift.value());
            if sc.shape() != [c] || sh.shape() != [c] {
                return Err(TapeError::Shape(format!("channel affine for {c} channels")));
            }
            let d = x.data();
            let mut out = vec![0.0f32; x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    let (a, o) = (sc.data()[ch], sh.data()[ch]);
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        out[i] = d[i] * a + o;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.graph.record(out, &[self, scale, shift], Box::new(ChannelAffine)))
    }

    /// Bilinear resample of one window per sample to `out × out`.
    pub fn crop_resize(self, boxes: &[CropBox], out: usize) -> Result<Var<'g>> {
        let (value, ys, xs) = {
            let x = self.value();
            let (ys, xs) = plan_crops(&x, boxes, out)?;
            (resample(&x, &ys, &xs, out)?, ys, xs)
        };
        Ok(self.graph.record(value, &[self], Box::new(CropResize { ys, xs })))
    }
}
