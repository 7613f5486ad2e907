//! Reductions, reshapes, slicing, gathers and centered pad/crop.

use crate::graph::{Backward, BackwardCtx, Var};
use crate::tensor::Tensor;
use crate::{Result, TapeError};

struct SumAll;

impl Backward for SumAll {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.item();
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))])
    }
}

/// Sum over one axis, viewed as `(outer, axis, inner)`.
struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl SumAxis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

impl Backward for SumAxis {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data();
        let mut out = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for a in 0..self.len {
                let dst = (o * self.len + a) * self.inner;
                out[dst..dst + self.inner].copy_from_slice(&g[o * self.inner..(o + 1) * self.inner]);
            }
        }
        Ok(vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), out))])
    }
}

struct Reshape;

impl Backward for Reshape {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape().to_vec())?)])
    }
}

struct Cat0 {
    lens: Vec<usize>,
}

impl Backward for Cat0 {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.lens.len());
        for (i, &len) in self.lens.iter().enumerate() {
            out.push(if ctx.needs[i] { Some(ctx.grad.narrow0(start, len)?) } else { None });
            start += len;
        }
        Ok(out)
    }
}

struct Narrow0 {
    start: usize,
}

impl Backward for Narrow0 {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let input = ctx.inputs[0];
        let row = input.numel() / input.shape()[0].max(1);
        let mut out = Tensor::zeros(input.shape().to_vec());
        let g = ctx.grad.data();
        out.data_mut()[self.start * row..self.start * row + g.len()].copy_from_slice(g);
        Ok(vec![Some(out)])
    }
}

/// Column gather on a rank-2 tensor.
struct SelectCols {
    cols: Vec<usize>,
}

impl Backward for SelectCols {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (rows, width) = ctx.inputs[0].dims2()?;
        let k = self.cols.len();
        let g = ctx.grad.data();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (j, &c) in self.cols.iter().enumerate() {
                out[r * width + c] += g[r * k + j];
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![rows, width], out))])
    }
}

/// One element per row of a rank-2 tensor.
struct Pick {
    idx: Vec<usize>,
}

impl Backward for Pick {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (rows, width) = ctx.inputs[0].dims2()?;
        let g = ctx.grad.data();
        let mut out = vec![0.0; rows * width];
        for (r, &c) in self.idx.iter().enumerate() {
            out[r * width + c] = g[r];
        }
        Ok(vec![Some(Tensor::from_parts(vec![rows, width], out))])
    }
}

struct Transpose2;

fn transpose2(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

impl Backward for Transpose2 {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(transpose2(ctx.grad)?)])
    }
}

/// Centered embedding of the trailing `h×w` plane into `side×side`, zero fill.
/// `inverse` crops instead.
struct CenterPad {
    from: usize,
    to: usize,
    inverse: bool,
}

fn copy_centered(src: &Tensor, from: usize, to: usize, pad: bool) -> Tensor {
    let shape = src.shape();
    let planes = src.numel() / (shape[shape.len() - 1] * shape[shape.len() - 2]).max(1);
    let off = (to - from) / 2;
    let (small, big) = (from * from, to * to);
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    let side = if pad { to } else { from };
    out_shape[r - 1] = side;
    out_shape[r - 2] = side;
    let mut out = vec![0.0; planes * side * side];
    let s = src.data();
    for p in 0..planes {
        for y in 0..from {
            let big_row = p * big + (y + off) * to + off;
            let small_row = p * small + y * from;
            if pad {
                out[big_row..big_row + from].copy_from_slice(&s[small_row..small_row + from]);
            } else {
                out[small_row..small_row + from].copy_from_slice(&s[big_row..big_row + from]);
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl Backward for CenterPad {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(copy_centered(ctx.grad, self.from, self.to, self.inverse))])
    }
}

fn square_side(shape: &[usize]) -> Result<usize> {
    match shape {
        [.., h, w] if h == w => Ok(*h),
        _ => Err(TapeError::Shape(format!("expected square trailing plane, got {shape:?}"))),
    }
}

impl<'g> Var<'g> {
    pub fn sum_all(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.record(Tensor::scalar(s), &[self], Box::new(SumAll))
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f32)
    }

    /// Sums over `axis`; the axis is kept with length 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let (out, rule) = {
            let v = self.value();
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(TapeError::Shape(format!("axis {axis} out of range for {shape:?}")));
            }
            let rule = SumAxis::of(shape, axis);
            let d = v.data();
            let mut out = vec![0.0; rule.outer * rule.inner];
            for o in 0..rule.outer {
                for a in 0..rule.len {
                    let src = (o * rule.len + a) * rule.inner;
                    for i in 0..rule.inner {
                        out[o * rule.inner + i] += d[src + i];
                    }
                }
            }
            let mut new_shape = shape.to_vec();
            if keepdim {
                new_shape[axis] = 1;
            } else {
                new_shape.remove(axis);
            }
            (Tensor::from_parts(new_shape, out), rule)
        };
        // the rule's grad layout is (outer, inner) regardless of keepdim
        Ok(self.graph.record(out, &[self], Box::new(rule)))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let len = self.value().shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f32))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.record(out, &[self], Box::new(Reshape)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    pub fn cat0(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| TapeError::Shape("cat0 of nothing".into()))?;
        for p in parts {
            first.same_graph(p)?;
        }
        let (out, lens) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            (Tensor::cat0(&refs)?, refs.iter().map(|t| t.shape()[0]).collect())
        };
        Ok(first.graph.record(out, parts, Box::new(Cat0 { lens })))
    }

    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'g>> {
        let out = self.value().narrow0(start, len)?;
        Ok(self.graph.record(out, &[self], Box::new(Narrow0 { start })))
    }

    /// `out[r, j] = self[r, cols[j]]`.
    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'g>> {
        let out = {
            let v = self.value();
            let (rows, width) = v.dims2()?;
            if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
                return Err(TapeError::Shape(format!("column {bad} out of range {width}")));
            }
            let d = v.data();
            let mut out = Vec::with_capacity(rows * cols.len());
            for r in 0..rows {
                out.extend(cols.iter().map(|&c| d[r * width + c]));
            }
            Tensor::from_parts(vec![rows, cols.len()], out)
        };
        Ok(self.graph.record(out, &[self], Box::new(SelectCols { cols: cols.to_vec() })))
    }

    /// `out[r] = self[r, idx[r]]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'g>> {
        let out = {
            let v = self.value();
            let (rows, width) = v.dims2()?;
            if idx.len() != rows {
                return Err(TapeError::Shape(format!("pick needs {rows} indices, got {}", idx.len())));
            }
            let d = v.data();
            let mut out = Vec::with_capacity(rows);
            for (r, &c) in idx.iter().enumerate() {
                if c >= width {
                    return Err(TapeError::Shape(format!("index {c} out of range {width}")));
                }
                out.push(d[r * width + c]);
            }
            Tensor::from_parts(vec![rows], out)
        };
        Ok(self.graph.record(out, &[self], Box::new(Pick { idx: idx.to_vec() })))
    }

    pub fn t(self) -> Result<Var<'g>> {
        let out = transpose2(&self.value())?;
        Ok(self.graph.record(out, &[self], Box::new(Transpose2)))
    }

    /// Zero-pads the trailing square plane to `side`, keeping it centered.
    pub fn pad_center(self, side: usize) -> Result<Var<'g>> {
        let (out, from) = {
            let v = self.value();
            let from = square_side(v.shape())?;
            if side < from || (side - from) % 2 != 0 {
                return Err(TapeError::Shape(format!("cannot center {from} in {side}")));
            }
            (copy_centered(&v, from, side, true), from)
        };
        Ok(self.graph.record(out, &[self], Box::new(CenterPad { from, to: side, inverse: false })))
    }

    /// Centered crop of the trailing square plane to `side`.
    pub fn crop_center(self, side: usize) -> Result<Var<'g>> {
        let (out, big) = {
            let v = self.value();
            let big = square_side(v.shape())?;
            if side > big || (big - side) % 2 != 0 {
                return Err(TapeError::Shape(format!("cannot crop {big} to {side}")));
            }
            (copy_centered(&v, side, big, false), big)
        };
        Ok(self.graph.record(out, &[self], Box::new(CenterPad { from: side, to: big, inverse: true })))
    }
}
