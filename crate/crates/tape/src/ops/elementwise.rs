//! Pointwise unary maps and numpy-style broadcasting binary arithmetic.

use crate::graph::{Backward, BackwardCtx, Var};
use crate::tensor::{numel, Tensor};
use crate::{Result, TapeError};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Scale(f32),
    AddScalar(f32),
}

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Scale(s) => s * x,
            Unary::AddScalar(s) => x + s,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Scale(s) => s,
            Unary::AddScalar(_) => 1.0,
        }
    }
}

struct UnaryRule(Unary);

impl Backward for UnaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let data = (0..x.len()).map(|i| g[i] * self.0.derivative(x[i], y[i])).collect();
        Ok(vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), data))])
    }
}

impl<'g> Var<'g> {
    fn unary(self, op: Unary) -> Var<'g> {
        let out = self.value().map(|v| op.apply(v));
        self.graph.record(out, &[self], Box::new(UnaryRule(op)))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'g> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        self.unary(Unary::Scale(s))
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        self.unary(Unary::AddScalar(s))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise product with a constant tensor of broadcastable shape.
    pub fn mul_const(self, rhs: &Tensor) -> Result<Var<'g>> {
        let c = self.graph.constant(rhs.clone());
        self.binary(c, Binary::Mul)
    }

    fn binary(self, rhs: Var<'g>, op: Binary) -> Result<Var<'g>> {
        self.same_graph(&rhs)?;
        let out = {
            let a = self.value();
            let b = rhs.value();
            let plan = Broadcast::new(a.shape(), b.shape())?;
            let mut out = vec![0.0; numel(&plan.out)];
            let (ad, bd) = (a.data(), b.data());
            plan.for_each(|o, ia, ib| out[o] = op.apply(ad[ia], bd[ib]));
            Tensor::from_parts(plan.out.clone(), out)
        };
        Ok(self.graph.record(out, &[self, rhs], Box::new(BinaryRule(op))))
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

struct BinaryRule(Binary);

impl Backward for BinaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let plan = Broadcast::new(a.shape(), b.shape())?;
        let g = ctx.grad.data();
        let (ad, bd) = (a.data(), b.data());
        let mut ga = ctx.needs[0].then(|| vec![0.0f32; a.numel()]);
        let mut gb = ctx.needs[1].then(|| vec![0.0f32; b.numel()]);
        plan.for_each(|o, ia, ib| {
            let (da, db) = match self.0 {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (bd[ib], ad[ia]),
                Binary::Div => (1.0 / bd[ib], -ad[ia] / (bd[ib] * bd[ib])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += g[o] * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += g[o] * db;
            }
        });
        Ok(vec![
            ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
        ])
    }
}

/// Index plan for right-aligned broadcasting of two shapes.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TapeError::Shape(format!("cannot broadcast {a:?} with {b:?}")));
                }
            };
        }
        let same = a == b;
        Ok(Self { a_strides: broadcast_strides(a, &out), b_strides: broadcast_strides(b, &out), out, same })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.out);
        if self.same {
            for i in 0..total {
                f(i, i, i);
            }
            return;
        }
        if total == 0 {
            return;
        }
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let mut counter = vec![0usize; rank];
        let mut o = 0;
        loop {
            let base_a: usize = (0..rank - 1).map(|d| counter[d] * self.a_strides[d]).sum();
            let base_b: usize = (0..rank - 1).map(|d| counter[d] * self.b_strides[d]).sum();
            for j in 0..inner {
                f(o, base_a + j * sa, base_b + j * sb);
                o += 1;
            }
            // advance the odometer over all but the innermost axis
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                counter[d] += 1;
                if counter[d] < self.out[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
    }
}
