use std::ops::Range;

use kiop_tape::{channel_moments, Graph, Tensor, Var};

use crate::error::{KiopError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    BatchNorm(BatchNorm),
    Relu,
    LeakyRelu(f32),
    MaxPool { k: usize, stride: usize, pad: usize },
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Spatial reduction in front of the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalPool {
    #[default]
    Avg,
    Max,
}

/// Convolutional stages, a global pool, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: String,
    pub input_channels: usize,
    pub stages: Vec<Stage>,
    pub pool: GlobalPool,
    pub head: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Normalize with running statistics.
    #[default]
    Eval,
    /// Normalize with batch statistics.
    Train,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub bn: BnMode,
    /// Bind weights as graph parameters.
    pub trainable: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self { bn: BnMode::Train, trainable: true }
    }
}

pub struct ForwardOutput<'g> {
    pub logits: Var<'g>,
    /// Pooled penultimate features, `[n, d]`.
    pub features: Var<'g>,
    /// Input to every BN layer, in network order.
    pub bn_inputs: Vec<Var<'g>>,
    pub stage_outputs: Vec<Var<'g>>,
    /// Bound weights in [`Network::params_mut`] order (empty unless trainable).
    pub params: Vec<Var<'g>>,
}

struct Ctx<'g> {
    graph: &'g Graph,
    opts: ForwardOptions,
    params: Vec<Var<'g>>,
    bn_inputs: Vec<Var<'g>>,
}

impl<'g> Ctx<'g> {
    fn bind(&mut self, t: &Tensor) -> Var<'g> {
        if self.opts.trainable {
            let v = self.graph.param(t.clone());
            self.params.push(v);
            v
        } else {
            self.graph.constant(t.clone())
        }
    }

    fn run(&mut self, layers: &[Layer], mut x: Var<'g>) -> Result<Var<'g>> {
        for layer in layers {
            x = self.layer(layer, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, layer: &Layer, x: Var<'g>) -> Result<Var<'g>> {
        Ok(match layer {
            Layer::Conv(c) => {
                let w = self.bind(&c.weight);
                let b = c.bias.as_ref().map(|b| self.bind(b));
                x.conv2d(w, b, c.stride, c.pad)?
            }
            Layer::BatchNorm(bn) => {
                self.bn_inputs.push(x);
                let gamma = self.bind(&bn.gamma);
                let beta = self.bind(&bn.beta);
                match self.opts.bn {
                    BnMode::Train => x.batch_norm_train(gamma, beta, bn.eps)?,
                    BnMode::Eval if self.opts.trainable => {
                        let inv = bn.running_var.map(|v| 1.0 / (v + bn.eps).sqrt());
                        let shift = bn.running_mean.zip_map(&inv, |m, s| -m * s)?;
                        let g = self.graph;
                        x.channel_affine(g.constant(inv), g.constant(shift))?.channel_affine(gamma, beta)?
                    }
                    BnMode::Eval => {
                        let (gm, bt) = (bn.gamma.data(), bn.beta.data());
                        let (rm, rv) = (bn.running_mean.data(), bn.running_var.data());
                        let c = gm.len();
                        let scale: Vec<f32> = (0..c).map(|i| gm[i] / (rv[i] + bn.eps).sqrt()).collect();
                        let shift: Vec<f32> = (0..c).map(|i| bt[i] - rm[i] * scale[i]).collect();
                        let g = self.graph;
                        x.channel_affine(g.constant(Tensor::new([c], scale)?), g.constant(Tensor::new([c], shift)?))?
                    }
                }
            }
            Layer::Relu => x.relu(),
            Layer::LeakyRelu(s) => x.leaky_relu(*s),
            Layer::MaxPool { k, stride, pad } => x.max_pool2d(*k, *stride, *pad)?,
            Layer::Residual { body, shortcut } => {
                let main = self.run(body, x)?;
                let skip = self.run(shortcut, x)?;
                main.add(skip)?.relu()
            }
        })
    }
}

fn visit_layers<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Layer)) {
    for layer in layers {
        f(layer);
        if let Layer::Residual { body, shortcut } = layer {
            visit_layers(body, f);
            visit_layers(shortcut, f);
        }
    }
}

fn layers_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                if let Some(b) = c.bias.as_mut() {
                    out.push(b);
                }
            }
            Layer::BatchNorm(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::Residual { body, shortcut } => {
                layers_params_mut(body, out);
                layers_params_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn layers_bns_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut BatchNorm>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual { body, shortcut } => {
                layers_bns_mut(body, out);
                layers_bns_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn named_layers<'a>(prefix: &str, layers: &'a [Layer], out: &mut Vec<(String, &'a Tensor)>) {
    for (i, layer) in layers.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Conv(c) => {
                out.push((format!("{p}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("{p}.bias"), b));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((format!("{p}.weight"), &bn.gamma));
                out.push((format!("{p}.bias"), &bn.beta));
                out.push((format!("{p}.running_mean"), &bn.running_mean));
                out.push((format!("{p}.running_var"), &bn.running_var));
            }
            Layer::Residual { body, shortcut } => {
                named_layers(&format!("{p}.body"), body, out);
                named_layers(&format!("{p}.shortcut"), shortcut, out);
            }
            _ => {}
        }
    }
}

impl Network {
    pub fn class_count(&self) -> usize {
        self.head.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weight.shape()[1]
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn stage_index(&self, name: &str) -> Result<usize> {
        self.stages.iter().position(|s| s.name == name).ok_or_else(|| KiopError::UnknownLayer(name.to_string()))
    }

    /// Full forward pass over `[n, c, h, w]`.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, opts: ForwardOptions) -> Result<ForwardOutput<'g>> {
        self.forward_from(g, x, 0, opts)
    }

    /// Runs stages `range` only; returns the last activation and the BN inputs seen.
    pub fn run_stages<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        range: Range<usize>,
        opts: ForwardOptions,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let mut ctx = Ctx { graph: g, opts, params: Vec::new(), bn_inputs: Vec::new() };
        let mut h = x;
        for stage in &self.stages[range] {
            h = ctx.run(&stage.layers, h)?;
        }
        Ok((h, ctx.bn_inputs))
    }

    /// Forward pass where `x` is the input of stage `start`.
    pub fn forward_from<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        start: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'g>> {
        if start == 0 {
            let shape = x.shape();
            if shape.len() != 4 || shape[1] != self.input_channels {
                return Err(KiopError::ShapeMismatch(format!(
                    "{} expects [n, {}, h, w], got {shape:?}",
                    self.arch, self.input_channels
                )));
            }
        }
        let mut ctx = Ctx { graph: g, opts, params: Vec::new(), bn_inputs: Vec::new() };
        let mut h = x;
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages[start..] {
            h = ctx.run(&stage.layers, h)?;
            stage_outputs.push(h);
        }
        let features = match self.pool {
            GlobalPool::Avg => h.global_avg_pool()?,
            GlobalPool::Max => h.global_max_pool()?,
        };
        let w = ctx.bind(&self.head.weight);
        let b = ctx.bind(&self.head.bias);
        let logits = features.linear(w, b)?;
        Ok(ForwardOutput { logits, features, bn_inputs: ctx.bn_inputs, stage_outputs, params: ctx.params })
    }

    /// Eval-mode logits without retaining a graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.forward(&g, g.constant(x.clone()), ForwardOptions::eval())?;
        Ok(out.logits.to_tensor())
    }

    /// Trainable weights, matching the order of [`ForwardOutput::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            layers_params_mut(&mut stage.layers, &mut out);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = Vec::new();
        for stage in &self.stages {
            visit_layers(&stage.layers, &mut |l| {
                if let Layer::BatchNorm(bn) = l {
                    out.push(bn);
                }
            });
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            layers_bns_mut(&mut stage.layers, &mut out);
        }
        out
    }

    /// Every stored tensor (weights and BN buffers) with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for stage in &self.stages {
            named_layers(&stage.name, &stage.layers, &mut out);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Number of trainable scalars (BN buffers excluded).
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for stage in &self.stages {
            visit_layers(&stage.layers, &mut |l| match l {
                Layer::Conv(c) => count += c.weight.numel() + c.bias.as_ref().map_or(0, Tensor::numel),
                Layer::BatchNorm(bn) => count += bn.gamma.numel() + bn.beta.numel(),
                _ => {}
            });
        }
        count + self.head.weight.numel() + self.head.bias.numel()
    }

    /// Bytes of all stored tensors as float32.
    pub fn stored_bytes(&self) -> usize {
        4 * self.named_tensors().iter().map(|(_, t)| t.numel()).sum::<usize>()
    }

    /// Updates running statistics from the BN inputs of a train-mode pass.
    pub fn commit_bn_stats(&mut self, bn_inputs: &[Tensor]) -> Result<()> {
        let bns = self.batch_norms_mut();
        if bns.len() != bn_inputs.len() {
            return Err(KiopError::ShapeMismatch(format!(
                "{} batch norms but {} recorded inputs",
                bns.len(),
                bn_inputs.len()
            )));
        }
        for (bn, x) in bns.into_iter().zip(bn_inputs) {
            let (mean, var) = channel_moments(x)?;
            let count = x.numel() / mean.len().max(1);
            let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
            let m = bn.momentum;
            for (r, v) in bn.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in bn.running_var.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
        Ok(())
    }
}
