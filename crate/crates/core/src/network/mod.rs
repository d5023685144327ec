//! Layers, blocks and model presets.
//!
//! A model is a sequence of [`Stage`]s followed by a global-average-pool +
//! fully-connected head. Each forward pass appends to a fresh [`Graph`] and
//! reports the effective-weight node of every linear layer so diagnostics
//! can read `Ξ` and `∂ℒ/∂Ξ` after backward.

mod presets;

pub use presets::{build_preset, ModelConfig, Preset, RescaleScope};

use std::fmt;
use std::str::FromStr;

use crate::quant::{effective_weight, pact_quantize, PactState, QuantScheme, WeightFormat};
use crate::tensor::BatchStats;
use crate::{Error, Graph, NodeId, Result, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Alpha,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Alpha => "alpha",
            ParamRole::BnGamma => "bn_gamma",
            ParamRole::BnBeta => "bn_beta",
            ParamRole::BnMean => "bn_mean",
            ParamRole::BnVar => "bn_var",
        }
    }

    /// Updated by the optimizer (as opposed to running statistics).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }
}

impl FromStr for ParamRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => ParamRole::Weight,
            "alpha" => ParamRole::Alpha,
            "bn_gamma" => ParamRole::BnGamma,
            "bn_beta" => ParamRole::BnBeta,
            "bn_mean" => ParamRole::BnMean,
            "bn_var" => ParamRole::BnVar,
            _ => return Err(Error::Checkpoint(format!("unknown tensor role `{s}`"))),
        })
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    Conv { k: usize, stride: usize, pad: usize },
    Fc,
}

/// Bias-free convolution or fully-connected layer.
///
/// Conv weights are `out×in×k×k`; FC weights are `in×out` so the layer is
/// `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub kind: LinearKind,
    pub weight: Tensor,
    pub scheme: QuantScheme,
}

impl Linear {
    pub fn conv(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_out = out_ch * k * k;
        Linear {
            name: name.to_string(),
            kind: LinearKind::Conv { k, stride, pad },
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            scheme: QuantScheme {
                format: WeightFormat::Float,
                rescale: crate::quant::RescaleMode::None,
                fan_out,
            },
        }
    }

    pub fn fc(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            name: name.to_string(),
            kind: LinearKind::Fc,
            weight: Tensor::zeros(&[inputs, outputs]),
            scheme: QuantScheme {
                format: WeightFormat::Float,
                rescale: crate::quant::RescaleMode::None,
                fan_out: outputs,
            },
        }
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            LinearKind::Conv { k, .. } => k,
            LinearKind::Fc => 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LinearKind::Conv { .. } => self.weight.shape()[1],
            LinearKind::Fc => self.weight.shape()[0],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LinearKind::Conv { .. } => self.weight.shape()[0],
            LinearKind::Fc => self.weight.shape()[1],
        }
    }

    /// `n = c_in · k²`
    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    /// `n̂ = c_out · k²`
    pub fn fan_out(&self) -> usize {
        self.out_channels() * self.kernel() * self.kernel()
    }

    /// Weight-variance `1/n̂` Gaussian init, held at f32 precision.
    pub fn init_kaiming(&mut self, rng: &mut impl rand::Rng) {
        let std = (1.0 / self.fan_out() as f64).sqrt();
        self.weight = Tensor::randn(self.weight.shape(), std, rng).map(|v| v as f32 as f64);
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn apply(&self, g: &mut Graph, x: NodeId, w: NodeId) -> Result<NodeId> {
        match self.kind {
            LinearKind::Conv { stride, pad, .. } => g.conv2d(x, w, stride, pad),
            LinearKind::Fc => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Eval-mode per-channel `(scale, shift)` from running statistics.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma.data()[c] / (self.running_var.data()[c] + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[c] - s * self.running_mean.data()[c]);
        }
        (scale, shift)
    }

    /// Moves running statistics toward a batch's; variance uses the
    /// unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let bessel = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - m) * *rm + m * stats.mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - m) * *rv + m * stats.var[c] * bessel;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Pact(PactState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    None,
    Avg(usize),
    Max(usize),
}

/// Pre-activation residual unit: `x + conv2(act2(bn2(conv1(act1(bn1(x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnit {
    pub name: String,
    pub bn1: BatchNorm,
    pub act1: Activation,
    pub conv1: Linear,
    pub bn2: BatchNorm,
    pub act2: Activation,
    pub conv2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
    pub pool: Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    /// linear → BN? → activation → pool
    Block(Block),
    Residual(ResidualUnit),
    /// Standalone BN + activation.
    Norm {
        name: String,
        bn: BatchNorm,
        act: Activation,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub preset: Preset,
    pub width: usize,
    /// `C×H×W` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub stages: Vec<Stage>,
    /// Fed by a global average pool.
    pub head: Linear,
}

/// Per-linear-layer facts recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct LinearTrace {
    pub name: String,
    /// Effective-weight node `Ξ`.
    pub xi: NodeId,
    pub n_in: usize,
    pub n_hat: usize,
    /// Average-pool window after this layer (1 for none or max pooling).
    pub k_pool: usize,
    pub follows_bn: bool,
    /// A residual add separates this layer from the next linear layer.
    pub skip_adjacent: bool,
    pub scheme: QuantScheme,
    pub rescale_factor: f64,
    /// PACT clip level of the activation right after this layer, if any.
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ParamNode {
    pub name: String,
    pub role: ParamRole,
    pub node: NodeId,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Pooled features entering the head.
    pub features: NodeId,
    pub params: Vec<ParamNode>,
    pub linears: Vec<LinearTrace>,
    /// Batch statistics per BN name (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

struct Ctx<'g> {
    g: &'g mut Graph,
    mode: Mode,
    params: Vec<ParamNode>,
    linears: Vec<LinearTrace>,
    bn_stats: Vec<(String, BatchStats)>,
    /// Index into `linears` of the most recent linear layer.
    last_linear: Option<usize>,
    /// True while nothing but that linear layer has run since.
    just_linear: bool,
}

impl Ctx<'_> {
    fn param(&mut self, name: String, role: ParamRole, value: &Tensor) -> NodeId {
        let node = self.g.param(value.clone());
        self.params.push(ParamNode { name, role, node });
        node
    }

    fn linear(&mut self, layer: &Linear, x: NodeId) -> Result<NodeId> {
        let w = self.param(layer.weight_name(), ParamRole::Weight, &layer.weight);
        let e =
            effective_weight(self.g, w, &layer.scheme).map_err(|err| annotate(err, &layer.name))?;
        let y = layer.apply(self.g, x, e.node)?;
        self.linears.push(LinearTrace {
            name: layer.name.clone(),
            xi: e.node,
            n_in: layer.fan_in(),
            n_hat: layer.fan_out(),
            k_pool: 1,
            follows_bn: false,
            skip_adjacent: false,
            scheme: layer.scheme,
            rescale_factor: e.factor,
            alpha: None,
        });
        self.last_linear = Some(self.linears.len() - 1);
        self.just_linear = true;
        Ok(y)
    }

    fn batch_norm(&mut self, bn: &BatchNorm, x: NodeId) -> Result<NodeId> {
        if self.just_linear {
            if let Some(i) = self.last_linear {
                self.linears[i].follows_bn = true;
            }
        }
        self.just_linear = false;
        let gamma = self.param(format!("{}.gamma", bn.name), ParamRole::BnGamma, &bn.gamma);
        let beta = self.param(format!("{}.beta", bn.name), ParamRole::BnBeta, &bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, bn.eps)?;
                self.bn_stats.push((bn.name.clone(), stats));
                Ok(y)
            }
            Mode::Eval => {
                // y = γ·(x − μ)/σ + β with frozen μ, σ; γ and β stay
                // differentiable.
                let c = bn.channels();
                let (inv, shift) = {
                    let mut inv = Vec::with_capacity(c);
                    let mut shift = Vec::with_capacity(c);
                    for i in 0..c {
                        let s = 1.0 / (bn.running_var.data()[i] + bn.eps).sqrt();
                        inv.push(s);
                        shift.push(-s * bn.running_mean.data()[i]);
                    }
                    (inv, shift)
                };
                let inv = self.g.constant(Tensor::new(vec![c], inv)?);
                let shift = self.g.constant(Tensor::new(vec![c], shift)?);
                let xhat = self.g.channel_affine(x, inv, shift)?;
                self.g.channel_affine(xhat, gamma, beta)
            }
        }
    }

    fn activation(&mut self, act: &Activation, name: &str, x: NodeId) -> Result<NodeId> {
        self.just_linear = false;
        match act {
            Activation::Relu => Ok(self.g.relu(x)),
            Activation::Pact(state) => {
                let alpha = self.param(
                    format!("{name}.alpha"),
                    ParamRole::Alpha,
                    &Tensor::scalar(state.alpha),
                );
                if let Some(i) = self.last_linear {
                    self.linears[i].alpha.get_or_insert(state.alpha);
                }
                pact_quantize(self.g, x, alpha, state.bits, state.mode)
            }
        }
    }

    fn pool(&mut self, pool: Pool, x: NodeId) -> Result<NodeId> {
        self.just_linear = false;
        match pool {
            Pool::None => Ok(x),
            Pool::Avg(k) => {
                if let Some(i) = self.last_linear {
                    self.linears[i].k_pool = k;
                }
                self.g.avg_pool(x, k)
            }
            Pool::Max(k) => self.g.max_pool(x, k),
        }
    }
}

fn annotate(err: Error, layer: &str) -> Error {
    match err {
        Error::DegenerateLayer(msg) => Error::DegenerateLayer(format!("{layer}: {msg}")),
        other => other,
    }
}

impl Model {
    /// Linear layers in forward order, head last.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Block(b) => out.push(&b.linear),
                Stage::Residual(r) => {
                    out.push(&r.conv1);
                    out.push(&r.conv2);
                }
                Stage::Norm { .. } => {}
            }
        }
        out.push(&self.head);
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Block(b) => out.push(&mut b.linear),
                Stage::Residual(r) => {
                    out.push(&mut r.conv1);
                    out.push(&mut r.conv2);
                }
                Stage::Norm { .. } => {}
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Block(b) => out.extend(b.bn.as_mut()),
                Stage::Residual(r) => {
                    out.push(&mut r.bn1);
                    out.push(&mut r.bn2);
                }
                Stage::Norm { bn, .. } => out.push(bn),
            }
        }
        out
    }

    /// `(activation name, activation)` in forward order.
    pub fn activations_mut(&mut self) -> Vec<(String, &mut Activation)> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            match s {
                Stage::Block(b) => out.push((format!("{}.act", b.name), &mut b.act)),
                Stage::Residual(r) => {
                    out.push((format!("{}.act1", r.name), &mut r.act1));
                    out.push((format!("{}.act2", r.name), &mut r.act2));
                }
                Stage::Norm { name, act, .. } => out.push((format!("{name}.act"), act)),
            }
        }
        out
    }

    /// `(activation name, state)` for every PACT activation.
    pub fn pact_states_mut(&mut self) -> Vec<(String, &mut PactState)> {
        self.activations_mut()
            .into_iter()
            .filter_map(|(name, a)| match a {
                Activation::Pact(p) => Some((name, p)),
                Activation::Relu => None,
            })
            .collect()
    }

    /// Every stored tensor, in a fixed order, with its name and role.
    pub fn tensors(&self) -> Vec<(String, ParamRole, Tensor)> {
        let mut out = Vec::new();
        let lin = |l: &Linear, out: &mut Vec<_>| {
            out.push((l.weight_name(), ParamRole::Weight, l.weight.clone()));
        };
        let bn = |b: &BatchNorm, out: &mut Vec<_>| {
            out.push((
                format!("{}.gamma", b.name),
                ParamRole::BnGamma,
                b.gamma.clone(),
            ));
            out.push((
                format!("{}.beta", b.name),
                ParamRole::BnBeta,
                b.beta.clone(),
            ));
            out.push((
                format!("{}.running_mean", b.name),
                ParamRole::BnMean,
                b.running_mean.clone(),
            ));
            out.push((
                format!("{}.running_var", b.name),
                ParamRole::BnVar,
                b.running_var.clone(),
            ));
        };
        let act = |name: String, a: &Activation, out: &mut Vec<_>| {
            if let Activation::Pact(s) = a {
                out.push((
                    format!("{name}.alpha"),
                    ParamRole::Alpha,
                    Tensor::scalar(s.alpha),
                ));
            }
        };
        for s in &self.stages {
            match s {
                Stage::Block(b) => {
                    lin(&b.linear, &mut out);
                    if let Some(n) = &b.bn {
                        bn(n, &mut out);
                    }
                    act(format!("{}.act", b.name), &b.act, &mut out);
                }
                Stage::Residual(r) => {
                    bn(&r.bn1, &mut out);
                    act(format!("{}.act1", r.name), &r.act1, &mut out);
                    lin(&r.conv1, &mut out);
                    bn(&r.bn2, &mut out);
                    act(format!("{}.act2", r.name), &r.act2, &mut out);
                    lin(&r.conv2, &mut out);
                }
                Stage::Norm {
                    name,
                    bn: b,
                    act: a,
                } => {
                    bn(b, &mut out);
                    act(format!("{name}.act"), a, &mut out);
                }
            }
        }
        lin(&self.head, &mut out);
        out
    }

    /// Overwrites the tensor called `name`. Shapes must agree.
    pub fn set_tensor(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let check = |dst: &Tensor| -> Result<()> {
            if dst.shape() != value.shape() {
                return Err(Error::DimensionMismatch {
                    op: "set_tensor",
                    lhs: dst.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            Ok(())
        };
        for l in self.linears_mut() {
            if l.weight_name() == name {
                check(&l.weight)?;
                l.weight = value.clone();
                return Ok(());
            }
        }
        for b in self.batch_norms_mut() {
            let slot = match name.strip_prefix(b.name.as_str()) {
                Some(".gamma") => &mut b.gamma,
                Some(".beta") => &mut b.beta,
                Some(".running_mean") => &mut b.running_mean,
                Some(".running_var") => &mut b.running_var,
                _ => continue,
            };
            check(slot)?;
            *slot = value.clone();
            return Ok(());
        }
        for (act, s) in self.pact_states_mut() {
            if name == format!("{act}.alpha") {
                if value.numel() != 1 {
                    return Err(Error::shape(
                        "set_tensor",
                        format!("α must be scalar, got {:?}", value.shape()),
                    ));
                }
                s.alpha = value.item();
                return Ok(());
            }
        }
        Err(Error::Model(format!("no tensor named `{name}`")))
    }

    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) {
        for b in self.batch_norms_mut() {
            for (name, s) in stats {
                if *name == b.name {
                    b.update_running(s);
                }
            }
        }
    }

    pub fn has_pact(&self) -> bool {
        self.tensors()
            .iter()
            .any(|(_, r, _)| *r == ParamRole::Alpha)
    }

    /// No-BN linear layers whose transformed weights are not rescaled.
    /// These break commensurate gradient scales across layers.
    pub fn unrescaled_no_bn_layers(&self) -> Vec<String> {
        let follows = self.follows_bn();
        self.linears()
            .into_iter()
            .zip(follows)
            .filter(|(l, f)| {
                !f && l.scheme.format.is_transformed()
                    && l.scheme.rescale == crate::quant::RescaleMode::None
            })
            .map(|(l, _)| l.name.clone())
            .collect()
    }

    /// For each linear layer (forward order) whether BN directly follows.
    pub fn follows_bn(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Block(b) => out.push(b.bn.is_some()),
                Stage::Residual(_) => {
                    out.push(true);
                    out.push(false);
                }
                Stage::Norm { .. } => {}
            }
        }
        out.push(false);
        out
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> Result<ForwardPass> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input[..] {
            return Err(Error::DimensionMismatch {
                op: "model input",
                lhs: self.input.to_vec(),
                rhs: shape,
            });
        }
        let mut ctx = Ctx {
            g,
            mode,
            params: Vec::new(),
            linears: Vec::new(),
            bn_stats: Vec::new(),
            last_linear: None,
            just_linear: false,
        };
        let mut h = x;
        for stage in &self.stages {
            h = forward_stage(&mut ctx, stage, h)?;
        }
        let [_, _, hh, ww] = ctx.g.value(h).dims4("head")?;
        if hh != ww {
            return Err(Error::shape(
                "head",
                format!("non-square feature map {hh}×{ww}"),
            ));
        }
        if let Some(i) = ctx.last_linear {
            ctx.linears[i].k_pool = hh;
        }
        ctx.just_linear = false;
        let pooled = ctx.g.global_avg_pool(h)?;
        let logits = ctx.linear(&self.head, pooled)?;
        Ok(ForwardPass {
            logits,
            features: pooled,
            params: ctx.params,
            linears: ctx.linears,
            bn_stats: ctx.bn_stats,
        })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fp = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(fp.logits).clone())
    }
}

fn forward_stage(ctx: &mut Ctx<'_>, stage: &Stage, x: NodeId) -> Result<NodeId> {
    match stage {
        Stage::Block(b) => {
            let mut h = ctx.linear(&b.linear, x)?;
            if let Some(bn) = &b.bn {
                h = ctx.batch_norm(bn, h)?;
            }
            h = ctx.activation(&b.act, &format!("{}.act", b.name), h)?;
            ctx.pool(b.pool, h)
        }
        Stage::Residual(r) => {
            let mut h = ctx.batch_norm(&r.bn1, x)?;
            h = ctx.activation(&r.act1, &format!("{}.act1", r.name), h)?;
            h = ctx.linear(&r.conv1, h)?;
            h = ctx.batch_norm(&r.bn2, h)?;
            h = ctx.activation(&r.act2, &format!("{}.act2", r.name), h)?;
            h = ctx.linear(&r.conv2, h)?;
            if let Some(i) = ctx.last_linear {
                ctx.linears[i].skip_adjacent = true;
            }
            ctx.just_linear = false;
            ctx.g.add(x, h)
        }
        Stage::Norm { name, bn, act } => {
            let h = ctx.batch_norm(bn, x)?;
            ctx.activation(act, &format!("{name}.act"), h)
        }
    }
}

/// One block in isolation, for tests and tooling.
pub fn forward_block(g: &mut Graph, block: &Block, x: NodeId, mode: Mode) -> Result<NodeId> {
    let mut ctx = Ctx {
        g,
        mode,
        params: Vec::new(),
        linears: Vec::new(),
        bn_stats: Vec::new(),
        last_linear: None,
        just_linear: false,
    };
    forward_stage(&mut ctx, &Stage::Block(block.clone()), x)
}

#[cfg(test)]
mod tests;
