use std::fmt;
use std::str::FromStr;

use super::{levels, qk};
use crate::{Error, Graph, NodeId, Result, Tensor};

/// How the latent weight is turned into the pre-rescale tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightFormat {
    /// Latent weights used as-is.
    Float,
    /// Full-precision clamped weights `2·clamp(W) − 1`.
    Clamped,
    /// `2·q_k(clamp(W)) − 1` on a `b`-bit grid.
    Quantized(u32),
}

impl WeightFormat {
    pub fn bits(self) -> Option<u32> {
        match self {
            WeightFormat::Quantized(b) => Some(b),
            _ => None,
        }
    }

    /// Whether the latent weight is reshaped at all (clamped or quantized).
    pub fn is_transformed(self) -> bool {
        !matches!(self, WeightFormat::Float)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescaleMode {
    None,
    Constant,
    Stddev,
}

impl FromStr for RescaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RescaleMode::None),
            "constant" => Ok(RescaleMode::Constant),
            "stddev" => Ok(RescaleMode::Stddev),
            _ => Err(Error::Config(format!("unknown rescale mode `{s}`"))),
        }
    }
}

impl fmt::Display for RescaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RescaleMode::None => "none",
            RescaleMode::Constant => "constant",
            RescaleMode::Stddev => "stddev",
        })
    }
}

/// Per-layer recipe for the effective weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantScheme {
    pub format: WeightFormat,
    pub rescale: RescaleMode,
    /// Fan-out `n̂ = c_out · k²`, used by constant rescaling.
    pub fan_out: usize,
}

impl QuantScheme {
    pub fn new(format: WeightFormat, rescale: RescaleMode, fan_out: usize) -> Result<Self> {
        if let WeightFormat::Quantized(b) = format {
            levels(b)?;
        }
        if rescale == RescaleMode::Constant && fan_out == 0 {
            return Err(Error::domain(
                "quant scheme",
                "constant rescale needs fan_out ≥ 1",
            ));
        }
        Ok(QuantScheme {
            format,
            rescale,
            fan_out,
        })
    }

    pub fn levels(&self) -> Option<f64> {
        self.format.bits().map(|b| levels(b).expect("validated"))
    }

    /// Short tag stored in checkpoint manifests, e.g. `q4+constant`.
    pub fn tag(&self) -> String {
        let base = match self.format {
            WeightFormat::Float => "float".to_string(),
            WeightFormat::Clamped => "clamp".to_string(),
            WeightFormat::Quantized(b) => format!("q{b}"),
        };
        format!("{base}+{}", self.rescale)
    }

    pub fn parse_tag(tag: &str, fan_out: usize) -> Result<Self> {
        let (base, rescale) = tag
            .split_once('+')
            .ok_or_else(|| Error::Checkpoint(format!("bad scheme tag `{tag}`")))?;
        let format = match base {
            "float" => WeightFormat::Float,
            "clamp" => WeightFormat::Clamped,
            q if q.starts_with('q') => WeightFormat::Quantized(
                q[1..]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad scheme tag `{tag}`")))?,
            ),
            _ => return Err(Error::Checkpoint(format!("bad scheme tag `{tag}`"))),
        };
        let rescale = rescale
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad scheme tag `{tag}`")))?;
        QuantScheme::new(format, rescale, fan_out)
    }
}

/// `½(tanh(W)/max|tanh(W)| + 1)`. The per-layer max is a constant in
/// backward; only the elementwise tanh is differentiated.
pub fn dorefa_clamp(g: &mut Graph, w: NodeId) -> Result<NodeId> {
    let t = g.tanh(w);
    let m = g.value(t).max_abs();
    if m == 0.0 {
        return Err(Error::DegenerateLayer(
            "clamp of an all-zero weight tensor".into(),
        ));
    }
    Ok(g.affine(t, 0.5 / m, 0.5))
}

pub fn dorefa_clamp_values(w: &Tensor) -> Result<Tensor> {
    let t = w.map(f64::tanh);
    let m = t.max_abs();
    if m == 0.0 {
        return Err(Error::DegenerateLayer(
            "clamp of an all-zero weight tensor".into(),
        ));
    }
    Ok(t.map(|v| 0.5 * v / m + 0.5))
}

/// `2x − 1`.
pub fn signed_clamped(g: &mut Graph, x: NodeId) -> NodeId {
    g.affine(x, 2.0, -1.0)
}

/// `2·q_k(W̃) − 1`; backward is twice the straight-through gradient.
pub fn quantize_weight(g: &mut Graph, clamped: NodeId, bits: u32) -> Result<NodeId> {
    let q = qk(g, clamped, bits)?;
    Ok(signed_clamped(g, q))
}

fn degenerate_ms(what: &str) -> Error {
    Error::DegenerateLayer(format!("{what} has zero mean square"))
}

/// `X / sqrt(n̂·mean_square(X))` with the divisor detached. Returns the node
/// and the multiplier that was applied.
pub fn constant_rescale(g: &mut Graph, x: NodeId, fan_out: usize) -> Result<(NodeId, f64)> {
    if fan_out == 0 {
        return Err(Error::domain("constant_rescale", "fan_out must be ≥ 1"));
    }
    let ms = g.value(x).mean_square();
    if ms == 0.0 {
        return Err(degenerate_ms("rescale input"));
    }
    let factor = 1.0 / (fan_out as f64 * ms).sqrt();
    Ok((g.scale(x, factor), factor))
}

/// `sqrt(mean_square(W_orig)/mean_square(Ŵ))·Ŵ` with the factor detached.
pub fn stddev_rescale(g: &mut Graph, x: NodeId, original: &Tensor) -> Result<(NodeId, f64)> {
    let ms_x = g.value(x).mean_square();
    let ms_o = original.mean_square();
    if ms_x == 0.0 {
        return Err(degenerate_ms("rescale input"));
    }
    if ms_o == 0.0 {
        return Err(degenerate_ms("original weight"));
    }
    let factor = (ms_o / ms_x).sqrt();
    Ok((g.scale(x, factor), factor))
}

#[derive(Clone, Copy, Debug)]
pub struct EffectiveWeight {
    pub node: NodeId,
    /// Positive multiplier applied by the rescale step (1 without rescale).
    pub factor: f64,
}

/// Builds `Ξ` from the latent weight node according to `scheme`.
pub fn effective_weight(g: &mut Graph, w: NodeId, scheme: &QuantScheme) -> Result<EffectiveWeight> {
    let pre = match scheme.format {
        WeightFormat::Float => w,
        WeightFormat::Clamped => {
            let c = dorefa_clamp(g, w)?;
            signed_clamped(g, c)
        }
        WeightFormat::Quantized(b) => {
            let c = dorefa_clamp(g, w)?;
            quantize_weight(g, c, b)?
        }
    };
    let (node, factor) = match scheme.rescale {
        RescaleMode::None => (pre, 1.0),
        RescaleMode::Constant => constant_rescale(g, pre, scheme.fan_out)?,
        RescaleMode::Stddev => {
            let orig = g.value(w).clone();
            stddev_rescale(g, pre, &orig)?
        }
    };
    Ok(EffectiveWeight { node, factor })
}

/// Eager variant of [`effective_weight`]: `(Ξ, factor)`.
pub fn effective_weight_values(w: &Tensor, scheme: &QuantScheme) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let wn = g.constant(w.clone());
    let e = effective_weight(&mut g, wn, scheme)?;
    Ok((g.value(e.node).clone(), e.factor))
}
