use std::fmt;
use std::str::FromStr;

use super::{levels, qk_scalar};
use crate::tensor::register_custom_backward;
use crate::{Error, Graph, NodeId, Result, Tensor};

/// Initial clipping level for every PACT layer.
pub const ALPHA_INIT: f64 = 8.0;
/// Lower bound enforced on α after each optimizer step.
pub const ALPHA_MIN: f64 = 1e-3;

/// Which α-gradient PACT uses below the clip level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PactMode {
    /// Includes the quantization error `q_k(x̃/α) − x̃/α`.
    Calibrated,
    /// Ignores it (gradient 0 below α).
    Legacy,
}

impl FromStr for PactMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cg" => Ok(PactMode::Calibrated),
            "legacy" => Ok(PactMode::Legacy),
            _ => Err(Error::Config(format!(
                "unknown pact_mode `{s}` (expected cg|legacy)"
            ))),
        }
    }
}

impl fmt::Display for PactMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PactMode::Calibrated => "cg",
            PactMode::Legacy => "legacy",
        })
    }
}

/// Trainable clip of one activation layer. `bits = None` clips without
/// quantizing.
#[derive(Clone, Debug, PartialEq)]
pub struct PactState {
    pub alpha: f64,
    pub bits: Option<u32>,
    pub mode: PactMode,
}

impl PactState {
    pub fn new(bits: Option<u32>, mode: PactMode) -> Result<Self> {
        if let Some(b) = bits {
            levels(b)?;
        }
        Ok(PactState {
            alpha: ALPHA_INIT,
            bits,
            mode,
        })
    }

    pub fn enforce_positive(&mut self) {
        if !(self.alpha >= ALPHA_MIN) {
            self.alpha = ALPHA_MIN;
        }
    }

    pub fn levels(&self) -> Option<f64> {
        self.bits.map(|b| levels(b).expect("validated"))
    }
}

fn check_alpha(op: &'static str, alpha: &Tensor) -> Result<f64> {
    if alpha.numel() != 1 {
        return Err(Error::shape(
            op,
            format!("α must be a scalar, got {:?}", alpha.shape()),
        ));
    }
    let a = alpha.item();
    if !(a > 0.0) {
        return Err(Error::domain(op, format!("α must be positive, got {a}")));
    }
    Ok(a)
}

#[inline]
fn clip(x: f64, alpha: f64) -> f64 {
    x.clamp(0.0, alpha)
}

fn forward_values(x: &Tensor, alpha: f64, a: Option<f64>) -> Tensor {
    match a {
        None => x.map(|v| clip(v, alpha)),
        Some(a) => x.map(|v| alpha * qk_scalar(clip(v, alpha) / alpha, a)),
    }
}

/// Per-element `∂q/∂α`: 1 on `x ≥ α`; below it `q_k(x̃/α) − x̃/α` when
/// calibrated and 0 in legacy mode.
pub fn pact_alpha_partials(
    x: &Tensor,
    alpha: f64,
    bits: Option<u32>,
    mode: PactMode,
) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(Error::domain(
            "pact",
            format!("α must be positive, got {alpha}"),
        ));
    }
    let a = bits.map(levels).transpose()?;
    Ok(x.map(|v| {
        if v >= alpha {
            return 1.0;
        }
        match (mode, a) {
            (PactMode::Legacy, _) | (_, None) => 0.0,
            (PactMode::Calibrated, Some(a)) => {
                let r = clip(v, alpha) / alpha;
                qk_scalar(r, a) - r
            }
        }
    }))
}

/// Shared-parameter accumulation of per-element α-gradients.
pub fn alpha_grad_reduce(partials: &Tensor) -> f64 {
    partials.sum()
}

fn register(
    name: &'static str,
    bits: Option<u32>,
    mode: PactMode,
) -> Result<std::rc::Rc<crate::tensor::CustomOp>> {
    let a = bits.map(levels).transpose()?;
    register_custom_backward(
        name,
        2,
        move |xs| {
            let alpha = check_alpha(name, xs[1])?;
            Ok(forward_values(xs[0], alpha, a))
        },
        move |ctx| {
            let (x, alpha_t) = (ctx.inputs[0], ctx.inputs[1]);
            let alpha = alpha_t.item();
            let g = ctx.grad_output.data();
            let dx = x.with_data(
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 && v < alpha { gv } else { 0.0 })
                    .collect(),
            );
            let partials = pact_alpha_partials(x, alpha, bits, mode).expect("α checked in forward");
            let weighted = partials.with_data(
                partials
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(p, gv)| p * gv)
                    .collect(),
            );
            vec![dx, alpha_t.with_data(vec![alpha_grad_reduce(&weighted)])]
        },
    )
}

/// `clamp(x, 0, α)`; gradient is the indicator of `0 < x < α` for `x` and
/// of `x ≥ α` for α.
pub fn pact_clip(g: &mut Graph, x: NodeId, alpha: NodeId) -> Result<NodeId> {
    let op = register("pact_clip", None, PactMode::Legacy)?;
    g.apply(&op, &[x, alpha])
}

/// `α·q_k(clip(x, 0, α)/α)` with a straight-through `x`-gradient and the
/// α-gradient selected by `mode`. With `bits = None` this is [`pact_clip`].
pub fn pact_quantize(
    g: &mut Graph,
    x: NodeId,
    alpha: NodeId,
    bits: Option<u32>,
    mode: PactMode,
) -> Result<NodeId> {
    let op = register("pact_quantize", bits, mode)?;
    g.apply(&op, &[x, alpha])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(xs: &[f64], alpha: f64, bits: Option<u32>, mode: PactMode) -> (Vec<f64>, Vec<f64>, f64) {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![xs.len()], xs.to_vec()).unwrap());
        let a = g.param(Tensor::scalar(alpha));
        let q = pact_quantize(&mut g, x, a, bits, mode).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        (
            g.value(q).data().to_vec(),
            g.grad(x).unwrap().data().to_vec(),
            g.grad(a).unwrap().item(),
        )
    }

    #[test]
    fn clip_branches() {
        let (q, dx, _) = run(&[-1.0, 3.0, 1.0], 2.0, None, PactMode::Legacy);
        assert_eq!(q, vec![0.0, 2.0, 1.0]);
        assert_eq!(dx, vec![0.0, 0.0, 1.0]);
        let eps = 1e-4;
        let (q, _, _) = run(&[2.0 - eps, 2.0 + eps], 2.0, None, PactMode::Legacy);
        assert!((q[0] - q[1]).abs() <= 2.0 * eps);
    }

    #[test]
    fn saturated_input() {
        for mode in [PactMode::Calibrated, PactMode::Legacy] {
            for b in [1, 2, 4, 8] {
                let (q, _, da) = run(&[3.0], 2.0, Some(b), mode);
                assert_eq!(q, vec![2.0]);
                assert_eq!(da, 1.0);
            }
        }
    }

    #[test]
    fn two_bit_interior_example() {
        let (q, dx, da) = run(&[0.8], 2.0, Some(2), PactMode::Calibrated);
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dx, vec![1.0]);
        assert!((da - (1.0 / 3.0 - 0.4)).abs() < 1e-15);
        assert!((da + 0.066_667).abs() < 1e-6);
        let (_, _, da) = run(&[0.8], 2.0, Some(2), PactMode::Legacy);
        assert_eq!(da, 0.0);
    }

    #[test]
    fn zero_input() {
        let (q, _, da) = run(&[0.0], 1.7, Some(3), PactMode::Calibrated);
        assert_eq!(q, vec![0.0]);
        assert_eq!(da, 0.0);
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let a = g.param(Tensor::scalar(0.0));
        assert!(matches!(
            pact_quantize(&mut g, x, a, Some(2), PactMode::Calibrated),
            Err(Error::Domain { .. })
        ));
        assert!(pact_alpha_partials(&Tensor::ones(&[1]), -1.0, None, PactMode::Legacy).is_err());
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(alpha_grad_reduce(&Tensor::zeros(&[5])), 0.0);
        let mut t = Tensor::zeros(&[5]);
        t.data_mut()[2] = 1.0;
        assert_eq!(alpha_grad_reduce(&t), 1.0);
    }

    #[test]
    fn alpha_is_kept_positive() {
        let mut s = PactState::new(Some(4), PactMode::Calibrated).unwrap();
        assert_eq!(s.alpha, ALPHA_INIT);
        s.alpha = -0.5;
        s.enforce_positive();
        assert_eq!(s.alpha, ALPHA_MIN);
    }
}
