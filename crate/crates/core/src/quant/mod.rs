//! Weight and activation quantizers.
//!
//! Weights go `W → clamp → (quantize) → (rescale) → Ξ`; activations go
//! through PACT's learnable clip followed by the same uniform quantizer.
//! Every function here appends nodes to a [`Graph`] so that the
//! straight-through and detached-statistic backward rules take effect.

mod pact;
mod weight;

pub use pact::{
    alpha_grad_reduce, pact_alpha_partials, pact_clip, pact_quantize, PactMode, PactState,
    ALPHA_INIT, ALPHA_MIN,
};
pub use weight::{
    constant_rescale, dorefa_clamp, dorefa_clamp_values, effective_weight, effective_weight_values,
    quantize_weight, signed_clamped, stddev_rescale, EffectiveWeight, QuantScheme, RescaleMode,
    WeightFormat,
};

use crate::tensor::register_custom_backward;
use crate::{Error, Graph, NodeId, Result, Tensor};

/// Inputs to [`qk`] may overshoot `[0, 1]` by this much before it is an error.
pub const DOMAIN_TOL: f64 = 1e-6;

/// Largest supported bit width. `2^b − 1` and the grid stay exact in `f64`.
pub const MAX_BITS: u32 = 24;

/// Number of grid steps `a = 2^b − 1`.
pub fn levels(bits: u32) -> Result<f64> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::domain(
            "levels",
            format!("bits must be in 1..={MAX_BITS}, got {bits}"),
        ));
    }
    Ok(((1u64 << bits) - 1) as f64)
}

/// Grid index `round(a·x)` with ties away from zero.
#[inline]
pub fn grid_index(x: f64, a: f64) -> f64 {
    (a * x).round()
}

/// Scalar uniform quantizer on `[0, 1]`, no domain check.
#[inline]
pub fn qk_scalar(x: f64, a: f64) -> f64 {
    grid_index(x, a) / a
}

fn check_unit_interval(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(&bad) = t
        .data()
        .iter()
        .find(|&&v| !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v))
    {
        return Err(Error::domain(op, format!("input {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Eager `q_k` on a tensor of values in `[0, 1]`.
pub fn qk_values(x: &Tensor, bits: u32) -> Result<Tensor> {
    let a = levels(bits)?;
    check_unit_interval("qk", x)?;
    Ok(x.map(|v| qk_scalar(v.clamp(0.0, 1.0), a)))
}

/// `round(a·x)/a` with a straight-through (identity) backward.
pub fn qk(g: &mut Graph, x: NodeId, bits: u32) -> Result<NodeId> {
    levels(bits)?;
    let op = register_custom_backward(
        "qk",
        1,
        move |xs| qk_values(xs[0], bits),
        |ctx| vec![ctx.grad_output.clone()],
    )?;
    g.apply(&op, &[x])
}

/// True when every element of `t` lies on `{0, 1/a, …, 1}` (up to `tol`
/// in grid units).
pub fn on_unit_grid(t: &Tensor, bits: u32, tol: f64) -> Result<bool> {
    let a = levels(bits)?;
    Ok(t.data().iter().all(|&v| {
        let m = a * v;
        (m - m.round()).abs() <= tol && (-tol..=a + tol).contains(&m)
    }))
}

/// True when every element of `t` lies on `s·{−1, −1+2/a, …, 1}`.
pub fn on_signed_grid(t: &Tensor, bits: u32, scale: f64, tol: f64) -> Result<bool> {
    let a = levels(bits)?;
    Ok(t.data().iter().all(|&v| {
        let m = (v / scale + 1.0) * a / 2.0;
        (m - m.round()).abs() <= tol && (-tol..=a + tol).contains(&m)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qk1(x: f64, b: u32) -> f64 {
        qk_values(&Tensor::scalar(x), b).unwrap().item()
    }

    #[test]
    fn endpoints_are_fixed() {
        for b in [1, 2, 4, 8, 16] {
            assert_eq!(qk1(0.0, b), 0.0);
            assert_eq!(qk1(1.0, b), 1.0);
        }
    }

    #[test]
    fn two_bit_example() {
        assert!((qk1(0.4, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_round_up() {
        // a = 3, x = 0.5 → a·x = 1.5 → 2.
        assert_eq!(qk1(0.5, 2), 2.0 / 3.0);
        assert_eq!(qk1(0.5, 1), 1.0);
    }

    #[test]
    fn domain_is_enforced() {
        assert!(qk_values(&Tensor::scalar(1.0 + 1e-7), 4).is_ok());
        assert!(matches!(
            qk_values(&Tensor::scalar(1.01), 4),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            qk_values(&Tensor::scalar(-0.01), 4),
            Err(Error::Domain { .. })
        ));
        assert!(levels(0).is_err());
    }

    #[test]
    fn straight_through_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![0.1, 0.5, 0.93]).unwrap());
        let q = qk(&mut g, x, 2).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn grid_idempotent_monotone(x in 0.0f64..=1.0, y in 0.0f64..=1.0, bi in 0usize..4) {
            let b = [1, 2, 4, 8][bi];
            let q = qk1(x, b);
            prop_assert!(on_unit_grid(&Tensor::scalar(q), b, 1e-9).unwrap());
            prop_assert_eq!(qk1(q, b), q);
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(qk1(lo, b) <= qk1(hi, b));
        }
    }
}
