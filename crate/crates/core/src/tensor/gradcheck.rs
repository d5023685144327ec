//! Central-difference gradient oracle.

use super::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every coordinate.
pub fn numerical_gradient<F>(f: F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::domain(
            "numerical_gradient",
            format!("eps must be positive, got {eps}"),
        ));
    }
    let mut probe = point.clone();
    let mut grad = vec![0.0; point.numel()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * eps);
    }
    Ok(point.with_data(grad))
}

/// Compares reverse-mode and central-difference gradients of a scalar
/// function built on a fresh [`Graph`].
///
/// `build` receives the graph and the input node and returns the scalar
/// output node. The returned error is `max|a − n| / max(max|a|, max|n|)`,
/// or 0 when both gradients vanish. Discontinuities (rounding boundaries of
/// a quantizer) are the caller's to avoid.
pub fn finite_difference_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = build(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p.clone());
        let y = build(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let numeric = numerical_gradient(eval, point, eps)?;

    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return Ok(diff);
    }
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let p = Tensor::new(vec![5], vec![0.5, -1.25, 3.0, 0.0, 2.75]).unwrap();
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &p, 1.0 / 1024.0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mean_square_at_three_four() {
        let p = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let err = finite_difference_check(|g, x| Ok(g.mean_square(x)), &p, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn matmul_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let r = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let err = finite_difference_check(
            |g, x| {
                let bn = g.constant(b.clone());
                let rn = g.constant(r.clone());
                let y = g.matmul(x, bn)?;
                let y = g.mul(y, rn)?;
                Ok(g.sum(y))
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let p = Tensor::scalar(1.0);
        assert!(numerical_gradient(|t| Ok(t.item()), &p, 0.0).is_err());
    }
}
