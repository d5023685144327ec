use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Learning rate at iteration `step` of `total`: linear from 0 to `peak`
/// over `warmup` iterations, then a half cosine from `peak` down to 0.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = (step - warmup).min(span) as f64 / span as f64;
    0.5 * peak * (1.0 + (PI * t).cos())
}

/// SGD with Nesterov momentum, no dampening, and L2 weight decay folded
/// into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates `w` in place. `decay` selects whether weight decay applies to
    /// this parameter.
    pub fn step(&mut self, name: &str, w: &mut [f64], grad: &[f64], lr: f64, decay: bool) {
        assert_eq!(
            w.len(),
            grad.len(),
            "{name}: parameter and gradient lengths differ"
        );
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; w.len()]);
        let lambda = if decay { self.weight_decay } else { 0.0 };
        let mu = self.momentum;
        for ((wi, &gi), vi) in w.iter_mut().zip(grad).zip(v.iter_mut()) {
            let d = gi + lambda * *wi;
            *vi = mu * *vi + d;
            *wi -= lr * (d + mu * *vi);
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let mut s = Sgd::new(0.0, 0.0);
        let mut w = vec![1.0, -2.0];
        s.step("w", &mut w, &[0.5, 0.25], 0.1, true);
        assert_eq!(w, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn two_nesterov_steps_closed_form() {
        let (mu, lr, g) = (0.9, 0.1, 1.0);
        let mut s = Sgd::new(mu, 0.0);
        let mut w = vec![0.0];
        s.step("w", &mut w, &[g], lr, true);
        // v1 = g, w1 = −lr(g + μg)
        assert!((w[0] + lr * (g + mu * g)).abs() < 1e-15);
        s.step("w", &mut w, &[g], lr, true);
        // v2 = μg + g, w2 = w1 − lr(g + μ(μg + g))
        let v2 = mu * g + g;
        let w2 = -lr * (g + mu * g) - lr * (g + mu * v2);
        assert!((s.velocity("w").unwrap()[0] - v2).abs() < 1e-15);
        assert!((w[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_magnitude() {
        let mut s = Sgd::new(0.9, 1e-2);
        let mut w = vec![3.0, -3.0];
        let mut prev = 3.0;
        for _ in 0..20 {
            s.step("w", &mut w, &[0.0, 0.0], 0.5, true);
            assert!(w[0].abs() < prev && w[0] > 0.0);
            assert_eq!(w[0], -w[1]);
            prev = w[0].abs();
        }
        let mut fixed = vec![3.0];
        s.step("b", &mut fixed, &[0.0], 0.5, false);
        assert_eq!(fixed[0], 3.0);
    }

    #[test]
    fn schedule_endpoints() {
        let peak = 32.0 / 256.0 * 0.05;
        let (total, warm) = (1000, 100);
        assert_eq!(lr_schedule(0, total, warm, peak), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, peak), peak);
        assert!((lr_schedule(50, total, warm, peak) - peak / 2.0).abs() < 1e-15);
        let span = (total - warm) as f64;
        let last = lr_schedule(total - 1, total, warm, peak);
        assert!(last >= 0.0 && last <= peak * (1.0 - (PI * (span - 1.0) / span).cos()) / 2.0);
        assert!(last < 1e-5 * peak);
        for s in warm..total - 1 {
            assert!(lr_schedule(s + 1, total, warm, peak) <= lr_schedule(s, total, warm, peak));
        }
        assert_eq!(lr_schedule(0, 10, 0, 1.0), 1.0);
    }
}
