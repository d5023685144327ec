use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::quant::{dorefa_clamp_values, levels, qk_scalar};
use crate::{Error, Result, Tensor};

/// Minimum Gaussian sample count per study point.
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    /// Neuron count `n` (clamp study) or bit width `b` (quantization study).
    pub x: f64,
    /// Median over repeats.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn check(samples: usize, repeats: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::domain(
            "study",
            format!("samples must be ≥ {MIN_SAMPLES}, got {samples}"),
        ));
    }
    if repeats == 0 {
        return Err(Error::domain("study", "repeats must be ≥ 1"));
    }
    Ok(())
}

fn signed(clamped: &Tensor) -> Tensor {
    clamped.map(|v| 2.0 * v - 1.0)
}

/// For each `n`, `mean_square(2·clamp(W) − 1) / mean_square(W)` with
/// `W ~ N(0, 1/n)` of `samples` elements.
pub fn clamp_variance_study(
    n_values: &[usize],
    samples: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    check(samples, repeats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::domain("clamp study", "n must be positive"));
            }
            let mut ratios = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let w = Tensor::randn(&[samples], (1.0 / n as f64).sqrt(), &mut rng);
                let wh = signed(&dorefa_clamp_values(&w)?);
                ratios.push(wh.mean_square() / w.mean_square());
            }
            Ok(StudyRow {
                x: n as f64,
                ratio: median(ratios),
            })
        })
        .collect()
}

/// For each `b`, `sqrt(mean_square(Q) / mean_square(Ŵ))` where `Ŵ` is the
/// clamped weight and `Q` its `b`-bit quantization, `W ~ N(0, 1/n)`.
pub fn quant_variance_study(
    bit_values: &[u32],
    n: usize,
    samples: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    check(samples, repeats)?;
    if n == 0 {
        return Err(Error::domain("quant study", "n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Tensor> = (0..repeats)
        .map(|_| {
            let w = Tensor::randn(&[samples], (1.0 / n as f64).sqrt(), &mut rng);
            dorefa_clamp_values(&w)
        })
        .collect::<Result<_>>()?;
    bit_values
        .iter()
        .map(|&b| {
            let a = levels(b)?;
            let ratios = draws
                .iter()
                .map(|c| {
                    let wh = signed(c);
                    let q = c.map(|v| 2.0 * qk_scalar(v, a) - 1.0);
                    (q.mean_square() / wh.mean_square()).sqrt()
                })
                .collect();
            Ok(StudyRow {
                x: b as f64,
                ratio: median(ratios),
            })
        })
        .collect()
}
