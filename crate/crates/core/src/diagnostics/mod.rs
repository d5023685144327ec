//! Efficient-training metrics and rule checks.
//!
//! `κ0` watches the logit scale of the head, `κ1` (layers followed by BN)
//! and `κ2` (layers without BN) measure how gradient variance propagates
//! between consecutive linear layers. All variances are uncentered mean
//! squares.

mod studies;

pub use studies::{clamp_variance_study, quant_variance_study, StudyRow};

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::network::{LinearTrace, Model};
use crate::quant::RescaleMode;
use crate::{Graph, Result};

/// ETR I threshold below which the head is considered safe.
pub const KAPPA0_PASS: f64 = 0.1;
/// ETR I threshold above which logits saturate.
pub const KAPPA0_FAIL: f64 = 1.0;
/// Accepted range of `VAR[Ξ]·n̂` for no-BN layers without rescale.
pub const ETR2_RANGE: (f64, f64) = (0.1, 10.0);

pub const CSV_HEADER: &str =
    "step,layer,n_in,n_hat,k_pool,var_weight,var_grad,kappa0,kappa1,kappa2,alpha,lr";

/// Statistics of one linear layer at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub n_in: usize,
    pub n_hat: usize,
    pub k_pool: usize,
    pub var_weight: f64,
    pub var_grad: f64,
}

/// `n_L · VAR[Ξ_L] / k²` where `k` is the pool window before the head.
pub fn kappa0(var_weight: f64, n_in: usize, k_pool: usize) -> f64 {
    n_in as f64 * var_weight / (k_pool * k_pool) as f64
}

/// `k_l² · (n_l·VAR[Ξ_l]) / (n̂_{l+1}·VAR[Ξ_{l+1}]) · VAR[g_l] / VAR[g_{l+1}]`.
/// NaN when either gradient variance vanishes.
pub fn kappa1(l: &LayerStats, next: &LayerStats) -> f64 {
    if !(l.var_grad > 0.0 && next.var_grad > 0.0) {
        return f64::NAN;
    }
    let k2 = (l.k_pool * l.k_pool) as f64;
    k2 * (l.n_in as f64 * l.var_weight) / (next.n_hat as f64 * next.var_weight) * l.var_grad
        / next.var_grad
}

/// `k_l⁴ · VAR[g_l] / (n̂_{l+1}·VAR[Ξ_{l+1}]·VAR[g_{l+1}])`. NaN when either
/// gradient variance vanishes.
pub fn kappa2(l: &LayerStats, next: &LayerStats) -> f64 {
    if !(l.var_grad > 0.0 && next.var_grad > 0.0) {
        return f64::NAN;
    }
    let k4 = ((l.k_pool * l.k_pool) as f64).powi(2);
    k4 * l.var_grad / (next.n_hat as f64 * next.var_weight * next.var_grad)
}

/// One row of the diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub layer: usize,
    pub n_in: usize,
    pub n_hat: usize,
    pub k_pool: usize,
    pub var_weight: f64,
    pub var_grad: f64,
    /// Head only.
    pub kappa0: Option<f64>,
    /// Pair `(layer, layer+1)`; absent for the head and across residual adds.
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub alpha: Option<f64>,
    pub lr: f64,
    #[serde(skip)]
    pub name: String,
    #[serde(skip)]
    pub follows_bn: bool,
    #[serde(skip)]
    pub skip_adjacent: bool,
    #[serde(skip)]
    pub rescaled: bool,
}

impl DiagnosticsRecord {
    pub fn stats(&self) -> LayerStats {
        LayerStats {
            n_in: self.n_in,
            n_hat: self.n_hat,
            k_pool: self.k_pool,
            var_weight: self.var_weight,
            var_grad: self.var_grad,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.layer,
            self.n_in,
            self.n_hat,
            self.k_pool,
            self.var_weight,
            self.var_grad,
            opt(self.kappa0),
            opt(self.kappa1),
            opt(self.kappa2),
            opt(self.alpha),
            self.lr
        )
    }
}

/// Reads `Ξ` and `∂ℒ/∂Ξ` of every traced layer from a graph after
/// backward. Gradients are the raw per-step values, before weight decay or
/// momentum.
pub fn collect(step: usize, traces: &[LinearTrace], g: &Graph, lr: f64) -> Vec<DiagnosticsRecord> {
    let mut out: Vec<DiagnosticsRecord> = traces
        .iter()
        .enumerate()
        .map(|(layer, t)| DiagnosticsRecord {
            step,
            layer,
            n_in: t.n_in,
            n_hat: t.n_hat,
            k_pool: t.k_pool,
            var_weight: g.value(t.xi).mean_square(),
            var_grad: g.grad(t.xi).map(|gr| gr.mean_square()).unwrap_or(0.0),
            kappa0: None,
            kappa1: None,
            kappa2: None,
            alpha: t.alpha,
            lr,
            name: t.name.clone(),
            follows_bn: t.follows_bn,
            skip_adjacent: t.skip_adjacent,
            rescaled: t.scheme.rescale != RescaleMode::None,
        })
        .collect();
    annotate(&mut out);
    out
}

/// Fills the κ fields of one step's records (ordered by layer).
pub fn annotate(records: &mut [DiagnosticsRecord]) {
    let n = records.len();
    for i in 0..n.saturating_sub(1) {
        if records[i].skip_adjacent {
            continue;
        }
        let (a, b) = (records[i].stats(), records[i + 1].stats());
        records[i].kappa1 = Some(kappa1(&a, &b));
        records[i].kappa2 = Some(kappa2(&a, &b));
    }
    if n >= 2 {
        let k = records[n - 2].k_pool;
        let last = &mut records[n - 1];
        last.kappa0 = Some(kappa0(last.var_weight, last.n_in, k));
    }
}

/// Steps whose diagnostics are logged: every `every` global steps plus the
/// first and last step of each epoch.
pub fn should_log(
    global_step: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
    every: usize,
) -> bool {
    step_in_epoch == 0
        || step_in_epoch + 1 == steps_per_epoch
        || (every > 0 && global_step % every == 0)
}

pub fn write_csv(w: &mut impl Write, records: &[DiagnosticsRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// JSON array with the CSV's field names; absent values are `null` and
/// non-finite values are written as `null` as well.
pub fn to_json(records: &[DiagnosticsRecord]) -> serde_json::Value {
    serde_json::to_value(records).expect("records serialize")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Warn => "WARN",
            Verdict::Fail => "FAIL",
        })
    }
}

pub fn etr1_verdict(kappa0: f64) -> Verdict {
    if kappa0 < KAPPA0_PASS {
        Verdict::Pass
    } else if kappa0 < KAPPA0_FAIL {
        Verdict::Warn
    } else {
        Verdict::Fail
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EtrReport {
    pub kappa0: f64,
    pub etr1: Verdict,
    pub etr2: Verdict,
    /// No-BN layers that are neither rescaled nor in the accepted range.
    pub etr2_offenders: Vec<String>,
}

impl EtrReport {
    pub fn all_pass(&self) -> bool {
        self.etr1 == Verdict::Pass && self.etr2 == Verdict::Pass
    }
}

/// Checks both rules against the latest record of each layer.
pub fn etr_check(model: &Model, records: &[DiagnosticsRecord]) -> Result<EtrReport> {
    let linears = model.linears();
    let follows = model.follows_bn();
    let mut latest: Vec<Option<&DiagnosticsRecord>> = vec![None; linears.len()];
    for r in records {
        if let Some(slot) = latest.get_mut(r.layer) {
            if slot.map_or(true, |p| p.step <= r.step) {
                *slot = Some(r);
            }
        }
    }
    if let Some(i) = latest.iter().position(Option::is_none) {
        return Err(crate::Error::Model(format!(
            "no diagnostics record for layer {i} ({})",
            linears[i].name
        )));
    }
    let latest: Vec<&DiagnosticsRecord> = latest.into_iter().flatten().collect();
    let head = latest[latest.len() - 1];
    let k = latest[latest.len() - 2].k_pool;
    let k0 = head
        .kappa0
        .unwrap_or_else(|| kappa0(head.var_weight, head.n_in, k));
    let mut offenders = Vec::new();
    for (i, l) in linears.iter().enumerate() {
        if follows[i] || l.scheme.rescale != RescaleMode::None {
            continue;
        }
        let v = latest[i].var_weight * l.fan_out() as f64;
        if !(ETR2_RANGE.0..=ETR2_RANGE.1).contains(&v) {
            offenders.push(l.name.clone());
        }
    }
    Ok(EtrReport {
        kappa0: k0,
        etr1: etr1_verdict(k0),
        etr2: if offenders.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        etr2_offenders: offenders,
    })
}

/// Records for a model at its current weights, from one forward/backward
/// pass on `images`.
pub fn snapshot(
    model: &Model,
    images: &crate::Tensor,
    labels: &[usize],
) -> Result<Vec<DiagnosticsRecord>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let fp = model.forward(&mut g, x, crate::network::Mode::Train)?;
    let loss = g.cross_entropy(fp.logits, labels)?;
    g.backward(loss)?;
    Ok(collect(0, &fp.linears, &g, 0.0))
}

#[cfg(test)]
mod tests;
