use std::collections::BTreeMap;

use super::config::TrainConfig;
use super::data::{Batcher, Dataset, Datasets};
use super::optim::{lr_schedule, Sgd};
use crate::diagnostics::{collect, should_log, DiagnosticsRecord};
use crate::network::{build_preset, Mode, Model, ParamRole};
use crate::{Error, Graph, Result, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,top1,top5,loss,lr";

const EVAL_CHUNK: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub metrics: EvalMetrics,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:e}",
            self.epoch,
            self.split,
            self.metrics.top1,
            self.metrics.top5,
            self.metrics.loss,
            self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub diagnostics: Vec<DiagnosticsRecord>,
}

/// Rank of the true class: number of logits that beat it, ties broken
/// towards the lower class index.
fn rank(logits: &[f64], label: usize) -> usize {
    let t = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &z)| z > t || (z == t && j < label))
        .count()
}

#[derive(Default)]
struct Tally {
    n: usize,
    top1: usize,
    top5: usize,
    loss: f64,
}

impl Tally {
    fn add(&mut self, logits: &Tensor, labels: &[usize], mean_loss: f64) {
        let k = logits.shape()[1];
        for (row, &y) in logits.data().chunks(k).zip(labels) {
            let r = rank(row, y);
            self.top1 += (r < 1) as usize;
            self.top5 += (r < 5) as usize;
        }
        self.n += labels.len();
        self.loss += mean_loss * labels.len() as f64;
    }

    fn finish(&self) -> EvalMetrics {
        let n = self.n.max(1) as f64;
        EvalMetrics {
            top1: self.top1 as f64 / n,
            top5: self.top5 as f64 / n,
            loss: self.loss / n,
        }
    }
}

/// Eval-mode accuracy and mean loss over a whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalMetrics> {
    evaluate_with(data, |images| model.predict(images))
}

/// Accuracy and mean loss of the logits `predict` returns for each chunk
/// of the dataset.
pub fn evaluate_with(
    data: &Dataset,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut tally = Tally::default();
    for batch in data.chunks(EVAL_CHUNK) {
        let batch = batch?;
        let logits = predict(&batch.images)?;
        let mut g = Graph::new();
        let z = g.constant(logits);
        let loss = g.cross_entropy(z, &batch.labels)?;
        tally.add(g.value(z), &batch.labels, g.value(loss).item());
    }
    Ok(tally.finish())
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Builds the model for `cfg` and trains it. Quantizing configs need an
/// `init` model whose tensors are copied by name; tensors the init lacks
/// (such as fresh PACT clip levels) keep their defaults.
pub fn train(
    cfg: &TrainConfig,
    data: &Datasets,
    init: Option<&Model>,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = build_preset(&cfg.model, cfg.seed)?;
    match init {
        Some(src) => {
            let available: BTreeMap<String, Tensor> =
                src.tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
            for (name, _, _) in model.tensors() {
                if let Some(t) = available.get(&name) {
                    model
                        .set_tensor(&name, t)
                        .map_err(|e| Error::Checkpoint(format!("init tensor `{name}`: {e}")))?;
                }
            }
        }
        None if cfg.quantizes() => {
            return Err(Error::MissingInit(
                "quantized configs finetune a full-precision model; pass an init checkpoint".into(),
            ))
        }
        None => {}
    }
    train_from(cfg, data, model, on_epoch)
}

/// Trains `model` in place of building one. `on_epoch` sees the model at
/// the end of every completed epoch.
pub fn train_from(
    cfg: &TrainConfig,
    data: &Datasets,
    mut model: Model,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.train.shape != model.input || data.val.shape != model.input {
        return Err(Error::Dataset(format!(
            "dataset samples are {:?}, model expects {:?}",
            data.train.shape, model.input
        )));
    }
    if let Some(&bad) = data
        .train
        .labels
        .iter()
        .chain(&data.val.labels)
        .find(|&&l| l >= model.classes)
    {
        return Err(Error::Dataset(format!(
            "label {bad} ≥ class count {}",
            model.classes
        )));
    }
    let mut batcher = Batcher::new(cfg.seed, cfg.batch_size, data.train.shape);
    let steps = batcher.steps_per_epoch(&data.train);
    if steps == 0 {
        return Err(Error::Dataset(format!(
            "{} training samples do not fill one batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let total = steps * cfg.epochs;
    let warmup = steps * cfg.warmup_epochs;
    let peak = cfg.peak_lr();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut diagnostics = Vec::new();
    let mut global = 0;

    for epoch in 0..cfg.epochs {
        let mut tally = Tally::default();
        let mut lr = 0.0;
        for (i, (idx, flips)) in batcher.epoch(&data.train).into_iter().enumerate() {
            lr = lr_schedule(global, total, warmup, peak);
            let batch = data.train.gather(&idx, Some(&flips))?;
            let mut g = Graph::new();
            let x = g.constant(batch.images);
            let fp = model.forward(&mut g, x, Mode::Train)?;
            let loss = g.cross_entropy(fp.logits, &batch.labels)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step: global,
                    loss: loss_value,
                });
            }
            g.backward(loss)?;
            tally.add(g.value(fp.logits), &batch.labels, loss_value);
            if should_log(global, i, steps, cfg.diag_every) {
                diagnostics.extend(collect(global, &fp.linears, &g, lr));
            }

            for p in &fp.params {
                if !p.role.trainable() {
                    continue;
                }
                let Some(grad) = g.grad(p.node) else { continue };
                let mut value = g.value(p.node).clone();
                let decay = matches!(p.role, ParamRole::Weight | ParamRole::Alpha);
                sgd.step(&p.name, value.data_mut(), grad.data(), lr, decay);
                if !value.all_finite() {
                    return Err(Error::Divergence {
                        step: global,
                        loss: loss_value,
                    });
                }
                model.set_tensor(&p.name, &round_f32(&value))?;
            }
            model.apply_bn_stats(&fp.bn_stats);
            for b in model.batch_norms_mut() {
                b.running_mean = round_f32(&b.running_mean);
                b.running_var = round_f32(&b.running_var);
            }
            for (_, s) in model.pact_states_mut() {
                s.enforce_positive();
                s.alpha = s.alpha as f32 as f64;
            }
            global += 1;
        }
        metrics.push(MetricsRow {
            epoch,
            split: "train",
            metrics: tally.finish(),
            lr,
        });
        metrics.push(MetricsRow {
            epoch,
            split: "val",
            metrics: evaluate(&model, &data.val)?,
            lr,
        });
        on_epoch(epoch, &model)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        diagnostics,
    })
}
