use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use qsat_core::deployment::{
    fold_artifact, hash_warning, load_artifact, load_checkpoint, save_checkpoint, Artifact,
};
use qsat_core::diagnostics::{
    clamp_variance_study, etr_check, quant_variance_study, snapshot, write_csv, StudyRow,
};
use qsat_core::training::{
    evaluate, evaluate_with, load_datasets, train as run_training, DatasetKind, DatasetSpec,
    Datasets, EvalMetrics, TrainConfig, METRICS_HEADER,
};
use qsat_core::{Error, Result};
use serde_json::{json, Value};

use crate::outdir;
use crate::{DataArgs, Study};

pub type Outcome = Result<(Value, u8)>;

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn file_kind(input: [usize; 3]) -> Result<DatasetKind> {
    match input {
        [1, 28, 28] => Ok(DatasetKind::Mnist),
        [3, 32, 32] => Ok(DatasetKind::Cifar10),
        other => Err(Error::Config(format!(
            "no file dataset matches input shape {other:?}"
        ))),
    }
}

/// Dataset for a model with the given geometry, from `--config` and/or
/// `--dataset`. Returns the config batch size alongside (32 without one).
fn resolve_data(args: &DataArgs, input: [usize; 3], classes: usize) -> Result<(Datasets, usize)> {
    let (mut spec, batch) = match &args.config {
        Some(path) => {
            let cfg = read_config(path)?;
            (cfg.dataset, cfg.batch_size)
        }
        None => {
            if args.dataset.is_none() {
                return Err(Error::Config(
                    "pass --config or --dataset to choose the evaluation data".into(),
                ));
            }
            let spec = DatasetSpec {
                kind: DatasetKind::Synthetic,
                path: None,
                train_size: None,
                val_size: None,
                image_size: input[1],
                channels: input[0],
                noise: 1.0,
                data_seed: 1234,
            };
            (spec, 32)
        }
    };
    if let Some(dir) = &args.dataset {
        spec.path = Some(dir.clone());
        if spec.kind == DatasetKind::Synthetic {
            spec.kind = file_kind(input)?;
        }
    }
    let data = load_datasets(&spec, classes)?;
    if data.val.shape != input {
        return Err(Error::Dataset(format!(
            "dataset samples are {:?}, model expects {input:?}",
            data.val.shape
        )));
    }
    Ok((data, batch))
}

fn metrics_json(m: &EvalMetrics) -> Value {
    json!({ "top1": m.top1, "top5": m.top5, "loss": m.loss })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn train(
    config: &Path,
    init: Option<&Path>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    out: &Path,
    force: bool,
) -> Outcome {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = dataset {
        cfg.dataset.path = Some(dir);
        if cfg.dataset.kind == DatasetKind::Synthetic {
            cfg.dataset.kind = file_kind(cfg.input_shape())?;
            cfg.model.input = cfg.input_shape();
        }
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let init = match init {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if let Some(w) = hash_warning(&ck, hash) {
                eprintln!("warning: {}: {w}", path.display());
            }
            Some(ck.model)
        }
        None => None,
    };
    if init.is_none() && cfg.quantizes() {
        return Err(Error::MissingInit(format!(
            "{} quantizes; pass --init with a full-precision checkpoint",
            config.display()
        )));
    }
    let data = load_datasets(&cfg.dataset, cfg.model.classes)?;
    let dir = outdir::prepare(out, force)?;
    write_file(&dir.join("config.txt"), cfg.canonical())?;
    let last_good = dir.join("last_good.ckpt");
    eprintln!(
        "training {} for {} epochs on {} samples into {}",
        cfg.model.preset,
        cfg.epochs,
        data.train.len(),
        dir.display()
    );
    let outcome = run_training(&cfg, &data, init.as_ref(), &mut |epoch, model| {
        save_checkpoint(model, hash, &last_good)?;
        eprintln!("epoch {}/{} done", epoch + 1, cfg.epochs);
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, Error::Divergence { .. }) && last_good.exists() {
                eprintln!("last good checkpoint kept at {}", last_good.display());
            }
            return Err(e);
        }
    };

    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&outcome.model, hash, &ckpt)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    for row in &outcome.metrics {
        metrics.push_str(&row.csv_row());
        metrics.push('\n');
    }
    write_file(&dir.join("metrics.csv"), metrics)?;
    let mut diag = Vec::new();
    write_csv(&mut diag, &outcome.diagnostics)?;
    write_file(&dir.join("diagnostics.csv"), diag)?;
    fs::remove_file(&last_good).ok();

    let val = outcome
        .metrics
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .expect("at least one epoch");
    eprintln!(
        "final val top1 {:.4} top5 {:.4}",
        val.metrics.top1, val.metrics.top5
    );
    let summary = json!({
        "command": "train",
        "out": dir,
        "checkpoint": ckpt,
        "config_hash": format!("{hash:016x}"),
        "epochs": cfg.epochs,
        "val": metrics_json(&val.metrics),
    });
    Ok((summary, 0))
}

pub fn eval(checkpoint: &Path, data: &DataArgs) -> Outcome {
    let artifact = load_artifact(checkpoint)?;
    let (kind, metrics) = match &artifact {
        Artifact::Model(ck) => {
            let (ds, _) = resolve_data(data, ck.model.input, ck.model.classes)?;
            ("model", evaluate(&ck.model, &ds.val)?)
        }
        Artifact::Folded(f) => {
            let (ds, _) = resolve_data(data, f.input, f.classes)?;
            let scale = f.head.dropped_rescale;
            let m = evaluate_with(&ds.val, |images| {
                Ok(f.integer_forward(images)?.map(|v| v * scale))
            })?;
            ("folded", m)
        }
    };
    eprintln!("{kind} top1 {:.4} top5 {:.4}", metrics.top1, metrics.top5);
    let mut summary = json!({ "command": "eval", "kind": kind });
    summary
        .as_object_mut()
        .expect("object")
        .extend(metrics_json(&metrics).as_object().expect("object").clone());
    Ok((summary, 0))
}

pub fn diagnose(checkpoint: &Path, data: &DataArgs) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    let model = &ck.model;
    let (ds, batch) = resolve_data(data, model.input, model.classes)?;
    let n = batch.min(ds.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let b = ds.train.gather(&idx, None)?;
    let records = snapshot(model, &b.images, &b.labels)?;
    let report = etr_check(model, &records)?;

    let offenders = if report.etr2_offenders.is_empty() {
        "-".to_string()
    } else {
        report.etr2_offenders.join(" ")
    };
    eprintln!("{:<8} {:<32} verdict", "rule", "value");
    eprintln!(
        "{:<8} {:<32} {}",
        "ETR I",
        format!("kappa0 = {:.4}", report.kappa0),
        report.etr1
    );
    eprintln!(
        "{:<8} {:<32} {}",
        "ETR II",
        format!("out of range: {offenders}"),
        report.etr2
    );
    for r in &records {
        let k1 = r.kappa1.map_or("-".into(), |v| format!("{v:.3}"));
        eprintln!("  {:<12} var_w {:<10.4e} kappa1 {k1}", r.name, r.var_weight);
    }

    let mut summary = json!({ "command": "diagnose", "all_pass": report.all_pass() });
    summary.as_object_mut().expect("object").extend(
        serde_json::to_value(&report)
            .expect("report serializes")
            .as_object()
            .expect("object")
            .clone(),
    );
    Ok((summary, if report.all_pass() { 0 } else { 1 }))
}

#[allow(clippy::too_many_arguments)]
pub fn study(
    which: Study,
    n: Option<Vec<usize>>,
    bits: &[u32],
    samples: usize,
    repeats: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Outcome {
    let as_config = |e: Error| match e {
        Error::Domain { detail, .. } => Error::Config(detail),
        other => other,
    };
    let (name, column, rows): (&str, &str, Vec<StudyRow>) = match which {
        Study::ClampVar => {
            let n = n.unwrap_or_else(|| vec![10, 100, 1000, 10_000]);
            (
                "clamp-var",
                "n",
                clamp_variance_study(&n, samples, repeats, seed).map_err(as_config)?,
            )
        }
        Study::QuantVar => {
            let n = match n.as_deref() {
                None => 1000,
                Some([n]) => *n,
                Some(_) => return Err(Error::Config("quant-var takes a single --n".into())),
            };
            (
                "quant-var",
                "bits",
                quant_variance_study(bits, n, samples, repeats, seed).map_err(as_config)?,
            )
        }
    };
    let dir = outdir::prepare(out, force)?;
    let path = dir.join(format!("{name}.csv"));
    let mut csv = Vec::new();
    writeln!(csv, "{column},ratio")?;
    for r in &rows {
        writeln!(csv, "{},{}", r.x, r.ratio)?;
        eprintln!("{column} = {:<8} ratio = {:.6}", r.x, r.ratio);
    }
    write_file(&path, csv)?;
    let summary = json!({ "command": "study", "study": name, "csv": path, "rows": rows });
    Ok((summary, 0))
}

pub fn fold(checkpoint: &Path, out: &Path, force: bool) -> Outcome {
    let artifact = load_artifact(checkpoint)?;
    let folded = fold_artifact(&artifact)?;
    let hash = match &artifact {
        Artifact::Model(ck) => ck.config_hash,
        Artifact::Folded(_) => unreachable!("fold_artifact rejects folded input"),
    };
    let dir = outdir::prepare(out, force)?;
    let path = dir.join("folded.qsat");
    write_file(&path, folded.to_container(hash).encode())?;
    eprintln!(
        "folded {} conv layers into {}",
        folded.layers.len(),
        path.display()
    );
    let summary = json!({
        "command": "fold",
        "folded": path,
        "layers": folded.layers.len(),
        "preset": folded.preset.as_str(),
    });
    Ok((summary, 0))
}
