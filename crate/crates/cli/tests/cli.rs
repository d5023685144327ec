use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use qsat_core::deployment::save_checkpoint;
use qsat_core::network::build_preset;
use qsat_core::training::TrainConfig;
use serde_json::Value;

struct Run {
    code: i32,
    json: Value,
    stderr: String,
}

fn qsat(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_qsat"))
        .args(args)
        .env("QSAT_THREADS", "2")
        .output()
        .expect("spawn qsat");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    let json = match lines.as_slice() {
        [line] => serde_json::from_str(line).expect("stdout is one JSON object"),
        _ => Value::Null,
    };
    Run {
        code: out.status.code().unwrap(),
        json,
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "epochs = 2\ntrain_size = 128\nval_size = 200\nnoise = 3\nbase_lr = 0.4\n";

/// A full-precision and a 4-bit finetuned convnet-bn on 32×32 synthetic
/// data, trained once for the whole file.
struct Fixture {
    dir: tempfile::TempDir,
    fp_cfg: PathBuf,
    q4_cfg: PathBuf,
    fp_ckpt: PathBuf,
    q4_ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let fp_cfg = write_cfg(
            dir.path(),
            "fp.cfg",
            &format!("preset = convnet-bn\nbits = fp\n{SMALL}"),
        );
        let q4_cfg = write_cfg(
            dir.path(),
            "q4.cfg",
            &format!("preset = convnet-bn\nbits = 4\nact_bits = 4\n{SMALL}"),
        );
        let fp_out = dir.path().join("fp");
        let r = qsat(&["train", "--config", p(&fp_cfg), "--out", p(&fp_out)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let fp_ckpt = fp_out.join("model.ckpt");
        let q4_out = dir.path().join("q4");
        let r = qsat(&[
            "train",
            "--config",
            p(&q4_cfg),
            "--init",
            p(&fp_ckpt),
            "--out",
            p(&q4_out),
        ]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        Fixture {
            fp_cfg,
            q4_cfg,
            fp_ckpt,
            q4_ckpt: q4_out.join("model.ckpt"),
            dir,
        }
    })
}

#[test]
fn finetune_workflow_writes_all_outputs() {
    let f = fixture();
    for run in ["fp", "q4"] {
        for file in ["model.ckpt", "metrics.csv", "diagnostics.csv", "config.txt"] {
            assert!(f.dir.path().join(run).join(file).is_file(), "{run}/{file}");
        }
        assert!(!f.dir.path().join(run).join("last_good.ckpt").exists());
    }
    let metrics = fs::read_to_string(f.dir.path().join("q4/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,split,top1,top5,loss,lr"
    );
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let diag = fs::read_to_string(f.dir.path().join("q4/diagnostics.csv")).unwrap();
    assert!(diag.starts_with("step,layer,n_in,n_hat,k_pool,var_weight"));
}

#[test]
fn quantized_train_without_init_is_a_config_error() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let r = qsat(&[
        "train",
        "--config",
        p(&f.q4_cfg),
        "--out",
        p(&out.path().join("x")),
    ]);
    assert_eq!(r.code, 2);
    assert!(r.json["error"].as_str().unwrap().contains("--init"));
    assert!(!out.path().join("x").exists());
}

#[test]
fn missing_bits_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "a.cfg", "preset = convnet-bn\nepochs = 1\n");
    let r = qsat(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("`bits`"), "{}", r.stderr);
    assert_eq!(r.json["exit"], 2);
    let r = qsat(&["train", "--config", p(&dir.path().join("absent.cfg"))]);
    assert_eq!(r.code, 2);
}

#[test]
fn same_seed_gives_identical_files_and_never_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "a.cfg",
        "preset = convnet-bn\nbits = fp\nepochs = 2\ntrain_size = 64\nval_size = 40\nimage_size = 16\ndiag_every = 1\n",
    );
    let out = dir.path().join("run");
    let a = qsat(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    let b = qsat(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    assert_eq!((a.code, b.code), (0, 0));
    let second = dir.path().join("run-1");
    assert_eq!(b.json["out"].as_str().unwrap(), p(&second));
    for file in ["metrics.csv", "diagnostics.csv", "model.ckpt", "config.txt"] {
        assert_eq!(
            fs::read(out.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file}"
        );
    }
    let c = qsat(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "8",
        "--out",
        p(&out),
        "--force",
    ]);
    assert_eq!(c.json["out"].as_str().unwrap(), p(&out));
    assert_ne!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // One step per epoch; the first runs at zero learning rate.
    let cfg = write_cfg(
        dir.path(),
        "a.cfg",
        "preset = convnet-bn\nbits = fp\nepochs = 3\nwarmup_epochs = 1\nbase_lr = 1e300\ntrain_size = 32\nval_size = 20\nimage_size = 8\n",
    );
    let out = dir.path().join("run");
    let r = qsat(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(out.join("last_good.ckpt").is_file());
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn diagnose_sat_checkpoint_passes() {
    let f = fixture();
    let r = qsat(&["diagnose", p(&f.q4_ckpt), "--config", p(&f.q4_cfg)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json["etr1"], "PASS");
    assert_eq!(r.json["etr2"], "PASS");
    assert!(r.stderr.contains("ETR I") && r.stderr.contains("kappa0"));
}

#[test]
fn diagnose_kaiming_init_passes() {
    let f = fixture();
    let cfg = TrainConfig::parse(&fs::read_to_string(&f.fp_cfg).unwrap()).unwrap();
    let model = build_preset(&cfg.model, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    save_checkpoint(&model, cfg.hash(), &ckpt).unwrap();
    let r = qsat(&["diagnose", p(&ckpt), "--config", p(&f.fp_cfg)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.json["kappa0"].as_f64().unwrap() < 0.1);
}

#[test]
fn diagnose_clamped_without_rescale_fails_etr1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "clamp.cfg",
        "preset = convnet-bn\nbits = fp\nclamp = true\nrescale = none\nepochs = 3\nwidth = 32\nimage_size = 8\ntrain_size = 256\nval_size = 100\nnoise = 3\n",
    );
    let out = dir.path().join("run");
    assert_eq!(
        qsat(&["train", "--config", p(&cfg), "--out", p(&out)]).code,
        0
    );
    let r = qsat(&["diagnose", p(&out.join("model.ckpt")), "--config", p(&cfg)]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json["etr1"], "FAIL", "{}", r.json);
    assert!(r.json["kappa0"].as_f64().unwrap() >= 1.0);
}

#[test]
fn fold_then_eval_matches_float_eval() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let r = qsat(&["fold", p(&f.q4_ckpt), "--out", p(&dir.path().join("f"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let folded = r.json["folded"].as_str().unwrap().to_string();
    let full = write_cfg(
        dir.path(),
        "eval.cfg",
        &fs::read_to_string(&f.q4_cfg)
            .unwrap()
            .replace("val_size = 200", "val_size = 1000"),
    );
    let float = qsat(&["eval", p(&f.q4_ckpt), "--config", p(&full)]);
    let int = qsat(&["eval", &folded, "--config", p(&full)]);
    assert_eq!((float.code, int.code), (0, 0));
    assert_eq!(int.json["kind"], "folded");
    let d = (float.json["top1"].as_f64().unwrap() - int.json["top1"].as_f64().unwrap()).abs();
    assert!(
        d <= 0.002 + 1e-12,
        "float {} vs folded {}",
        float.json,
        int.json
    );

    let again = qsat(&["fold", &folded, "--out", p(&dir.path().join("g"))]);
    assert_eq!(again.code, 5);
}

#[test]
fn fold_rejects_float_and_residual_models() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let r = qsat(&["fold", p(&f.fp_ckpt), "--out", p(&dir.path().join("a"))]);
    assert_eq!(r.code, 5);

    let cfg =
        TrainConfig::parse("preset = preresnet-toy\nbits = 4\nact_bits = 4\nepochs = 1\n").unwrap();
    let model = build_preset(&cfg.model, 0).unwrap();
    let ckpt = dir.path().join("res.ckpt");
    save_checkpoint(&model, cfg.hash(), &ckpt).unwrap();
    let r = qsat(&["fold", p(&ckpt), "--out", p(&dir.path().join("b"))]);
    assert_eq!(r.code, 5);
    assert!(r.stderr.contains("res1"), "{}", r.stderr);
}

#[test]
fn eval_errors_map_to_exit_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(
        qsat(&["eval", p(&f.fp_ckpt), "--dataset", p(&empty)]).code,
        3
    );
    assert_eq!(qsat(&["eval", p(&f.fp_ckpt)]).code, 2);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert_eq!(qsat(&["eval", p(&junk), "--config", p(&f.fp_cfg)]).code, 6);
    let r = qsat(&["eval", p(&f.fp_ckpt), "--config", p(&f.fp_cfg)]);
    assert_eq!(r.code, 0);
    assert!((0.0..=1.0).contains(&r.json["top1"].as_f64().unwrap()));
    assert!(r.json["top5"].as_f64().unwrap() >= r.json["top1"].as_f64().unwrap());
}

fn csv_rows(path: &str) -> Vec<(f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (x, r) = l.split_once(',').unwrap();
            (x.parse().unwrap(), r.parse().unwrap())
        })
        .collect()
}

#[test]
fn studies_write_trend_csvs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let a = qsat(&[
        "study",
        "clamp-var",
        "--samples",
        "10000",
        "--repeats",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    let csv = a.json["csv"].as_str().unwrap().to_string();
    assert!(fs::read_to_string(&csv).unwrap().starts_with("n,ratio\n"));
    let rows = csv_rows(&csv);
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        [10.0, 100.0, 1000.0, 10000.0]
    );
    assert!(rows.windows(2).all(|w| w[1].1 > w[0].1));

    let b = qsat(&[
        "study",
        "clamp-var",
        "--samples",
        "10000",
        "--repeats",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(
        fs::read(&csv).unwrap(),
        fs::read(b.json["csv"].as_str().unwrap()).unwrap()
    );

    let q = qsat(&[
        "study",
        "quant-var",
        "--samples",
        "10000",
        "--out",
        p(&dir.path().join("q")),
    ]);
    assert_eq!(q.code, 0);
    let rows = csv_rows(q.json["csv"].as_str().unwrap());
    assert_eq!(rows.len(), 8);
    assert!(rows[..5].windows(2).all(|w| w[1].1 < w[0].1), "{rows:?}");
    assert!(rows[0].1 > 1.2);
    for &(b, ratio) in &rows[3..] {
        assert!((ratio - 1.0).abs() < 0.05, "b={b}: {ratio}");
    }
}

#[test]
fn study_rejects_bad_arguments() {
    assert_eq!(qsat(&["study", "bogus"]).code, 2);
    let dir = tempfile::tempdir().unwrap();
    let r = qsat(&[
        "study",
        "clamp-var",
        "--samples",
        "10",
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(r.code, 2);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_qsat"))
        .args(["study", "clamp-var"])
        .env("QSAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
