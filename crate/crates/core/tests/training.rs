use qsat_core::diagnostics::{etr_check, CSV_HEADER};
use qsat_core::network::ParamRole;
use qsat_core::quant::{effective_weight_values, on_signed_grid, WeightFormat};
use qsat_core::training::{synthetic, train, Batcher, Datasets, TrainConfig, TrainOutcome};

fn cfg(text: &str) -> TrainConfig {
    TrainConfig::parse(text).unwrap()
}

fn data(c: &TrainConfig) -> Datasets {
    synthetic(&c.dataset, c.model.classes).unwrap()
}

fn run(c: &TrainConfig, init: Option<&qsat_core::network::Model>) -> TrainOutcome {
    train(c, &data(c), init, &mut |_, _| Ok(())).unwrap()
}

const SMALL: &str = "train_size = 64\nval_size = 40\nimage_size = 8\nbase_lr = 0.8\n";

#[test]
fn overfits_a_tiny_training_set() {
    let c = cfg("preset = convnet-bn\nbits = fp\nepochs = 500\ntrain_size = 32\nval_size = 10\nimage_size = 8\nbase_lr = 0.8\nweight_decay = 0\ndiag_every = 0\n");
    let out = run(&c, None);
    let best = out
        .metrics
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.metrics.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.01, "best training loss {best}");
}

#[test]
fn training_is_deterministic() {
    let c = cfg(&format!(
        "preset = convnet-bn\nbits = fp\nepochs = 2\ndiag_every = 1\n{SMALL}"
    ));
    let a = run(&c, None);
    let b = run(&c, None);
    assert_eq!(a.model, b.model);
    let csv = |o: &TrainOutcome| {
        let mut s = Vec::new();
        qsat_core::diagnostics::write_csv(&mut s, &o.diagnostics).unwrap();
        let rows: Vec<String> = o.metrics.iter().map(|r| r.csv_row()).collect();
        (s, rows)
    };
    assert_eq!(csv(&a), csv(&b));
    assert!(String::from_utf8(csv(&a).0)
        .unwrap()
        .starts_with(CSV_HEADER));
}

#[test]
fn quantized_finetune_keeps_invariants() {
    let fp = cfg(&format!(
        "preset = convnet-bn\nbits = fp\nepochs = 2\n{SMALL}"
    ));
    let base = run(&fp, None);
    let q = cfg(&format!(
        "preset = convnet-bn\nbits = 2\nact_bits = 2\nepochs = 2\n{SMALL}"
    ));
    let out = run(&q, Some(&base.model));
    let m = &out.model;

    // Effective weights sit on the signed grid of their bit width, up to
    // the rescale factor.
    for l in m.linears() {
        let WeightFormat::Quantized(bits) = l.scheme.format else {
            panic!("{} is not quantized", l.name);
        };
        let (xi, factor) = effective_weight_values(&l.weight, &l.scheme).unwrap();
        assert!(
            on_signed_grid(&xi, bits, factor, 1e-9).unwrap(),
            "{}",
            l.name
        );
    }
    for (name, role, t) in m.tensors() {
        assert!(t.all_finite(), "{name}");
        assert!(
            t.data().iter().all(|&v| v as f32 as f64 == v),
            "{name} is not held at f32"
        );
        if role == ParamRole::Alpha {
            assert!(t.item() > 0.0, "{name}");
        }
    }
    assert!(out.diagnostics.iter().all(|r| r.var_weight > 0.0));
    let lrs: Vec<f64> = out.metrics.iter().map(|r| r.lr).collect();
    assert!(lrs.iter().all(|&lr| lr >= 0.0));
    etr_check(m, &out.diagnostics).unwrap();
}

#[test]
fn float_and_quantized_runs_see_the_same_batches() {
    let fp = cfg(&format!(
        "preset = convnet-bn\nbits = fp\nepochs = 1\n{SMALL}"
    ));
    let q = cfg(&format!(
        "preset = convnet-bn\nbits = 4\nact_bits = 4\nepochs = 1\n{SMALL}"
    ));
    assert_eq!(data(&fp), data(&q));
    let d = data(&fp);
    let mut a = Batcher::new(fp.seed, fp.batch_size, d.train.shape);
    let mut b = Batcher::new(q.seed, q.batch_size, d.train.shape);
    for _ in 0..3 {
        assert_eq!(a.epoch(&d.train), b.epoch(&d.train));
    }
}

#[test]
fn sat_keeps_head_logits_small() {
    let fp = cfg(&format!(
        "preset = convnet-bn\nbits = fp\nepochs = 2\n{SMALL}"
    ));
    let base = run(&fp, None);
    let q = cfg(&format!(
        "preset = convnet-bn\nbits = 4\nact_bits = 4\nepochs = 2\n{SMALL}"
    ));
    let out = run(&q, Some(&base.model));
    // Constant rescale pins n̂·VAR[Ξ] of the head to 1 at every logged step.
    let head = out.model.linears().len() - 1;
    for r in out.diagnostics.iter().filter(|r| r.layer == head) {
        assert!((r.var_weight * r.n_hat as f64 - 1.0).abs() < 1e-10, "{r:?}");
    }
}
