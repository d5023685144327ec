use super::*;
use crate::quant::{PactMode, RescaleMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, shape[0], shape[1], shape[2]], 0.0, 255.0, &mut rng)
}

fn cfg(preset: Preset) -> ModelConfig {
    ModelConfig {
        preset,
        ..ModelConfig::default()
    }
}

#[test]
fn transparent_block_is_relu() {
    let mut linear = Linear::conv("c", 2, 2, 1, 1, 0);
    linear.weight = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let block = Block {
        name: "b".into(),
        linear,
        bn: Some(BatchNorm::new("b.bn", 2)),
        act: Activation::Relu,
        pool: Pool::None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let y = forward_block(&mut g, &block, xn, Mode::Eval).unwrap();
    let tol = 1e-5;
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.max(0.0)).abs() <= tol * b.abs().max(1.0));
    }
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[8, 3, 5, 5], 10.0, &mut rng).map(|v| v + 4.0);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let gm = g.param(Tensor::ones(&[3]));
    let bt = g.param(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm(xn, gm, bt, BN_EPS).unwrap();
    let yv = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..8)
            .flat_map(|n| yv[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let ms = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((ms - 1.0).abs() < 1e-6, "{ms}");
    }
    assert_eq!(stats.count, 200);
}

#[test]
fn relu_halves_second_moment_after_bn() {
    let gamma = 1.7;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[64, 4, 8, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let gm = g.param(Tensor::full(&[4], gamma));
    let bt = g.param(Tensor::zeros(&[4]));
    let (y, _) = g.batch_norm(xn, gm, bt, BN_EPS).unwrap();
    let r = g.relu(y);
    let ms = g.value(r).mean_square();
    assert!((ms / (gamma * gamma / 2.0) - 1.0).abs() < 0.05, "{ms}");
}

#[test]
fn running_stats_update() {
    let mut bn = BatchNorm::new("x", 1);
    bn.update_running(&BatchStats {
        mean: vec![2.0],
        var: vec![3.0],
        count: 4,
    });
    assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
    assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
}

#[test]
fn preset_geometry() {
    let m = build_preset(&cfg(Preset::ConvnetBn), 0).unwrap();
    let lin = m.linears();
    assert_eq!(lin.len(), 7);
    assert_eq!(lin[0].fan_in(), 12);
    assert_eq!(lin[6].fan_in(), 16);
    assert_eq!(lin[6].fan_out(), 10);
    assert_eq!(
        m.follows_bn(),
        vec![true, true, true, true, true, true, false]
    );

    let nb = build_preset(&cfg(Preset::ConvnetNobnTail), 0).unwrap();
    assert_eq!(nb.follows_bn()[5], false);

    let r = build_preset(&cfg(Preset::PreresnetToy), 0).unwrap();
    assert_eq!(r.follows_bn(), vec![true, true, false, true, false, false]);

    assert!("resnet-1000".parse::<Preset>().is_err());
}

#[test]
fn forward_traces_geometry() {
    let m = build_preset(&cfg(Preset::PreresnetToy), 4).unwrap();
    let mut g = Graph::new();
    let x = g.constant(images(2, m.input, 1));
    let fp = m.forward(&mut g, x, Mode::Train).unwrap();
    assert_eq!(g.value(fp.logits).shape(), &[2, 10]);
    let k: Vec<usize> = fp.linears.iter().map(|t| t.k_pool).collect();
    assert_eq!(k, vec![2, 1, 1, 1, 8, 1]);
    let skip: Vec<bool> = fp.linears.iter().map(|t| t.skip_adjacent).collect();
    assert_eq!(skip, vec![false, false, true, false, true, false]);
    let fb: Vec<bool> = fp.linears.iter().map(|t| t.follows_bn).collect();
    assert_eq!(fb, m.follows_bn());
}

#[test]
fn scheme_assignment() {
    let c = ModelConfig {
        weights: WeightFormat::Quantized(4),
        rescale: RescaleMode::Constant,
        ..cfg(Preset::ConvnetNobnTail)
    };
    let m = build_preset(&c, 0).unwrap();
    let s: Vec<_> = m
        .linears()
        .iter()
        .map(|l| (l.scheme.format, l.scheme.rescale))
        .collect();
    assert_eq!(s[0].0, WeightFormat::Quantized(8));
    assert_eq!(s[3].0, WeightFormat::Quantized(4));
    assert_eq!(s[6].0, WeightFormat::Quantized(8));
    assert_eq!(s[0].1, RescaleMode::None);
    assert_eq!(s[5].1, RescaleMode::Constant);
    assert_eq!(s[6].1, RescaleMode::Constant);
    assert!(m.unrescaled_no_bn_layers().is_empty());

    let pre = ModelConfig {
        rescale_scope: RescaleScope::Fc,
        preset: Preset::PreresnetToy,
        ..c
    };
    let m = build_preset(&pre, 0).unwrap();
    assert_eq!(
        m.unrescaled_no_bn_layers(),
        vec!["res1.conv2", "res2.conv2"]
    );
}

#[test]
fn residual_with_zero_branch_is_identity() {
    let m = build_preset(&cfg(Preset::PreresnetToy), 5).unwrap();
    let mut zeroed = m.clone();
    for l in zeroed.linears_mut() {
        if l.name.starts_with("res") {
            l.weight = l.weight.map(|_| 0.0);
        }
    }
    let mut g = Graph::new();
    let x = g.constant(images(3, m.input, 2));
    let fp = zeroed.forward(&mut g, x, Mode::Eval).unwrap();
    let logits = g.value(fp.logits).clone();

    // Same model with the residual units removed.
    let mut skip = m.clone();
    skip.stages.retain(|s| !matches!(s, Stage::Residual(_)));
    let mut g = Graph::new();
    let x = g.constant(images(3, m.input, 2));
    let fp = skip.forward(&mut g, x, Mode::Eval).unwrap();
    assert_eq!(g.value(fp.logits), &logits);
}

#[test]
fn eval_forward_is_batch_order_independent() {
    let m = build_preset(&cfg(Preset::ConvnetBn), 6).unwrap();
    let x = images(4, m.input, 3);
    let full = m.predict(&x).unwrap();
    let per = 3 * 32 * 32;
    let mut rev = Vec::new();
    for i in (0..4).rev() {
        rev.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let rev = m
        .predict(&Tensor::new(vec![4, 3, 32, 32], rev).unwrap())
        .unwrap();
    for i in 0..4 {
        assert_eq!(
            full.data()[i * 10..(i + 1) * 10],
            rev.data()[(3 - i) * 10..(4 - i) * 10]
        );
    }
    assert_eq!(m.predict(&x).unwrap(), full);
}

#[test]
fn tensors_round_trip_through_set_tensor() {
    let c = ModelConfig {
        act_bits: Some(4),
        pact_mode: PactMode::Legacy,
        ..cfg(Preset::PreresnetToy)
    };
    let a = build_preset(&c, 1).unwrap();
    let mut b = build_preset(&c, 2).unwrap();
    assert_ne!(a, b);
    for (name, _, t) in a.tensors() {
        b.set_tensor(&name, &t).unwrap();
    }
    assert_eq!(a, b);
    assert!(b.set_tensor("nope", &Tensor::scalar(1.0)).is_err());
    assert!(b.set_tensor("fc.weight", &Tensor::scalar(1.0)).is_err());
}

/// Logit-scale chain at init. The step `VAR[z] ≈ n_L·VAR[Ξ]·E[x²]` holds
/// for zero-mean weights. The closing step `E[x²] ≈ γ²/k²` ignores the
/// non-zero ReLU mean, which survives average pooling undiminished, so the
/// measured `E[x²]` sits near `γ²/2π` instead.
#[test]
fn logit_scale_chain_at_init() {
    let m = build_preset(&cfg(Preset::ConvnetBn), 9).unwrap();
    let (mut first, mut closing) = (Vec::new(), Vec::new());
    for batch in 0..10 {
        let mut g = Graph::new();
        let x = g.constant(images(16, m.input, 100 + batch));
        let fp = m.forward(&mut g, x, Mode::Train).unwrap();
        let z = g.value(fp.logits).mean_square();
        let head = fp.linears.last().unwrap();
        let var_xi = g.value(head.xi).mean_square();
        let feat = g.value(fp.features).mean_square();
        first.push(z / (head.n_in as f64 * var_xi * feat));
        let k = fp.linears[fp.linears.len() - 2].k_pool as f64;
        closing.push(feat / (1.0 / (k * k)));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let f = median(&mut first);
    assert!((1.0 / 3.0..=3.0).contains(&f), "{f}");
    let c = median(&mut closing);
    let expect = 64.0 / (2.0 * std::f64::consts::PI);
    assert!((c / expect - 1.0).abs() < 0.3, "{c}");
}
