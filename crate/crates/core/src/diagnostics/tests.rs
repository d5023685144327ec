use super::*;
use crate::network::{build_preset, ModelConfig, Preset};
use crate::quant::{RescaleMode, WeightFormat};
use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(n_in: usize, n_hat: usize, k: usize, vw: f64, vg: f64) -> LayerStats {
    LayerStats {
        n_in,
        n_hat,
        k_pool: k,
        var_weight: vw,
        var_grad: vg,
    }
}

#[test]
fn kappa0_reference_values() {
    assert!((kappa0(1.0 / 1000.0, 1024, 7) - 0.0209).abs() < 1e-4);
    assert!((kappa0(1.0 / 1000.0, 512, 7) - 0.010_45).abs() < 1e-5);
    assert_eq!(kappa0(1.0, 49, 7), 1.0);
    let base = kappa0(0.003, 300, 4);
    assert!((kappa0(0.003 * 2.5, 300, 4) - 2.5 * base).abs() < 1e-15);
}

#[test]
fn kappa1_formula() {
    let a = stats(64, 64, 1, 0.02, 1e-4);
    assert_eq!(kappa1(&a, &a), 1.0);
    let doubled = LayerStats {
        var_weight: 0.04,
        ..a
    };
    assert!((kappa1(&doubled, &a) - 2.0).abs() < 1e-15);
    let dead = LayerStats { var_grad: 0.0, ..a };
    assert!(kappa1(&dead, &a).is_nan());
    assert!(kappa1(&a, &dead).is_nan());
}

#[test]
fn kappa2_formula() {
    let a = stats(100, 100, 1, 0.01, 3e-3);
    assert!((kappa2(&a, &a) - 1.0).abs() < 1e-15);
    let heavier = LayerStats {
        var_weight: 0.04,
        ..a
    };
    assert!((kappa2(&a, &heavier) - 0.25).abs() < 1e-15);
    assert!(kappa2(&a, &LayerStats { var_grad: 0.0, ..a }).is_nan());
}

#[test]
fn etr1_thresholds() {
    assert_eq!(etr1_verdict(0.02), Verdict::Pass);
    assert_eq!(etr1_verdict(0.5), Verdict::Warn);
    assert_eq!(etr1_verdict(1.0), Verdict::Fail);
}

/// Monte-Carlo over init seeds for a two-layer no-BN FC network at
/// fan-out init: `κ2 = O(1)`.
#[test]
fn kappa2_two_layer_fc_at_init() {
    let (n0, n1, k) = (64, 64, 10);
    let mut values = Vec::new();
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[32, n0], 1.0, &mut rng);
        let w1 = Tensor::randn(&[n0, n1], (1.0 / n1 as f64).sqrt(), &mut rng);
        let w2 = Tensor::randn(&[n1, k], (1.0 / k as f64).sqrt(), &mut rng);
        let labels: Vec<usize> = (0..32).map(|_| rng.gen_range(0..k)).collect();
        let mut g = crate::Graph::new();
        let xn = g.constant(x);
        let a = g.param(w1);
        let b = g.param(w2);
        let h = g.matmul(xn, a).unwrap();
        let h = g.relu(h);
        let z = g.matmul(h, b).unwrap();
        let loss = g.cross_entropy(z, &labels).unwrap();
        g.backward(loss).unwrap();
        let s1 = stats(
            n0,
            n1,
            1,
            g.value(a).mean_square(),
            g.grad(a).unwrap().mean_square(),
        );
        let s2 = stats(
            n1,
            k,
            1,
            g.value(b).mean_square(),
            g.grad(b).unwrap().mean_square(),
        );
        values.push(kappa2(&s1, &s2));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let med = values[values.len() / 2];
    assert!((0.2..=5.0).contains(&med), "{values:?}");
}

fn images(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[n, 3, 32, 32], 0.0, 255.0, &mut rng);
    let y = (0..n).map(|i| i % 10).collect();
    (x, y)
}

#[test]
fn sat_convnet_passes_both_rules() {
    let cfg = ModelConfig {
        weights: WeightFormat::Quantized(4),
        rescale: RescaleMode::Constant,
        ..ModelConfig::default()
    };
    let m = build_preset(&cfg, 3).unwrap();
    let (x, y) = images(8, 1);
    let recs = snapshot(&m, &x, &y).unwrap();
    assert_eq!(recs.len(), 7);
    let head = recs.last().unwrap();
    // mean_square(Ξ)·n̂ = 1 ⇒ κ0 = n_L/(n̂·k²).
    assert!((head.kappa0.unwrap() - 16.0 / (10.0 * 64.0)).abs() < 1e-10);
    let report = etr_check(&m, &recs).unwrap();
    assert!(report.all_pass(), "{report:?}");
}

#[test]
fn unrescaled_nobn_tail_fails_etr2() {
    let cfg = ModelConfig {
        preset: Preset::ConvnetNobnTail,
        weights: WeightFormat::Clamped,
        rescale: RescaleMode::None,
        ..ModelConfig::default()
    };
    let m = build_preset(&cfg, 3).unwrap();
    let (x, y) = images(8, 2);
    let recs = snapshot(&m, &x, &y).unwrap();
    let report = etr_check(&m, &recs).unwrap();
    assert_eq!(report.etr2, Verdict::Fail);
    assert_eq!(report.etr2_offenders, vec!["conv6".to_string()]);
}

#[test]
fn fp_kaiming_passes_etr1() {
    let m = build_preset(&ModelConfig::default(), 4).unwrap();
    let (x, y) = images(8, 3);
    let recs = snapshot(&m, &x, &y).unwrap();
    let report = etr_check(&m, &recs).unwrap();
    assert_eq!(report.etr1, Verdict::Pass);
    assert!(etr_check(&m, &recs[..3]).is_err());
}

#[test]
fn csv_layout() {
    let m = build_preset(&ModelConfig::default(), 4).unwrap();
    let (x, y) = images(4, 3);
    let recs = snapshot(&m, &x, &y).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &recs).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.len() == 12));
    // κ0 only on the head, κ1 on every pair.
    assert!(rows[..6]
        .iter()
        .all(|r| r[7].is_empty() && !r[8].is_empty()));
    assert!(!rows[6][7].is_empty() && rows[6][8].is_empty());
    assert!(rows.iter().all(|r| r[10].is_empty()));

    let json = to_json(&recs);
    let first = json.as_array().unwrap()[0].as_object().unwrap();
    let keys: Vec<&str> = first.keys().map(String::as_str).collect();
    let mut expect: Vec<&str> = CSV_HEADER.split(',').collect();
    expect.sort();
    let mut got = keys.clone();
    got.sort();
    assert_eq!(got, expect);
}

#[test]
fn skip_adjacent_pairs_have_no_kappa1() {
    let m = build_preset(
        &ModelConfig {
            preset: Preset::PreresnetToy,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap();
    let (x, y) = images(4, 5);
    let recs = snapshot(&m, &x, &y).unwrap();
    let has: Vec<bool> = recs.iter().map(|r| r.kappa1.is_some()).collect();
    assert_eq!(has, vec![true, true, false, true, false, false]);
}

#[test]
fn log_cadence() {
    let logged: Vec<usize> = (0..120)
        .filter(|&s| should_log(s, s % 40, 40, 50))
        .collect();
    assert_eq!(logged, vec![0, 39, 40, 50, 79, 80, 100, 119]);
}
