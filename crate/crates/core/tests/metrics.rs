use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge_core::config::{RunConfig, Variant};
use sge_core::metrics::*;
use sge_core::model::{forward, init_generator, ModelInput, ModelSpec};
use sge_core::CoreError;
use sge_tensor::{Graph, Tensor};

fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::<f64>::full(&[3, 8, 8], 0.2);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let half = Tensor::full(&[3, 8, 8], 0.7);
    assert!((psnr(&a, &half).unwrap() - 6.0206).abs() < 1e-3);
    let tenth = Tensor::full(&[3, 8, 8], 0.3);
    assert!((psnr(&a, &tenth).unwrap() - 20.0).abs() < 1e-3);
}

#[test]
fn psnr_shape_mismatch_is_dimension_error() {
    let a = Tensor::<f64>::zeros(&[3, 8, 8]);
    let b = Tensor::<f64>::zeros(&[3, 8, 4]);
    assert!(matches!(
        psnr(&a, &b),
        Err(CoreError::Tensor(sge_tensor::TensorError::Dimension(_)))
    ));
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let a = noise(&[3, 16, 16], 1);
    let n = noise(&[3, 16, 16], 2);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let b = Tensor::from_fn(&[3, 16, 16], |i| a.data()[i] + amp * (n.data()[i] - 0.5));
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        assert_eq!(p, psnr(&b, &a).unwrap());
        last = p;
    }
}

#[test]
fn ssim_identities() {
    let a = noise(&[3, 16, 16], 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    let c = Tensor::<f64>::full(&[3, 16, 16], 0.4);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() <= 1e-9);
}

#[test]
fn ssim_of_negative_pattern_is_low() {
    let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| if ((i % 256) / 16 + i % 16) % 2 == 0 { 0.9 } else { 0.1 });
    let neg = a.map(|v| 1.0 - v);
    assert!(ssim(&a, &neg).unwrap() < 0.5);
}

#[test]
fn ssim_smaller_than_window_is_config_error() {
    let a = Tensor::<f64>::zeros(&[3, 6, 6]);
    assert!(matches!(ssim(&a, &a), Err(CoreError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), shift in 0.01f64..0.3) {
        let a = noise(&[3, 12, 12], s1).map(|v| 0.3 + 0.4 * v);
        let b = noise(&[3, 12, 12], s2).map(|v| 0.3 + 0.4 * v);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let a2 = a.map(|v| v + shift);
        prop_assert!((ssim(&a2, &a2).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!(ssim(&a, &a2).unwrap() < 1.0);
    }

    #[test]
    fn spearman_monotone_invariance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let r = spearman(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| (3.0 * v).exp()).collect();
        let y2: Vec<f64> = y.iter().map(|v| v.powi(3) - 7.0).collect();
        prop_assert!((spearman(&x2, &y2).unwrap() - r).abs() <= 1e-12);
    }
}

#[test]
fn spearman_rank_identities() {
    let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| v * v + 1.0).collect();
    assert_eq!(spearman(&x, &y).unwrap(), 1.0);
    let rev: Vec<f64> = y.iter().map(|v| -v).collect();
    assert_eq!(spearman(&x, &rev).unwrap(), -1.0);
}

#[test]
fn spearman_of_independent_pairs_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    assert!(spearman(&x, &y).unwrap().abs() < 0.1);
}

#[test]
fn spearman_needs_twenty_samples() {
    let x: Vec<f64> = (0..19).map(|i| i as f64).collect();
    assert!(matches!(spearman(&x, &x), Err(CoreError::Usage(_))));
}

fn sge_pyramid(q: f64) -> (Graph<f64>, sge_core::model::Pyramid<f64>) {
    let mut cfg = RunConfig::new(4, 3, vec![4, 4, 4, 4]);
    cfg.scem_percentile = q;
    let spec = ModelSpec::from(&cfg);
    let p = init_generator::<f64>(&spec, 5).unwrap();
    let mask = sge_core::mask::gen_center_mask((32, 32), (16, 16)).unwrap();
    let gt = noise(&[3, 32, 32], 6).cast::<f32>();
    let corrupted = Tensor::from_fn(&[3, 32, 32], |i| gt.data()[i] * mask.data()[i % 1024]);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let pyr = forward(&mut g, &b, &spec, &ModelInput::new(&corrupted, &mask).unwrap()).unwrap();
    (g, pyr)
}

#[test]
fn shrinkage_profile_under_fixed_percentile() {
    let (_, pyr) = sge_pyramid(25.0);
    let profile = shrinkage_profile(&pyr).unwrap();
    assert_eq!(profile.iter().map(|p| p.0).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    assert_eq!(profile[0].1, 1.0);
    for &(_, f) in &profile[1..] {
        assert_eq!(f, 0.25);
    }
}

#[test]
fn all_reliable_masks_profile_zero() {
    let (_, mut pyr) = sge_pyramid(25.0);
    for s in &mut pyr.scales {
        s.reliability = Some(Tensor::ones(s.hole_mask.shape()));
    }
    assert!(shrinkage_profile(&pyr).unwrap()[1..].iter().all(|p| p.1 == 0.0));
}

#[test]
fn shrinkage_needs_sge() {
    let (_, mut pyr) = sge_pyramid(25.0);
    pyr.variant = Variant::Sg;
    assert!(matches!(shrinkage_profile(&pyr), Err(CoreError::Usage(_))));
}

fn row(stem: &str, v: f64, shrink: bool) -> EvalRow {
    EvalRow {
        stem: stem.into(),
        psnr: 20.0 + v,
        psnr_hole: 15.0 + v,
        ssim: 0.5 + v / 100.0,
        hole_l1: 0.1 * v,
        confidence: vec![0.5, 0.6 + v / 100.0],
        unreliable: shrink.then(|| vec![0.25, 0.25]),
    }
}

#[test]
fn csv_layout() {
    let rep = EvalReport {
        scales: vec![2, 1],
        rows: vec![row("b", 1.0, true), row("a", 2.0, true)],
    };
    let csv = rep.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "stem,psnr,psnr_hole,ssim,hole_l1,conf_s2,conf_s1,unreliable_s2,unreliable_s1"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("AGGREGATE,21.5,16.5,"));
    let plain = EvalReport {
        scales: vec![2, 1],
        rows: vec![row("a", 2.0, false)],
    };
    assert!(!plain.to_csv().contains("unreliable"));
}

#[test]
fn aggregate_is_order_invariant() {
    let rows: Vec<EvalRow> = (0..7).map(|i| row(&format!("s{i}"), i as f64 * 0.37, true)).collect();
    let mut shuffled = rows.clone();
    shuffled.reverse();
    shuffled.swap(1, 4);
    let agg = |rows: Vec<EvalRow>| EvalReport { scales: vec![2, 1], rows }.to_csv().lines().last().unwrap().to_string();
    assert_eq!(agg(rows), agg(shuffled));
}
