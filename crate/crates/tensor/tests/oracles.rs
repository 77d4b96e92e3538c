use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge_tensor::{grad_check, ConvGeom, Graph, Result, Tensor, UpsampleMode, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

/// Direct nested-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], geom: ConvGeom) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let (s, p, d) = (geom.stride as i64, geom.pad as i64, geom.dilation as i64);
    let ho = ((h as i64 + 2 * p - d * (kh as i64 - 1) - 1) / s + 1) as usize;
    let wo = ((wd as i64 + 2 * p - d * (kw as i64 - 1) - 1) / s + 1) as usize;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as i64 * s + ky as i64 * d - p;
                                let ix = ox as i64 * s + kx as i64 * d - p;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

fn conv_via_graph(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], geom: ConvGeom) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(vec![b.len()], b.to_vec()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
    g.value(y).clone()
}

fn assert_rel_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(1e-12);
        assert!((x - y).abs() / denom <= tol || (x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn conv_matches_nested_loops_fixed_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = [0.1, -0.2, 0.3];
    let geom = ConvGeom::same(1);
    assert_rel_close(&conv_via_graph(&x, &w, &b, geom), &naive_conv(&x, &w, &b, geom), 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3, dilation in 1usize..3, seed in any::<u64>(),
    ) {
        let geom = ConvGeom { stride, pad, dilation };
        let span = dilation * (k - 1) + 1;
        prop_assume!(h + 2 * pad >= span && w + 2 * pad >= span);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_rel_close(&conv_via_graph(&x, &wt, &b, geom), &naive_conv(&x, &wt, &b, geom), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), k in 2usize..6, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[2, k, 3, 4], &mut rng).map(|v| v * scale);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let y = g.softmax_channels(x).unwrap();
        let p = g.value(y).data();
        for b in 0..2 {
            for px in 0..12 {
                let s: f64 = (0..k).map(|c| p[(b * k + c) * 12 + px]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!((0..k).all(|c| p[(b * k + c) * 12 + px] >= 0.0));
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(seed in any::<u64>(), ca in 1usize..4, cb in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, ca, 3, 2], &mut rng);
        let b = random(&[2, cb, 3, 2], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat_channels(av, bv).unwrap();
        let ra = g.slice_channels(c, 0, ca).unwrap();
        let rb = g.slice_channels(c, ca, cb).unwrap();
        prop_assert_eq!(g.value(ra), &a);
        prop_assert_eq!(g.value(rb), &b);
    }

    #[test]
    fn standardized_channels(seed in any::<u64>(), offset in -5.0f64..5.0, scale in 0.3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 3, 6, 6], &mut rng).map(|v| v * scale + offset);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let z = g.standardize(xv).unwrap();
        let z = g.value(z).data();
        for c in 0..3 {
            let ch = &z[c * 36..(c + 1) * 36];
            let mean = ch.iter().sum::<f64>() / 36.0;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0).sqrt();
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((std - 1.0).abs() <= 1e-3);
        }
    }
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Reduces an arbitrary tensor to a scalar with position-dependent weights so
/// that every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| 0.3 + (i * 37 % 11) as f64 / 7.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

#[test]
fn every_differentiable_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let img = [1, 2, 4, 4];
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "conv2d",
            vec![random(&img, &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(1))?;
                weighted_sum(g, y)
            },
        ),
        (
            "conv2d_stride_dilation",
            vec![random(&[1, 2, 6, 6], &mut rng), random(&[2, 2, 3, 3], &mut rng)],
            |g, v| {
                let y = g.conv2d(
                    v[0],
                    v[1],
                    None,
                    ConvGeom {
                        stride: 2,
                        pad: 2,
                        dilation: 2,
                    },
                )?;
                weighted_sum(g, y)
            },
        ),
        ("upsample_nearest", vec![random(&img, &mut rng)], |g, v| {
            let y = g.upsample(v[0], 2, UpsampleMode::Nearest)?;
            weighted_sum(g, y)
        }),
        ("upsample_bilinear", vec![random(&img, &mut rng)], |g, v| {
            let y = g.upsample(v[0], 4, UpsampleMode::Bilinear)?;
            weighted_sum(g, y)
        }),
        ("avg_pool2", vec![random(&img, &mut rng)], |g, v| {
            let y = g.avg_pool2(v[0])?;
            weighted_sum(g, y)
        }),
        ("leaky_relu", vec![random(&img, &mut rng)], |g, v| {
            let y = g.leaky_relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("relu", vec![random(&img, &mut rng)], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("tanh", vec![random(&img, &mut rng)], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![random(&img, &mut rng)], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        ("log", vec![positive(&img, &mut rng)], |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y)
        }),
        ("exp", vec![random(&img, &mut rng)], |g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y)
        }),
        ("sqrt", vec![positive(&img, &mut rng)], |g, v| {
            let y = g.sqrt(v[0])?;
            weighted_sum(g, y)
        }),
        ("abs", vec![random(&img, &mut rng)], |g, v| {
            let y = g.abs(v[0])?;
            weighted_sum(g, y)
        }),
        ("scalar_ops", vec![random(&img, &mut rng)], |g, v| {
            let y = g.mul_scalar(v[0], -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.clamp_min(y, 0.05)?;
            weighted_sum(g, y)
        }),
        (
            "add_sub_mul_div",
            vec![random(&img, &mut rng), random(&img, &mut rng), positive(&img, &mut rng)],
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.mul(a, v[1])?;
                let c = g.sub(b, v[0])?;
                let d = g.div(c, v[2])?;
                weighted_sum(g, d)
            },
        ),
        (
            "channel_broadcast",
            vec![random(&img, &mut rng), positive(&[2], &mut rng)],
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let b = g.div(a, v[1])?;
                let c = g.add(b, v[1])?;
                let c = g.mul(c, v[1])?;
                weighted_sum(g, c)
            },
        ),
        (
            "suffix_broadcast",
            vec![random(&img, &mut rng), random(&[4, 4], &mut rng)],
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let a = g.sub(a, v[1])?;
                weighted_sum(g, a)
            },
        ),
        (
            "concat_slice",
            vec![random(&img, &mut rng), random(&[1, 3, 4, 4], &mut rng)],
            |g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let s = g.slice_channels(c, 1, 3)?;
                weighted_sum(g, s)
            },
        ),
        ("softmax_channels", vec![random(&[1, 4, 3, 3], &mut rng)], |g, v| {
            let y = g.softmax_channels(v[0])?;
            weighted_sum(g, y)
        }),
        ("normalize_channels", vec![positive(&[1, 3, 3, 3], &mut rng)], |g, v| {
            let y = g.normalize_channels(v[0])?;
            weighted_sum(g, y)
        }),
        ("channel_stats", vec![random(&img, &mut rng)], |g, v| {
            let (mu, sigma) = g.channel_stats(v[0])?;
            let a = weighted_sum(g, mu)?;
            let b = weighted_sum(g, sigma)?;
            let c = g.add(a, b)?;
            let z = g.standardize(v[0])?;
            let d = weighted_sum(g, z)?;
            g.add(c, d)
        }),
        ("mean", vec![random(&img, &mut rng)], |g, v| {
            let sq = g.square(v[0])?;
            g.mean(sq)
        }),
        ("composite", vec![random(&img, &mut rng), random(&img, &mut rng)], |g, v| {
            let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| if (5..11).contains(&i) { 0.0 } else { 1.0 });
            let y = g.composite(v[0], v[1], &mask)?;
            weighted_sum(g, y)
        }),
        ("bce_with_logits", vec![random(&[1, 1, 3, 3], &mut rng).map(|v| v * 4.0)], |g, v| {
            let a = g.bce_with_logits(v[0], 1.0)?;
            let b = g.bce_with_logits(v[0], 0.0)?;
            let b = g.mul_scalar(b, 0.5)?;
            g.add(a, b)
        }),
    ];
    for (name, inputs, build) in cases {
        let report = grad_check(&inputs, 1e-5, build).unwrap();
        println!("{name:<24} max_rel_err {:.3e}", report.max_rel_err);
        assert!(report.max_rel_err <= 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn mul_gradient_matches_central_difference() {
    let inputs = vec![Tensor::scalar(2.0), Tensor::scalar(3.0)];
    let mut g = Graph::new();
    let a = g.param(inputs[0].clone());
    let b = g.param(inputs[1].clone());
    let y = g.mul(a, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!((g.grad(a).unwrap().item(), g.grad(b).unwrap().item()), (3.0, 2.0));
    let report = grad_check(&inputs, 1e-5, |g, v| g.mul(v[0], v[1])).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn conv_leaky_relu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let inputs = vec![
        random(&[1, 3, 6, 6], &mut rng),
        random(&[4, 3, 3, 3], &mut rng),
        random(&[4], &mut rng),
        random(&[2, 4, 3, 3], &mut rng),
    ];
    let report = grad_check(&inputs, 1e-6, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::down2())?;
        let y = g.leaky_relu(y)?;
        let y = g.conv2d(y, v[3], None, ConvGeom::same(2))?;
        let y = g.leaky_relu(y)?;
        weighted_sum(g, y)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&[1, 3, 16, 16], &mut rng).cast());
        let w = g.param(random(&[8, 3, 3, 3], &mut rng).cast());
        let y = g.conv2d(x, w, None, ConvGeom::same(1)).unwrap();
        let y = g.upsample(y, 2, UpsampleMode::Bilinear).unwrap();
        let y = g.standardize(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
