//! 64-bit gradient checks of every op and of the full generator objective,
//! plus a few structural invariants.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge_tensor::{grad_check_strided, ConvGeom, GradCheckReport, Graph, Tensor, TensorError, UpsampleMode, Var};

use crate::config::{RunConfig, Variant};
use crate::error::{CoreError, Result};
use crate::fsutil::{atomic_write, ensure_dir};
use crate::losses::{final_loss, init_discriminator, init_feature_extractor, LossWeights};
use crate::mask::gen_center_mask;
use crate::model::{forward, init_generator, is_bias_net, scem_mask, ModelInput, ModelSpec};
use crate::params::ParamSet;
use crate::scene::{gen_scene, Sample, SceneSpec};

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-6;
/// Step and error-denominator floor for the full objective, where summation
/// round-off in the loss leaves ~1e-9 of noise in central differences.
pub const FULL_GRAPH_EPS: f64 = 1e-5;
pub const FULL_GRAPH_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type TResult<T> = std::result::Result<T, TensorError>;
type OpCase = (&'static str, Vec<Tensor<f64>>, fn(&mut Graph<f64>, &[Var]) -> TResult<Var>);

fn weighted_sum(g: &mut Graph<f64>, v: Var) -> TResult<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| 0.3 + (i * 37 % 11) as f64 / 7.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.2, 1.2] and random sign, away from kinks.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.2);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let img = [1, 2, 4, 4];
    vec![
        (
            "conv2d",
            vec![
                uniform(&img, -1.0, 1.0, rng),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, rng),
                uniform(&[3], -1.0, 1.0, rng),
            ],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(1))?;
                weighted_sum(g, y)
            },
        ),
        (
            "conv2d_strided_dilated",
            vec![uniform(&[1, 2, 6, 6], -1.0, 1.0, rng), uniform(&[2, 2, 3, 3], -1.0, 1.0, rng)],
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
        ("upsample_nearest", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.upsample(v[0], 2, UpsampleMode::Nearest)?;
            weighted_sum(g, y)
        }),
        ("upsample_bilinear", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.upsample(v[0], 2, UpsampleMode::Bilinear)?;
            weighted_sum(g, y)
        }),
        ("avg_pool2", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.avg_pool2(v[0])?;
            weighted_sum(g, y)
        }),
        ("leaky_relu", vec![off_zero(&img, rng)], |g, v| {
            let y = g.leaky_relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("relu", vec![off_zero(&img, rng)], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("tanh", vec![uniform(&img, -2.0, 2.0, rng)], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![uniform(&img, -3.0, 3.0, rng)], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        ("log", vec![uniform(&img, 0.2, 2.0, rng)], |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y)
        }),
        ("exp", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y)
        }),
        ("sqrt", vec![uniform(&img, 0.2, 2.0, rng)], |g, v| {
            let y = g.sqrt(v[0])?;
            weighted_sum(g, y)
        }),
        ("abs", vec![off_zero(&img, rng)], |g, v| {
            let y = g.abs(v[0])?;
            weighted_sum(g, y)
        }),
        ("square", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.square(v[0])?;
            weighted_sum(g, y)
        }),
        ("scalar_ops", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.add_scalar(v[0], 0.7)?;
            let y = g.mul_scalar(y, -1.3)?;
            weighted_sum(g, y)
        }),
        ("clamp_min", vec![uniform(&img, 0.1, 1.0, rng)], |g, v| {
            let y = g.clamp_min(v[0], 0.05)?;
            weighted_sum(g, y)
        }),
        (
            "add_sub_broadcast",
            vec![
                uniform(&img, -1.0, 1.0, rng),
                uniform(&[2], -1.0, 1.0, rng),
                uniform(&[4], -1.0, 1.0, rng),
            ],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.sub(y, v[2])?;
                weighted_sum(g, y)
            },
        ),
        (
            "mul_div_broadcast",
            vec![
                uniform(&img, -1.0, 1.0, rng),
                uniform(&img, 0.5, 1.5, rng),
                uniform(&[2], 0.5, 1.5, rng),
            ],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                let y = g.div(y, v[2])?;
                weighted_sum(g, y)
            },
        ),
        (
            "concat_slice",
            vec![uniform(&img, -1.0, 1.0, rng), uniform(&[1, 3, 4, 4], -1.0, 1.0, rng)],
            |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                let y = g.slice_channels(y, 1, 3)?;
                weighted_sum(g, y)
            },
        ),
        ("softmax_channels", vec![uniform(&[1, 4, 3, 3], -2.0, 2.0, rng)], |g, v| {
            let y = g.softmax_channels(v[0])?;
            weighted_sum(g, y)
        }),
        ("normalize_channels", vec![uniform(&[1, 3, 3, 3], 0.2, 1.0, rng)], |g, v| {
            let y = g.normalize_channels(v[0])?;
            weighted_sum(g, y)
        }),
        ("channel_mean", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.channel_mean(v[0])?;
            weighted_sum(g, y)
        }),
        ("channel_stats", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let (m, s) = g.channel_stats(v[0])?;
            let a = weighted_sum(g, m)?;
            let b = weighted_sum(g, s)?;
            g.add(a, b)
        }),
        ("standardize", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.standardize(v[0])?;
            weighted_sum(g, y)
        }),
        ("mean", vec![uniform(&img, -1.0, 1.0, rng)], |g, v| {
            let y = g.square(v[0])?;
            g.mean(y)
        }),
        (
            "composite",
            vec![uniform(&img, -1.0, 1.0, rng), uniform(&img, -1.0, 1.0, rng)],
            |g, v| {
                let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
                let y = g.composite(v[0], v[1], &mask)?;
                weighted_sum(g, y)
            },
        ),
        ("bce_with_logits", vec![uniform(&img, -3.0, 3.0, rng)], |g, v| {
            let a = g.bce_with_logits(v[0], 1.0)?;
            let b = g.bce_with_logits(v[0], 0.0)?;
            let b = g.mul_scalar(b, 0.5)?;
            g.add(a, b)
        }),
    ]
}

fn dump(dir: Option<&Path>, name: &str, inputs: &[Tensor<f64>]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    ensure_dir(dir)?;
    for (i, t) in inputs.iter().enumerate() {
        let mut buf = Vec::new();
        t.write_dump(&mut buf)?;
        atomic_write(&dir.join(format!("{name}.input{i}.tnsr")), &buf)?;
    }
    Ok(())
}

fn grad_result(name: &str, r: TResult<GradCheckReport>) -> CheckResult {
    match r {
        Ok(rep) => CheckResult {
            name: name.to_string(),
            passed: rep.max_rel_err <= GRAD_TOLERANCE,
            detail: match rep.worst {
                Some((t, e, a, n)) => format!(
                    "max_rel_err {:.3e} over {} elements (input {t} element {e}: analytic {a:.6e}, numeric {n:.6e})",
                    rep.max_rel_err, rep.checked
                ),
                None => "no elements checked".to_string(),
            },
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn to_tensor_err(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// Configuration of the end-to-end check: 16×16 input, three scales.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::new(3, 3, vec![4, 6, 8]);
    c.size = 16;
    c.disc_width = 4;
    c
}

pub fn tiny_sample(seed: u64) -> Result<Sample> {
    let scene = gen_scene(&SceneSpec::new(seed, (16, 16), 3))?;
    Sample::new(&scene, gen_center_mask((16, 16), (8, 8))?)
}

/// Generator params moved off the initial point: zero biases put hole
/// pre-activations exactly on the leaky-relu kink, and the zeroed bias-net
/// output layer would block gradient to its inputs.
fn tiny_generator(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<ParamSet<f64>> {
    let mut p = init_generator::<f64>(spec, 11)?;
    let names: Vec<String> = p.names().to_vec();
    for n in names {
        let bias = n.ends_with(".b");
        if !(bias || is_bias_net(&n)) {
            continue;
        }
        for v in p.get_mut(&n).expect("listed").data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok(p)
}

/// Gradient check of the total objective w.r.t. every generator parameter
/// (probing every `stride`-th element).
pub fn full_graph_check(variant: Variant, stride: usize) -> Result<GradCheckReport> {
    let mut cfg = tiny_config();
    cfg.variant = variant;
    let spec = ModelSpec::from(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let gen = tiny_generator(&spec, &mut rng)?;
    let ext = init_feature_extractor::<f64>()?;
    let disc = init_discriminator::<f64>(cfg.disc_width, 3)?;
    let sample = tiny_sample(5)?;
    let input = ModelInput::<f64>::from_sample(&sample)?;
    let target = sample.ground_truth.cast::<f64>().reshape(&[1, 3, 16, 16])?;
    let seg = sample.seg_onehot.cast::<f64>().reshape(&[1, 3, 16, 16])?;
    let weights = LossWeights::from(&cfg);
    let rep = grad_check_strided(gen.tensors(), FULL_GRAPH_EPS, stride, FULL_GRAPH_FLOOR, |g, vars| {
        let b = gen.bind_vars(vars.to_vec()).map_err(to_tensor_err)?;
        let e = ext.bind(g, false);
        let d = disc.bind(g, false);
        let pyr = forward(g, &b, &spec, &input).map_err(to_tensor_err)?;
        let t = g.constant(target.clone());
        let l = final_loss(g, &pyr, t, &seg, &e, Some(&d), weights).map_err(to_tensor_err)?;
        Ok(l.total)
    })?;
    Ok(rep)
}

fn invariant(name: &str, f: impl FnOnce() -> Result<Option<String>>) -> CheckResult {
    match f() {
        Ok(None) => CheckResult {
            name: name.to_string(),
            passed: true,
            detail: "ok".into(),
        },
        Ok(Some(why)) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: why,
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn sge_reduces_to_sg() -> Result<Option<String>> {
    let mut cfg = tiny_config();
    let sge_spec = ModelSpec::from(&cfg);
    cfg.variant = Variant::Sg;
    let sg_spec = ModelSpec::from(&cfg);
    let mut sge = init_generator::<f32>(&sge_spec, 4)?;
    let names: Vec<String> = sge.names().iter().filter(|n| is_bias_net(n)).cloned().collect();
    for n in names {
        sge.get_mut(&n).expect("listed").data_mut().fill(0.0);
    }
    let mut sg = ParamSet::new();
    for n in init_generator::<f32>(&sg_spec, 0)?.names() {
        sg.insert(n.clone(), sge.get(n).expect("sg params are a subset").clone())?;
    }
    let input = ModelInput::<f32>::from_sample(&tiny_sample(8)?)?;
    let run = |spec: &ModelSpec, p: &ParamSet<f32>| -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let pyr = forward(&mut g, &b, spec, &input)?;
        let mut out: Vec<Tensor<f32>> = pyr.scales.iter().map(|s| g.value(s.image).clone()).collect();
        out.push(g.value(pyr.final_image).clone());
        Ok(out)
    };
    Ok((run(&sge_spec, &sge)? != run(&sg_spec, &sg)?).then(|| "outputs differ".into()))
}

fn scem_count() -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let probs = Tensor::<f64>::from_fn(&[1, 2, 10, 10], |_| rng.random_range(0.0..1.0));
    let probs = sge_tensor::softmax_channels_tensor(&probs)?;
    let hole = Tensor::from_fn(&[1, 1, 10, 10], |i| if i < 60 { 0.0 } else { 1.0 });
    for q in [10.0, 25.0, 50.0] {
        let (m, _) = scem_mask(&probs, &hole, q, crate::config::ScemScope::Hole)?;
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
        let expected = (q / 100.0 * 60.0f64).floor() as usize;
        if zeros != expected || m.data()[60..].iter().any(|&v| v != 1.0) {
            return Ok(Some(format!("q={q}: {zeros} unreliable, expected {expected}")));
        }
    }
    Ok(None)
}

fn compositing() -> Result<Option<String>> {
    let cfg = tiny_config();
    let spec = ModelSpec::from(&cfg);
    let p = init_generator::<f32>(&spec, 2)?;
    let s = tiny_sample(3)?;
    let input = ModelInput::<f32>::from_sample(&s)?;
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let pyr = forward(&mut g, &b, &spec, &input)?;
    let out = g.value(pyr.final_image).data();
    let hw = 256;
    let bad = (0..out.len()).any(|i| s.hole_mask.data()[i % hw] == 1.0 && out[i] != s.ground_truth.data()[i]);
    Ok(bad.then(|| "known pixels changed".into()))
}

/// Runs every check; `dump_dir` receives the op-check inputs as tensor dumps.
pub fn run_selfcheck(dump_dir: Option<&Path>) -> Result<Vec<CheckResult>> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results = Vec::new();
    for (name, inputs, build) in op_cases(&mut rng) {
        dump(dump_dir, name, &inputs)?;
        results.push(grad_result(name, sge_tensor::grad_check(&inputs, FD_EPS, build)));
    }
    for (name, variant, stride) in [("full_graph_sge", Variant::Sge, 1), ("full_graph_basic", Variant::Basic, 3)] {
        let r = full_graph_check(variant, stride).map_err(to_tensor_err);
        results.push(grad_result(name, r));
    }
    results.push(invariant("bias_net_reduction", sge_reduces_to_sg));
    results.push(invariant("scem_percentile_count", scem_count));
    results.push(invariant("compositing", compositing));
    log::info!("selfcheck finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(results)
}
