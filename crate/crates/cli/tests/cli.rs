use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sge_core::checkpoint::Checkpoint;
use sge_core::dataset::{read_dataset, read_image, read_mask, MANIFEST};
use sge_core::pnm;

fn sge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: usize, size: usize, hole: usize) {
    let o = sge(&[
        "gen-data",
        "--out",
        p(dir),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--classes",
        "4",
        "--seed",
        "5",
        "--hole",
        &hole.to_string(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
}

const TINY: &str = "scales=3\nclasses=4\nwidths=4,6,8\nsize=16\nbatch=2\nsteps=3\nsave_every=0\ndisc_width=4\n";

fn train_tiny(root: &Path, config: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let data = root.join("data");
    if !data.exists() {
        gen(&data, 4, 16, 8);
    }
    let cfg = root.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    let out = root.join("run");
    let mut args = vec!["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)];
    args.extend_from_slice(extra);
    (sge(&args), out)
}

#[test]
fn gen_data_writes_three_files_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let o = sge(&[
        "gen-data",
        "--out",
        p(dir.path()),
        "--count",
        "10",
        "--size",
        "64",
        "--classes",
        "4",
        "--seed",
        "1",
        "--mask",
        "center",
        "--hole",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(text(&o.stdout).trim(), "generated 10 samples at 64x64 K=4");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 31);
    let stems = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(stems.lines().filter(|l| !l.starts_with('#')).count(), 10);

    let mask = read_mask(&dir.path().join("sample_00000.mask.pgm")).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let hole = (16..48).contains(&y) && (16..48).contains(&x);
            assert_eq!(mask.data()[y * 64 + x], if hole { 0.0 } else { 1.0 });
        }
    }

    let again = tempfile::tempdir().unwrap();
    sge(&[
        "gen-data",
        "--out",
        p(again.path()),
        "--count",
        "10",
        "--size",
        "64",
        "--classes",
        "4",
        "--seed",
        "1",
        "--mask",
        "center",
        "--hole",
        "32",
    ]);
    for e in fs::read_dir(dir.path()).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(again.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn help_and_flag_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = sge(&["gen-data", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("--count"));
    assert_eq!(sge(&["gen-data", "--out", p(&out), "--count", "ten"]).status.code(), Some(2));
    assert_eq!(
        sge(&["gen-data", "--out", p(&out), "--count", "2", "--classes", "12"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sge(&["gen-data", "--out", p(&out), "--count", "2", "--size", "16", "--hole", "20"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sge(&["frobnicate"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_tiny(dir.path(), "classes=4\nwidths=4,6,8\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("`scales`"), "{}", text(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn variant_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_tiny(dir.path(), &format!("{TINY}variant=sge\nlambda_adv=0\n"), &["--variant", "sg"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let ck = Checkpoint::load(&out.join("final.sgen")).unwrap();
    let names = ck.generator.names();
    assert!(names.iter().any(|n| n.contains(".mod.")));
    assert!(!names.iter().any(|n| n.contains(".bi") || n.contains(".memb")), "{names:?}");
}

#[test]
fn nan_abort_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = train_tiny(dir.path(), &format!("{}lr=1e30\n", TINY.replace("steps=3", "steps=20")), &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(text(&o.stderr).contains("non-finite"), "{}", text(&o.stderr));
    assert!(out.join("abort.sgen").exists());
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_sge"))
        .args(["selfcheck"])
        .env("SGE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("SGE_THREADS"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{TINY}lambda_adv=0\n");
    let (_, a) = train_tiny(dir.path(), &cfg, &[]);
    let a = fs::read(a.join("final.sgen")).unwrap();
    let (_, b) = train_tiny(dir.path(), &cfg, &["--seed", "9"]);
    assert_ne!(fs::read(b.join("final.sgen")).unwrap(), a);
}

#[test]
fn infer_composites_and_emits_scales() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 2, 32, 12);
    let cfg = dir.path().join("l5.cfg");
    fs::write(
        &cfg,
        "scales=5\nclasses=4\nwidths=4,4,4,4,4\nsize=32\nbatch=1\nsteps=1\nsave_every=0\nlambda_adv=0\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    assert!(sge(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)])
        .status
        .success());

    let out = dir.path().join("pred");
    let img = data.join("sample_00001.img.ppm");
    let mask = data.join("sample_00001.mask.pgm");
    let ck = run.join("final.sgen");
    let o = sge(&[
        "infer",
        "--ckpt",
        p(&ck),
        "--image",
        p(&img),
        "--mask",
        p(&mask),
        "--out",
        p(&out),
        "--emit-scales",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let input = pnm::decode(&fs::read(&img).unwrap(), "in").unwrap();
    let result = pnm::decode(&fs::read(out.join("final.ppm")).unwrap(), "out").unwrap();
    let m = read_mask(&mask).unwrap();
    let hw = 32 * 32;
    for px in 0..hw {
        if m.data()[px] == 1.0 {
            for c in 0..3 {
                assert_eq!(result.bytes[px * 3 + c], input.bytes[px * 3 + c]);
            }
        }
    }
    for l in 1..=4 {
        for kind in ["img.ppm", "seg.pgm", "rel.pgm", "conf.pgm"] {
            assert!(out.join(format!("scale{l}.{kind}")).exists(), "scale{l}.{kind}");
        }
        let rel = pnm::decode(&fs::read(out.join(format!("scale{l}.rel.pgm"))).unwrap(), "rel").unwrap();
        assert!(rel.bytes.iter().all(|&b| b == 0 || b == 255));
        let seg = pnm::decode(&fs::read(out.join(format!("scale{l}.seg.pgm"))).unwrap(), "seg").unwrap();
        assert_eq!(seg.width, 32 >> (l - 1));
        assert!(seg.bytes.iter().all(|&b| b < 4));
    }
    assert!(!out.join("scale5.img.ppm").exists());

    let big = dir.path().join("big");
    gen(&big, 1, 64, 16);
    let o = sge(&[
        "infer",
        "--ckpt",
        p(&ck),
        "--image",
        p(&big.join("sample_00000.img.ppm")),
        "--mask",
        p(&big.join("sample_00000.mask.pgm")),
        "--out",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("64x64") && err.contains("32x32"), "{err}");
    assert!(read_image(&img).is_ok());
}

#[test]
fn eval_and_confidence_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (o, run) = train_tiny(dir.path(), &format!("{TINY}lambda_adv=0\n"), &[]);
    assert!(o.status.success());
    let ck = run.join("final.sgen");
    let val = dir.path().join("val");
    gen(&val, 24, 16, 8);

    let csv = dir.path().join("eval.csv");
    let o = sge(&["eval", "--ckpt", p(&ck), "--data", p(&val), "--out", p(&csv)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let body = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(
        lines[0],
        "stem,psnr,psnr_hole,ssim,hole_l1,conf_s2,conf_s1,unreliable_s2,unreliable_s1"
    );
    assert_eq!(lines.len(), 26);
    assert!(lines.iter().all(|l| l.split(',').count() == 9));

    let conf = dir.path().join("conf.csv");
    let o = sge(&["analyze-confidence", "--ckpt", p(&ck), "--data", p(&val), "--out", p(&conf)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let body = fs::read_to_string(&conf).unwrap();
    assert_eq!(body.lines().next(), Some("stem,mean_confidence,hole_l1"));
    let rho: f64 = body.lines().last().unwrap().strip_prefix("spearman,").unwrap().parse().unwrap();
    assert!((-1.0..=1.0).contains(&rho));

    let empty = dir.path().join("empty");
    assert!(sge(&["gen-data", "--out", p(&empty), "--count", "0", "--size", "16"])
        .status
        .success());
    assert!(read_dataset(&empty).unwrap().is_empty());
    for cmd in ["eval", "analyze-confidence"] {
        let o = sge(&[cmd, "--ckpt", p(&ck), "--data", p(&empty), "--out", p(&dir.path().join("e.csv"))]);
        assert_eq!(o.status.code(), Some(2));
        assert!(text(&o.stderr).contains("no samples"));
    }
    let o = sge(&["eval", "--ckpt", p(&ck), "--data", p(&dir.path().join("nowhere")), "--out", p(&csv)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn selfcheck_passes_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let o = sge(&["selfcheck", "--dump-tensors", p(dir.path())]);
    let out = text(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert!(out.lines().any(|l| l.starts_with("PASS conv2d ")));
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("conv2d.input0.tnsr").exists());
}
