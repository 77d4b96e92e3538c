//! `sge` subcommands. `run` is the whole program minus logger setup, so tests
//! can drive it in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sge_core::checkpoint::Checkpoint;
use sge_core::config::{RunConfig, Variant};
use sge_core::dataset::{generate, read_dataset, read_image, read_mask, write_dataset, write_gray, write_image, GenOptions, MaskKind};
use sge_core::fsutil::{atomic_write, ensure_dir, read_file};
use sge_core::inference::{evaluate, infer};
use sge_core::model::ModelSpec;
use sge_core::selfcheck::run_selfcheck;
use sge_core::train::{init_global_pool, run_ablation, train, TrainOptions};
use sge_core::{CoreError, Result};
use sge_tensor::{Tensor, TensorError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SELFCHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "sge", version, about = "Semantic-guided multi-scale inpainting on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskArg {
    Center,
    Irregular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Basic,
    Sg,
    Sge,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Basic => Variant::Basic,
            VariantArg::Sg => Variant::Sg,
            VariantArg::Sge => Variant::Sge,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (images, masks, label maps, manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "center")]
        mask: MaskArg,
        /// Centre hole side; defaults to half the image size.
        #[arg(long)]
        hole: Option<usize>,
    },
    /// Train a generator (and discriminator when the adversarial weight is positive).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Snapshot-evaluation set; the training set when absent.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Inpaint one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-scale images, label maps, reliability and confidence maps.
        #[arg(long)]
        emit_scales: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample in-hole confidence against hole L1, with a rank-correlation footer.
    AnalyzeConfidence {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks and model invariants.
    Selfcheck {
        /// Directory receiving the op-check inputs.
        #[arg(long)]
        dump_tensors: Option<PathBuf>,
    },
    /// Train basic, sg and sge for each seed and tabulate validation hole PSNR.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

pub fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::NonFinite { .. } | CoreError::Tensor(TensorError::NonFinite(_)) => EXIT_NUMERIC,
        CoreError::Io { .. } | CoreError::Parse { .. } | CoreError::Load { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<RunConfig> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CoreError::Parse {
        file: path.display().to_string(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "config is not UTF-8".into(),
    })?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn non_empty(dir: &Path) -> Result<Vec<sge_core::dataset::DatasetEntry>> {
    let data = read_dataset(dir)?;
    if data.is_empty() {
        return Err(CoreError::Usage("no samples".into()));
    }
    Ok(data)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    init_global_pool()?;
    match command {
        Command::GenData {
            out: dir,
            count,
            size,
            classes,
            seed,
            mask,
            hole,
        } => {
            let mask = match mask {
                MaskArg::Center => MaskKind::Center(hole.unwrap_or(size / 2)),
                MaskArg::Irregular => {
                    if hole.is_some() {
                        return Err(CoreError::Usage("--hole applies to --mask center only".into()));
                    }
                    MaskKind::Irregular
                }
            };
            let entries = generate(&GenOptions {
                count,
                size,
                classes,
                seed,
                mask,
            })?;
            write_dataset(&dir, &entries)?;
            let _ = writeln!(out, "generated {count} samples at {size}x{size} K={classes}");
        }
        Command::Train {
            config,
            data,
            out: dir,
            variant,
            seed,
            steps,
            eval_data,
            resume,
        } => {
            let mut cfg = load_config(&config, seed, steps)?;
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            let data = non_empty(&data)?;
            let eval_set = eval_data.as_deref().map(non_empty).transpose()?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(r) = &resume {
                if r.config.variant != cfg.variant || r.config.widths != cfg.widths {
                    return Err(CoreError::Config("resume checkpoint does not match the config".into()));
                }
            }
            let summary = train(&cfg, &data, &dir, TrainOptions { eval_set, resume })?;
            let last = summary.rows.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "trained {} {} steps, final loss {last:.6}, checkpoint {}",
                cfg.variant,
                summary.rows.len(),
                summary.final_checkpoint.display()
            );
        }
        Command::Infer {
            ckpt,
            image,
            mask,
            out: dir,
            emit_scales,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let img = read_image(&image)?;
            let m = read_mask(&mask)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let size = ckpt.config.size;
            if (h, w) != (size, size) {
                return Err(CoreError::Config(format!("image is {h}x{w}, checkpoint expects {size}x{size}")));
            }
            if m.shape()[1..] != [h, w] {
                return Err(CoreError::Config(format!(
                    "mask is {}x{}, image is {h}x{w}",
                    m.shape()[1],
                    m.shape()[2]
                )));
            }
            let hw = h * w;
            let corrupted = Tensor::from_fn(img.shape(), |i| img.data()[i] * m.data()[i % hw]);
            let spec = ModelSpec::from(&ckpt.config);
            let res = infer(&spec, &ckpt.generator, &corrupted, &m)?;
            ensure_dir(&dir)?;
            write_image(&dir.join("final.ppm"), &res.prediction.final_image)?;
            if emit_scales {
                for s in &res.scales {
                    let l = s.scale;
                    write_image(&dir.join(format!("scale{l}.img.ppm")), &s.image)?;
                    write_gray(&dir.join(format!("scale{l}.seg.pgm")), s.height, s.width, s.seg.clone())?;
                    write_gray(&dir.join(format!("scale{l}.conf.pgm")), s.height, s.width, s.confidence.clone())?;
                    if let Some(rel) = &s.reliability {
                        write_gray(&dir.join(format!("scale{l}.rel.pgm")), s.height, s.width, rel.clone())?;
                    }
                }
            }
            let _ = writeln!(out, "wrote {}", dir.join("final.ppm").display());
        }
        Command::Eval { ckpt, data, out: csv } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = evaluate(&ckpt, &non_empty(&data)?)?;
            atomic_write(&csv, report.to_csv().as_bytes())?;
            let (p, _) = report.mean_std_of(|r| r.psnr);
            let (ph, _) = report.mean_std_of(|r| r.psnr_hole);
            let (s, _) = report.mean_std_of(|r| r.ssim);
            let _ = writeln!(out, "{} samples: psnr {p:.3} psnr_hole {ph:.3} ssim {s:.4}", report.rows.len());
        }
        Command::AnalyzeConfidence { ckpt, data, out: csv } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let report = evaluate(&ckpt, &non_empty(&data)?)?;
            atomic_write(&csv, report.confidence_csv()?.as_bytes())?;
            let _ = writeln!(
                out,
                "spearman {:.4} over {} samples",
                report.confidence_correlation()?,
                report.rows.len()
            );
        }
        Command::Selfcheck { dump_tensors } => {
            if let Some(d) = &dump_tensors {
                ensure_dir(d)?;
            }
            let results = run_selfcheck(dump_tensors.as_deref())?;
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                let _ = writeln!(out, "{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let _ = writeln!(out, "{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(EXIT_SELFCHECK);
            }
        }
        Command::Ablate {
            config,
            train: train_dir,
            val,
            out: dir,
            seeds,
            steps,
        } => {
            let cfg = load_config(&config, None, steps)?;
            if seeds.len() < 3 {
                return Err(CoreError::Usage(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
            }
            let (tr, va) = (non_empty(&train_dir)?, non_empty(&val)?);
            let table = run_ablation(&cfg, &tr, &va, &seeds, &dir)?;
            let csv = table.to_csv();
            atomic_write(&dir.join("ablation.csv"), csv.as_bytes())?;
            let _ = write!(out, "{csv}");
        }
    }
    Ok(EXIT_OK)
}
