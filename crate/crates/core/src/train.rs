//! Deterministic training loop, checkpoint cadence and the variant ablation.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sge_tensor::{Graph, Tensor, TensorError};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Variant};
use crate::dataset::DatasetEntry;
use crate::error::{CoreError, Result};
use crate::fsutil::ensure_dir;
use crate::inference::evaluate;
use crate::losses::{disc_loss, final_loss, init_discriminator, init_feature_extractor, LossBreakdown, LossWeights};
use crate::metrics::{mean_std, sig6};
use crate::model::{forward, ModelInput, ModelSpec};
use crate::optim::{sum_grads, Adam, AdamConfig};
use crate::params::ParamSet;

pub const LOG_FILE: &str = "log.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const FINAL_CKPT: &str = "final.sgen";
pub const BEST_CKPT: &str = "best.sgen";
pub const ABORT_CKPT: &str = "abort.sgen";
pub const LOG_HEADER: &str = "step,loss_total,loss_re,loss_adv_g,loss_adv_d,loss_se,eval_psnr,eval_psnr_hole";

/// Discriminator seed offset from the run seed.
const DISC_SEED_SALT: u64 = 0xd15c_0000_0000_0001;

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Dataset indices for 0-based `step`: a reshuffled pass per epoch,
/// consumed `batch` at a time.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("filled").1[(pos % n as u64) as usize]);
    }
    out
}

/// Worker count from `SGE_THREADS`, else rayon's default.
pub fn thread_count() -> Result<usize> {
    match std::env::var("SGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CoreError::config(format!("SGE_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

pub fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| CoreError::config(format!("thread pool: {e}")))
}

/// Sizes rayon's global pool (used by evaluation) from `SGE_THREADS`.
/// Later calls are no-ops.
pub fn init_global_pool() -> Result<()> {
    let n = thread_count()?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub adv_d: f64,
    /// `(psnr, psnr_hole)` when an eval snapshot ran at this step.
    pub eval: Option<(f64, f64)>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.step,
            sig6(self.loss.total),
            sig6(self.loss.recon),
            sig6(self.loss.adv_g),
            sig6(self.adv_d),
            sig6(self.loss.seg)
        );
        match self.eval {
            Some((p, ph)) => {
                let _ = write!(s, ",{},{}", sig6(p), sig6(ph));
            }
            None => s.push_str(",,"),
        }
        s
    }
}

/// Mutable training state; round-trips through [`Checkpoint`].
pub struct TrainState {
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub step: u64,
    pub generator: ParamSet<f32>,
    pub discriminator: Option<ParamSet<f32>>,
    pub opt_g: Adam,
    pub opt_d: Option<Adam>,
    pub extractor: ParamSet<f32>,
    pub disc_updates: u64,
}

struct SamplePass {
    grads: Vec<Tensor<f32>>,
    loss: LossBreakdown,
    fake: Tensor<f32>,
}

fn non_finite(e: CoreError, context: impl FnOnce() -> String) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NonFinite(op)) => CoreError::NonFinite {
            what: format!("value in `{op}` ({})", context()),
        },
        CoreError::NonFinite { what } => CoreError::NonFinite {
            what: format!("{what} ({})", context()),
        },
        other => other,
    }
}

fn image4(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshape(&shape)?)
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec::from(config);
        let generator = init_generator_for(config)?;
        let discriminator = if config.lambda_adv > 0.0 {
            Some(init_discriminator::<f32>(config.disc_width, config.seed ^ DISC_SEED_SALT)?)
        } else {
            None
        };
        let adam = AdamConfig::from(config);
        Ok(Self {
            opt_g: Adam::new(adam, &generator),
            opt_d: discriminator.as_ref().map(|d| Adam::new(adam, d)),
            config: config.clone(),
            spec,
            step: 0,
            generator,
            discriminator,
            extractor: init_feature_extractor()?,
            disc_updates: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut state = Self::new(&ckpt.config)?;
        state.step = ckpt.step;
        state.opt_g = ckpt
            .opt_g
            .unwrap_or_else(|| Adam::new(AdamConfig::from(&ckpt.config), &ckpt.generator));
        state.generator = ckpt.generator;
        if state.discriminator.is_some() {
            let d = ckpt.discriminator.ok_or_else(|| CoreError::Load {
                field: "disc".into(),
                msg: "adversarial run but no discriminator in checkpoint".into(),
            })?;
            state.opt_d = Some(ckpt.opt_d.unwrap_or_else(|| Adam::new(AdamConfig::from(&ckpt.config), &d)));
            state.discriminator = Some(d);
        }
        Ok(state)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            opt_g: Some(self.opt_g.clone()),
            opt_d: self.opt_d.clone(),
        }
    }

    fn generator_pass(&self, entry: &DatasetEntry) -> Result<SamplePass> {
        let s = &entry.sample;
        let input = ModelInput::<f32>::from_sample(s)?;
        let mut g = Graph::new();
        let b = self.generator.bind(&mut g, true);
        let ext = self.extractor.bind(&mut g, false);
        let disc = self.discriminator.as_ref().map(|d| d.bind(&mut g, false));
        let pyr = forward(&mut g, &b, &self.spec, &input)?;
        let target = g.constant(image4(&s.ground_truth)?);
        let seg = image4(&s.seg_onehot)?;
        let loss = final_loss(&mut g, &pyr, target, &seg, &ext, disc.as_ref(), LossWeights::from(&self.config))?;
        g.backward(loss.total)?;
        Ok(SamplePass {
            grads: b.grads(&g),
            loss: loss.breakdown,
            fake: g.value(pyr.final_image).clone(),
        })
    }

    fn disc_pass(disc: &ParamSet<f32>, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<(Vec<Tensor<f32>>, f64)> {
        let mut g = Graph::new();
        let b = disc.bind(&mut g, true);
        let r = g.constant(image4(real)?);
        let f = g.constant(fake.clone());
        let l = disc_loss(&mut g, &b, r, f)?;
        g.backward(l.total)?;
        Ok((b.grads(&g), g.value(l.total).item() as f64))
    }

    /// Dataset entries for the next step.
    pub fn next_batch<'a>(&self, data: &'a [DatasetEntry]) -> Vec<&'a DatasetEntry> {
        batch_indices(self.config.seed, data.len(), self.config.batch, self.step)
            .into_iter()
            .map(|i| &data[i])
            .collect()
    }

    /// Generator update on `batch`; returns the batch-mean loss breakdown and
    /// the composites for the discriminator.
    pub fn generator_step(&mut self, batch: &[&DatasetEntry], pool: &rayon::ThreadPool) -> Result<(LossBreakdown, Vec<Tensor<f32>>)> {
        let step = self.step;
        let passes: Vec<Result<SamplePass>> = pool.install(|| batch.par_iter().map(|e| self.generator_pass(e)).collect());
        let mut ok = Vec::with_capacity(passes.len());
        for (p, e) in passes.into_iter().zip(batch) {
            ok.push(p.map_err(|err| non_finite(err, || format!("step {}, sample `{}`", step + 1, e.stem)))?);
        }
        let grads: Vec<Vec<Tensor<f32>>> = ok.iter_mut().map(|p| std::mem::take(&mut p.grads)).collect();
        self.opt_g
            .update(&mut self.generator, &sum_grads(&grads))
            .map_err(|err| non_finite(err, || format!("step {}", step + 1)))?;

        let n = ok.len() as f64;
        let mut loss = LossBreakdown::default();
        for p in &ok {
            loss.total += p.loss.total / n;
            loss.recon += p.loss.recon / n;
            loss.adv_g += p.loss.adv_g / n;
            loss.seg += p.loss.seg / n;
        }
        Ok((loss, ok.into_iter().map(|p| p.fake).collect()))
    }

    /// Discriminator update on (ground truth, detached composite) pairs;
    /// returns the batch-mean discriminator loss, or `None` without a discriminator.
    pub fn discriminator_step(&mut self, batch: &[&DatasetEntry], fakes: &[Tensor<f32>], pool: &rayon::ThreadPool) -> Result<Option<f64>> {
        let step = self.step;
        let (Some(disc), Some(opt_d)) = (self.discriminator.as_mut(), self.opt_d.as_mut()) else {
            return Ok(None);
        };
        let snapshot = disc.clone();
        let results: Vec<Result<(Vec<Tensor<f32>>, f64)>> = pool.install(|| {
            batch
                .par_iter()
                .zip(fakes.par_iter())
                .map(|(e, f)| Self::disc_pass(&snapshot, &e.sample.ground_truth, f))
                .collect()
        });
        let n = results.len() as f64;
        let mut adv_d = 0.0;
        let mut dg = Vec::with_capacity(results.len());
        for r in results {
            let (g, l) = r.map_err(|err| non_finite(err, || format!("discriminator at step {}", step + 1)))?;
            adv_d += l / n;
            dg.push(g);
        }
        opt_d
            .update(disc, &sum_grads(&dg))
            .map_err(|err| non_finite(err, || format!("discriminator at step {}", step + 1)))?;
        self.disc_updates += 1;
        Ok(Some(adv_d))
    }

    /// One generator update followed (when adversarial) by one discriminator update.
    pub fn train_step(&mut self, data: &[DatasetEntry], pool: &rayon::ThreadPool) -> Result<LogRow> {
        let batch = self.next_batch(data);
        let (loss, fakes) = self.generator_step(&batch, pool)?;
        let adv_d = self.discriminator_step(&batch, &fakes, pool)?.unwrap_or(0.0);
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            loss,
            adv_d,
            eval: None,
        })
    }
}

fn init_generator_for(config: &RunConfig) -> Result<ParamSet<f32>> {
    crate::model::init_generator(&ModelSpec::from(config), config.seed)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Snapshot set; the training set when absent.
    pub eval_set: Option<Vec<DatasetEntry>>,
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub final_checkpoint: PathBuf,
    pub disc_updates: u64,
    pub generator: ParamSet<f32>,
}

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.sgen")
}

fn prune(out_dir: &Path, keep: usize) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(out_dir)
        .map_err(|e| CoreError::io(out_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("step_") && n.ends_with(".sgen"))
        .collect();
    names.sort();
    let excess = names.len().saturating_sub(keep.max(1));
    for n in &names[..excess] {
        let p = out_dir.join(n);
        fs::remove_file(&p).map_err(|e| CoreError::io(p, e))?;
    }
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CoreError::io(path, e))
}

/// Runs `config.steps` steps (from the resume point, if any), writing
/// `log.csv`, `timings.csv`, periodic `step_*.sgen` and `final.sgen`.
pub fn train(config: &RunConfig, data: &[DatasetEntry], out_dir: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(CoreError::Usage("no samples".into()));
    }
    config.validate()?;
    let first = &data[0].sample;
    if first.class_count() != config.classes {
        return Err(CoreError::config(format!(
            "dataset has {} classes, config has {}",
            first.class_count(),
            config.classes
        )));
    }
    ModelSpec::from(config).check_size(first.height(), first.width())?;
    ensure_dir(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let timing_path = out_dir.join(TIMINGS_FILE);

    let mut state = match opts.resume {
        Some(ckpt) => {
            let mut resumed = ckpt;
            resumed.config.steps = config.steps;
            TrainState::from_checkpoint(resumed)?
        }
        None => {
            for p in [&log_path, &timing_path] {
                crate::fsutil::atomic_write(p, b"")?;
            }
            append(&log_path, LOG_HEADER)?;
            append(&timing_path, "step,ms")?;
            TrainState::new(config)?
        }
    };
    log::info!("seed {} variant {} steps {}", config.seed, config.variant, config.steps);

    let pool = pool()?;
    let eval_data = opts.eval_set.as_deref().unwrap_or(data);
    let mut best = f64::NEG_INFINITY;
    let mut rows = Vec::new();
    while state.step < config.steps as u64 {
        let started = Instant::now();
        let mut row = match state.train_step(data, &pool) {
            Ok(r) => r,
            Err(e) => {
                if matches!(e, CoreError::NonFinite { .. }) {
                    let path = out_dir.join(ABORT_CKPT);
                    state.to_checkpoint().save(&path)?;
                    log::error!("numeric abort; state before the failing step saved to {}", path.display());
                }
                return Err(e);
            }
        };
        let s = state.step;
        if config.eval_every > 0 && s % config.eval_every as u64 == 0 {
            let report = evaluate(&state.to_checkpoint(), eval_data)?;
            let psnr = report.mean_std_of(|r| r.psnr).0;
            let hole = report.mean_std_of(|r| r.psnr_hole).0;
            row.eval = Some((psnr, hole));
            if hole > best {
                best = hole;
                state.to_checkpoint().save(&out_dir.join(BEST_CKPT))?;
            }
        }
        if config.save_every > 0 && s % config.save_every as u64 == 0 {
            state.to_checkpoint().save(&out_dir.join(step_checkpoint_name(s)))?;
            prune(out_dir, config.keep_checkpoints)?;
        }
        append(&log_path, &row.csv())?;
        append(&timing_path, &format!("{s},{:.1}", started.elapsed().as_secs_f64() * 1000.0))?;
        log::debug!("{}", row.csv());
        rows.push(row);
    }
    let final_checkpoint = out_dir.join(FINAL_CKPT);
    state.to_checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        rows,
        final_checkpoint,
        disc_updates: state.disc_updates,
        generator: state.generator,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean validation hole PSNR per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push_str(",mean,std\n");
        for r in &self.rows {
            s.push_str(r.variant.name());
            for v in &r.per_seed {
                let _ = write!(s, ",{}", sig6(*v));
            }
            let _ = writeln!(s, ",{},{}", sig6(r.mean), sig6(r.std));
        }
        s
    }
}

/// Trains every variant for every seed with the same data order and step
/// budget, then scores validation hole PSNR.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &[DatasetEntry],
    val_set: &[DatasetEntry],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(CoreError::Usage(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = v;
            cfg.seed = seed;
            let dir = out_dir.join(format!("{}_seed{seed}", v.name()));
            let summary = train(&cfg, train_set, &dir, TrainOptions::default())?;
            let ckpt = Checkpoint::load(&summary.final_checkpoint)?;
            let report = evaluate(&ckpt, val_set)?;
            let score = report.mean_std_of(|r| r.psnr_hole).0;
            log::info!("ablation {} seed {seed}: hole psnr {score:.4}", v.name());
            per_seed.push(score);
        }
        let (mean, std) = mean_std(&per_seed);
        rows.push(AblationRow {
            variant: v,
            per_seed,
            mean,
            std,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(7, n, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, n, 3, 4), batch_indices(7, n, 3, 4));
        assert_ne!(batch_indices(7, n, 10, 0), batch_indices(8, n, 10, 0));
    }
}
