//! On-disk sample sets: `<stem>.img.ppm`, `<stem>.seg.pgm`, `<stem>.mask.pgm`
//! and a `manifest.txt` listing the stems.

use std::path::Path;

use sge_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::fsutil::{atomic_write, ensure_dir, read_file};
use crate::mask::{gen_center_mask, gen_irregular_mask, IrregularMaskSpec};
use crate::pnm::{self, Raster};
use crate::scene::{gen_scene, onehot, Sample, SceneSpec, MAX_CLASSES, MIN_CLASSES};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub stem: String,
    pub sample: Sample,
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[C, H, W]` tensor in [0, 1] to an interleaved 8-bit raster.
pub fn image_to_raster(image: &Tensor<f32>) -> Raster {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let d = image.data();
    let bytes = (0..hw * c).map(|i| quantize(d[(i % c) * hw + i / c])).collect();
    Raster {
        width: w,
        height: h,
        channels: c,
        bytes,
    }
}

pub fn raster_to_image(r: &Raster) -> Tensor<f32> {
    let (c, hw) = (r.channels, r.width * r.height);
    Tensor::from_fn(&[c, r.height, r.width], |i| r.bytes[(i % hw) * c + i / hw] as f32 / 255.0)
}

pub fn mask_to_raster(mask: &Tensor<f32>) -> Raster {
    let s = mask.shape();
    Raster {
        width: s[s.len() - 1],
        height: s[s.len() - 2],
        channels: 1,
        bytes: mask.data().iter().map(|&m| if m > 0.5 { 255 } else { 0 }).collect(),
    }
}

struct Loaded {
    raster: Raster,
    file: String,
    /// Byte offset of the raster data in the file.
    start: usize,
}

fn load(dir: &Path, name: &str) -> Result<Loaded> {
    let path = dir.join(name);
    let file = path.display().to_string();
    if !path.is_file() {
        return Err(CoreError::Parse {
            file,
            offset: 0,
            msg: "file not found".into(),
        });
    }
    let buf = read_file(&path)?;
    let (raster, start) = pnm::decode_with_offset(&buf, &file)?;
    Ok(Loaded { raster, file, start })
}

fn expect_channels(r: &Raster, channels: usize, file: &str) -> Result<()> {
    if r.channels != channels {
        return Err(CoreError::Parse {
            file: file.to_string(),
            offset: 0,
            msg: format!("expected {channels} channel(s), found {}", r.channels),
        });
    }
    Ok(())
}

/// Decodes a {0, 255} mask PGM into a `[1, H, W]` tensor; `start` is the
/// raster's byte offset in `file`, used in error positions.
pub fn decode_mask(r: &Raster, file: &str, start: usize) -> Result<Tensor<f32>> {
    expect_channels(r, 1, file)?;
    let mut data = Vec::with_capacity(r.bytes.len());
    for (i, &b) in r.bytes.iter().enumerate() {
        data.push(match b {
            0 => 0.0,
            255 => 1.0,
            other => {
                return Err(CoreError::Parse {
                    file: file.to_string(),
                    offset: (start + i) as u64,
                    msg: format!("mask pixel value {other} is neither 0 nor 255"),
                })
            }
        });
    }
    Ok(Tensor::new(vec![1, r.height, r.width], data)?)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let file = path.display().to_string();
    let r = pnm::decode(&read_file(path)?, &file)?;
    expect_channels(&r, 3, &file)?;
    Ok(raster_to_image(&r))
}

pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let file = path.display().to_string();
    let (r, start) = pnm::decode_with_offset(&read_file(path)?, &file)?;
    decode_mask(&r, &file, start)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    atomic_write(path, &pnm::encode(&image_to_raster(image)))
}

pub fn write_gray(path: &Path, height: usize, width: usize, bytes: Vec<u8>) -> Result<()> {
    let r = Raster {
        width,
        height,
        channels: 1,
        bytes,
    };
    atomic_write(path, &pnm::encode(&r))
}

pub fn write_dataset(dir: &Path, entries: &[DatasetEntry]) -> Result<()> {
    ensure_dir(dir)?;
    let classes = entries.first().map(|e| e.sample.class_count()).unwrap_or(MIN_CLASSES);
    let mut manifest = format!("# classes={classes}\n");
    for e in entries {
        let s = &e.sample;
        if s.class_count() != classes {
            return Err(CoreError::config("all samples in a dataset must share the class count"));
        }
        write_image(&dir.join(format!("{}.img.ppm", e.stem)), &s.ground_truth)?;
        write_gray(&dir.join(format!("{}.seg.pgm", e.stem)), s.height(), s.width(), s.labels())?;
        atomic_write(
            &dir.join(format!("{}.mask.pgm", e.stem)),
            &pnm::encode(&mask_to_raster(&s.hole_mask)),
        )?;
        manifest.push_str(&e.stem);
        manifest.push('\n');
    }
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read_file(&path)?).map_err(|e| CoreError::Parse {
        file: path.display().to_string(),
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "manifest is not UTF-8".into(),
    })?;
    let mut classes = None;
    let mut stems = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let t = line.trim();
        if let Some(v) = t.strip_prefix("# classes=") {
            let k: usize = v.trim().parse().map_err(|_| CoreError::Parse {
                file: path.display().to_string(),
                offset,
                msg: format!("bad class count `{v}`"),
            })?;
            classes = Some(k);
        } else if !t.is_empty() && !t.starts_with('#') {
            stems.push(t.to_string());
        }
        offset += line.len() as u64 + 1;
    }
    let k = classes.ok_or_else(|| CoreError::Parse {
        file: path.display().to_string(),
        offset: 0,
        msg: "missing `# classes=K` header".into(),
    })?;
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&k) {
        return Err(CoreError::config(format!("class count {k} outside [{MIN_CLASSES}, {MAX_CLASSES}]")));
    }

    stems
        .into_iter()
        .map(|stem| {
            let img = load(dir, &format!("{stem}.img.ppm"))?;
            expect_channels(&img.raster, 3, &img.file)?;
            let seg = load(dir, &format!("{stem}.seg.pgm"))?;
            expect_channels(&seg.raster, 1, &seg.file)?;
            let mask = load(dir, &format!("{stem}.mask.pgm"))?;
            let img = img.raster;
            for l in [&seg, &mask] {
                let r = &l.raster;
                if (r.width, r.height) != (img.width, img.height) {
                    return Err(CoreError::Parse {
                        file: l.file.clone(),
                        offset: 0,
                        msg: format!("size {}x{} differs from image {}x{}", r.height, r.width, img.height, img.width),
                    });
                }
            }
            if let Some(i) = seg.raster.bytes.iter().position(|&b| b as usize >= k) {
                return Err(CoreError::Parse {
                    file: seg.file,
                    offset: (seg.start + i) as u64,
                    msg: format!("class index {} out of range for K={k}", seg.raster.bytes[i]),
                });
            }
            let hole_mask = decode_mask(&mask.raster, &mask.file, mask.start)?;
            let ground_truth = raster_to_image(&img);
            let corrupted = crate::scene::mask_image(&ground_truth, &hole_mask);
            Ok(DatasetEntry {
                stem,
                sample: Sample {
                    ground_truth,
                    seg_onehot: onehot(&seg.raster.bytes, k, img.height, img.width),
                    hole_mask,
                    corrupted,
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    /// Square hole side in pixels.
    Center(usize),
    Irregular,
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub mask: MaskKind,
}

/// Seeds for sample `index`: (scene, mask).
pub fn sample_seeds(seed: u64, index: usize) -> (u64, u64) {
    let base = seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 2);
    (base, base.wrapping_add(1) ^ 0x5DEE_CE66_D1CE_5EED)
}

pub fn generate(opts: &GenOptions) -> Result<Vec<DatasetEntry>> {
    let size = (opts.size, opts.size);
    (0..opts.count)
        .map(|i| {
            let (scene_seed, mask_seed) = sample_seeds(opts.seed, i);
            let scene = gen_scene(&SceneSpec::new(scene_seed, size, opts.classes))?;
            let mask = match opts.mask {
                MaskKind::Center(hole) => gen_center_mask(size, (hole, hole))?,
                MaskKind::Irregular => gen_irregular_mask(mask_seed, size, &IrregularMaskSpec::for_size(size))?,
            };
            Ok(DatasetEntry {
                stem: format!("sample_{i:05}"),
                sample: Sample::new(&scene, mask)?,
            })
        })
        .collect()
}

/// Re-reads a generated set through 8-bit quantization without touching disk.
pub fn quantized(entries: Vec<DatasetEntry>) -> Vec<DatasetEntry> {
    entries
        .into_iter()
        .map(|mut e| {
            let s = &mut e.sample;
            s.ground_truth = s.ground_truth.map(|v| quantize(v) as f32 / 255.0);
            s.corrupted = crate::scene::mask_image(&s.ground_truth, &s.hole_mask);
            e
        })
        .collect()
}
