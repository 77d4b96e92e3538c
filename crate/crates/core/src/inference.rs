//! Gradient-free forward passes: prediction, per-scale exports and evaluation.

use rayon::prelude::*;
use sge_tensor::{Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::Variant;
use crate::dataset::{quantize, DatasetEntry};
use crate::error::{CoreError, Result};
use crate::metrics::{self, EvalReport, EvalRow};
use crate::model::{forward, ModelInput, ModelSpec};
use crate::params::ParamSet;

/// What evaluation needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[3, H, W]` composite.
    pub final_image: Tensor<f32>,
    /// Mean in-hole confidence, scales `L-1 ..= 1`.
    pub confidence: Vec<f64>,
    /// Unreliable fraction of the hole, scales `L-1 ..= 1` (SGE only).
    pub unreliable: Option<Vec<f64>>,
}

/// Exportable maps of one decoder scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMaps {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    /// `[3, h, w]`
    pub image: Tensor<f32>,
    /// Argmax class per pixel.
    pub seg: Vec<u8>,
    /// {0, 255}; SGE only.
    pub reliability: Option<Vec<u8>>,
    /// Max class probability quantized to 8 bits.
    pub confidence: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub prediction: Prediction,
    pub scales: Vec<ScaleMaps>,
}

fn argmax_channels(probs: &Tensor<f32>) -> Vec<u8> {
    let s = probs.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let p = probs.data();
    (0..hw)
        .map(|px| {
            (0..k)
                .max_by(|&a, &b| p[a * hw + px].total_cmp(&p[b * hw + px]).then(b.cmp(&a)))
                .unwrap_or(0) as u8
        })
        .collect()
}

/// Runs the generator on one corrupted image without recording gradients.
pub fn infer(spec: &ModelSpec, generator: &ParamSet<f32>, corrupted: &Tensor<f32>, mask: &Tensor<f32>) -> Result<InferOutput> {
    let input = ModelInput::<f32>::new(corrupted, mask)?;
    let (h, w) = input.size();
    let mut g = Graph::new();
    let b = generator.bind(&mut g, false);
    let pyr = forward(&mut g, &b, spec, &input)?;
    let final_image = g.value(pyr.final_image).clone().reshape(&[3, h, w])?;
    let confidence = metrics::hole_confidence(&pyr).into_iter().map(|(_, c)| c).collect();
    let unreliable = match spec.variant {
        Variant::Sge => Some(metrics::shrinkage_profile(&pyr)?.into_iter().skip(1).map(|(_, f)| f).collect()),
        _ => None,
    };
    let scales = pyr
        .scales
        .iter()
        .map(|s| {
            let img = g.value(s.image);
            let (sh, sw) = (img.shape()[2], img.shape()[3]);
            Ok(ScaleMaps {
                scale: s.scale,
                height: sh,
                width: sw,
                image: img.clone().reshape(&[3, sh, sw])?,
                seg: argmax_channels(g.value(s.seg_probs)),
                reliability: s
                    .reliability
                    .as_ref()
                    .map(|m| m.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect()),
                confidence: s.confidence.data().iter().map(|&c| quantize(c)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferOutput {
        prediction: Prediction {
            final_image,
            confidence,
            unreliable,
        },
        scales,
    })
}

pub fn predict(spec: &ModelSpec, generator: &ParamSet<f32>, entry: &DatasetEntry) -> Result<Prediction> {
    let s = &entry.sample;
    Ok(infer(spec, generator, &s.corrupted, &s.hole_mask)?.prediction)
}

/// Scores every entry with `predict_fn`; rows keep dataset order.
pub fn evaluate_with<F>(data: &[DatasetEntry], scales: Vec<usize>, predict_fn: F) -> Result<EvalReport>
where
    F: Fn(&DatasetEntry) -> Result<Prediction> + Sync,
{
    if data.is_empty() {
        return Err(CoreError::Usage("no samples".into()));
    }
    let rows = data
        .par_iter()
        .map(|e| {
            let p = predict_fn(e)?;
            let s = &e.sample;
            Ok(EvalRow {
                stem: e.stem.clone(),
                psnr: metrics::psnr(&p.final_image, &s.ground_truth)?,
                psnr_hole: metrics::psnr_hole(&p.final_image, &s.ground_truth, &s.hole_mask)?,
                ssim: metrics::ssim(&p.final_image, &s.ground_truth)?,
                hole_l1: metrics::hole_l1(&p.final_image, &s.ground_truth, &s.hole_mask)?,
                confidence: p.confidence,
                unreliable: p.unreliable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { scales, rows })
}

/// Decoder scales with heads, coarse to fine.
pub fn head_scales(spec: &ModelSpec) -> Vec<usize> {
    (1..spec.scales).rev().collect()
}

pub fn evaluate(ckpt: &Checkpoint, data: &[DatasetEntry]) -> Result<EvalReport> {
    let spec = ModelSpec::from(&ckpt.config);
    if let Some(e) = data.first() {
        let s = &e.sample;
        if s.class_count() != spec.classes {
            return Err(CoreError::Load {
                field: "classes".into(),
                msg: format!("checkpoint has {} classes, dataset has {}", spec.classes, s.class_count()),
            });
        }
        spec.check_size(s.height(), s.width())?;
    }
    evaluate_with(data, head_scales(&spec), |e| predict(&spec, &ckpt.generator, e))
}
