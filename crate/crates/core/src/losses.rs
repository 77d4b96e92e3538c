//! Training objectives: multi-scale reconstruction with a fixed-feature
//! perceptual term, patch adversarial loss, and multi-scale cross-entropy.

use sge_tensor::{ConvGeom, Graph, Real, Tensor, UpsampleMode, Var};

use crate::error::{CoreError, Result};
use crate::model::Pyramid;
use crate::params::{Bound, Initializer, ParamSet};

pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];
/// Seed of the frozen feature stack; independent of the run seed.
pub const FEATURE_SEED: u64 = 0x5eed_f00d;
pub const DISC_BLOCKS: usize = 4;
pub const DISC_SCALES: usize = 3;
pub const PROB_FLOOR: f64 = 1e-8;

/// Frozen conv stack whose three relu outputs (strides 2, 4, 8) define the
/// perceptual distance.
pub fn init_feature_extractor<T: Real>() -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    let mut init = Initializer::new(FEATURE_SEED);
    let mut cin = 3;
    for (i, &c) in FEATURE_WIDTHS.iter().enumerate() {
        init.conv(&mut p, &format!("feat.{i}"), cin, c, 3)?;
        cin = c;
    }
    Ok(p)
}

pub fn features<T: Real>(g: &mut Graph<T>, ext: &Bound<'_, T>, image: Var) -> Result<Vec<Var>> {
    let mut x = image;
    let mut taps = Vec::with_capacity(FEATURE_WIDTHS.len());
    for i in 0..FEATURE_WIDTHS.len() {
        let w = ext.var(&format!("feat.{i}.w"))?;
        let b = ext.var(&format!("feat.{i}.b"))?;
        x = g.conv2d(x, w, Some(b), ConvGeom::down2())?;
        x = g.relu(x)?;
        taps.push(x);
    }
    Ok(taps)
}

fn upsample_to<T: Real>(g: &mut Graph<T>, x: Var, height: usize, mode: UpsampleMode) -> Result<Var> {
    let h = g.shape(x)[2];
    if h == 0 || !height.is_multiple_of(h) {
        return Err(CoreError::Tensor(sge_tensor::TensorError::Dimension(format!(
            "cannot upsample height {h} to {height}"
        ))));
    }
    if height == h {
        return Ok(x);
    }
    Ok(g.upsample(x, height / h, mode)?)
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    Ok(g.mean(d)?)
}

/// `mean|Y − up(Ŷ)| + λ_p · Σ_n mean|Ψ_n(Y) − Ψ_n(up(Ŷ))|`.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, target: Var, pred: Var, ext: &Bound<'_, T>, lambda_p: f64) -> Result<Var> {
    let height = g.shape(target)[2];
    let up = upsample_to(g, pred, height, UpsampleMode::Bilinear)?;
    if g.shape(up) != g.shape(target) {
        return Err(CoreError::Tensor(sge_tensor::TensorError::Dimension(format!(
            "reconstruction target {:?} vs prediction {:?}",
            g.shape(target),
            g.shape(up)
        ))));
    }
    let pixel = mean_abs_diff(g, target, up)?;
    if lambda_p == 0.0 {
        return Ok(pixel);
    }
    let ft = features(g, ext, target)?;
    let fp = features(g, ext, up)?;
    let mut perc = None;
    for (a, b) in ft.into_iter().zip(fp) {
        let term = mean_abs_diff(g, a, b)?;
        perc = Some(match perc {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let perc = g.mul_scalar(perc.expect("three taps"), T::lit(lambda_p))?;
    Ok(g.add(pixel, perc)?)
}

/// `−mean_pixels Σ_c S_c log max(norm(up(Ŝ))_c, 1e-8)`.
pub fn ce_loss<T: Real>(g: &mut Graph<T>, seg_onehot: &Tensor<T>, probs: Var) -> Result<Var> {
    let (_, _, h, w) = seg_onehot.dims4()?;
    let up = upsample_to(g, probs, h, UpsampleMode::Bilinear)?;
    let norm = g.normalize_channels(up)?;
    let floored = g.clamp_min(norm, T::lit(PROB_FLOOR))?;
    let logp = g.log(floored)?;
    let s = g.constant(seg_onehot.clone());
    let prod = g.mul(s, logp)?;
    let total = g.sum(prod)?;
    Ok(g.mul_scalar(total, T::lit(-1.0 / (h * w) as f64))?)
}

/// Patch discriminator: four stride-2 conv + leaky_relu blocks and a 1-channel conv.
pub fn init_discriminator<T: Real>(width: usize, seed: u64) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    let mut init = Initializer::new(seed);
    let mut cin = 3;
    for i in 0..DISC_BLOCKS {
        let c = width << i.min(2);
        init.conv(&mut p, &format!("disc.{i}"), cin, c, 3)?;
        cin = c;
    }
    init.conv(&mut p, "disc.out", cin, 1, 3)?;
    Ok(p)
}

/// Patch logits for one image.
pub fn discriminate<T: Real>(g: &mut Graph<T>, d: &Bound<'_, T>, image: Var) -> Result<Var> {
    let mut x = image;
    for i in 0..DISC_BLOCKS {
        let w = d.var(&format!("disc.{i}.w"))?;
        let b = d.var(&format!("disc.{i}.b"))?;
        x = g.conv2d(x, w, Some(b), ConvGeom::down2())?;
        x = g.leaky_relu(x)?;
    }
    let w = d.var("disc.out.w")?;
    let b = d.var("disc.out.b")?;
    Ok(g.conv2d(x, w, Some(b), ConvGeom::same(1))?)
}

/// The image at full, ½ and ¼ resolution.
pub fn image_pyramid<T: Real>(g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
    let mut levels = vec![image];
    for _ in 1..DISC_SCALES {
        let last = *levels.last().expect("non-empty");
        levels.push(g.avg_pool2(last)?);
    }
    Ok(levels)
}

fn mean_of<T: Real>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_scalar(acc, T::lit(1.0 / n as f64))?)
}

/// Discriminator objective split into its real and fake halves.
pub struct DiscLoss {
    /// Scale mean of `BCE(D(real), 1)`.
    pub real: Var,
    /// Scale mean of `BCE(D(fake), 0)`.
    pub fake: Var,
    pub total: Var,
}

pub fn disc_loss<T: Real>(g: &mut Graph<T>, d: &Bound<'_, T>, real: Var, fake: Var) -> Result<DiscLoss> {
    let reals = image_pyramid(g, real)?;
    let fakes = image_pyramid(g, fake)?;
    let mut rt = Vec::new();
    let mut ft = Vec::new();
    for (r, f) in reals.into_iter().zip(fakes) {
        let sr = discriminate(g, d, r)?;
        rt.push(g.bce_with_logits(sr, T::one())?);
        let sf = discriminate(g, d, f)?;
        ft.push(g.bce_with_logits(sf, T::zero())?);
    }
    let real = mean_of(g, rt)?;
    let fake = mean_of(g, ft)?;
    let total = g.add(real, fake)?;
    Ok(DiscLoss { real, fake, total })
}

/// Scale mean of `BCE(D(fake), 1)`.
pub fn gen_adv_loss<T: Real>(g: &mut Graph<T>, d: &Bound<'_, T>, fake: Var) -> Result<Var> {
    let mut terms = Vec::new();
    for f in image_pyramid(g, fake)? {
        let s = discriminate(g, d, f)?;
        terms.push(g.bce_with_logits(s, T::one())?);
    }
    mean_of(g, terms)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_adv: f64,
    pub lambda_seg: f64,
}

impl From<&crate::config::RunConfig> for LossWeights {
    fn from(c: &crate::config::RunConfig) -> Self {
        Self {
            lambda_p: c.lambda_p,
            lambda_adv: c.lambda_adv,
            lambda_seg: c.lambda_seg,
        }
    }
}

/// Weighted contributions; `recon + adv_g + seg == total`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub adv_g: f64,
    pub seg: f64,
}

pub struct FinalLoss {
    pub total: Var,
    pub recon: Var,
    pub adv_g: Option<Var>,
    pub seg: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// `Σ_l recon + λ_α · adv_G(final) + λ_s · Σ_l CE`. The discriminator is
/// only consulted when `λ_α > 0`.
pub fn final_loss<T: Real>(
    g: &mut Graph<T>,
    pyr: &Pyramid<T>,
    target: Var,
    seg_onehot: &Tensor<T>,
    ext: &Bound<'_, T>,
    disc: Option<&Bound<'_, T>>,
    weights: LossWeights,
) -> Result<FinalLoss> {
    let mut recon = None;
    for s in &pyr.scales {
        let r = recon_loss(g, target, s.image, ext, weights.lambda_p)?;
        recon = Some(match recon {
            None => r,
            Some(acc) => g.add(acc, r)?,
        });
    }
    let recon = recon.ok_or_else(|| CoreError::Usage("pyramid has no scales".into()))?;
    let mut total = recon;

    let adv_g = if weights.lambda_adv > 0.0 {
        let d = disc.ok_or_else(|| CoreError::Usage("adversarial weight set but no discriminator".into()))?;
        let raw = gen_adv_loss(g, d, pyr.final_image)?;
        let weighted = g.mul_scalar(raw, T::lit(weights.lambda_adv))?;
        total = g.add(total, weighted)?;
        Some(weighted)
    } else {
        None
    };

    let seg = if weights.lambda_seg > 0.0 {
        let mut acc = None;
        for s in &pyr.scales {
            let c = ce_loss(g, seg_onehot, s.seg_probs)?;
            acc = Some(match acc {
                None => c,
                Some(a) => g.add(a, c)?,
            });
        }
        let weighted = g.mul_scalar(acc.expect("non-empty"), T::lit(weights.lambda_seg))?;
        total = g.add(total, weighted)?;
        Some(weighted)
    } else {
        None
    };

    let val = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        total: val(Some(total)),
        recon: val(Some(recon)),
        adv_g: val(adv_g),
        seg: val(seg),
    };
    Ok(FinalLoss {
        total,
        recon,
        adv_g,
        seg,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_taps_have_expected_strides() {
        let ext = init_feature_extractor::<f64>().unwrap();
        let mut g = Graph::new();
        let b = ext.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 16, 16], 0.5));
        let taps = features(&mut g, &b, x).unwrap();
        let sizes: Vec<usize> = taps.iter().map(|&t| g.shape(t)[2]).collect();
        assert_eq!(sizes, vec![8, 4, 2]);
    }

    #[test]
    fn discriminator_emits_a_map() {
        let d = init_discriminator::<f64>(4, 1).unwrap();
        let mut g = Graph::new();
        let b = d.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 64, 64], 0.5));
        let s = discriminate(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(s), &[1, 1, 4, 4]);
    }
}
