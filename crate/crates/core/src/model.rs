//! Generator graph: encoder, context block, coarse-to-fine decoder with
//! per-scale image and segmentation heads, semantic modulation and
//! confidence-driven correction.
//!
//! Scale `l` (1 = finest) has spatial size `H / 2^(l-1)` for both encoder
//! features `φ^l` and decoder features `ϕ^l`. Heads run at `l = L-1 ..= 1`.

use sge_tensor::{ConvGeom, Graph, Real, Tensor, UpsampleMode, Var};

use crate::config::{RunConfig, ScemScope, Variant};
use crate::error::{CoreError, Result};
use crate::mask::downsample_mask;
use crate::params::{Bound, Initializer, ParamSet};
use crate::scene::Sample;

/// Architecture subset of [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub scales: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    pub variant: Variant,
    pub scem_percentile: f64,
    pub scem_scope: ScemScope,
}

impl From<&RunConfig> for ModelSpec {
    fn from(c: &RunConfig) -> Self {
        Self {
            scales: c.scales,
            classes: c.classes,
            widths: c.widths.clone(),
            variant: c.variant,
            scem_percentile: c.scem_percentile,
            scem_scope: c.scem_scope,
        }
    }
}

impl ModelSpec {
    fn width(&self, l: usize) -> usize {
        self.widths[l - 1]
    }

    fn mask_embed(&self, l: usize) -> usize {
        (self.width(l) / 2).max(4)
    }

    /// Whether the transition out of scale `l` uses semantic modulation.
    fn modulated(&self, l: usize) -> bool {
        l < self.scales && self.variant != Variant::Basic
    }

    fn corrected(&self, l: usize) -> bool {
        l < self.scales && self.variant == Variant::Sge
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << (self.scales - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(CoreError::config(format!(
                "input {h}x{w} not divisible by {unit} (scales = {})",
                self.scales
            )));
        }
        Ok(())
    }
}

/// Generator parameters for `spec`, initialised from `seed`.
pub fn init_generator<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamSet<T>> {
    let l_max = spec.scales;
    let mut p = ParamSet::new();
    let mut init = Initializer::new(seed);
    for l in 1..=l_max {
        let cin = if l == 1 { 4 } else { spec.width(l - 1) };
        init.conv(&mut p, &format!("enc{l}"), cin, spec.width(l), 3)?;
    }
    let c = spec.width(l_max);
    for i in 0..4 {
        init.conv(&mut p, &format!("cim.{i}"), c, c, 3)?;
    }
    for l in (2..=l_max).rev() {
        let (c_in, c_out) = (spec.width(l) + spec.width(l - 1), spec.width(l - 1));
        let pre = format!("dec{l}");
        init.conv(&mut p, &format!("{pre}.fuse"), c_in, c_out, 3)?;
        if spec.modulated(l) {
            init.conv(&mut p, &format!("{pre}.mod.shared"), spec.classes, c_out, 3)?;
            init.conv(&mut p, &format!("{pre}.mod.gamma"), c_out, c_out, 3)?;
            init.conv(&mut p, &format!("{pre}.mod.beta"), c_out, c_out, 3)?;
            // Unit gain at initialisation.
            p.get_mut(&format!("{pre}.mod.gamma.b"))
                .expect("just inserted")
                .data_mut()
                .fill(T::one());
        }
        init.conv(&mut p, &format!("{pre}.ba1"), c_out, c_out, 3)?;
        init.conv(&mut p, &format!("{pre}.ba2"), c_out, c_out, 3)?;
        if spec.corrected(l) {
            let e = spec.mask_embed(l - 1);
            init.conv(&mut p, &format!("{pre}.memb1"), 1, e, 3)?;
            init.conv(&mut p, &format!("{pre}.memb2"), e, e, 3)?;
            init.conv(&mut p, &format!("{pre}.bi1"), c_out + e, c_out, 3)?;
            init.zero_conv(&mut p, &format!("{pre}.bi2"), c_out, c_out, 3)?;
        }
    }
    for l in (1..l_max).rev() {
        init.conv(&mut p, &format!("head{l}.img"), spec.width(l), 3, 3)?;
        init.conv(&mut p, &format!("head{l}.seg"), spec.width(l), spec.classes, 3)?;
    }
    Ok(p)
}

/// Names of the correction (bias-net) parameters.
pub fn is_bias_net(name: &str) -> bool {
    name.contains(".bi1.") || name.contains(".bi2.")
}

/// Model inputs as rank-4 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T: Real> {
    /// `[1, 3, H, W]`
    pub corrupted: Tensor<T>,
    /// `[1, 1, H, W]`, 0 marks holes.
    pub mask: Tensor<T>,
}

impl<T: Real> ModelInput<T> {
    pub fn new(corrupted: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Self> {
        let (h, w) = (mask.shape()[mask.rank() - 2], mask.shape()[mask.rank() - 1]);
        Ok(Self {
            corrupted: corrupted.cast::<T>().reshape(&[1, 3, h, w])?,
            mask: mask.cast::<T>().reshape(&[1, 1, h, w])?,
        })
    }

    pub fn from_sample(s: &Sample) -> Result<Self> {
        Self::new(&s.corrupted, &s.hole_mask)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[2], self.mask.shape()[3])
    }
}

/// Outputs of one decoder scale.
#[derive(Clone, Debug)]
pub struct ScaleOutput<T: Real> {
    pub scale: usize,
    /// `[1, 3, h, w]` in [0, 1].
    pub image: Var,
    pub seg_logits: Var,
    pub seg_probs: Var,
    /// Per-pixel max class probability, `[1, 1, h, w]`.
    pub confidence: Tensor<T>,
    /// Input hole mask downsampled to this scale.
    pub hole_mask: Tensor<T>,
    /// Binary reliability mask (SGE only).
    pub reliability: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Pyramid<T: Real> {
    /// `φ^1 ..= φ^L`
    pub encoder: Vec<Var>,
    /// `ϕ^1 ..= ϕ^L`
    pub decoder: Vec<Var>,
    /// Scales `L-1` down to 1.
    pub scales: Vec<ScaleOutput<T>>,
    /// Hole mask at scale `L`; the reliability map before any evaluation.
    pub initial_mask: Tensor<T>,
    pub final_image: Var,
    pub variant: Variant,
}

impl<T: Real> Pyramid<T> {
    pub fn scale(&self, l: usize) -> Option<&ScaleOutput<T>> {
        self.scales.iter().find(|s| s.scale == l)
    }
}

fn conv<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(bias), geom)?)
}

/// `φ^1 ..= φ^L` from the corrupted image and its mask.
pub fn encode<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, spec: &ModelSpec, corrupted: Var, mask: Var) -> Result<Vec<Var>> {
    let (_, _, h, w) = g.value(corrupted).dims4()?;
    spec.check_size(h, w)?;
    let mut x = g.concat_channels(corrupted, mask)?;
    let mut feats = Vec::with_capacity(spec.scales);
    for l in 1..=spec.scales {
        let geom = if l == 1 { ConvGeom::same(1) } else { ConvGeom::down2() };
        let y = conv(g, b, &format!("enc{l}"), x, geom)?;
        x = g.leaky_relu(y)?;
        feats.push(x);
    }
    Ok(feats)
}

pub const CIM_DILATIONS: [usize; 4] = [1, 2, 4, 2];

/// Dilated residual stack on the deepest features.
pub fn cim<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, phi: Var) -> Result<Var> {
    let mut x = phi;
    for (i, &d) in CIM_DILATIONS.iter().enumerate() {
        x = conv(g, b, &format!("cim.{i}"), x, ConvGeom::same(d))?;
        if i + 1 < CIM_DILATIONS.len() {
            x = g.leaky_relu(x)?;
        }
    }
    Ok(g.add(phi, x)?)
}

/// Image head (tanh rescaled to [0, 1]) and segmentation logits/probabilities.
pub fn heads<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, l: usize, feat: Var) -> Result<(Var, Var, Var)> {
    let raw = conv(g, b, &format!("head{l}.img"), feat, ConvGeom::same(1))?;
    let t = g.tanh(raw)?;
    let t = g.add_scalar(t, T::one())?;
    let image = g.mul_scalar(t, T::lit(0.5))?;
    let logits = conv(g, b, &format!("head{l}.seg"), feat, ConvGeom::same(1))?;
    let probs = g.softmax_channels(logits)?;
    Ok((image, logits, probs))
}

/// `F(x) = conv(lrelu(conv(lrelu(x))))` with the two named convs.
fn two_conv<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, first: &str, second: &str, x: Var) -> Result<Var> {
    let a = g.leaky_relu(x)?;
    let a = conv(g, b, first, a, ConvGeom::same(1))?;
    let a = g.leaky_relu(a)?;
    conv(g, b, second, a, ConvGeom::same(1))
}

/// Fused context: `conv(up(ϕ^l) ⊕ φ^{l-1})`.
pub fn fuse<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, l: usize, feat: Var, skip: Var) -> Result<Var> {
    let up = g.upsample(feat, 2, UpsampleMode::Nearest)?;
    let cat = g.concat_channels(up, skip)?;
    conv(g, b, &format!("dec{l}.fuse"), cat, ConvGeom::same(1))
}

/// Per-pixel gain and offset from the ×2 upsampled probability map.
pub fn modulation_params<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, l: usize, seg_probs: Var) -> Result<(Var, Var)> {
    let pre = format!("dec{l}.mod");
    let up = g.upsample(seg_probs, 2, UpsampleMode::Bilinear)?;
    let hidden = conv(g, b, &format!("{pre}.shared"), up, ConvGeom::same(1))?;
    let hidden = g.leaky_relu(hidden)?;
    let gamma = conv(g, b, &format!("{pre}.gamma"), hidden, ConvGeom::same(1))?;
    let beta = conv(g, b, &format!("{pre}.beta"), hidden, ConvGeom::same(1))?;
    Ok((gamma, beta))
}

/// `γ ⊙ standardize(f) + β`.
pub fn modulate<T: Real>(g: &mut Graph<T>, fused: Var, gamma: Var, beta: Var) -> Result<Var> {
    let norm = g.standardize(fused)?;
    let scaled = g.mul(gamma, norm)?;
    Ok(g.add(scaled, beta)?)
}

/// Semantically modulated features for the transition out of scale `l`.
pub fn guided_features<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, l: usize, feat: Var, skip: Var, seg_probs: Var) -> Result<Var> {
    let fused = fuse(g, b, l, feat, skip)?;
    let (gamma, beta) = modulation_params(g, b, l, seg_probs)?;
    modulate(g, fused, gamma, beta)
}

/// Reliability correction `F_bi(f ⊕ F(up(M)))`.
pub fn correction<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, l: usize, feat: Var, reliability: Var) -> Result<Var> {
    let pre = format!("dec{l}");
    let up = g.upsample(reliability, 2, UpsampleMode::Nearest)?;
    let e = conv(g, b, &format!("{pre}.memb1"), up, ConvGeom::same(1))?;
    let e = g.leaky_relu(e)?;
    let e = conv(g, b, &format!("{pre}.memb2"), e, ConvGeom::same(1))?;
    let cat = g.concat_channels(feat, e)?;
    two_conv(g, b, &format!("{pre}.bi1"), &format!("{pre}.bi2"), cat)
}

/// `ϕ^l → ϕ^{l-1}`; which inputs are used depends on the variant.
#[allow(clippy::too_many_arguments)]
pub fn transition<T: Real>(
    g: &mut Graph<T>,
    b: &Bound<'_, T>,
    spec: &ModelSpec,
    l: usize,
    feat: Var,
    skip: Var,
    seg_probs: Option<Var>,
    reliability: Option<Var>,
) -> Result<Var> {
    let pre = format!("dec{l}");
    let f = match (spec.modulated(l), seg_probs) {
        (true, Some(s)) => guided_features(g, b, l, feat, skip, s)?,
        (true, None) => return Err(CoreError::Usage(format!("scale {l} needs a segmentation map"))),
        (false, _) => fuse(g, b, l, feat, skip)?,
    };
    let base = two_conv(g, b, &format!("{pre}.ba1"), &format!("{pre}.ba2"), f)?;
    if !spec.corrected(l) {
        return Ok(base);
    }
    let m = reliability.ok_or_else(|| CoreError::Usage(format!("scale {l} needs a reliability mask")))?;
    let fix = correction(g, b, l, f, m)?;
    Ok(g.add(base, fix)?)
}

/// Channel max of a `[1, K, h, w]` probability map.
pub fn max_prob<T: Real>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = probs.dims4()?;
    let hw = h * w;
    let p = probs.data();
    Ok(Tensor::from_fn(&[n, 1, h, w], |i| {
        let (b, px) = (i / hw, i % hw);
        (0..k).fold(T::neg_infinity(), |m, c| m.max(p[(b * k + c) * hw + px]))
    }))
}

/// Threshold: the `⌊q/100 · n⌋`-th smallest score, or `None` when that count is 0.
pub fn percentile_threshold<T: Real>(scores: &mut [T], q: f64) -> Option<T> {
    let k = ((q / 100.0) * scores.len() as f64).floor() as usize;
    if k == 0 {
        return None;
    }
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    Some(scores[k - 1])
}

fn check_hole<T: Real>(hole: &Tensor<T>, conf: &Tensor<T>) -> Result<()> {
    if hole.numel() != conf.numel() {
        return Err(CoreError::Tensor(sge_tensor::TensorError::Dimension(format!(
            "hole mask {:?} vs confidence {:?}",
            hole.shape(),
            conf.shape()
        ))));
    }
    Ok(())
}

/// 1 where `conf > tau` or the pixel is known; `None` marks everything reliable.
pub fn threshold_mask<T: Real>(conf: &Tensor<T>, hole: &Tensor<T>, tau: Option<T>) -> Result<Tensor<T>> {
    check_hole(hole, conf)?;
    let data = conf
        .data()
        .iter()
        .zip(hole.data())
        .map(|(&c, &m)| match tau {
            _ if m > T::lit(0.5) => T::one(),
            Some(t) if c <= t => T::zero(),
            _ => T::one(),
        })
        .collect();
    Ok(Tensor::new(conf.shape().to_vec(), data)?)
}

/// Reliability mask: 1 where the max class probability exceeds the
/// percentile threshold, always 1 at known pixels. Returns `(mask, confidence)`.
pub fn scem_mask<T: Real>(probs: &Tensor<T>, hole: &Tensor<T>, q: f64, scope: ScemScope) -> Result<(Tensor<T>, Tensor<T>)> {
    let conf = max_prob(probs)?;
    check_hole(hole, &conf)?;
    let known: Vec<bool> = hole.data().iter().map(|&m| m > T::lit(0.5)).collect();
    if known.iter().all(|&k| k) {
        log::warn!("empty hole region; every pixel is reliable");
        return Ok((Tensor::ones(conf.shape()), conf));
    }
    let mut pool: Vec<T> = match scope {
        ScemScope::Hole => conf.data().iter().zip(&known).filter(|(_, &k)| !k).map(|(&c, _)| c).collect(),
        ScemScope::Global => conf.data().to_vec(),
    };
    let tau = percentile_threshold(&mut pool, q);
    Ok((threshold_mask(&conf, hole, tau)?, conf))
}

/// Full generator forward pass.
pub fn forward<T: Real>(g: &mut Graph<T>, b: &Bound<'_, T>, spec: &ModelSpec, input: &ModelInput<T>) -> Result<Pyramid<T>> {
    let l_max = spec.scales;
    let (h, w) = input.size();
    spec.check_size(h, w)?;
    let corrupted = g.constant(input.corrupted.clone());
    let mask = g.constant(input.mask.clone());
    let encoder = encode(g, b, spec, corrupted, mask)?;

    let mut decoder = vec![None; l_max];
    let deepest = cim(g, b, encoder[l_max - 1])?;
    decoder[l_max - 1] = Some(deepest);
    let initial_mask = downsample_mask(&input.mask, l_max - 1)?;
    let entry = transition(g, b, spec, l_max, deepest, encoder[l_max - 2], None, None)?;
    decoder[l_max - 2] = Some(entry);

    let mut scales = Vec::with_capacity(l_max - 1);
    for l in (1..l_max).rev() {
        let feat = decoder[l - 1].expect("filled by the previous step");
        let (image, seg_logits, seg_probs) = heads(g, b, l, feat)?;
        let hole_mask = downsample_mask(&input.mask, l - 1)?;
        let (reliability, confidence) = if spec.variant == Variant::Sge {
            let (m, c) = scem_mask(g.value(seg_probs), &hole_mask, spec.scem_percentile, spec.scem_scope)?;
            (Some(m), c)
        } else {
            (None, max_prob(g.value(seg_probs))?)
        };
        if l >= 2 {
            let rel = reliability.as_ref().map(|m| g.constant(m.clone()));
            let next = transition(g, b, spec, l, feat, encoder[l - 2], Some(seg_probs), rel)?;
            decoder[l - 2] = Some(next);
        }
        scales.push(ScaleOutput {
            scale: l,
            image,
            seg_logits,
            seg_probs,
            confidence,
            hole_mask,
            reliability,
        });
    }
    let finest = scales.last().expect("at least one head").image;
    let final_image = g.composite(corrupted, finest, &input.mask)?;
    Ok(Pyramid {
        encoder,
        decoder: decoder.into_iter().map(|d| d.expect("all scales decoded")).collect(),
        scales,
        initial_mask,
        final_image,
        variant: spec.variant,
    })
}
