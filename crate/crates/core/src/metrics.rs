//! Image quality metrics and the confidence analyses.

use std::fmt::Write as _;

use sge_tensor::{Real, Tensor, TensorError};

use crate::config::Variant;
use crate::error::{CoreError, Result};
use crate::model::Pyramid;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MIN_CORRELATION_SAMPLES: usize = 20;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::Tensor(TensorError::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        ))));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` over every element, capped at 99 dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / a.numel() as f64))
}

/// Per-pixel selector over a `[C, H, W]` image from a mask with `H·W` entries.
fn hole_pixels<T: Real>(mask: &Tensor<T>) -> Vec<bool> {
    mask.data().iter().map(|&m| m.as_f64() < 0.5).collect()
}

/// PSNR restricted to hole pixels (all channels). Empty hole gives the cap.
pub fn psnr_hole<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let hole = hole_pixels(mask);
    let hw = hole.len();
    let (mut sse, mut n) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if hole[i % hw] {
            sse += (x.as_f64() - y.as_f64()).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { PSNR_CAP } else { psnr_from_mse(sse / n as f64) })
}

/// Mean absolute error over hole pixels (all channels); 0 for an empty hole.
pub fn hole_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let hole = hole_pixels(mask);
    let hw = hole.len();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if hole[i % hw] {
            sum += (x.as_f64() - y.as_f64()).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Channel-mean luminance of a `[C, H, W]` or `[1, C, H, W]` image.
fn luminance<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let s = img.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(CoreError::Tensor(TensorError::Dimension(format!("not an image: {s:?}")))),
    };
    let hw = h * w;
    let d = img.data();
    let lum = (0..hw)
        .map(|p| (0..c).map(|ch| d[ch * hw + p].as_f64()).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, lum))
}

/// Mean SSIM of the luminance over all fully contained 7×7 windows.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(CoreError::config(format!("image {h}x{w} smaller than the {k}x{k} SSIM window")));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - k {
        for left in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + k {
                for c in left..left + k {
                    let (u, v) = (x[r * w + c], y[r * w + c]);
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// 1-based ranks with ties given their mean rank.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with mid-ranked ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::Usage(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < MIN_CORRELATION_SAMPLES {
        return Err(CoreError::Usage(format!(
            "correlation needs at least {MIN_CORRELATION_SAMPLES} samples, got {}",
            x.len()
        )));
    }
    pearson(&mid_ranks(x), &mid_ranks(y)).ok_or_else(|| CoreError::Usage("a variable has no rank variance".into()))
}

/// Mean of `values` over hole pixels of `mask`; `None` if the hole is empty.
pub fn masked_mean<T: Real>(values: &Tensor<T>, mask: &Tensor<T>) -> Option<f64> {
    let hole = hole_pixels(mask);
    let (mut s, mut n) = (0.0, 0usize);
    for (v, &h) in values.data().iter().zip(&hole) {
        if h {
            s += v.as_f64();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

fn unreliable_fraction<T: Real>(rel: &Tensor<T>, hole: &Tensor<T>) -> f64 {
    let h = hole_pixels(hole);
    let n = h.iter().filter(|&&x| x).count();
    if n == 0 {
        return 0.0;
    }
    let bad = rel.data().iter().zip(&h).filter(|(&m, &x)| x && m.as_f64() < 0.5).count();
    bad as f64 / n as f64
}

/// `(scale, unreliable fraction of hole pixels)` for `l = L` (initialisation
/// row, the input mask) then `L-1 ..= 1`.
pub fn shrinkage_profile<T: Real>(pyr: &Pyramid<T>) -> Result<Vec<(usize, f64)>> {
    if pyr.variant != Variant::Sge {
        return Err(CoreError::Usage(format!("shrinkage needs the sge variant, got {}", pyr.variant)));
    }
    let l_max = pyr.scales.first().map(|s| s.scale + 1).unwrap_or(1);
    let mut out = vec![(l_max, unreliable_fraction(&pyr.initial_mask, &pyr.initial_mask))];
    for s in &pyr.scales {
        let rel = s
            .reliability
            .as_ref()
            .ok_or_else(|| CoreError::Usage("missing reliability mask".into()))?;
        out.push((s.scale, unreliable_fraction(rel, &s.hole_mask)));
    }
    Ok(out)
}

/// Per-scale mean in-hole confidence, scales `L-1 ..= 1`.
pub fn hole_confidence<T: Real>(pyr: &Pyramid<T>) -> Vec<(usize, f64)> {
    pyr.scales
        .iter()
        .map(|s| (s.scale, masked_mean(&s.confidence, &s.hole_mask).unwrap_or(1.0)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub stem: String,
    pub psnr: f64,
    pub psnr_hole: f64,
    pub ssim: f64,
    pub hole_l1: f64,
    /// Scales `L-1 ..= 1`.
    pub confidence: Vec<f64>,
    /// Scales `L-1 ..= 1`; SGE only.
    pub unreliable: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Decoder scales reported, coarse to fine.
    pub scales: Vec<usize>,
    pub rows: Vec<EvalRow>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Formats with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

impl EvalReport {
    pub fn has_shrinkage(&self) -> bool {
        self.rows.first().is_some_and(|r| r.unreliable.is_some())
    }

    /// Rows sorted by stem, so aggregates do not depend on input order.
    fn sorted(&self) -> Vec<&EvalRow> {
        let mut rows: Vec<&EvalRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.stem.cmp(&b.stem));
        rows
    }

    fn column(&self, f: impl Fn(&EvalRow) -> f64) -> Vec<f64> {
        self.sorted().into_iter().map(f).collect()
    }

    pub fn mean_std_of(&self, f: impl Fn(&EvalRow) -> f64) -> (f64, f64) {
        mean_std(&self.column(f))
    }

    /// Spearman ρ between finest-scale in-hole confidence and `−hole_l1`.
    pub fn confidence_correlation(&self) -> Result<f64> {
        let conf = self.column(|r| *r.confidence.last().unwrap_or(&0.0));
        let neg_l1 = self.column(|r| -r.hole_l1);
        spearman(&conf, &neg_l1)
    }

    /// Mean unreliable fraction per scale, coarse to fine.
    pub fn mean_shrinkage(&self) -> Option<Vec<f64>> {
        if !self.has_shrinkage() {
            return None;
        }
        Some(
            (0..self.scales.len())
                .map(|i| self.mean_std_of(|r| r.unreliable.as_ref().map(|u| u[i]).unwrap_or(0.0)).0)
                .collect(),
        )
    }

    /// `stem,mean_confidence,hole_l1` per sample and a `spearman,ρ` footer.
    pub fn confidence_csv(&self) -> Result<String> {
        let rho = self.confidence_correlation()?;
        let mut out = String::from("stem,mean_confidence,hole_l1\n");
        for r in &self.rows {
            let conf = *r.confidence.last().unwrap_or(&0.0);
            let _ = writeln!(out, "{},{},{}", r.stem, sig6(conf), sig6(r.hole_l1));
        }
        let _ = writeln!(out, "spearman,{}", sig6(rho));
        Ok(out)
    }

    pub fn header(&self) -> String {
        let mut h = String::from("stem,psnr,psnr_hole,ssim,hole_l1");
        for l in &self.scales {
            let _ = write!(h, ",conf_s{l}");
        }
        if self.has_shrinkage() {
            for l in &self.scales {
                let _ = write!(h, ",unreliable_s{l}");
            }
        }
        h
    }

    fn line(stem: &str, values: &[f64]) -> String {
        let mut s = stem.to_string();
        for v in values {
            s.push(',');
            s.push_str(&sig6(*v));
        }
        s
    }

    fn values(r: &EvalRow) -> Vec<f64> {
        let mut v = vec![r.psnr, r.psnr_hole, r.ssim, r.hole_l1];
        v.extend(&r.confidence);
        if let Some(u) = &r.unreliable {
            v.extend(u);
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::line(&r.stem, &Self::values(r)));
            out.push('\n');
        }
        let rows = self.sorted();
        let width = rows.first().map(|r| Self::values(r).len()).unwrap_or(0);
        let means: Vec<f64> = (0..width)
            .map(|i| mean_std(&rows.iter().map(|r| Self::values(r)[i]).collect::<Vec<_>>()).0)
            .collect();
        out.push_str(&Self::line("AGGREGATE", &means));
        out.push('\n');
        out
    }
}
