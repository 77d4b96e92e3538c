//! Hole masks: centred rectangles and free-form brush strokes. 0 marks a hole.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Zeros a centred `hole.0 × hole.1` block; odd remainders round toward the top-left.
pub fn gen_center_mask(size: (usize, usize), hole: (usize, usize)) -> Result<Tensor<f32>> {
    let (h, w) = size;
    let (hh, hw) = hole;
    if hh > h || hw > w {
        return Err(CoreError::config(format!("hole {hh}x{hw} larger than image {h}x{w}")));
    }
    let (top, left) = ((h - hh) / 2, (w - hw) / 2);
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (top..top + hh).contains(&y) && (left..left + hw).contains(&x) {
            0.0
        } else {
            1.0
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrregularMaskSpec {
    pub strokes: RangeInclusive<usize>,
    /// Brush diameter in pixels.
    pub brush: RangeInclusive<usize>,
    pub vertices: RangeInclusive<usize>,
    /// Accepted hole fraction; outside it the mask is redrawn, then clamped.
    pub hole_fraction: RangeInclusive<f64>,
}

pub const MAX_REDRAWS: u64 = 16;

impl IrregularMaskSpec {
    /// Defaults scaled to the image side.
    pub fn for_size(size: (usize, usize)) -> Self {
        let side = size.0.min(size.1).max(8);
        Self {
            strokes: 2..=5,
            brush: (side / 16).max(2)..=(side / 7).max(3),
            vertices: 4..=12,
            hole_fraction: 0.10..=0.50,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = self.strokes.is_empty()
            || self.brush.is_empty()
            || self.vertices.is_empty()
            || *self.vertices.start() == 0
            || *self.brush.start() == 0
            || self.hole_fraction.start() > self.hole_fraction.end();
        if bad {
            return Err(CoreError::config(format!("invalid irregular mask spec {self:?}")));
        }
        Ok(())
    }
}

/// Distance from `p` to segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Zeros every pixel whose centre lies within `width/2` of segment `a`–`b`.
pub fn stamp_capsule(mask: &mut [f32], size: (usize, usize), a: (f64, f64), b: (f64, f64), width: f64) {
    let (h, w) = size;
    let r = width / 2.0;
    let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(h);
    let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b) <= r {
                mask[y * w + x] = 0.0;
            }
        }
    }
}

fn derived_seed(seed: u64, attempt: u64) -> u64 {
    if attempt == 0 {
        return seed;
    }
    // splitmix64 step
    let mut z = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One brush stroke: a polyline drawn with a round brush of `width` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    pub width: f64,
    pub points: Vec<(f64, f64)>,
}

/// Random-walk stroke paths for one draw of the mask (`attempt` 0 is the first).
pub fn irregular_strokes(seed: u64, attempt: u64, size: (usize, usize), spec: &IrregularMaskSpec) -> Vec<Stroke> {
    let (h, w) = size;
    let side = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, attempt));
    let count = rng.random_range(spec.strokes.clone());
    (0..count)
        .map(|_| {
            let width = rng.random_range(spec.brush.clone()) as f64;
            let n = rng.random_range(spec.vertices.clone());
            let mut p = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let mut heading = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let mut points = vec![p];
            for _ in 1..n {
                heading += rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
                let step = rng.random_range(side / 16.0..side / 4.0);
                p = (
                    (p.0 + step * heading.cos()).clamp(0.0, w as f64),
                    (p.1 + step * heading.sin()).clamp(0.0, h as f64),
                );
                points.push(p);
            }
            Stroke { width, points }
        })
        .collect()
}

fn render_strokes(strokes: &[Stroke], size: (usize, usize)) -> Vec<f32> {
    let mut mask = vec![1.0f32; size.0 * size.1];
    for s in strokes {
        stamp_capsule(&mut mask, size, s.points[0], s.points[0], s.width);
        for seg in s.points.windows(2) {
            stamp_capsule(&mut mask, size, seg[0], seg[1], s.width);
        }
    }
    mask
}

pub fn hole_fraction(mask: &[f32]) -> f64 {
    mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64
}

/// Flips boundary pixels from `from` to the other value in raster-order
/// passes until exactly `target` holes remain (or no boundary is left).
fn clamp_holes(mask: &mut [f32], size: (usize, usize), target: usize) {
    let (h, w) = size;
    let holes = |m: &[f32]| m.iter().filter(|&&v| v == 0.0).count();
    let mut count = holes(mask);
    let grow = count < target;
    let from = if grow { 1.0 } else { 0.0 };
    while count != target {
        let snapshot = mask.to_vec();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if snapshot[y * w + x] != from {
                    continue;
                }
                let touches = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && snapshot[ny as usize * w + nx as usize] != from
                });
                if touches {
                    mask[y * w + x] = 1.0 - from;
                    changed = true;
                    count = if grow { count + 1 } else { count - 1 };
                    if count == target {
                        return;
                    }
                }
            }
        }
        if !changed {
            // No boundary: either empty or full. Seed from the centre.
            let c = (h / 2) * w + w / 2;
            mask[c] = 1.0 - from;
            count = if grow { count + 1 } else { count - 1 };
        }
    }
}

/// Union of random-walk brush strokes, redrawn (up to 16 times) and then
/// clamped so that the hole fraction lands in `spec.hole_fraction`.
pub fn gen_irregular_mask(seed: u64, size: (usize, usize), spec: &IrregularMaskSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(CoreError::config("empty mask size"));
    }
    let mut last = Vec::new();
    for attempt in 0..MAX_REDRAWS {
        let mask = render_strokes(&irregular_strokes(seed, attempt, size, spec), size);
        if spec.hole_fraction.contains(&hole_fraction(&mask)) {
            return Ok(Tensor::new(vec![1, h, w], mask)?);
        }
        last = mask;
    }
    let n = (h * w) as f64;
    let frac = hole_fraction(&last);
    let target = if frac < *spec.hole_fraction.start() {
        (spec.hole_fraction.start() * n).ceil() as usize
    } else {
        (spec.hole_fraction.end() * n).floor() as usize
    };
    clamp_holes(&mut last, size, target);
    Ok(Tensor::new(vec![1, h, w], last)?)
}

/// Downsamples a `[.., H, W]` binary mask by 2 per step; a cell is a hole
/// if any of its pixels is.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let f = 1usize << steps;
    if h % f != 0 || w % f != 0 {
        return Err(CoreError::config(format!("mask {h}x{w} not divisible by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let src = mask.data();
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Ok(Tensor::from_fn(&out_shape, |i| {
        let p = i / (oh * ow);
        let (y, x) = ((i / ow) % oh, i % ow);
        let hole = (0..f).any(|dy| (0..f).any(|dx| src[p * h * w + (y * f + dy) * w + x * f + dx] < T::lit(0.5)));
        if hole {
            T::zero()
        } else {
            T::one()
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_box(m: &Tensor<f32>, w: usize) -> (usize, usize, usize, usize) {
        let zeros: Vec<(usize, usize)> = m
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| (i / w, i % w))
            .collect();
        let ys = zeros.iter().map(|z| z.0);
        let xs = zeros.iter().map(|z| z.1);
        (
            ys.clone().min().unwrap(),
            ys.max().unwrap() + 1,
            xs.clone().min().unwrap(),
            xs.max().unwrap() + 1,
        )
    }

    #[test]
    fn centre_holes() {
        let m = gen_center_mask((256, 256), (128, 128)).unwrap();
        assert_eq!(zero_box(&m, 256), (64, 192, 64, 192));
        assert_eq!(m.data().iter().filter(|&&v| v == 0.0).count(), 128 * 128);
        let m = gen_center_mask((64, 64), (32, 32)).unwrap();
        assert_eq!(zero_box(&m, 64), (16, 48, 16, 48));
        let m = gen_center_mask((7, 7), (2, 2)).unwrap();
        assert_eq!(zero_box(&m, 7), (2, 4, 2, 4));
        let m = gen_center_mask((8, 8), (0, 0)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(gen_center_mask((8, 8), (9, 2)).is_err());
    }

    #[test]
    fn irregular_is_deterministic_and_binary() {
        let spec = IrregularMaskSpec::for_size((64, 64));
        let a = gen_irregular_mask(11, (64, 64), &spec).unwrap();
        assert_eq!(a, gen_irregular_mask(11, (64, 64), &spec).unwrap());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn clamping_reaches_bounds() {
        let tiny = IrregularMaskSpec {
            strokes: 1..=1,
            brush: 1..=1,
            vertices: 1..=1,
            hole_fraction: 0.10..=0.50,
        };
        let m = gen_irregular_mask(3, (32, 32), &tiny).unwrap();
        let frac = hole_fraction(m.data());
        assert!((0.10..=0.50).contains(&frac), "{frac}");

        let huge = IrregularMaskSpec {
            strokes: 8..=8,
            brush: 20..=20,
            vertices: 12..=12,
            hole_fraction: 0.10..=0.50,
        };
        let m = gen_irregular_mask(3, (32, 32), &huge).unwrap();
        let frac = hole_fraction(m.data());
        assert!((0.10..=0.50).contains(&frac), "{frac}");
    }

    #[test]
    fn downsample_any_hole_wins() {
        let mut m = Tensor::<f32>::ones(&[1, 4, 4]);
        m.data_mut()[5] = 0.0;
        let d = downsample_mask(&m, 1).unwrap();
        assert_eq!(d.shape(), &[1, 2, 2]);
        assert_eq!(d.data(), &[0.0, 1.0, 1.0, 1.0]);
        let d2 = downsample_mask(&m, 2).unwrap();
        assert_eq!(d2.data(), &[0.0]);
    }
}
