//! Procedural mixed scenes with exact per-pixel class labels.
//!
//! A scene is a horizon split (class 0 above, class 1 below) with up to three
//! non-overlapping convex polygons of the remaining classes painted on top.
//! Each class has its own base colour and stripe frequency/orientation, so
//! texture is a learnable function of the label map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sge_tensor::Tensor;

use crate::error::{CoreError, Result};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTexture {
    pub base: [f32; 3],
    pub amplitude: f32,
    /// Stripe frequency in cycles per pixel.
    pub frequency: f32,
    /// Stripe normal direction in radians.
    pub orientation: f32,
}

const PALETTE: [([f32; 3], f32, f32, f32); MAX_CLASSES] = [
    ([0.45, 0.65, 0.90], 0.08, 1.0 / 16.0, 0.0),
    ([0.35, 0.55, 0.20], 0.15, 1.0 / 6.0, 90.0),
    ([0.80, 0.30, 0.25], 0.20, 1.0 / 4.0, 45.0),
    ([0.85, 0.80, 0.30], 0.20, 1.0 / 8.0, 135.0),
    ([0.50, 0.30, 0.70], 0.15, 1.0 / 5.0, 20.0),
    ([0.20, 0.70, 0.70], 0.18, 1.0 / 10.0, 70.0),
    ([0.60, 0.60, 0.60], 0.20, 1.0 / 3.0, 0.0),
    ([0.30, 0.20, 0.10], 0.12, 1.0 / 7.0, 110.0),
];

/// Per-pixel uniform noise half-width.
pub const NOISE_AMPLITUDE: f32 = 0.02;

impl ClassTexture {
    pub fn default_for(class: usize) -> Self {
        let (base, amplitude, frequency, degrees) = PALETTE[class % MAX_CLASSES];
        Self {
            base,
            amplitude,
            frequency,
            orientation: degrees.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub textures: Vec<ClassTexture>,
}

impl SceneSpec {
    pub fn new(seed: u64, size: (usize, usize), class_count: usize) -> Self {
        Self {
            seed,
            height: size.0,
            width: size.1,
            class_count,
            textures: (0..class_count).map(ClassTexture::default_for).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.class_count) {
            return Err(CoreError::config(format!(
                "class count {} outside [{MIN_CLASSES}, {MAX_CLASSES}]",
                self.class_count
            )));
        }
        if self.textures.len() != self.class_count {
            return Err(CoreError::config("one texture per class required"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(CoreError::config(format!("scene size {}x{} too small", self.height, self.width)));
        }
        Ok(())
    }

    /// Checks that the size survives `scales − 1` halvings.
    pub fn validate_for_scales(&self, scales: usize) -> Result<()> {
        let unit = 1usize << scales.saturating_sub(1);
        if !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return Err(CoreError::config(format!(
                "scene size {}x{} not divisible by {unit} (scales = {scales})",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Ground truth image and labels, before a hole mask is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor<f32>,
    /// Class index per pixel, row-major.
    pub labels: Vec<u8>,
    pub class_count: usize,
}

/// A training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in [0, 1].
    pub ground_truth: Tensor<f32>,
    /// `[K, H, W]`, exactly one 1 per pixel.
    pub seg_onehot: Tensor<f32>,
    /// `[1, H, W]`, 0 marks holes.
    pub hole_mask: Tensor<f32>,
    /// `ground_truth ⊙ hole_mask`.
    pub corrupted: Tensor<f32>,
}

pub fn onehot(labels: &[u8], class_count: usize, height: usize, width: usize) -> Tensor<f32> {
    let hw = height * width;
    let mut t = Tensor::zeros(&[class_count, height, width]);
    for (p, &l) in labels.iter().enumerate() {
        t.data_mut()[l as usize * hw + p] = 1.0;
    }
    t
}

impl Sample {
    pub fn new(scene: &Scene, hole_mask: Tensor<f32>) -> Result<Self> {
        let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
        if hole_mask.shape() != [1, h, w] {
            return Err(CoreError::config(format!(
                "mask shape {:?} does not match image {h}x{w}",
                hole_mask.shape()
            )));
        }
        let corrupted = mask_image(&scene.image, &hole_mask);
        Ok(Self {
            ground_truth: scene.image.clone(),
            seg_onehot: onehot(&scene.labels, scene.class_count, h, w),
            hole_mask,
            corrupted,
        })
    }

    pub fn height(&self) -> usize {
        self.ground_truth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ground_truth.shape()[2]
    }

    pub fn class_count(&self) -> usize {
        self.seg_onehot.shape()[0]
    }

    /// Argmax of the one-hot map.
    pub fn labels(&self) -> Vec<u8> {
        let (k, hw) = (self.class_count(), self.height() * self.width());
        let s = self.seg_onehot.data();
        (0..hw)
            .map(|p| (0..k).max_by(|&a, &b| s[a * hw + p].total_cmp(&s[b * hw + p])).unwrap_or(0) as u8)
            .collect()
    }

    pub fn hole_pixels(&self) -> usize {
        self.hole_mask.data().iter().filter(|&&m| m == 0.0).count()
    }
}

pub(crate) fn mask_image(image: &Tensor<f32>, mask: &Tensor<f32>) -> Tensor<f32> {
    let hw = mask.numel();
    let m = mask.data();
    Tensor::from_fn(image.shape(), |i| image.data()[i] * m[i % hw])
}

#[derive(Clone, Debug)]
struct Polygon {
    class: usize,
    /// Counter-clockwise vertices in pixel coordinates.
    vertices: Vec<(f64, f64)>,
    centre: (f64, f64),
    radius: f64,
}

impl Polygon {
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (ax, ay) = self.vertices[i];
            let (bx, by) = self.vertices[(i + 1) % n];
            (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
        })
    }
}

fn random_polygon(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Polygon {
    let side = h.min(w) as f64;
    let radius = rng.random_range(side / 8.0..side / 4.0);
    let centre = (
        rng.random_range(radius * 0.5..w as f64 - radius * 0.5),
        rng.random_range(radius * 0.5..h as f64 - radius * 0.5),
    );
    let n = rng.random_range(3..=7usize);
    let squash = rng.random_range(0.6..1.0);
    let rot = rng.random_range(0.0..2.0 * PI);
    let start = rng.random_range(0.0..2.0 * PI);
    let slot = 2.0 * PI / n as f64;
    // Points on an ellipse at increasing angles form a convex polygon.
    let vertices = (0..n)
        .map(|i| {
            let t = start + slot * i as f64 + rng.random_range(-0.25..0.25) * slot;
            let (ex, ey) = (radius * t.cos(), radius * squash * t.sin());
            (
                centre.0 + ex * rot.cos() - ey * rot.sin(),
                centre.1 + ex * rot.sin() + ey * rot.cos(),
            )
        })
        .collect();
    Polygon {
        class,
        vertices,
        centre,
        radius,
    }
}

/// Renders a scene; a pure function of `spec`.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.class_count);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let horizon = rng.random_range(h / 4..(3 * h) / 4);
    let mut polygons: Vec<Polygon> = Vec::new();
    if k > 2 {
        let count = rng.random_range(1..=3usize);
        let offset = rng.random_range(0..k - 2);
        for i in 0..count {
            let class = 2 + (offset + i) % (k - 2);
            for _ in 0..50 {
                let p = random_polygon(&mut rng, class, h, w);
                let clear = polygons.iter().all(|q| {
                    let d = ((p.centre.0 - q.centre.0).powi(2) + (p.centre.1 - q.centre.1).powi(2)).sqrt();
                    d > p.radius + q.radius
                });
                if clear {
                    polygons.push(p);
                    break;
                }
            }
        }
    }

    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut class = if y < horizon { 0 } else { 1 };
            if let Some(p) = polygons.iter().find(|p| p.contains(cx, cy)) {
                class = p.class;
            }
            labels[y * w + x] = class as u8;
        }
    }

    let phases: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI) as f32).collect();
    let hw = h * w;
    let mut image = Tensor::zeros(&[3, h, w]);
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = labels[p] as usize;
            let tex = &spec.textures[class];
            let along = x as f32 * tex.orientation.cos() + y as f32 * tex.orientation.sin();
            let stripe = tex.amplitude * (2.0 * std::f32::consts::PI * tex.frequency * along + phases[class]).sin();
            for c in 0..3 {
                let noise = rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
                data[c * hw + p] = (tex.base[c] + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Scene {
        image,
        labels,
        class_count: k,
    })
}
