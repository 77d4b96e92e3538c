use crate::error::{dim_err, Result, TensorError};
use crate::graph::{Graph, Op, UpsampleMode, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Source taps for one output coordinate under half-pixel-centre sampling
/// (`src = (i + 0.5)/f − 0.5`, clamped at the borders).
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(len: usize, factor: usize) -> Vec<Tap> {
    (0..len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn upsample_backward<T: Real>(in_shape: &[usize], factor: usize, mode: UpsampleMode, g: &[T]) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..n * c {
                let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let d = &mut dst[(y / factor) * w + x / factor];
                        *d = *d + src[y * ow + x];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = taps(h, factor);
            let tx = taps(w, factor);
            for plane in 0..n * c {
                let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for (y, a) in ty.iter().enumerate() {
                    let fy = T::lit(a.frac);
                    for (x, b) in tx.iter().enumerate() {
                        let fx = T::lit(b.frac);
                        let v = src[y * ow + x];
                        let top = v * (T::one() - fy);
                        let bot = v * fy;
                        let i00 = a.lo * w + b.lo;
                        let i01 = a.lo * w + b.hi;
                        let i10 = a.hi * w + b.lo;
                        let i11 = a.hi * w + b.hi;
                        dst[i00] = dst[i00] + top * (T::one() - fx);
                        dst[i01] = dst[i01] + top * fx;
                        dst[i10] = dst[i10] + bot * (T::one() - fx);
                        dst[i11] = dst[i11] + bot * fx;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2_backward<T: Real>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = g[(p * oh + y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest or bilinear upsampling of a tensor value, outside any graph.
pub fn upsample_tensor<T: Real>(t: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if factor < 1 {
        return Err(TensorError::Config("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(t.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = t.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = taps(h, factor);
            let tx = taps(w, factor);
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for (y, a) in ty.iter().enumerate() {
                    let fy = T::lit(a.frac);
                    for (xx, b) in tx.iter().enumerate() {
                        let fx = T::lit(b.frac);
                        let top = src[a.lo * w + b.lo] * (T::one() - fx) + src[a.lo * w + b.hi] * fx;
                        let bot = src[a.hi * w + b.lo] * (T::one() - fx) + src[a.hi * w + b.hi] * fx;
                        dst[y * ow + xx] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// 2×2 mean pooling; equals bilinear downsampling by ½ under half-pixel centres.
pub fn avg_pool2_tensor<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("avg_pool2 needs even spatial size, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = t.data();
    let quarter = T::lit(0.25);
    let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
        let p = i / (oh * ow);
        let (y, xx) = ((i / ow) % oh, i % ow);
        let base = p * h * w + 2 * y * w + 2 * xx;
        (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter
    });
    Ok(out)
}

impl<T: Real> Graph<T> {
    pub fn upsample(&mut self, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let value = upsample_tensor(self.value(input), factor, mode)?;
        self.push(value, Op::Upsample { input, factor, mode }, "upsample")
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let value = avg_pool2_tensor(self.value(input))?;
        self.push(value, Op::AvgPool2 { input }, "avg_pool2")
    }
}
