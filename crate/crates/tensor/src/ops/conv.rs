//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{dim_err, Result, TensorError};
use crate::graph::{ConvGeom, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[cfg(feature = "fault-injection")]
pub mod fault {
    use std::sync::atomic::{AtomicBool, Ordering};

    static FLIP_INPUT_GRAD: AtomicBool = AtomicBool::new(false);

    /// Negates the input gradient of every conv2d backward while set.
    pub fn set_conv_backward_sign_error(on: bool) {
        FLIP_INPUT_GRAD.store(on, Ordering::SeqCst);
    }

    pub(crate) fn active() -> bool {
        FLIP_INPUT_GRAD.load(Ordering::SeqCst)
    }
}

/// Output extent along one axis; `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, geom: ConvGeom) -> Option<usize> {
    let span = geom.dilation * (kernel - 1) + 1;
    let padded = len + 2 * geom.pad;
    if padded < span || geom.stride == 0 {
        return None;
    }
    Some((padded - span) / geom.stride + 1)
}

struct Layout {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl Layout {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], l: &Layout, cols: &mut [T]) {
    let p = l.plane();
    let (s, d, pad) = (l.geom.stride as isize, l.geom.dilation as isize, l.geom.pad as isize);
    for c in 0..l.cin {
        let src = &x[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (c * l.kh + ki) * l.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..l.ho {
                    let iy = oy as isize * s + ki as isize * d - pad;
                    let line = &mut dst[oy * l.wo..(oy + 1) * l.wo];
                    if iy < 0 || iy >= l.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * l.w..(iy as usize + 1) * l.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize * d - pad;
                        *v = if ix < 0 || ix >= l.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], l: &Layout, dx: &mut [T]) {
    let p = l.plane();
    let (s, d, pad) = (l.geom.stride as isize, l.geom.dilation as isize, l.geom.pad as isize);
    for c in 0..l.cin {
        let dst = &mut dx[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (c * l.kh + ki) * l.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..l.ho {
                    let iy = oy as isize * s + ki as isize * d - pad;
                    if iy < 0 || iy >= l.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * l.w..(iy as usize + 1) * l.w];
                    for ox in 0..l.wo {
                        let ix = ox as isize * s + kj as isize * d - pad;
                        if ix >= 0 && ix < l.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * l.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn layout(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<(usize, usize, Layout)> {
    let [n, cin, h, w] = input[..] else {
        return dim_err(format!("conv2d input must be rank 4, got {input:?}"));
    };
    let [cout, wcin, kh, kw] = weight[..] else {
        return dim_err(format!("conv2d weight must be rank 4, got {weight:?}"));
    };
    if wcin != cin {
        return dim_err(format!("conv2d weight expects {wcin} input channels, input has {cin}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Config(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(TensorError::Config("conv2d stride and dilation must be >= 1".into()));
    }
    let (Some(ho), Some(wo)) = (conv_out_len(h, kh, geom), conv_out_len(w, kw, geom)) else {
        return Err(TensorError::Config(format!(
            "conv2d kernel {kh}x{kw} with {geom:?} does not fit {h}x{w}"
        )));
    };
    Ok((
        n,
        cout,
        Layout {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            geom,
        },
    ))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeom,
    out_shape: &[usize],
    g: &[T],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads<T> {
    let (n, cout, l) = layout(input.shape(), weight.shape(), geom).expect("validated in forward");
    debug_assert_eq!(out_shape, &[n, cout, l.ho, l.wo]);
    let (k, p) = (l.patch(), l.plane());
    let in_stride = l.cin * l.h * l.w;
    let mut cols = vec![T::zero(); k * p];
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.numel()]);
    for b in 0..n {
        let gout = &g[b * cout * p..(b + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &l, &mut cols);
            // dW += gout · colsᵀ
            T::gemm(
                cout,
                p,
                k,
                T::one(),
                gout,
                p as isize,
                1,
                &cols,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · gout
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                weight.data(),
                1,
                k as isize,
                gout,
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            col2im(&cols, &l, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    #[cfg(feature = "fault-injection")]
    if fault::active() {
        if let Some(dx) = dx.as_mut() {
            dx.iter_mut().for_each(|v| *v = -*v);
        }
    }
    ConvGrads { input: dx, weight: dw }
}

pub(crate) fn bias_backward<T: Real>(out_shape: &[usize], g: &[T]) -> Vec<T> {
    let (n, cout) = (out_shape[0], out_shape[1]);
    let p = out_shape[2] * out_shape[3];
    let mut db = vec![T::zero(); cout];
    for b in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (b * cout + co) * p;
            *acc = g[base..base + p].iter().fold(*acc, |a, &v| a + v);
        }
    }
    db
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
    ///
    /// Output extent per axis is `floor((H + 2·pad − dilation·(kh−1) − 1)/stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cout, l) = layout(self.shape(input), self.shape(weight), geom)?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        let (k, p) = (l.patch(), l.plane());
        let in_stride = l.cin * l.h * l.w;
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = vec![T::zero(); k * p];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for b in 0..n {
            im2col(&x[b * in_stride..(b + 1) * in_stride], &l, &mut cols);
            let dst = &mut out[b * cout * p..(b + 1) * cout * p];
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            T::gemm(
                cout,
                k,
                p,
                T::one(),
                w,
                k as isize,
                1,
                &cols,
                p as isize,
                1,
                T::one(),
                dst,
                p as isize,
                1,
            );
        }
        let value = Tensor::new(vec![n, cout, l.ho, l.wo], out)?;
        self.push(value, Op::Conv2d { input, weight, bias, geom }, "conv2d")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(x);
        let w = g.constant(w);
        let y = g.conv2d(x, w, None, geom).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn box_sum_of_ones() {
        let y = run(Tensor::ones(&[1, 1, 3, 3]), Tensor::ones(&[1, 1, 3, 3]), ConvGeom::same(1));
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64).sin());
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert_eq!(run(x.clone(), w, ConvGeom::same(1)), x);
    }

    #[test]
    fn stride_two_halves_even_input() {
        let y = run(Tensor::ones(&[1, 2, 8, 6]), Tensor::ones(&[3, 2, 3, 3]), ConvGeom::down2());
        assert_eq!(y.shape(), &[1, 3, 4, 3]);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w_even = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(matches!(g.conv2d(x, w_even, None, ConvGeom::same(1)), Err(TensorError::Config(_))));
        let w_bad = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w_bad, None, ConvGeom::same(1)),
            Err(TensorError::Dimension(_))
        ));
        let big = g.constant(Tensor::ones(&[1, 2, 7, 7]));
        let no_pad = ConvGeom {
            stride: 1,
            pad: 0,
            dilation: 1,
        };
        assert!(matches!(g.conv2d(x, big, None, no_pad), Err(TensorError::Config(_))));
    }
}
