use crate::error::{dim_err, Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stabilizer added to the variance before the square root in [`Graph::channel_stats`].
pub const STATS_EPS: f64 = 1e-5;

pub(crate) fn concat_backward<T: Real>(a: &[usize], b: &[usize], g: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, ca, cb, hw) = (a[0], a[1], b[1], a[2] * a[3]);
    let mut da = Vec::with_capacity(n * ca * hw);
    let mut db = Vec::with_capacity(n * cb * hw);
    for img in g.chunks((ca + cb) * hw) {
        da.extend_from_slice(&img[..ca * hw]);
        db.extend_from_slice(&img[ca * hw..]);
    }
    (da, db)
}

pub(crate) fn slice_backward<T: Real>(in_shape: &[usize], start: usize, len: usize, g: &[T]) -> Vec<T> {
    let (n, c, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let mut dx = vec![T::zero(); n * c * hw];
    for b in 0..n {
        let dst = (b * c + start) * hw;
        dx[dst..dst + len * hw].copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
    }
    dx
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (n, k, h, w) = y.dims4().expect("rank 4");
    let hw = h * w;
    let y = y.data();
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let dot = (0..k).fold(T::zero(), |acc, c| acc + g[base + c * hw + p] * y[base + c * hw + p]);
            for c in 0..k {
                let i = base + c * hw + p;
                dx[i] = y[i] * (g[i] - dot);
            }
        }
    }
    dx
}

pub(crate) fn normalize_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (n, k, h, w) = x.dims4().expect("rank 4");
    let hw = h * w;
    let x = x.data();
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let s = (0..k).fold(T::zero(), |acc, c| acc + x[base + c * hw + p]);
            let gx = (0..k).fold(T::zero(), |acc, c| acc + g[base + c * hw + p] * x[base + c * hw + p]);
            for c in 0..k {
                let i = base + c * hw + p;
                dx[i] = g[i] / s - gx / (s * s);
            }
        }
    }
    dx
}

pub(crate) fn channel_mean_backward<T: Real>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let (n, c, hw) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
    let count = T::lit((n * hw) as f64);
    (0..n * c * hw).map(|i| g[(i / hw) % c] / count).collect()
}

/// Numerically stable softmax over the channel axis of a plain tensor.
pub fn softmax_channels_tensor<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = t.dims4()?;
    if k < 2 {
        return dim_err(format!("softmax needs at least 2 channels, got {k}"));
    }
    let hw = h * w;
    let x = t.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let m = (0..k).fold(T::neg_infinity(), |m, c| m.max(x[base + c * hw + p]));
            let mut total = T::zero();
            for c in 0..k {
                let e = (x[base + c * hw + p] - m).exp();
                out[base + c * hw + p] = e;
                total = total + e;
            }
            for c in 0..k {
                let i = base + c * hw + p;
                out[i] = out[i] / total;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

impl<T: Real> Graph<T> {
    /// Stacks `a` and `b` along the channel axis (`a` first).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return dim_err(format!("concat_channels: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let hw = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for i in 0..na {
            data.extend_from_slice(&xa[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&xb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        self.push(value, Op::Concat { a, b }, "concat_channels")
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).slice_channels(start, len)?;
        self.push(value, Op::Slice { input, start, len }, "slice_channels")
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let value = softmax_channels_tensor(self.value(input))?;
        self.push(value, Op::Softmax { input }, "softmax_channels")
    }

    /// Divides every pixel's channel vector by its sum.
    pub fn normalize_channels(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (n, k, h, w) = t.dims4()?;
        let hw = h * w;
        let x = t.data();
        let mut out = x.to_vec();
        for b in 0..n {
            let base = b * k * hw;
            for p in 0..hw {
                let s = (0..k).fold(T::zero(), |acc, c| acc + x[base + c * hw + p]);
                if s <= T::zero() {
                    return Err(TensorError::Domain("normalize_channels: non-positive channel sum".into()));
                }
                for c in 0..k {
                    out[base + c * hw + p] = x[base + c * hw + p] / s;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::NormalizeChannels { input }, "normalize_channels")
    }

    /// Per-channel mean over N, H, W; result has shape `[C]`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let x = t.data();
        let mut sums = vec![T::zero(); c];
        for b in 0..n {
            for (ch, s) in sums.iter_mut().enumerate() {
                let base = (b * c + ch) * hw;
                *s = x[base..base + hw].iter().fold(*s, |acc, &v| acc + v);
            }
        }
        let value = Tensor::new(vec![c], sums.into_iter().map(|s| s / count).collect())?;
        self.push(value, Op::ChannelMean { input }, "channel_mean")
    }

    /// Per-channel mean and standard deviation `sqrt(var + 1e-5)` over N, H, W.
    pub fn channel_stats(&mut self, input: Var) -> Result<(Var, Var)> {
        let (n, _, h, w) = self.value(input).dims4()?;
        if n * h * w < 2 {
            return Err(TensorError::Config("channel_stats needs at least two elements per channel".into()));
        }
        let mu = self.channel_mean(input)?;
        let centered = self.sub(input, mu)?;
        let sq = self.square(centered)?;
        let var = self.channel_mean(sq)?;
        let var = self.add_scalar(var, T::lit(STATS_EPS))?;
        let sigma = self.sqrt(var)?;
        Ok((mu, sigma))
    }

    /// `(x − μ)/σ` with the statistics of [`Graph::channel_stats`].
    pub fn standardize(&mut self, input: Var) -> Result<Var> {
        let (mu, sigma) = self.channel_stats(input)?;
        let centered = self.sub(input, mu)?;
        self.div(centered, sigma)
    }
}
