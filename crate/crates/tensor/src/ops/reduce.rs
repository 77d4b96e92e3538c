use crate::error::{dim_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn composite_backward<T: Real>(shape: &[usize], keep: &[bool], g: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let mut dk = vec![T::zero(); g.len()];
    let mut dp = vec![T::zero(); g.len()];
    for (i, &v) in g.iter().enumerate() {
        let pix = (i / (c * hw)) * hw + i % hw;
        if keep[pix] {
            dk[i] = v;
        } else {
            dp[i] = v;
        }
    }
    (dk, dp)
}

impl<T: Real> Graph<T> {
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        self.push(value, Op::Mean { input }, "mean")
    }

    /// Per-pixel selection: `known` where `mask` is 1, `pred` elsewhere.
    /// `mask` is `[N,1,H,W]` and applies to every channel.
    pub fn composite(&mut self, known: Var, pred: Var, mask: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = self.value(known).dims4()?;
        if self.shape(pred) != self.shape(known) || mask.shape() != [n, 1, h, w] {
            return dim_err(format!(
                "composite: known {:?}, pred {:?}, mask {:?}",
                self.shape(known),
                self.shape(pred),
                mask.shape()
            ));
        }
        let keep: Vec<bool> = mask.data().iter().map(|&m| m > T::lit(0.5)).collect();
        let hw = h * w;
        let (k, p) = (self.value(known).data(), self.value(pred).data());
        let data = (0..n * c * hw)
            .map(|i| if keep[(i / (c * hw)) * hw + i % hw] { k[i] } else { p[i] })
            .collect();
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(value, Op::Composite { known, pred, keep }, "composite")
    }
}
