use crate::error::Result;
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Logits are clamped to ±30 before the binary cross-entropy.
pub const LOGIT_CLAMP: f64 = 30.0;

fn bce_term<T: Real>(x: T, t: T) -> T {
    let lim = T::lit(LOGIT_CLAMP);
    let x = x.max(-lim).min(lim);
    x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn bce_backward<T: Real>(x: &[T], t: T, g: T) -> Vec<T> {
    let lim = T::lit(LOGIT_CLAMP);
    let scale = g / T::lit(x.len() as f64);
    x.iter()
        .map(|&x| {
            if x.abs() > lim {
                return T::zero();
            }
            let s = if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            (s - t) * scale
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// Mean binary cross-entropy of sigmoid(`logits`) against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Result<Var> {
        let t = self.value(logits);
        let total = t.data().iter().fold(T::zero(), |acc, &x| acc + bce_term(x, target));
        let value = Tensor::scalar(total / T::lit(t.numel() as f64));
        self.push(value, Op::BceLogits { input: logits, target }, "bce_with_logits")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let real = g.bce_with_logits(x, 1.0).unwrap();
        let fake = g.bce_with_logits(x, 0.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(real).item() - ln2).abs() < 1e-15);
        assert!((g.value(fake).item() - ln2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4], 1e6));
        let right = g.bce_with_logits(x, 1.0).unwrap();
        let wrong = g.bce_with_logits(x, 0.0).unwrap();
        assert!(g.value(right).item() < 1e-12);
        assert!((g.value(wrong).item() - 30.0).abs() < 1e-9);
    }
}
