//! Elementwise activations and arithmetic.
//!
//! Binary ops broadcast the right operand in two ways only: its shape is a
//! suffix of the left shape, or it is a `[C]` vector against `[N, C, H, W]`.

use crate::error::{dim_err, Result, TensorError};
use crate::graph::{Bcast, BinaryKind, Graph, Op, UnaryKind, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

fn unary_forward<T: Real>(kind: UnaryKind<T>, x: T) -> T {
    match kind {
        UnaryKind::LeakyRelu(a) => {
            if x > T::zero() {
                x
            } else {
                x * a
            }
        }
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        UnaryKind::Log => x.ln(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::MulScalar(c) => x * c,
        UnaryKind::ClampMin(c) => x.max(c),
    }
}

pub(crate) fn unary_backward<T: Real>(kind: UnaryKind<T>, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    let two = T::lit(2.0);
    x.iter()
        .zip(y)
        .zip(g)
        .map(|((&x, &y), &g)| match kind {
            UnaryKind::LeakyRelu(a) => {
                if x > T::zero() {
                    g
                } else {
                    g * a
                }
            }
            UnaryKind::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            UnaryKind::Tanh => g * (T::one() - y * y),
            UnaryKind::Sigmoid => g * y * (T::one() - y),
            UnaryKind::Log => g / x,
            UnaryKind::Exp => g * y,
            UnaryKind::Sqrt => g / (two * y),
            UnaryKind::Abs => {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }
            UnaryKind::Square => g * two * x,
            UnaryKind::AddScalar(_) => g,
            UnaryKind::MulScalar(c) => g * c,
            UnaryKind::ClampMin(c) => {
                if x > c {
                    g
                } else {
                    T::zero()
                }
            }
        })
        .collect()
}

fn resolve_bcast(lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    if rhs.len() == 1 && lhs.len() == 4 && rhs[0] == lhs[1] {
        return Ok(Bcast::Channel {
            channels: lhs[1],
            plane: lhs[2] * lhs[3],
        });
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        return Ok(Bcast::Suffix {
            period: rhs.iter().product(),
        });
    }
    dim_err(format!("cannot broadcast {rhs:?} against {lhs:?}"))
}

#[inline]
fn binary_forward<T: Real>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

pub(crate) fn binary_backward<T: Real>(
    kind: BinaryKind,
    bcast: Bcast,
    lhs: &[T],
    rhs: &[T],
    g: &[T],
    want_lhs: bool,
    want_rhs: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let dl = want_lhs.then(|| {
        g.iter()
            .enumerate()
            .map(|(i, &g)| {
                let b = rhs[bcast.rhs_index(i)];
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => g,
                    BinaryKind::Mul => g * b,
                    BinaryKind::Div => g / b,
                }
            })
            .collect()
    });
    let dr = want_rhs.then(|| {
        let mut d = vec![T::zero(); rhs.len()];
        for (i, &g) in g.iter().enumerate() {
            let j = bcast.rhs_index(i);
            let contrib = match kind {
                BinaryKind::Add => g,
                BinaryKind::Sub => -g,
                BinaryKind::Mul => g * lhs[i],
                BinaryKind::Div => -g * lhs[i] / (rhs[j] * rhs[j]),
            };
            d[j] = d[j] + contrib;
        }
        d
    });
    (dl, dr)
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, input: Var, kind: UnaryKind<T>, name: &'static str) -> Result<Var> {
        let value = self.value(input).map(|x| unary_forward(kind, x));
        self.push(value, Op::Unary { input, kind }, name)
    }

    fn binary(&mut self, lhs: Var, rhs: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        let bcast = resolve_bcast(a.shape(), b.shape())?;
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| binary_forward(kind, x, b.data()[bcast.rhs_index(i)]))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push(value, Op::Binary { lhs, rhs, kind, bcast }, name)
    }

    /// Leaky ReLU with the fixed negative slope 0.2.
    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::LeakyRelu(T::lit(LEAKY_SLOPE)), "leaky_relu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(TensorError::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(x, UnaryKind::Log, "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp, "exp")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(TensorError::Domain(format!("sqrt of non-positive value {bad}")));
        }
        self.unary(x, UnaryKind::Sqrt, "sqrt")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs, "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square, "square")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c), "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, UnaryKind::MulScalar(c), "mul_scalar")
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        self.unary(x, UnaryKind::ClampMin(floor), "clamp_min")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let y = f(&mut g, v).unwrap();
        g.value(y).item()
    }

    #[test]
    fn activation_values() {
        assert_eq!(apply(|g, v| g.leaky_relu(v), -1.0), -0.2);
        assert_eq!(apply(|g, v| g.leaky_relu(v), 2.0), 2.0);
        assert_eq!(apply(|g, v| g.sigmoid(v), 0.0), 0.5);
        assert_eq!(apply(|g, v| g.relu(v), -3.0), 0.0);
        assert!((apply(|g, v| g.sigmoid(v), -40.0)).is_finite());
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(v), Err(TensorError::Domain(_))));
    }

    #[test]
    fn mul_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let y = g.mul(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 3.0);
        assert_eq!(g.grad(b).unwrap().item(), 2.0);
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let per_channel = g.constant(Tensor::new(vec![3], vec![100.0, 200.0, 300.0]).unwrap());
        let y = g.add(x, per_channel).unwrap();
        assert_eq!(g.value(y).data()[0], 100.0);
        assert_eq!(g.value(y).data()[4], 204.0);
        assert_eq!(g.value(y).data()[12], 112.0);

        let suffix = g.constant(Tensor::ones(&[2, 2]));
        let z = g.sub(x, suffix).unwrap();
        assert_eq!(g.value(z).data()[5], 4.0);

        let bad = g.constant(Tensor::ones(&[5]));
        assert!(matches!(g.mul(x, bad), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn broadcast_rhs_gradient_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 3, 2, 2]));
        let c = g.param(Tensor::ones(&[3]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap().data(), &[8.0, 8.0, 8.0]);
    }
}
