//! Named parameter tensors and their binding into a graph.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sge_tensor::{Graph, Real, Tensor, Var};

use crate::error::{CoreError, Result};

/// Insertion-ordered map from unique names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::config(format!("duplicate parameter `{name}`")));
        }
        if !tensor.is_finite() {
            return Err(CoreError::NonFinite {
                what: format!("parameter `{name}`"),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Order-sensitive FNV-1a hash of names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_le_bytes());
            }
        }
        h
    }

    /// Registers every tensor as a graph leaf. Trainable leaves collect gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { set: self, vars }
    }

    /// Uses already-registered leaves, one per tensor in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_, T>> {
        if vars.len() != self.len() {
            return Err(CoreError::Usage(format!("{} vars for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound { set: self, vars })
    }
}

/// A [`ParamSet`] registered in one graph.
pub struct Bound<'a, T: Real> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| CoreError::Load {
            field: name.to_string(),
            msg: "parameter missing".into(),
        })
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.set.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients in parameter order; zeros where no gradient reached.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.set.tensors)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Seeded He-normal initializer for conv layers.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Weight `[cout, cin, k, k]` with std `sqrt(2 / (cin·k·k))` and a zero bias.
    pub fn conv<T: Real>(&mut self, set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(normal.sample(&mut self.rng)));
        set.insert(format!("{name}.w"), w)?;
        set.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }

    /// Conv whose weight and bias start at zero.
    pub fn zero_conv<T: Real>(&mut self, set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        set.insert(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]))?;
        set.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }
}
