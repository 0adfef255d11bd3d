//! Parameter storage and the small layer types the networks are built from.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`. Tracked parameters receive gradients;
    /// untracked ones are recorded as constants, which skips their part of
    /// the reverse pass.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if tracked {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// The tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients, indexed like the store.
    pub fn collect(&self, grads: &Gradients) -> Result<ParamGrads, TensorError> {
        let grads = self
            .vars
            .iter()
            .map(|v| grads.get(*v).cloned())
            .collect::<Result<_, _>>()?;
        Ok(ParamGrads { grads })
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }
}

/// He (fan-in) normal initialization.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Fully connected layer `x·W + b`, weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            he_normal(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(h, p.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with ReLU between them; the last layer is
/// linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &alloc::format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let width = tape.shape(x).get(1).copied().unwrap_or(0);
        if tape.shape(x).len() != 2 || width != self.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Same-padded `k×k` convolution over `[b, h, w, c]` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.add(
            alloc::format!("{name}.weight"),
            he_normal(&[fan_in, out_channels], fan_in, rng),
        );
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: s,
                rhs: vec![self.in_channels],
            });
        }
        let cols = tape.im2col(x, self.kernel)?;
        let y = tape.matmul(cols, p.var(self.weight))?;
        let y = tape.add_row(y, p.var(self.bias))?;
        tape.reshape(y, &[s[0], s[1], s[2], self.out_channels])
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mlp_widths_chain_and_check_input() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0);
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], &mut r);
        assert_eq!(store.len(), 4);
        assert_eq!(store.name(mlp.layers[1].bias), "m.1.bias");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[5, 4]));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[5, 3]);
        let bad = tape.constant(Tensor::zeros(&[5, 3]));
        assert!(mlp.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn conv_of_constant_interior_matches_weight_sum() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, 0);
        let conv = Conv2d::new(&mut store, "c", 3, 2, 1, &mut r);
        let wsum: f64 = store.get(conv.weight).data().iter().sum();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::filled(&[1, 5, 5, 2], 1.0));
        let y = conv.forward(&mut tape, &p, x).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 5, 5, 1]);
        assert!((out.data()[2 * 5 + 2] - wsum).abs() < 1e-12);
    }
}
