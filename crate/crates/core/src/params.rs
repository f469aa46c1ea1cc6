//! Named parameter storage and the small dense layers built on it.

use rand::Rng;

use crate::error::{LtnError, Result};
use crate::numerics::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
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

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every value, checking that shapes are unchanged.
    pub fn set_values(&mut self, values: Vec<Matrix>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(LtnError::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (old, new) in self.values.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(LtnError::Shape {
                    op: "set_values",
                    left: old.shape(),
                    right: new.shape(),
                });
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter as a leaf; the returned vector is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Affine layer `x W + b` applied row-wise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Matrix::randn(in_dim, out_dim, std, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.weight.0])?;
        tape.add_row(h, vars[self.bias.0])
    }

    pub fn forward_values(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut h = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias);
        for r in 0..h.rows() {
            for (o, &bv) in h.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(h)
    }
}

/// Stack of [`Linear`] layers with rectified-linear activations between them
/// and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
