//! Parameter storage and the small layers the model is assembled from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{multi_head_attention, Array, Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tensors: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Replace all values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter names differ"));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::shape("load params", a.shape(), b.shape()));
            }
        }
        self.values = other.values.clone();
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Tensor<'t> {
        self.tensors[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Array> {
        self.tensors.iter().map(|t| grads.take_id(t.id())).collect()
    }
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Array::randn(&[fan_in, fan_out], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Array::zeros(&[1, fan_out])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        let h = self.hidden.forward(p, x)?.gelu();
        self.out.forward(p, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        query: Tensor<'t>,
        keys: Tensor<'t>,
        values: Tensor<'t>,
        mask: Option<&Array>,
    ) -> Result<Tensor<'t>> {
        let q = self.query.forward(p, query)?;
        let k = self.key.forward(p, keys)?;
        let v = self.value.forward(p, values)?;
        let att = multi_head_attention(q, k, v, self.heads, mask)?;
        self.output.forward(p, att)
    }
}
