//! Named parameter storage and seeded initialization.

use mvweak_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors. Order is creation order and is what
/// checkpoints and optimizers iterate over.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| self.get(i))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Flattened copy of every parameter, in order.
    pub fn flatten(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.count(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Replaces `name` with `t`, which must keep its shape.
    pub fn replace(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| ModelError::Invalid(format!("no parameter named {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(ModelError::shape(
                name,
                format!(
                    "replacement shape {:?} differs from {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded parameter factory. Weights are uniform in `+-sqrt(6 / fan_in)`,
/// biases start at zero and lookup tables uniform in `+-0.05`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<F: Real>(&mut self, shape: &[usize], limit: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(self.rng.random_range(-limit..=limit)))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    pub fn fan_in<F: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<F> {
        self.uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn table<F: Real>(&mut self, shape: &[usize]) -> Tensor<F> {
        self.uniform(shape, 0.05)
    }
}
