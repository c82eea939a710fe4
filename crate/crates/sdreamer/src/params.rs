//! Named parameter storage.
//!
//! Models register each learnable tensor once under a unique dotted name and
//! hold on to the returned [`ParamId`]. Sharing a parameter between pathways
//! is therefore structural: every forward pass that binds the same id onto a
//! tape gets the same tape variable, and gradients from all uses accumulate
//! into one slot.

use std::collections::HashMap;

use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name`. Panics on duplicate names — parameter
    /// names double as the checkpoint schema and must be unique.
    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {:?}",
            name
        );
        tensor.requires_grad = true;
        let idx = self.entries.len();
        self.entries.push((name.to_string(), tensor));
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Binds parameters onto a tape, memoizing so that repeated requests for the
/// same parameter return the same tape variable.
///
/// `trainable = false` binds parameters as constants; combined with constant
/// inputs this makes the tape record nothing, which is what inference wants.
pub struct ParamBinder {
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl ParamBinder {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        ParamBinder { trainable, bound: vec![None; store.len()] }
    }

    /// Tape variable for `id`, created on first use.
    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = store.get(id);
        let v = if self.trainable {
            tape.variable(t.shape(), t.data().to_vec())
        } else {
            tape.constant(t.shape(), t.data().to_vec())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// After a backward pass, copy each bound parameter's gradient back into
    /// `store`, accumulating into `Tensor::grad`.
    pub fn harvest_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (idx, bound) in self.bound.iter().enumerate() {
            let Some(v) = bound else { continue };
            let Some(g) = tape.grad(*v) else { continue };
            let t = store.get_mut(ParamId(idx));
            t.zero_grad_if_missing();
            let slot = t.grad.as_mut().unwrap();
            for (s, gi) in slot.iter_mut().zip(g) {
                *s += gi;
            }
        }
    }
}

impl Tensor {
    fn zero_grad_if_missing(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.numel()]);
        }
    }
}

/// Weight initialization helpers.
pub mod init {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use crate::tensor::Tensor;

    /// Truncated normal: redraw until the sample lies within two standard
    /// deviations, the usual transformer embedding/attention init.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let normal = Normal::new(0.0, std).expect("valid std");
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                data.push(v);
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 1.0)
    }
}
