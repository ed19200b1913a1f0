//! Named parameter buffers shared between forward passes, the optimizer,
//! and checkpoints. Parameters live outside any tape; each forward pass
//! binds them as leaves (tracked) or constants (frozen).

use std::sync::Arc;

use crate::ndtensor::{numel_of, Result, Scalar, Tape, Tensor, TensorError};
use crate::rng::RngStream;

/// Stable handle to one parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which optimization phase owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Network weights (theta): updated on training pairs.
    Weights,
    /// Architecture weights (alpha and eta logits): updated on validation
    /// pairs.
    Arch,
}

pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    values: Arc<Vec<F>>,
}

impl<F: Scalar> Param<F> {
    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Insertion-ordered collection of parameters; order is the serialization
/// and update order, so it must be deterministic across builds.
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<F>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if numel_of(&shape) != values.len() {
            return Err(TensorError::Invalid {
                op: "ParamStore::add",
                msg: format!("{name}: shape/value length mismatch"),
            });
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::Invalid {
                op: "ParamStore::add",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name,
            shape,
            group,
            values: Arc::new(values),
        });
        Ok(id)
    }

    /// Zero-initialized parameter.
    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
    ) -> Result<ParamId> {
        self.add(name, shape.to_vec(), vec![F::zero(); numel_of(shape)], group)
    }

    /// Kaiming-uniform (fan-in) initialized weight tensor: U(-b, b) with
    /// b = sqrt(6 / fan_in).
    pub fn add_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngStream,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let values = (0..numel_of(shape))
            .map(|_| F::cast(rng.uniform(-bound, bound)))
            .collect();
        self.add(name, shape.to_vec(), values, ParamGroup::Weights)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].group == group)
            .collect()
    }

    pub fn numel_in_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.numel())
            .sum()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    /// Detached tensor view (shares the buffer).
    pub fn tensor(&self, id: ParamId) -> Tensor<F> {
        let p = &self.params[id.0];
        Tensor::from_shared(p.shape.clone(), Arc::clone(&p.values))
    }

    /// Mutable access for optimizer updates. Clones the buffer only if a
    /// forward pass still holds a reference (it should not, between steps).
    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<F> {
        Arc::make_mut(&mut self.params[id.0].values)
    }

    pub fn set_values(&mut self, id: ParamId, values: Vec<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != numel_of(&p.shape) {
            return Err(TensorError::Invalid {
                op: "ParamStore::set_values",
                msg: format!("{}: wrong length", p.name),
            });
        }
        p.values = Arc::new(values);
        Ok(())
    }

    /// Bitwise snapshot of one group's buffers (for phase-separation and
    /// determinism checks).
    pub fn snapshot_group(&self, group: ParamGroup) -> Vec<(String, Vec<u64>)> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| {
                (
                    p.name.clone(),
                    p.values.iter().map(|v| v.to_bits_u64()).collect(),
                )
            })
            .collect()
    }
}

/// Which parameter groups are differentiated through in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackGroups {
    None,
    WeightsOnly,
    ArchOnly,
    Both,
}

impl TrackGroups {
    fn tracks(self, group: ParamGroup) -> bool {
        matches!(
            (self, group),
            (TrackGroups::Both, _)
                | (TrackGroups::WeightsOnly, ParamGroup::Weights)
                | (TrackGroups::ArchOnly, ParamGroup::Arch)
        )
    }
}

/// Per-forward-pass binding of parameters to tape tensors. A parameter
/// used by several blocks binds to one leaf, so fan-out gradients
/// accumulate on a single node.
pub struct Binding<F: Scalar> {
    track: TrackGroups,
    bound: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Binding<F> {
    pub fn new(store: &ParamStore<F>, track: TrackGroups) -> Self {
        Self {
            track,
            bound: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<F>, store: &ParamStore<F>, id: ParamId) -> Tensor<F> {
        if let Some(t) = &self.bound[id.0] {
            return t.clone();
        }
        let base = store.tensor(id);
        let t = if self.track.tracks(store.get(id).group) {
            tape.leaf(&base)
        } else {
            base
        };
        self.bound[id.0] = Some(t.clone());
        t
    }

    /// Accumulated gradient for a bound parameter, if it was tracked.
    pub fn grad(&self, tape: &Tape<F>, id: ParamId) -> Option<Tensor<F>> {
        self.bound[id.0].as_ref().and_then(|t| tape.grad(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_deduplicates_leaves() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", vec![2], vec![1.0, 2.0], ParamGroup::Weights)
            .unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new(&store, TrackGroups::WeightsOnly);
        let a = binding.bind(&mut tape, &store, id);
        let b = binding.bind(&mut tape, &store, id);
        assert_eq!(a.node(), b.node());
        assert_eq!(tape.len(), 1);

        // Fan-out through the single leaf accumulates.
        let s1 = tape.sum(&a).unwrap();
        let s2 = tape.sum(&b).unwrap();
        let t = tape.add(&s1, &s2).unwrap();
        tape.backward(&t).unwrap();
        assert_eq!(binding.grad(&tape, id).unwrap().values(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", vec![1], vec![1.0], ParamGroup::Weights)
            .unwrap();
        let a = store.add("a", vec![1], vec![2.0], ParamGroup::Arch).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new(&store, TrackGroups::ArchOnly);
        let wt = binding.bind(&mut tape, &store, w);
        let at = binding.bind(&mut tape, &store, a);
        assert!(!wt.is_tracked());
        assert!(at.is_tracked());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("w", vec![1], vec![0.0], ParamGroup::Weights)
            .unwrap();
        assert!(store
            .add("w", vec![1], vec![0.0], ParamGroup::Weights)
            .is_err());
    }
}
