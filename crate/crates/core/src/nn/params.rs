//! Named parameter storage. Master copies are f32; binding onto a tape
//! casts into the tape's element type (f64 during gradient-check replay).

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Element, Graph, NnError, TensorId};

/// Ordered, uniquely-named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f32>) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f32>, NnError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameters bound onto a tape for one forward pass.
pub struct BoundParams {
    ids: Vec<(String, TensorId)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId, NnError> {
        self.index
            .get(name)
            .map(|&i| self.ids[i].1)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Collects gradients per parameter name from a backward pass, cast to
    /// f32. Errors if any parameter received no gradient.
    pub fn collect_grads<E: Element>(
        &self,
        grads: &[Option<ArrayD<E>>],
    ) -> Result<Vec<(String, ArrayD<f32>)>, NnError> {
        self.ids
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .as_ref()
                    .ok_or_else(|| NnError::MissingGradient(name.clone()))?;
                Ok((name.clone(), g.mapv(|v| v.into_f64() as f32)))
            })
            .collect()
    }
}

/// Registers every parameter as a leaf on the tape.
pub fn bind_params<E: Element>(graph: &mut Graph<E>, params: &ParamSet) -> BoundParams {
    let mut ids = Vec::with_capacity(params.len());
    let mut index = HashMap::new();
    for (name, tensor) in params.iter() {
        let cast = tensor.mapv(E::from_f32);
        let id = graph.leaf(cast);
        index.insert(name.to_string(), ids.len());
        ids.push((name.to_string(), id));
    }
    BoundParams { ids, index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        assert!(ps.insert("w", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }

    #[test]
    fn order_is_insertion_order() {
        let mut ps = ParamSet::new();
        ps.insert("b", ArrayD::zeros(IxDyn(&[1]))).unwrap();
        ps.insert("a", ArrayD::zeros(IxDyn(&[1]))).unwrap();
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["b", "a"]);
    }
}
