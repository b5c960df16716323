//! Named parameter storage, kept outside the tape. Each forward pass
//! binds parameters onto a fresh tape as grad leaves; gradients are
//! harvested back by name. BTreeMap keeps iteration order stable.

use std::collections::BTreeMap;

use super::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }
}

/// Records which tape leaf each parameter was bound to in one forward
/// pass, so gradients can be summed per name afterwards.
#[derive(Debug, Default)]
pub struct ParamBindings {
    pub bound: Vec<(String, TensorId)>,
}

impl ParamBindings {
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> TensorId {
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let id = tape.param(&p.shape, p.values.clone());
        self.bound.push((name.to_string(), id));
        id
    }

    /// Sum gradients per parameter name, in binding order.
    pub fn collect_grads(&self, tape: &Tape, grads: &super::Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in &self.bound {
            let len = tape.values(*id).len();
            let entry = out.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            if let Some(g) = grads.get(*id) {
                for (e, gi) in entry.iter_mut().zip(g) {
                    *e += gi;
                }
            }
        }
        out
    }
}
