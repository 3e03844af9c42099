use std::collections::HashMap;
use std::rc::Rc;

use super::element::Element;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Tensors are reference counted so binding them to a tape is free; updates
/// go through [`ParamStore::get_mut`] once every tape has been dropped.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name: names are assigned
    /// by model construction code, never by user input.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Rc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), &**t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a leaf on `tape`, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf_rc(Rc::clone(t)))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Rc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> bool {
        if self.tensors[id.0].shape() != value.shape() {
            return false;
        }
        self.tensors[id.0] = Rc::new(value);
        true
    }
}
