//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors. Insertion order is the
/// iteration and serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor with the same-named one from `other`. Names
    /// and shapes must match exactly.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.tensors[i].shape(),
                    src.shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        if let Some(extra) = other.names.iter().find(|n| !self.index.contains_key(*n)) {
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Places every parameter on the graph. `trainable` leaves receive
    /// gradients; otherwise they are constants.
    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Creates parameters under a dotted name prefix.
pub struct Init<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> Result<O>
    where
        F: FnOnce(&mut Self) -> Result<O>,
    {
        let saved = self.prefix.clone();
        self.prefix = self.full(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = self.full(name);
        self.store.insert(&n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = self.full(name);
        self.store.insert(&n, Tensor::ones(shape))
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = self.full(name);
        let t = Tensor::trunc_normal(shape, std, self.rng);
        self.store.insert(&n, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scoped_names_and_duplicates() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng);
        init.scoped("enc", |i| i.scoped("s1", |i| i.zeros("w", &[2, 2])))
            .unwrap();
        assert!(init
            .scoped("enc", |i| i.scoped("s1", |i| i.zeros("w", &[1])))
            .is_err());
        assert!(store.by_name("enc.s1.w").is_some());
        assert_eq!(store.numel(), 4);
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.insert("x", Tensor::ones(&[3])).unwrap();
        assert!(a.assign_from(&b).is_err());
        let mut c = ParamStore::<f32>::new();
        c.insert("x", Tensor::ones(&[2])).unwrap();
        a.assign_from(&c).unwrap();
        assert_eq!(a.by_name("x").unwrap().data(), &[1.0, 1.0]);
    }
}
