use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::{numel, Element, Tape, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>, decay: bool) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        self.params.insert(
            name.into(),
            Param {
                shape: shape.to_vec(),
                data: Arc::new(data),
                decay,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let data = p.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: Arc::new(data),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        for (name, p) in &self.params {
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(name.clone());
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradMap<T> {
    grads: BTreeMap<String, (Vec<usize>, Vec<T>)>,
}

impl<T: Element> GradMap<T> {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) {
        self.grads.insert(name, (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.grads.get(name).map(|(_, d)| d.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.grads.get_mut(name).map(|(_, d)| d.as_mut_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.grads.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &[T])> {
        self.grads.iter().map(|(k, (_, d))| (k, d.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<T>)> {
        self.grads.iter_mut().map(|(k, (_, d))| (k, d))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm across every gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|(_, d)| d.iter())
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` into `self`, inserting missing names.
    pub fn accumulate(&mut self, other: GradMap<T>) {
        for (name, (shape, data)) in other.grads {
            match self.grads.get_mut(&name) {
                Some((_, dst)) => dst.iter_mut().zip(data).for_each(|(d, v)| *d += v),
                None => {
                    self.grads.insert(name, (shape, data));
                }
            }
        }
    }

    /// Checks that every key names a parameter of `store` with the same shape.
    pub fn validate_against(&self, store: &ParamStore<T>) -> Result<()> {
        for (name, (shape, _)) in &self.grads {
            let Some(p) = store.get(name) else {
                return Err(Error::Config(format!("gradient for unknown parameter {name}")));
            };
            if &p.shape != shape {
                return Err(Error::Dimension {
                    op: "gradient",
                    lhs: p.shape.clone(),
                    rhs: shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Lazily binds parameters of a store as leaves on a tape, one leaf per name.
pub struct ParamBinding<'t, 's, T: Element> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Tensor<'t, T>>>,
}

impl<'t, 's, T: Element> ParamBinding<'t, 's, T> {
    /// Parameters become gradient-tracking leaves.
    pub fn trainable(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            trainable: true,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Parameters become constants; nothing is recorded for backward.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Tensor<'t, T>> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(*t);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let t = if self.trainable {
            self.tape.shared_var(name, &p.shape, Arc::clone(&p.data))?
        } else {
            self.tape.shared_constant(&p.shape, Arc::clone(&p.data))?
        };
        self.bound.borrow_mut().insert(name.to_string(), t);
        Ok(t)
    }
}
