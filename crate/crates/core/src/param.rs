//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Ordered set of uniquely named parameters. Registration order is the
/// optimizer and checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
    prefix: String,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            prefix: String::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = format!("{}{}", self.prefix, name.into());
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(id))
    }

    /// Registers everything added inside `f` under `prefix`.
    pub fn scoped<R>(&mut self, prefix: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix.push_str(prefix);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<F>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copies values from `other` by name; every parameter here must exist there with the same shape.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let src = other.by_name(&p.name)?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.tensor = src.clone();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<F>> {
        self.params
            .iter()
            .map(|p| vec![F::ZERO; p.tensor.numel()])
            .collect()
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn truncated_normal<F: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(F::from_f64(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("numel matches")
}

/// Initialization scale for projection and attention weights.
pub const INIT_STD: f64 = 0.02;
