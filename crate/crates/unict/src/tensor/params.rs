//! Named parameter storage and per-pass parameter binding.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{self, AnyTensor};
use super::graph::{Graph, Gradients, Var};
use super::{Result, Scalar, Tensor, TensorError};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat set of named leaf parameters, the unit the optimizer and the
/// checkpoint container operate on.
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape is fixed at registration"
        );
        self.values[id.0] = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let items: Vec<(String, AnyTensor)> = self
            .iter()
            .map(|(n, v)| (n.to_string(), AnyTensor::from_tensor(v)))
            .collect();
        checkpoint::write_checkpoint(path, &items)
    }

    /// Load values for every registered parameter; names, shapes and dtype
    /// must all match the checkpoint exactly.
    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let items = checkpoint::read_checkpoint(path)?;
        let by_name: HashMap<&str, &AnyTensor> =
            items.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if items.len() != self.len() {
            return Err(TensorError::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                items.len(),
                self.len()
            )));
        }
        for id in 0..self.values.len() {
            let name = &self.names[id];
            let found = by_name
                .get(name.as_str())
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let tensor: Tensor<T> = found.to_tensor().ok_or_else(|| {
                TensorError::Format(format!("dtype mismatch for parameter {name:?}"))
            })?;
            if tensor.shape() != self.values[id].shape() {
                return Err(TensorError::Format(format!(
                    "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                    tensor.shape(),
                    self.values[id].shape()
                )));
            }
            self.values[id] = tensor;
        }
        Ok(())
    }
}

/// Initialization schemes used at parameter registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, std) with resampling outside two standard deviations.
    TruncNormal { std: f64 },
    /// He-style uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)].
    KaimingUniform { fan_in: usize },
}

impl Init {
    fn sample<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::Zeros => return Tensor::zeros(shape),
            Init::Ones => return Tensor::ones(shape),
            Init::Const(v) => return Tensor::full(shape, T::from_f64(v)),
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| {
                        let mut v = dist.sample(rng);
                        while v.abs() > 2.0 * std {
                            v = dist.sample(rng);
                        }
                        T::from_f64(v)
                    })
                    .collect()
            }
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
            }
        };
        Tensor::from_vec(data, shape).expect("sampled shape")
    }
}

/// Hierarchical registration handle: builds dot-separated names and routes
/// all sampling through one deterministic RNG.
pub struct Scope<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let value = init.sample(shape, self.rng);
        self.params.register(&full, value)
    }
}

/// One forward/backward pass over a parameter set.
///
/// Parameters enter the graph lazily as leaves the first time a layer asks
/// for them, so gradient collection afterwards is a table lookup.
pub struct Session<'a, T: Scalar> {
    pub g: Graph<T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a ParamSet<T>, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            bound: vec![None; params.len()],
            params,
            trainable,
        }
    }

    /// Graph variable bound to a parameter (inserted on first use).
    pub fn pvar(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.value(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Run backward from a scalar loss and collect per-parameter gradients,
    /// aligned with the parameter set. Parameters that never entered the
    /// graph (or received no gradient) yield `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect())
    }
}
