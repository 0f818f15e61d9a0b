//! Named parameter storage and small layer building blocks.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, DType, Gradients, NamedTensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: layer construction
    /// is deterministic, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn to_named(&self, prefix: &str, dtype: DType) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor {
                name: format!("{prefix}{n}"),
                dtype,
                tensor: t.clone(),
            })
            .collect()
    }

    /// Overwrites every parameter from `named` (matched by `prefix + name`).
    pub fn load_named(&mut self, prefix: &str, named: &[NamedTensor]) -> Result<()> {
        let lookup: HashMap<&str, &NamedTensor> = named.iter().map(|n| (n.name.as_str(), n)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let Some(src) = lookup.get(key.as_str()) else {
                return Err(Error::Checkpoint {
                    name: key,
                    message: "missing from checkpoint".into(),
                });
            };
            if src.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    name: key,
                    message: format!(
                        "checkpoint shape {:?} but model expects {:?}",
                        src.tensor.shape(),
                        t.shape()
                    ),
                });
            }
            t.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes `var` for parameter `id` (used to differentiate with
    /// respect to a single parameter tensor).
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    /// Gradient of every parameter, zeros where nothing flowed.
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| grads.get_or_zeros(self.var(id), store.get(id).numel()))
            .collect()
    }
}

/// Uniform `[-bound, bound]` initialisation.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// 2-d convolution layer with an optional bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Kaiming-uniform style init scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let fan_in = (in_ch * kernel.0 * kernel.1) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_ch, in_ch, kernel.0, kernel.1], bound),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv2d { weight, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geom)
    }
}

/// Dense layer `x: [R, in] -> [R, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = (3.0 / input as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(y, p.var(self.bias))
    }
}
