use serde::{Deserialize, Serialize};

use super::ops::Op;
use super::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Every recorded value is rounded to the nearest `f32`.
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// How gradients pass through hard binary gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateGrad {
    /// Backward treats the threshold as identity on the sigmoid output.
    #[default]
    StraightThrough,
    /// The true (almost everywhere zero) derivative. Used by finite-difference checks.
    Exact,
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Dynamic reverse-mode tape. Values are recorded in execution order and
/// `backward` replays them in reverse, each exactly once.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    macs: u64,
    precision: Precision,
    gate_grad: GateGrad,
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
            precision: Precision::F64,
            gate_grad: GateGrad::StraightThrough,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_gate_grad(mut self, gate_grad: GateGrad) -> Self {
        self.gate_grad = gate_grad;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn gate_grad(&self) -> GateGrad {
        self.gate_grad
    }

    /// Multiply-accumulate operations executed since construction or the
    /// last [`Tape::reset_macs`].
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Hash of every discrete branch taken so far (gate patterns, ReLU
    /// signs, pooling winners, bilinear cells). Two evaluations with equal
    /// signatures ran through the same smooth piece of the function.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub(crate) fn mix_signature(&mut self, h: u64) {
        self.signature = (self.signature ^ h).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = true;
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Back-propagates from a scalar `loss`. Gradients of tensors used more
    /// than once are summed, in tape order. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                let node = &self.nodes[i];
                node.op.backward(self, &node.value, &g, &mut |v: Var, gv: Vec<f64>| {
                    accumulate(&mut grads, v, gv)
                });
            }
            grads[i] = Some(g);
        }
        let nodes = std::mem::take(&mut self.nodes);
        for (i, g) in grads.iter_mut().enumerate() {
            if !nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Drops all recorded nodes but keeps the counters.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the value does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient or zeros of length `len` when nothing reached `v`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn norm(&self, v: Var) -> f64 {
        self.get(v)
            .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}
