//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] is the gradient record: every primitive applied through it is
//! appended in execution order together with its input node ids and whatever
//! the backward rule needs from the forward pass. Calling [`Graph::backward`]
//! walks the record in reverse and returns a [`Gradients`] table that can be
//! queried per node or folded into a [`ParamStore`].
//!
//! ```
//! use dmfnet::diffarray::{Graph, ParamStore};
//! use dmfnet::tensor::Tensor;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::from_rows(&[[2.0]]).unwrap()).unwrap();
//! let mut g = Graph::new(&store);
//! let wv = g.param(w);
//! let x = g.constant(Tensor::from_rows(&[[3.0]]).unwrap());
//! let wx = g.matmul(wv, x).unwrap();
//! let loss = g.mul(wx, wx).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(wv).unwrap().item(), 36.0);
//! ```

pub mod gradcheck;
mod nn;
mod ops;
mod params;

pub use nn::{
    attention_heads, multi_head_attention, transpose_conv1d, Activation, Conv2d, LayerNorm,
    Linear, Mlp, MultiHeadAttention, ResidualBlock2d, TransposeConv1d,
};
pub use ops::{gemm, max_over_axis, softmax_last};
pub use params::{Initializer, ParamId, ParamStore, Parameter};

use std::collections::HashMap;
use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values retained from a forward evaluation for use by the backward rule.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Saved {
    #[default]
    None,
    Indices(Vec<usize>),
    Values(Vec<f64>),
}

/// One differentiable operation.
///
/// `forward` must be a pure function of its inputs: replaying a record relies
/// on it returning bit-identical results.
pub trait Primitive: Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)>;

    /// Gradients with respect to each input, given the gradient of the output.
    /// `None` marks an input that receives no gradient (e.g. integer-like data).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        saved: &Saved,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Param(ParamId),
    Op {
        prim: Box<dyn Primitive>,
        inputs: Vec<usize>,
        saved: Saved,
    },
}

#[derive(Debug)]
struct Node {
    // `None` only for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    kind: NodeKind,
}

/// Gradient record and evaluation context.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    record: bool,
}

impl<'p> Graph<'p> {
    /// A recording graph.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    /// A graph that evaluates primitives without keeping backward information.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value: Some(value),
            kind: NodeKind::Leaf,
        })
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(Node {
            value: None,
            kind: NodeKind::Param(id),
        });
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.kind) {
            (Some(t), _) => t,
            (None, NodeKind::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Applies `prim` to `inputs`, recording it when this graph records.
    pub fn apply(&mut self, prim: Box<dyn Primitive>, inputs: &[Var]) -> Result<Var> {
        let (out, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            prim.forward(&vals)?
        };
        let kind = if self.record {
            NodeKind::Op {
                prim,
                inputs: inputs.iter().map(|v| v.0).collect(),
                saved,
            }
        } else {
            NodeKind::Leaf
        };
        Ok(self.push(Node {
            value: Some(out),
            kind,
        }))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward", "graph was built without recording"));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let NodeKind::Op {
                prim,
                inputs,
                saved,
            } = &self.nodes[id].kind
            else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(Var(i))).collect();
            let out = self.value(Var(id));
            let in_grads = prim.backward(&in_vals, out, saved, &grad_out);
            debug_assert_eq!(in_grads.len(), inputs.len(), "{}", prim.name());
            for ((&i, g), x) in inputs.iter().zip(in_grads).zip(&in_vals) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), x.shape(), "{}", prim.name());
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut params: Vec<(ParamId, Var)> =
            self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Re-evaluates every recorded primitive from the leaves and returns the
    /// node values of the replay, in record order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.kind {
                NodeKind::Leaf | NodeKind::Param(_) => self.value(Var(id)).clone(),
                NodeKind::Op { prim, inputs, .. } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &values[i]).collect();
                    prim.forward(&ins)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when a replay reproduces every recorded value bit-exactly.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed
            .iter()
            .enumerate()
            .all(|(i, t)| bits_equal(t, self.value(Var(i)))))
    }

    /// Names of the recorded primitives in order; leaves are reported as `leaf`/`param`.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Leaf => "leaf",
                NodeKind::Param(_) => "param",
                NodeKind::Op { prim, .. } => prim.name(),
            })
            .collect()
    }

    /// Checks the topological-order invariant of the record.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(id, n)| match &n.kind {
            NodeKind::Op { inputs, .. } => inputs.iter().all(|&i| i < id),
            _ => true,
        })
    }
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf (or any retained) node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Reached parameters and their gradients, ordered by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}
