//! Define-by-run reverse-mode tape.
//!
//! Every differentiable operation whose operands include a tensor linked to the
//! tape appends one [`Node`]. Nodes only ever reference earlier nodes, so the
//! node list is already in topological order and backward is a single reverse
//! sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul { m: usize, k: usize, n: usize },
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Sum,
    Slice { axis: usize, start: usize },
    Concat { axis: usize },
    Broadcast,
    Transpose,
    Reshape,
    Scale(f64),
    RmsNorm { eps: f64 },
    LogSoftmax,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Exp => "exp",
            Op::Softplus => "softplus",
            Op::Silu => "silu",
            Op::Sigmoid => "sigmoid",
            Op::Sum => "sum",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Broadcast => "broadcast",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Scale(_) => "scale",
            Op::RmsNorm { .. } => "rms_norm",
            Op::LogSoftmax => "log_softmax",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Operand {
    pub node: Option<usize>,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Operand>,
    pub shape: Vec<usize>,
    pub out: Arc<Vec<f64>>,
}

/// Append-only operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep: leaf gradients keyed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    by_node: HashMap<usize, Vec<f64>>,
    /// Number of nodes the sweep visited.
    pub visits: usize,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf tensor returned by [`Tape::leaf`].
    pub fn of(&self, leaf: &Tensor) -> Option<&[f64]> {
        let node = leaf.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.by_node.get(&node.id).map(Vec::as_slice)
    }

    pub fn by_node(&self) -> &HashMap<usize, Vec<f64>> {
        &self.by_node
    }

    pub fn into_map(self) -> HashMap<usize, Vec<f64>> {
        self.by_node
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Links a tensor to this tape. Tensors that do not require gradients are
    /// returned as constants and never recorded.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let detached = t.detach().with_requires_grad(t.requires_grad());
        if !t.requires_grad() {
            return detached;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            out: t.data_arc().clone(),
        });
        detached.with_node(NodeRef { tape: self.id, id })
    }

    /// Input ids referenced by node `id` (all strictly smaller than `id`).
    pub fn node_inputs(&self, id: usize) -> Vec<usize> {
        self.nodes[id].inputs.iter().filter_map(|o| o.node).collect()
    }

    pub fn node_kind(&self, id: usize) -> &'static str {
        self.nodes[id].op.name()
    }

    /// Records `op` if any operand lives on this tape and returns the output tensor.
    pub(crate) fn record(
        &mut self,
        op: Op,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        out: Vec<f64>,
    ) -> Result<Tensor> {
        let out = Arc::new(out);
        let mut tracked = false;
        let mut operands = Vec::with_capacity(inputs.len());
        for t in inputs {
            let node = match t.node() {
                Some(n) if n.tape == self.id => {
                    tracked = true;
                    Some(n.id)
                }
                Some(n) => {
                    return Err(Error::contract(format!(
                        "{}: operand belongs to tape {} but was used on tape {}",
                        op.name(),
                        n.tape,
                        self.id
                    )))
                }
                None => None,
            };
            operands.push(Operand {
                node,
                shape: t.shape().to_vec(),
                value: t.data_arc().clone(),
            });
        }
        let result = Tensor::from_parts(shape.clone(), out.clone());
        if !tracked {
            return Ok(result);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: operands,
            shape,
            out,
        });
        Ok(result
            .with_requires_grad(true)
            .with_node(NodeRef { tape: self.id, id }))
    }

    /// Reverse sweep from a scalar output. Every node is visited exactly once.
    pub fn backward(&self, output: &Tensor) -> Result<Gradients> {
        if output.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                output.shape()
            )));
        }
        let root = match output.node() {
            Some(n) if n.tape == self.id => n.id,
            Some(_) => return Err(Error::contract("backward output lives on another tape")),
            None => return Err(Error::contract("backward output is not on a tape")),
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        let mut by_node = HashMap::new();
        let mut visits = 0;

        for id in (0..self.nodes.len()).rev() {
            visits += 1;
            let Some(g) = grads[id].take() else {
                if matches!(self.nodes[id].op, Op::Leaf) {
                    by_node.insert(id, vec![0.0; self.nodes[id].out.len()]);
                }
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                by_node.insert(id, g);
                continue;
            }
            let contributions = backward_node(node, &g);
            for (operand, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(src), Some(contrib)) = (operand.node, contrib) else {
                    continue;
                };
                debug_assert!(src < id);
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            by_node,
            visits,
        })
    }
}

/// Vector-Jacobian products for one node. Returns one entry per operand;
/// `None` where the operand is not tracked.
fn backward_node(node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| node.inputs[i].node.is_some();
    let x = |i: usize| node.inputs[i].value.as_slice();
    let out = node.out.as_slice();
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.to_vec()),
        ],
        Op::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => vec![
            want(0).then(|| elementwise(&|i| g[i] * x(1)[i])),
            want(1).then(|| elementwise(&|i| g[i] * x(0)[i])),
        ],
        Op::MatMul { m, k, n } => vec![
            // dA = G B^T, dB = A^T G
            want(0).then(|| kernels::matmul_nt(g, x(1), *m, *n, *k)),
            want(1).then(|| kernels::matmul_tn(x(0), g, *m, *k, *n)),
        ],
        Op::Exp => vec![want(0).then(|| elementwise(&|i| g[i] * out[i]))],
        Op::Softplus => vec![want(0).then(|| elementwise(&|i| g[i] * kernels::sigmoid(x(0)[i])))],
        Op::Sigmoid => vec![want(0).then(|| elementwise(&|i| g[i] * out[i] * (1.0 - out[i])))],
        Op::Silu => vec![want(0).then(|| {
            elementwise(&|i| {
                let v = x(0)[i];
                let s = kernels::sigmoid(v);
                g[i] * s * (1.0 + v * (1.0 - s))
            })
        })],
        Op::Sum => vec![want(0).then(|| vec![g[0]; x(0).len()])],
        Op::Slice { axis, start } => vec![want(0).then(|| {
            kernels::slice_backward(g, &node.inputs[0].shape, *axis, *start, node.shape[*axis])
        })],
        Op::Concat { axis } => {
            let mut offset = 0;
            node.inputs
                .iter()
                .map(|operand| {
                    let len = operand.shape[*axis];
                    let part = operand
                        .node
                        .map(|_| kernels::slice(g, &node.shape, *axis, offset, len));
                    offset += len;
                    part
                })
                .collect()
        }
        Op::Broadcast => vec![want(0).then(|| {
            let map = kernels::broadcast_map(&node.inputs[0].shape, &node.shape);
            let mut acc = vec![0.0; x(0).len()];
            for (gi, &src) in g.iter().zip(&map) {
                acc[src] += gi;
            }
            acc
        })],
        Op::Transpose => {
            let (r, c) = (node.inputs[0].shape[0], node.inputs[0].shape[1]);
            vec![want(0).then(|| kernels::transpose(g, c, r))]
        }
        Op::Reshape => vec![want(0).then(|| g.to_vec())],
        Op::Scale(c) => vec![want(0).then(|| g.iter().map(|v| v * c).collect())],
        Op::RmsNorm { eps } => vec![want(0).then(|| {
            let cols = *node.shape.last().unwrap_or(&1);
            kernels::rms_norm_backward(x(0), g, cols, *eps)
        })],
        Op::LogSoftmax => vec![want(0).then(|| {
            let cols = *node.shape.last().unwrap_or(&1);
            let mut dx = vec![0.0; g.len()];
            for ((drow, grow), orow) in dx
                .chunks_mut(cols)
                .zip(g.chunks(cols))
                .zip(out.chunks(cols))
            {
                let gsum: f64 = grow.iter().sum();
                for j in 0..cols {
                    drow[j] = grow[j] - orow[j].exp() * gsum;
                }
            }
            dx
        })],
    }
}
