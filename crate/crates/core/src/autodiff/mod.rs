//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value, the handles of its inputs and a backward
//! closure that owns whatever context the rule needs. Nodes are appended in
//! topological order, so a single reverse sweep over the node list visits
//! every node after all of its consumers.
//!
//! Trainable weights live in a [`ParamStore`] outside the graph. The graph
//! copies a parameter's value when it is bound with [`Graph::param`] and
//! `backward` accumulates (`+=`) the parameter's gradient back into the store.

mod gradcheck;
mod ops;

pub use gradcheck::{fd_check, fd_check_with, FdReport};
pub use ops::{cross_entropy, BatchStats};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Leaf,
    Param,
    Add,
    Scale,
    Mul,
    Sum,
    Reshape,
    Rows,
    Concat,
    Repeat,
    TimeMean,
    Linear,
    Conv2d,
    GlobalAvgPool,
    BatchNorm,
    BatchNormEval,
    SoftmaxCrossEntropy,
    Charge,
    Fire,
    ProxyFire,
    Reset,
}

/// Everything a backward rule may read.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    /// Whether each input wants a gradient; rules may skip work for `false`.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Op,
    Constant,
    Leaf,
    Param(ParamId),
}

/// One recorded operation.
pub struct TapeNode {
    kind: OpKind,
    origin: Origin,
    value: Tensor,
    inputs: Vec<Var>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

impl TapeNode {
    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }
}

pub struct Graph {
    nodes: Vec<TapeNode>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no backward closures are kept.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node handle in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, kind: OpKind, origin: Origin, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            kind,
            origin,
            value,
            inputs: Vec::new(),
            needs_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(OpKind::Constant, Origin::Constant, value, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = self.grad_enabled;
        self.push_raw(OpKind::Leaf, Origin::Leaf, value, needs)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = self.grad_enabled;
        let value = store.get(id).value.clone();
        self.push_raw(OpKind::Param, Origin::Param(id), value, needs)
    }

    pub(crate) fn push(
        &mut self,
        kind: OpKind,
        value: Tensor,
        inputs: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(TapeNode {
            kind,
            origin: Origin::Op,
            value,
            inputs,
            needs_grad,
            backward: needs_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, accumulating into `params`.
    ///
    /// Calling this twice on the same graph adds the gradients twice.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::Input(format!(
                "backward needs a scalar root, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_seeded(loss, vec![1.0], params)
    }

    /// Vector-Jacobian product: back-propagates `seed` (the gradient of some
    /// downstream quantity with respect to `root`) through the graph.
    pub fn backward_seeded(
        &self,
        root: Var,
        seed: Vec<f64>,
        params: &mut ParamStore,
    ) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Input("root is not a node of this graph".into()));
        }
        if seed.len() != self.value(root).numel() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(root).shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        for node in &self.nodes[..=root.0] {
            if let Origin::Param(id) = node.origin {
                let p = params.params.get(id.0).ok_or_else(|| {
                    Error::State(format!("parameter {} not in store", id.0))
                })?;
                if p.value.shape() != node.value.shape() {
                    return Err(Error::State(format!(
                        "parameter {} changed shape since it was bound",
                        p.name
                    )));
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut leaves = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.origin {
                Origin::Constant => {}
                Origin::Leaf => {
                    leaves.insert(i, g);
                }
                Origin::Param(id) => {
                    for (acc, d) in params.params[id.0].grad.iter_mut().zip(&g) {
                        *acc += d;
                    }
                }
                Origin::Op => {
                    let Some(rule) = &node.backward else { continue };
                    let ctx = BackwardCtx {
                        grad: &g,
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        needs: node
                            .inputs
                            .iter()
                            .map(|v| self.nodes[v.0].needs_grad)
                            .collect(),
                    };
                    let input_grads = rule(&ctx);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (v, gi) in node.inputs.iter().zip(input_grads) {
                        let Some(gi) = gi else { continue };
                        if !self.nodes[v.0].needs_grad {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => {
                                for (a, d) in acc.iter_mut().zip(&gi) {
                                    *a += d;
                                }
                            }
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of graph leaves produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` when the leaf was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_sums_paths() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_of_weights_gives_unit_grads_and_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], vec![0.3, -1.0, 4.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let loss = g.sum(wv);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad, vec![1.0; 4]);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad, vec![2.0; 4]);
        store.zero_grad();
        assert_eq!(store.get(w).grad, vec![0.0; 4]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[3], 1.5));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let s = g.sum(wv);
        let loss = g.scale(s, 0.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad, vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(x, &mut ParamStore::new()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn no_grad_graph_keeps_no_closures() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2], 1.0));
        let mut g = Graph::no_grad();
        let wv = g.param(&store, w);
        let y = g.scale(wv, 2.0);
        assert!(!g.requires_grad(y));
        assert!(g.node(y).backward.is_none());
    }
}
