use std::cell::RefCell;
use std::rc::Rc;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Everything a backward rule gets to see.
pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether input `i` needs a gradient at all.
    pub needs: &'a [bool],
}

impl<T> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in creation order, which is a
/// topological order of the computation.
pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    pieces: RefCell<Pieces>,
}

/// Branch decisions of piecewise operations (leaky ReLU signs, max
/// positions, interpolation cells), in op order.
enum Pieces {
    Off,
    Record(Vec<Vec<u64>>),
    Replay { log: Vec<Vec<u64>>, next: usize },
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Float = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            pieces: RefCell::new(Pieces::Off),
        }
    }

    /// A graph that logs the branch taken by every piecewise operation.
    pub fn recording_pieces() -> Self {
        let g = Self::new();
        *g.pieces.borrow_mut() = Pieces::Record(Vec::new());
        g
    }

    /// A graph on which piecewise operations follow the branches in `log`
    /// instead of their inputs, so the computation stays on one smooth
    /// piece.
    pub fn replaying_pieces(log: Vec<Vec<u64>>) -> Self {
        let g = Self::new();
        *g.pieces.borrow_mut() = Pieces::Replay { log, next: 0 };
        g
    }

    /// The branch log of a recording graph.
    pub fn take_piece_log(&self) -> Vec<Vec<u64>> {
        match std::mem::replace(&mut *self.pieces.borrow_mut(), Pieces::Off) {
            Pieces::Record(log) => log,
            _ => Vec::new(),
        }
    }

    /// Branch codes a piecewise op should use: `None` when it should decide
    /// from its inputs as usual.
    pub(crate) fn piece_codes(&self, decide: impl FnOnce() -> Vec<u64>) -> Option<Vec<u64>> {
        match &mut *self.pieces.borrow_mut() {
            Pieces::Off => None,
            Pieces::Record(log) => {
                let codes = decide();
                log.push(codes.clone());
                Some(codes)
            }
            Pieces::Replay { log, next } => {
                let codes = log.get(*next).cloned().expect("replayed graph has more piecewise ops than recorded");
                *next += 1;
                Some(codes)
            }
        }
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf variable. Gradients accumulate into it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.graph, self), "variables from different graphs");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `loss`. Each node on the tape is visited at most
    /// once; leaf gradients accumulate across calls until [`Graph::zero_grad`].
    fn backward(&self, loss: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }

        let mut pending: Vec<Option<Tensor<T>>> = (0..=loss).map(|_| None).collect();
        pending[loss] = Some(Tensor::ones(root.value.shape().to_vec()));

        let mut leaf_grads = self.grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        match &mut leaf_grads[id] {
                            Some(acc) => acc.add_assign(&grad),
                            slot @ None => *slot = Some(grad),
                        }
                    }
                }
                Some(rule) => {
                    let inputs: Vec<_> = node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = rule(&BackwardCtx {
                        inputs: &inputs,
                        output: &node.value,
                        grad: &grad,
                        needs: &needs,
                    });
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&src, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[src].value.shape());
                        match &mut pending[src] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass
    /// reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.grads.borrow().get(self.id).cloned().flatten()
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(self.id)
    }

    /// The same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}
