//! Reverse-mode tape. Every op appends a node holding its forward value and a
//! closure that maps the output gradient onto gradients for its parents.

use super::tensor::{numel, Parameter, Tensor};
use super::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a, R: Real> {
    pub inputs: Vec<&'a [R]>,
    pub input_shapes: Vec<&'a [usize]>,
    pub output: &'a [R],
    pub grad: &'a [R],
    /// Whether each parent needs a gradient; closures may skip work when false.
    pub needs: Vec<bool>,
}

pub type BackwardFn<R> = Box<dyn Fn(&BackwardCtx<'_, R>) -> Vec<Option<Vec<R>>> + Send + Sync>;

struct Node<R: Real> {
    shape: Vec<usize>,
    value: Vec<R>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<R>>,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    check_finite: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into the parameter's accumulator.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter<R>) {
        if let Some(g) = self.get(v) {
            param.tensor.accumulate_grad(g);
        }
    }
}

impl<R: Real> Tape<R> {
    /// New tape; debug builds assert that every op produces finite values.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Tape that lets non-finite values through so callers can report them.
    pub fn lenient() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<R>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], value: Vec<R>) -> Var {
        assert_eq!(numel(shape), value.len(), "constant: shape/value mismatch");
        self.push_leaf(shape.to_vec(), value, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, shape: &[usize], value: Vec<R>) -> Var {
        assert_eq!(numel(shape), value.len(), "input: shape/value mismatch");
        self.push_leaf(shape.to_vec(), value, true)
    }

    pub fn tensor(&mut self, t: &Tensor<R>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Binds a parameter; `trainable = false` freezes it for this graph.
    pub fn param(&mut self, p: &Parameter<R>, trainable: bool) -> Var {
        self.push_leaf(
            p.tensor.shape().to_vec(),
            p.tensor.values().to_vec(),
            trainable,
        )
    }

    pub fn scalar_const(&mut self, x: R) -> Var {
        self.constant(&[1], vec![x])
    }

    /// Appends an op node. `backward` receives the parent values in the order given.
    pub fn custom(
        &mut self,
        parents: &[Var],
        shape: Vec<usize>,
        value: Vec<R>,
        backward: BackwardFn<R>,
    ) -> Var {
        assert_eq!(numel(&shape), value.len(), "custom op: shape/value mismatch");
        if self.check_finite {
            assert!(
                value.iter().all(|v| v.is_finite()),
                "non-finite value produced by op"
            );
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> R {
        let x = self.value(v);
        assert_eq!(x.len(), 1, "scalar(): node has {} elements", x.len());
        x[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<R> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("valid node")
    }

    /// Reverse pass from `root`, seeded with ones (a scalar root gives the usual gradient).
    pub fn backward(&self, root: Var) -> Gradients<R> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = (0..n).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![R::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].value.as_slice())
                    .collect(),
                input_shapes: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].shape.as_slice())
                    .collect(),
                output: &node.value,
                grad: &g,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let contributions = backward(&ctx);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.len(), self.nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
            // leaf gradients are kept; intermediate ones were taken above
        }
        Gradients { grads }
    }
}
