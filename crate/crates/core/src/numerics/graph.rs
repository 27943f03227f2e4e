//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value and the rule needed to push an upstream gradient back to its
//! inputs. Nodes only reference earlier nodes, so the list is acyclic by
//! construction and a single reverse sweep computes all gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::loss::{self, LossKind, Target};
use super::{ops, Mat};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum OwnedTarget<T> {
    Labels(Vec<usize>),
    Dense(Mat<T>),
}

impl<T: Scalar> OwnedTarget<T> {
    fn borrow(&self) -> Target<'_, T> {
        match self {
            OwnedTarget::Labels(l) => Target::Labels(l),
            OwnedTarget::Dense(m) => Target::Dense(m),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    Mask(Var, Mat<T>),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    Loss(Var, LossKind, OwnedTarget<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::hadamard(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = ops::scale(self.value(a), s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Multiplies by a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Mat<T>) -> Result<Var> {
        let value = ops::hadamard(self.value(a), &mask)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mask(a, mask), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = ops::tanh(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_vec_unchecked(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Scalar mean loss against class labels.
    pub fn loss_labels(&mut self, kind: LossKind, pred: Var, labels: &[usize]) -> Result<Var> {
        self.loss_with(kind, pred, OwnedTarget::Labels(labels.to_vec()))
    }

    /// Scalar mean loss against a dense target.
    pub fn loss_dense(&mut self, kind: LossKind, pred: Var, target: &Mat<T>) -> Result<Var> {
        self.loss_with(kind, pred, OwnedTarget::Dense(target.clone()))
    }

    fn loss_with(&mut self, kind: LossKind, pred: Var, target: OwnedTarget<T>) -> Result<Var> {
        let v = loss::loss(kind, self.value(pred), target.borrow())?;
        let rg = self.rg(pred);
        Ok(self.push(
            Mat::from_vec_unchecked(1, 1, vec![v]),
            Op::Loss(pred, kind, target),
            rg,
        ))
    }

    /// Gradients of a scalar root with respect to every node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::ones(1, 1));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ops::matmul_nt(&g, self.value(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, ops::matmul_tn(self.value(*a), &g)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ops::matmul(&g, self.value(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, ops::matmul_tn(&g, self.value(*a))?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v))?;
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ops::hadamard(&g, self.value(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, ops::hadamard(&g, self.value(*a))?)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, ops::scale(&g, *s))?,
                Op::Mask(a, m) => accumulate(&mut grads, *a, ops::hadamard(&g, m)?)?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = Mat::from_fn(x.rows(), x.cols(), |i, j| {
                        if x.get(i, j) > T::zero() {
                            g.get(i, j)
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = Mat::from_fn(y.rows(), y.cols(), |i, j| {
                        let t = y.get(i, j);
                        g.get(i, j) * (T::one() - t * t)
                    });
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let two = T::of(2.0);
                    let d = Mat::from_fn(x.rows(), x.cols(), |i, j| two * x.get(i, j) * g.get(i, j));
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Mat::filled(r, c, g.get(0, 0)))?;
                }
                Op::Loss(a, kind, target) => {
                    let d = loss::loss_grad(*kind, self.value(*a), target.borrow())?;
                    accumulate(&mut grads, *a, ops::scale(&d, g.get(0, 0)))?;
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) -> Result<()> {
    let slot = &mut grads[v.0];
    *slot = Some(match slot.take() {
        None => d,
        Some(prev) => ops::add(&prev, &d)?,
    });
    Ok(())
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, materialising zeros for unreached leaves.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Mat<T> {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = graph.value(v).shape();
            Mat::zeros(r, c)
        })
    }
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// finite differences, `|ad - fd| / max(|fd|, 1e-8)`, over every parameter entry.
pub fn grad_check<T, F>(f: F, params: &[Mat<T>], step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |ps: &[Mat<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let floor = T::of(1e-8);
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut work: Vec<Mat<T>> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let ad = grads.wrt(&g, *v);
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (up - down) / (two * step);
            let err = (ad.data()[e] - fd).abs() / fd.abs().max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
