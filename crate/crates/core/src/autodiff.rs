//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one node per operation whose inputs require gradients;
//! node order is insertion order, so the reverse sweep in [`Tape::backward`]
//! visits every node exactly once after all of its consumers. Operations on
//! untracked inputs record nothing and only produce values, which makes the
//! same forward code serve inference and training.
//!
//! The tape also keeps a scoped multiply-accumulate ledger filled by the
//! matmul and convolution ops, used for complexity accounting.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{dim_err, HitError, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, conv2d_macs, Conv2dSpec, Tensor};

type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>>>;

struct Node<T> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
struct MacLedger {
    stack: Vec<String>,
    totals: BTreeMap<String, u64>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    macs: RefCell<MacLedger>,
    corrupt: RefCell<Option<String>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pops a MAC-ledger scope when dropped.
pub struct ScopeGuard<'t, T: Scalar> {
    tape: &'t Tape<T>,
}

impl<T: Scalar> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.macs.borrow_mut().stack.pop();
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            macs: RefCell::new(MacLedger::default()),
            corrupt: RefCell::new(None),
        }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// A value that never receives a gradient and is never recorded.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded non-leaf operations, in insertion order.
    pub fn recorded_ops(&self) -> Vec<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.backward.is_some())
            .map(|n| n.op)
            .collect()
    }

    /// Test hook: scales every gradient produced by the named op's rule by 1.5.
    pub fn corrupt_rule(&self, op: Option<&str>) {
        *self.corrupt.borrow_mut() = op.map(str::to_owned);
    }

    pub fn scope(&self, name: &str) -> ScopeGuard<'_, T> {
        self.macs.borrow_mut().stack.push(name.to_owned());
        ScopeGuard { tape: self }
    }

    fn count_macs(&self, n: u64) {
        let mut l = self.macs.borrow_mut();
        let key = l.stack.join("/");
        *l.totals.entry(key).or_insert(0) += n;
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.borrow().totals.values().sum()
    }

    /// MACs recorded under any scope path containing `segment` as a component.
    pub fn macs_in(&self, segment: &str) -> u64 {
        self.macs
            .borrow()
            .totals
            .iter()
            .filter(|(k, _)| k.split('/').any(|s| s == segment))
            .map(|(_, v)| v)
            .sum()
    }

    /// Snapshot of per-scope-path MAC totals.
    pub fn mac_table(&self) -> BTreeMap<String, u64> {
        self.macs.borrow().totals.clone()
    }

    pub fn reset_macs(&self) {
        self.macs.borrow_mut().totals.clear();
    }

    fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>> + 'static,
    ) -> Var<'t, T> {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if parents.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            parents,
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Reverse sweep from a tracked scalar.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let root = loss
            .node
            .ok_or_else(|| HitError::Tape("backward called on an untracked tensor".into()))?;
        if loss.value.numel() != 1 {
            return Err(HitError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let corrupt = self.corrupt.borrow();
        let mut grads: Grads<T> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(rule) = &node.backward else {
                continue;
            };
            let g = if i == root {
                grads[i].clone()
            } else {
                grads[i].take()
            };
            let Some(g) = g else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let mut pgrads = rule(&g, &needs)?;
            if corrupt.as_deref() == Some(node.op) {
                for pg in pgrads.iter_mut().flatten() {
                    *pg = pg.scale(T::c(1.5));
                }
            }
            for (parent, pg) in node.parents.iter().zip(pgrads) {
                let (Some(p), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, queried per tracked leaf.
pub struct Gradients<T> {
    grads: Grads<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.node.and_then(|i| self.grads.get(i)?.as_ref())
    }

    /// Gradient of a tracked leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value.shape()))
    }
}

/// A tensor value bound to a tape, tracked when it descends from a leaf.
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(
        &self,
        op: &'static str,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Var<'t, T> {
        self.tape
            .record(op, &[self], value, move |g, _| Ok(vec![Some(backward(g)?)]))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let v = self.value.add(&other.value)?;
        Ok(self.tape.record("add", &[self, other], v, |g, n| {
            Ok(vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())])
        }))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let v = self.value.sub(&other.value)?;
        Ok(self.tape.record("sub", &[self, other], v, |g, n| {
            Ok(vec![n[0].then(|| g.clone()), n[1].then(|| g.scale(-T::one()))])
        }))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let v = self.value.mul(&other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record("mul", &[self, other], v, move |g, n| {
            Ok(vec![
                if n[0] { Some(g.mul(&b)?) } else { None },
                if n[1] { Some(g.mul(&a)?) } else { None },
            ])
        }))
    }

    /// `self + other` with `other` repeated over the leading axes of `self`.
    pub fn add_bcast(&self, other: &Self) -> Result<Self> {
        let v = tensor::add_broadcast(&self.value, &other.value)?;
        let bshape = other.shape().to_vec();
        Ok(self.tape.record("add_bcast", &[self, other], v, move |g, n| {
            Ok(vec![
                n[0].then(|| g.clone()),
                n[1].then(|| tensor::reduce_leading(g, &bshape)),
            ])
        }))
    }

    pub fn scale(&self, s: T) -> Self {
        self.unary("scale", self.value.scale(s), move |g| Ok(g.scale(s)))
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.unary("add_scalar", self.value.map(|v| v + s), |g| Ok(g.clone()))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar(&self, s: &Self) -> Result<Self> {
        if s.value.numel() != 1 {
            return dim_err("mul_scalar", self.shape(), s.shape());
        }
        let sv = s.value.item();
        let v = self.value.scale(sv);
        let x = self.value.clone();
        let sshape = s.shape().to_vec();
        Ok(self.tape.record("mul_scalar", &[self, s], v, move |g, n| {
            Ok(vec![
                n[0].then(|| g.scale(sv)),
                n[1].then(|| {
                    let d: T = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
                    Tensor::full(&sshape, d)
                }),
            ])
        }))
    }

    pub fn exp(&self) -> Self {
        let y = self.value.map(T::exp);
        let yc = y.clone();
        self.unary("exp", y, move |g| g.mul(&yc))
    }

    pub fn sqrt(&self) -> Self {
        let y = self.value.map(T::sqrt);
        let yc = y.clone();
        self.unary("sqrt", y, move |g| g.zip_map(&yc, "sqrt", |g, y| g / (y + y)))
    }

    pub fn gelu(&self) -> Self {
        let x = self.value.clone();
        self.unary("gelu", self.value.map(tensor::gelu), move |g| {
            g.zip_map(&x, "gelu", |g, x| g * tensor::gelu_grad(x))
        })
    }

    pub fn square(&self) -> Self {
        let x = self.value.clone();
        self.unary("square", self.value.map(|v| v * v), move |g| {
            g.zip_map(&x, "square", |g, x| g * (x + x))
        })
    }

    pub fn sum(&self) -> Self {
        let shape = self.shape().to_vec();
        self.unary("sum", Tensor::scalar(self.value.sum()), move |g| {
            Ok(Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean(&self) -> Self {
        let n = T::c(self.value.numel() as f64);
        let shape = self.shape().to_vec();
        self.unary("mean", Tensor::scalar(self.value.sum() / n), move |g| {
            Ok(Tensor::full(&shape, g.item() / n))
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let v = tensor::matmul(&self.value, &other.value)?;
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        self.tape.count_macs((m * k * n) as u64);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record("matmul", &[self, other], v, move |g, need| {
            Ok(vec![
                if need[0] { Some(tensor::matmul(g, &tensor::transpose2d(&b)?)?) } else { None },
                if need[1] { Some(tensor::matmul(&tensor::transpose2d(&a)?, g)?) } else { None },
            ])
        }))
    }

    pub fn bmm(&self, other: &Self) -> Result<Self> {
        let v = tensor::bmm(&self.value, &other.value)?;
        let s = self.shape();
        self.tape.count_macs((s[0] * s[1] * s[2] * other.shape()[2]) as u64);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record("bmm", &[self, other], v, move |g, need| {
            let t = |x: &Tensor<T>| tensor::permute(x, &[0, 2, 1]);
            Ok(vec![
                if need[0] { Some(tensor::bmm(g, &t(&b)?)?) } else { None },
                if need[1] { Some(tensor::bmm(&t(&a)?, g)?) } else { None },
            ])
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.unary("reshape", v, move |g| g.reshape(&orig)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let v = tensor::permute(&self.value, axes)?;
        let inv = tensor::inverse_axes(axes);
        Ok(self.unary("permute", v, move |g| tensor::permute(g, &inv)))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.value.rank() != 2 {
            return dim_err("transpose", self.shape(), &[2]);
        }
        self.permute(&[1, 0])
    }

    pub fn softmax_last(&self) -> Result<Self> {
        let y = tensor::softmax(&self.value, self.value.rank() - 1)?;
        let yc = y.clone();
        Ok(self.unary("softmax", y, move |g| Ok(tensor::softmax_last_backward(&yc, g))))
    }

    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (y, cache) = tensor::layer_norm(&self.value, &gamma.value, &beta.value, eps)?;
        let gm = gamma.value.clone();
        Ok(self.tape.record("layer_norm", &[self, gamma, beta], y, move |g, n| {
            let (gx, gg, gb) = tensor::layer_norm_backward(&cache, &gm, g);
            Ok(vec![n[0].then_some(gx), n[1].then_some(gg), n[2].then_some(gb)])
        }))
    }

    pub fn conv2d(&self, w: &Self, spec: Conv2dSpec) -> Result<Self> {
        let y = tensor::conv2d(&self.value, &w.value, spec)?;
        let ws = w.shape();
        self.tape
            .count_macs(conv2d_macs(y.shape()[0], y.shape()[1], ws[0], ws[1], ws[2], ws[3]));
        let (x, wt) = (self.value.clone(), w.value.clone());
        Ok(self.tape.record("conv2d", &[self, w], y, move |g, n| {
            Ok(vec![
                if n[0] { Some(tensor::conv2d_grad_input(x.shape(), &wt, g, spec)?) } else { None },
                if n[1] { Some(tensor::conv2d_grad_weight(&x, wt.shape(), g, spec)?) } else { None },
            ])
        }))
    }

    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| HitError::Contract("concat of zero tensors".into()))?;
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| p.value.as_ref()).collect();
        let v = tensor::concat_last(&vals)?;
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        Ok(first.tape.record("concat", parts, v, move |g, n| {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&w, &need) in widths.iter().zip(n) {
                out.push(if need { Some(tensor::narrow_last(g, start, w)?) } else { None });
                start += w;
            }
            Ok(out)
        }))
    }

    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Self> {
        let v = tensor::narrow_last(&self.value, start, len)?;
        let c = *self.shape().last().unwrap();
        Ok(self.unary("narrow", v, move |g| Ok(tensor::unnarrow_last(g, start, c))))
    }

    pub fn pad_reflect(&self, ph: usize, pw: usize) -> Result<Self> {
        let v = tensor::pad_reflect(&self.value, ph, pw)?;
        let (h, w, _) = self.value.hwc()?;
        Ok(self.unary("pad_reflect", v, move |g| tensor::pad_reflect_backward(g, h, w)))
    }

    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        let v = tensor::crop(&self.value, h, w)?;
        let (ih, iw, _) = self.value.hwc()?;
        Ok(self.unary("crop", v, move |g| tensor::crop_backward(g, ih, iw)))
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let v = tensor::resize_bilinear(&self.value, oh, ow)?;
        let (h, w, _) = self.value.hwc()?;
        Ok(self.unary("resize_bilinear", v, move |g| {
            tensor::resize_bilinear_backward(g, h, w)
        }))
    }

    pub fn channel_pool(&self, cout: usize) -> Result<Self> {
        let v = tensor::channel_pool(&self.value, cout)?;
        let cin = *self.shape().last().unwrap();
        Ok(self.unary("channel_pool", v, move |g| Ok(tensor::channel_pool_backward(g, cin))))
    }

    pub fn index_rows(&self, idx: std::sync::Arc<Vec<usize>>) -> Result<Self> {
        let v = tensor::index_rows(&self.value, &idx)?;
        let rows = self.shape()[0];
        Ok(self.unary("index_rows", v, move |g| {
            Ok(tensor::index_rows_backward(g, &idx, rows))
        }))
    }
}
