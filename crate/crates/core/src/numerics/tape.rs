//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in construction order; [`Var`] is a
//! cheap handle into it. Backward walks the tape in reverse, so the
//! topological order is free. Graph construction and backward are
//! single-threaded by design.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gelu, gelu_grad, Tensor};

/// Given all recorded values, the node id and the upstream gradient,
/// return one gradient tensor per parent (same order as `parents`).
type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Tensor>>;

pub struct BackCtx<'a> {
    values: &'a [Tensor],
    parents: &'a [usize],
    node: usize,
    pub upstream: &'a Tensor,
}

impl BackCtx<'_> {
    fn out(&self) -> &Tensor {
        &self.values[self.node]
    }

    fn parent(&self, i: usize) -> &Tensor {
        &self.values[self.parents[i]]
    }
}

#[derive(Default)]
struct TapeInner {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    parents: Vec<Vec<usize>>,
    backfns: Vec<Option<BackFn>>,
    requires_grad: Vec<bool>,
    grad_enabled: bool,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                grad_enabled: true,
                ..Default::default()
            })),
        }
    }

    /// A tape that records values only; forward passes on it never build
    /// backward closures (evaluation mode).
    pub fn no_grad() -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let rg = requires_grad && inner.grad_enabled;
        inner.values.push(value);
        inner.grads.push(None);
        inner.parents.push(Vec::new());
        inner.backfns.push(None);
        inner.requires_grad.push(rg);
        Var { tape: self.clone(), id: inner.values.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: BackFn) -> Var {
        let mut inner = self.inner.borrow_mut();
        let rg = inner.grad_enabled && parents.iter().any(|&p| inner.requires_grad[p]);
        inner.values.push(value);
        inner.grads.push(None);
        if rg {
            inner.parents.push(parents);
            inner.backfns.push(Some(back));
        } else {
            inner.parents.push(Vec::new());
            inner.backfns.push(None);
        }
        inner.requires_grad.push(rg);
        Var { tape: self.clone(), id: inner.values.len() - 1 }
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across
    /// repeated calls until [`Tape::zero_grads`].
    pub fn backward(&self, root: &Var) {
        assert!(
            Rc::ptr_eq(&self.inner, &root.tape.inner),
            "backward with a Var from another tape"
        );
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.values[root.id].len(),
            1,
            "backward root must be scalar, got shape {:?}",
            inner.values[root.id].shape()
        );
        // Local upstream accumulators for this sweep; seeded at the root.
        let n = root.id + 1;
        let mut up: Vec<Option<Tensor>> = vec![None; n];
        up[root.id] = Some(Tensor::full(inner.values[root.id].shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = up[i].take() else { continue };
            if !inner.requires_grad[i] {
                continue;
            }
            if inner.backfns[i].is_none() {
                // requires_grad leaf: accumulate into stored grad.
                match &mut inner.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let parent_grads = {
                let ctx = BackCtx {
                    values: &inner.values,
                    parents: &inner.parents[i],
                    node: i,
                    upstream: &g,
                };
                (inner.backfns[i].as_ref().unwrap())(&ctx)
            };
            let parents = inner.parents[i].clone();
            assert_eq!(parent_grads.len(), parents.len());
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                if !inner.requires_grad[p] {
                    continue;
                }
                match &mut up[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            // Interior nodes also keep their grad readable.
            match &mut inner.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }
}

#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    pub fn item(&self) -> f64 {
        self.with_value(|v| v.item())
    }

    fn v(&self) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.tape.inner.borrow(), |i| &i.values[self.id])
    }

    fn unary(&self, value: Tensor, back: BackFn) -> Var {
        self.tape.push(value, vec![self.id], back)
    }

    fn binary(&self, other: &Var, value: Tensor, back: BackFn) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "mixing Vars from different tapes"
        );
        self.tape.push(value, vec![self.id, other.id], back)
    }

    // ---- arithmetic ----

    pub fn add(&self, other: &Var) -> Var {
        let value = self.v().add(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                vec![
                    ctx.upstream.reduce_to_shape(ctx.parent(0).shape()),
                    ctx.upstream.reduce_to_shape(ctx.parent(1).shape()),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.v().sub(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                vec![
                    ctx.upstream.reduce_to_shape(ctx.parent(0).shape()),
                    ctx.upstream
                        .scale(-1.0)
                        .reduce_to_shape(ctx.parent(1).shape()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.v().mul(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                vec![
                    ctx.upstream
                        .mul(ctx.parent(1))
                        .reduce_to_shape(ctx.parent(0).shape()),
                    ctx.upstream
                        .mul(ctx.parent(0))
                        .reduce_to_shape(ctx.parent(1).shape()),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.v().div(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                let b = ctx.parent(1);
                let da = ctx.upstream.div(b).reduce_to_shape(ctx.parent(0).shape());
                let db = ctx
                    .upstream
                    .mul(ctx.out())
                    .div(b)
                    .scale(-1.0)
                    .reduce_to_shape(b.shape());
                vec![da, db]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Var {
        let value = self.v().scale(s);
        self.unary(value, Box::new(move |ctx| vec![ctx.upstream.scale(s)]))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.v().add_scalar(s);
        self.unary(value, Box::new(|ctx| vec![ctx.upstream.clone()]))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var {
        let value = self.v().map(f64::exp);
        self.unary(value, Box::new(|ctx| vec![ctx.upstream.mul(ctx.out())]))
    }

    pub fn log(&self) -> Var {
        let value = self.v().map(f64::ln);
        self.unary(
            value,
            Box::new(|ctx| vec![ctx.upstream.div(ctx.parent(0))]),
        )
    }

    pub fn tanh(&self) -> Var {
        let value = self.v().map(f64::tanh);
        self.unary(
            value,
            Box::new(|ctx| vec![ctx.upstream.mul(&ctx.out().map(|y| 1.0 - y * y))]),
        )
    }

    pub fn gelu(&self) -> Var {
        let value = self.v().map(gelu);
        self.unary(
            value,
            Box::new(|ctx| vec![ctx.upstream.mul(&ctx.parent(0).map(gelu_grad))]),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.v().matmul(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                let a = ctx.parent(0);
                let b = ctx.parent(1);
                vec![
                    ctx.upstream.matmul_nt(b),
                    a.matmul_tn(ctx.upstream),
                ]
            }),
        )
    }

    pub fn bmm(&self, other: &Var) -> Var {
        let value = self.v().bmm(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                let a = ctx.parent(0);
                let b = ctx.parent(1);
                vec![
                    ctx.upstream.bmm_nt(b),
                    a.bmm_tn(ctx.upstream),
                ]
            }),
        )
    }

    /// a x b^T over batch: [B,M,K] x [B,N,K] -> [B,M,N]. Equivalent to
    /// `bmm` against `transpose_last2` but reads b through strides.
    pub fn bmm_nt(&self, other: &Var) -> Var {
        let value = self.v().bmm_nt(&other.v());
        self.binary(
            other,
            value,
            Box::new(|ctx| {
                let a = ctx.parent(0);
                let b = ctx.parent(1);
                vec![ctx.upstream.bmm(b), ctx.upstream.bmm_tn(a)]
            }),
        )
    }

    pub fn transpose_last2(&self) -> Var {
        let value = self.v().transpose_last2();
        self.unary(
            value,
            Box::new(|ctx| vec![ctx.upstream.transpose_last2()]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.v().reshape(shape);
        self.unary(
            value,
            Box::new(|ctx| vec![ctx.upstream.reshape(ctx.parent(0).shape())]),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var {
        let value = Tensor::scalar(self.v().sum_all());
        self.unary(
            value,
            Box::new(|ctx| {
                vec![Tensor::full(ctx.parent(0).shape(), ctx.upstream.item())]
            }),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.v().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Var {
        let value = self.v().sum_axis(axis);
        self.unary(
            value,
            Box::new(move |ctx| {
                let src = ctx.parent(0);
                let pre: usize = src.shape()[..axis].iter().product();
                let ax = src.shape()[axis];
                let post: usize = src.shape()[axis + 1..].iter().product();
                let mut out = Tensor::zeros(src.shape());
                let g = ctx.upstream.data();
                let o = out.data_mut();
                for p in 0..pre {
                    for a in 0..ax {
                        let base = (p * ax + a) * post;
                        o[base..base + post].copy_from_slice(&g[p * post..(p + 1) * post]);
                    }
                }
                vec![out]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let n = self.v().shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Max over the last axis. Ties route the gradient to the first
    /// maximizing coordinate.
    pub fn max_last(&self) -> Var {
        let (value, argmax) = self.v().max_last();
        self.unary(
            value,
            Box::new(move |ctx| {
                let src = ctx.parent(0);
                let l = *src.shape().last().unwrap();
                let mut out = Tensor::zeros(src.shape());
                let o = out.data_mut();
                for (row, &a) in argmax.iter().enumerate() {
                    o[row * l + a] = ctx.upstream.data()[row];
                }
                vec![out]
            }),
        )
    }

    // ---- normalizations ----

    pub fn softmax_last(&self) -> Var {
        let value = self.v().softmax_last();
        self.unary(
            value,
            Box::new(|ctx| {
                // dx = y * (g - sum(g*y, last))
                let y = ctx.out();
                let l = *y.shape().last().unwrap();
                let gy = ctx.upstream.mul(y);
                let mut out = gy.clone();
                let yv = y.data();
                let gv = ctx.upstream.data();
                let o = out.data_mut();
                for r in 0..o.len() / l {
                    let s: f64 = o[r * l..(r + 1) * l].iter().sum();
                    for c in 0..l {
                        o[r * l + c] = yv[r * l + c] * (gv[r * l + c] - s);
                    }
                }
                vec![out]
            }),
        )
    }

    /// Stable log-sum-exp over the last axis (removes it).
    pub fn logsumexp_last(&self) -> Var {
        let value = self.v().logsumexp_last();
        self.unary(
            value,
            Box::new(|ctx| {
                // dx = softmax(x) * g (g broadcast over the reduced axis)
                let sm = ctx.parent(0).softmax_last();
                let l = *ctx.parent(0).shape().last().unwrap();
                let mut out = sm;
                let g = ctx.upstream.data();
                let o = out.data_mut();
                for r in 0..g.len() {
                    for c in 0..l {
                        o[r * l + c] *= g[r];
                    }
                }
                vec![out]
            }),
        )
    }

    pub fn l2_normalize_last(&self) -> Var {
        let value = self.v().l2_normalize_last();
        self.unary(
            value,
            Box::new(|ctx| {
                // y = x/||x||; dx = (g - y*(g.y)) / ||x||
                let x = ctx.parent(0);
                let y = ctx.out();
                let l = *x.shape().last().unwrap();
                let mut out = Tensor::zeros(x.shape());
                let xv = x.data();
                let yv = y.data();
                let gv = ctx.upstream.data();
                let o = out.data_mut();
                for r in 0..xv.len() / l {
                    let s = r * l..(r + 1) * l;
                    let norm = xv[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gv[s.clone()]
                        .iter()
                        .zip(&yv[s.clone()])
                        .map(|(g, y)| g * y)
                        .sum();
                    for c in s {
                        o[c] = (gv[c] - yv[c] * dot) / norm;
                    }
                }
                vec![out]
            }),
        )
    }

    pub fn layernorm_last(&self, eps: f64) -> Var {
        let value = self.v().layernorm_last(eps);
        self.unary(
            value,
            Box::new(move |ctx| {
                // Standard layer-norm backward over the last axis.
                let x = ctx.parent(0);
                let y = ctx.out();
                let l = *x.shape().last().unwrap();
                let ln = l as f64;
                let mut out = Tensor::zeros(x.shape());
                let xv = x.data();
                let yv = y.data();
                let gv = ctx.upstream.data();
                let o = out.data_mut();
                for r in 0..xv.len() / l {
                    let s = r * l..(r + 1) * l;
                    let mean = xv[s.clone()].iter().sum::<f64>() / ln;
                    let var =
                        xv[s.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / ln;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gsum: f64 = gv[s.clone()].iter().sum();
                    let gysum: f64 = gv[s.clone()]
                        .iter()
                        .zip(&yv[s.clone()])
                        .map(|(g, y)| g * y)
                        .sum();
                    for c in s.clone() {
                        o[c] = inv * (gv[c] - gsum / ln - yv[c] * gysum / ln);
                    }
                }
                vec![out]
            }),
        )
    }

    // ---- structural ----

    pub fn concat(parts: &[&Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let value = Tensor::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        tape.push(
            value,
            ids,
            Box::new(move |ctx| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &sz in &sizes {
                    grads.push(ctx.upstream.narrow(axis, start, sz));
                    start += sz;
                }
                grads
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = self.v().narrow(axis, start, len);
        self.unary(
            value,
            Box::new(move |ctx| {
                let src = ctx.parent(0);
                let pre: usize = src.shape()[..axis].iter().product();
                let ax = src.shape()[axis];
                let post: usize = src.shape()[axis + 1..].iter().product();
                let mut out = Tensor::zeros(src.shape());
                let g = ctx.upstream.data();
                let o = out.data_mut();
                for p in 0..pre {
                    let dst = (p * ax + start) * post;
                    let sg = p * len * post;
                    o[dst..dst + len * post].copy_from_slice(&g[sg..sg + len * post]);
                }
                vec![out]
            }),
        )
    }

    /// Gather rows along axis 0; also the embedding lookup (table as self,
    /// token ids as indices).
    pub fn index_select0(&self, indices: &[usize]) -> Var {
        let value = self.v().index_select0(indices);
        let idx = indices.to_vec();
        self.unary(
            value,
            Box::new(move |ctx| {
                vec![ctx.upstream.scatter_add0(&idx, ctx.parent(0).shape()[0])]
            }),
        )
    }

    /// [N,L,D] -> [N,D], picking token `idx[n]` from each row.
    pub fn gather_token(&self, indices: &[usize]) -> Var {
        let value = self.v().gather_token(indices);
        let idx = indices.to_vec();
        self.unary(
            value,
            Box::new(move |ctx| {
                let src = ctx.parent(0);
                let (l, d) = (src.shape()[1], src.shape()[2]);
                let mut out = Tensor::zeros(src.shape());
                let g = ctx.upstream.data();
                let o = out.data_mut();
                for (n, &t) in idx.iter().enumerate() {
                    let base = (n * l + t) * d;
                    o[base..base + d].copy_from_slice(&g[n * d..(n + 1) * d]);
                }
                vec![out]
            }),
        )
    }

    pub fn split_heads(&self, heads: usize) -> Var {
        let value = self.v().split_heads(heads);
        self.unary(
            value,
            Box::new(move |ctx| vec![ctx.upstream.merge_heads(heads)]),
        )
    }

    pub fn merge_heads(&self, heads: usize) -> Var {
        let value = self.v().merge_heads(heads);
        self.unary(
            value,
            Box::new(move |ctx| vec![ctx.upstream.split_heads(heads)]),
        )
    }

    pub fn diag2d(&self) -> Var {
        let value = self.v().diag2d();
        self.unary(
            value,
            Box::new(|ctx| {
                let n = ctx.parent(0).shape()[0];
                let mut out = Tensor::zeros(&[n, n]);
                let g = ctx.upstream.data();
                let o = out.data_mut();
                for i in 0..n {
                    o[i * n + i] = g[i];
                }
                vec![out]
            }),
        )
    }
}
