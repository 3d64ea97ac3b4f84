//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a trainable leaf. Each operation
//! stores a one-shot closure holding exactly the intermediates its adjoint
//! needs, so a graph can be differentiated once.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::{gemm, Real, Tensor};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[Rc<Tensor<T>>], &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when no path reaches it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    /// Non-differentiated leaf.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf(t, requires_grad)
    }

    fn push(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let n = self.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        {
            let nodes = self.nodes.borrow();
            let v = &nodes[root.id].value;
            assert_eq!(v.len(), 1, "backward root must be a scalar");
            grads[root.id] = Some(Tensor::full(v.shape(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let (backward, parent_ids, parent_vals, needs) = {
                let mut nodes = self.nodes.borrow_mut();
                if grads[id].is_none() || nodes[id].backward.is_none() {
                    continue;
                }
                let bw = nodes[id].backward.take().unwrap();
                let pids = nodes[id].parents.clone();
                let vals: Vec<Rc<Tensor<T>>> = pids.iter().map(|&p| nodes[p].value.clone()).collect();
                let needs: Vec<bool> = pids.iter().map(|&p| nodes[p].requires_grad).collect();
                (bw, pids, vals, needs)
            };
            let g = grads[id].take().unwrap();
            let pg = backward(&g, &parent_vals, &needs);
            for ((pid, maybe), need) in parent_ids.iter().zip(pg).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pgrad) = maybe {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pgrad),
                        slot @ None => *slot = Some(pgrad),
                    }
                }
            }
            // interior gradients are dropped once consumed; leaves keep theirs
            let nodes = self.nodes.borrow();
            if nodes[id].parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Index-remapping tables used with [`Var::gather`].
pub mod index {
    use super::reflect;

    /// Reflect-pads each of `c` planes of `h`×`w` by `pad` on every side.
    pub fn reflect_pad(c: usize, h: usize, w: usize, pad: usize) -> (Vec<usize>, [usize; 3]) {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut idx = Vec::with_capacity(c * hp * wp);
        for ch in 0..c {
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..wp {
                    let sx = reflect(x as isize - pad as isize, w);
                    idx.push((ch * h + sy) * w + sx);
                }
            }
        }
        (idx, [c, hp, wp])
    }

    pub fn upsample2x(c: usize, h: usize, w: usize) -> (Vec<usize>, [usize; 3]) {
        let (ho, wo) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    idx.push((ch * h + y / 2) * w + x / 2);
                }
            }
        }
        (idx, [c, ho, wo])
    }

    /// `h`×`w` plane → ((h/p)·(w/p))×(p·p) rows, one row per patch in raster
    /// order, pixels inside a patch in raster order.
    pub fn patchify(h: usize, w: usize, p: usize) -> (Vec<usize>, [usize; 2]) {
        let (ph, pw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(h * w);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push((py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
        (idx, [ph * pw, p * p])
    }

    /// Inverse layout of a `P`×(c·p·p) token matrix back to c×h×w, where each
    /// token row holds c blocks of p·p pixels.
    pub fn unpatchify(c: usize, h: usize, w: usize, p: usize) -> (Vec<usize>, [usize; 3]) {
        let pw = w / p;
        let row = c * p * p;
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let tok = (y / p) * pw + x / p;
                    let off = ch * p * p + (y % p) * p + (x % p);
                    idx.push(tok * row + off);
                }
            }
        }
        (idx, [c, h, w])
    }

    pub fn transpose2d(rows: usize, cols: usize) -> (Vec<usize>, [usize; 2]) {
        let mut idx = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                idx.push(r * cols + c);
            }
        }
        (idx, [cols, rows])
    }
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    reflect(i, n)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        let yc = Rc::new(y.clone());
        self.graph.push(
            y,
            &[self],
            Box::new(move |g, p, _| {
                let x = &p[0];
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(yc.data()) {
                    *o *= df(xv, yv);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|v| -v, |_, _| -T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(
            |v| v.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::one() / (y + y)
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Absolute value with a zero subgradient at 0.
    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes where the value is unchanged.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |v| v * s, move |_, _| s)
    }

    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
        let y = a.zip_map(&b, f);
        self.graph.push(
            y,
            &[self, other],
            Box::new(move |g, p, need| {
                let (a, b) = (&p[0], &p[1]);
                let ga = need[0].then(|| {
                    let mut o = g.clone();
                    for ((o, &x), &y) in o.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o *= da(x, y);
                    }
                    o
                });
                let gb = need[1].then(|| {
                    let mut o = g.clone();
                    for ((o, &x), &y) in o.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o *= db(x, y);
                    }
                    o
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        self.graph.push(
            Tensor::scalar(s),
            &[self],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().mul_scalar(T::one() / T::lit(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshaped(shape);
        self.graph.push(
            y,
            &[self],
            Box::new(move |g, _, _| vec![Some(g.clone().reshaped(&old))]),
        )
    }

    /// `out[i] = self[idx[i]]`; the adjoint scatter-adds.
    pub fn gather(self, idx: Arc<[usize]>, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(idx.len(), shape.iter().product::<usize>(), "gather shape");
        let src = x.data();
        let data: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let n_in = x.len();
        let in_shape = x.shape().to_vec();
        self.graph.push(
            Tensor::from_vec(shape, data),
            &[self],
            Box::new(move |g, _, _| {
                let mut out = vec![T::zero(); n_in];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    out[i] += gv;
                }
                vec![Some(Tensor::from_vec(&in_shape, out))]
            }),
        )
    }

    pub fn reflect_pad(self, pad: usize) -> Var<'g, T> {
        let s = self.shape();
        let (c, h, w) = chw(&s);
        let (idx, shape) = index::reflect_pad(c, h, w, pad);
        self.gather(idx.into(), &shape)
    }

    pub fn upsample2x(self) -> Var<'g, T> {
        let s = self.shape();
        let (c, h, w) = chw(&s);
        let (idx, shape) = index::upsample2x(c, h, w);
        self.gather(idx.into(), &shape)
    }

    pub fn transpose(self) -> Var<'g, T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (idx, shape) = index::transpose2d(s[0], s[1]);
        self.gather(idx.into(), &shape)
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &vals {
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(usize, Vec<usize>)> = vals.iter().map(|v| (v.len(), v.shape().to_vec())).collect();
        graph.push(
            Tensor::from_vec(&shape, data),
            parts,
            Box::new(move |g, _, need| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|((n, s), &nd)| {
                        let r = nd.then(|| Tensor::from_vec(s, g.data()[off..off + n].to_vec()));
                        off += n;
                        r
                    })
                    .collect()
            }),
        )
    }

    fn outer_inner(&self) -> (usize, usize) {
        let s = self.shape();
        let a = s[0];
        (a, s[1..].iter().product())
    }

    /// `self[a, ..] * v[a]` with `v` of length `shape[0]`.
    pub fn mul_outer(self, v: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.outer_inner();
        let x = self.value();
        let vv = v.value();
        assert_eq!(vv.len(), a, "mul_outer length");
        let mut y = (*x).clone();
        for (i, row) in y.data_mut().chunks_mut(b).enumerate() {
            let s = vv.data()[i];
            row.iter_mut().for_each(|e| *e *= s);
        }
        let vshape = vv.shape().to_vec();
        self.graph.push(
            y,
            &[self, v],
            Box::new(move |g, p, need| {
                let (x, v) = (&p[0], &p[1]);
                let gx = need[0].then(|| {
                    let mut o = g.clone();
                    for (i, row) in o.data_mut().chunks_mut(b).enumerate() {
                        let s = v.data()[i];
                        row.iter_mut().for_each(|e| *e *= s);
                    }
                    o
                });
                let gv = need[1].then(|| {
                    let d: Vec<T> = g
                        .data()
                        .chunks(b)
                        .zip(x.data().chunks(b))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(&vshape, d)
                });
                vec![gx, gv]
            }),
        )
    }

    /// `self[a, ..] + v[a]`.
    pub fn add_outer(self, v: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.outer_inner();
        let x = self.value();
        let vv = v.value();
        assert_eq!(vv.len(), a, "add_outer length");
        let mut y = (*x).clone();
        for (i, row) in y.data_mut().chunks_mut(b).enumerate() {
            let s = vv.data()[i];
            row.iter_mut().for_each(|e| *e += s);
        }
        let vshape = vv.shape().to_vec();
        self.graph.push(
            y,
            &[self, v],
            Box::new(move |g, _, need| {
                let gv = need[1].then(|| {
                    let d: Vec<T> = g.data().chunks(b).map(|r| r.iter().copied().sum()).collect();
                    Tensor::from_vec(&vshape, d)
                });
                vec![need[0].then(|| g.clone()), gv]
            }),
        )
    }

    /// `self[.., j] * v[j]` with `v` spanning the trailing block.
    pub fn mul_inner(self, v: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let vv = v.value();
        let b = vv.len();
        assert_eq!(x.len() % b, 0, "mul_inner length");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(b) {
            row.iter_mut().zip(vv.data()).for_each(|(e, &s)| *e *= s);
        }
        let vshape = vv.shape().to_vec();
        self.graph.push(
            y,
            &[self, v],
            Box::new(move |g, p, need| {
                let (x, v) = (&p[0], &p[1]);
                let gx = need[0].then(|| {
                    let mut o = g.clone();
                    for row in o.data_mut().chunks_mut(b) {
                        row.iter_mut().zip(v.data()).for_each(|(e, &s)| *e *= s);
                    }
                    o
                });
                let gv = need[1].then(|| {
                    let mut d = vec![T::zero(); b];
                    for (gr, xr) in g.data().chunks(b).zip(x.data().chunks(b)) {
                        for ((acc, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                            *acc += gv * xv;
                        }
                    }
                    Tensor::from_vec(&vshape, d)
                });
                vec![gx, gv]
            }),
        )
    }

    /// `self[.., j] + v[j]`.
    pub fn add_inner(self, v: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let vv = v.value();
        let b = vv.len();
        assert_eq!(x.len() % b, 0, "add_inner length");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(b) {
            row.iter_mut().zip(vv.data()).for_each(|(e, &s)| *e += s);
        }
        let vshape = vv.shape().to_vec();
        self.graph.push(
            y,
            &[self, v],
            Box::new(move |g, _, need| {
                let gv = need[1].then(|| {
                    let mut d = vec![T::zero(); b];
                    for gr in g.data().chunks(b) {
                        for (acc, &gv) in d.iter_mut().zip(gr) {
                            *acc += gv;
                        }
                    }
                    Tensor::from_vec(&vshape, d)
                });
                vec![need[0].then(|| g.clone()), gv]
            }),
        )
    }

    /// Mean over everything but the leading axis: `[A, ..] -> [A]`.
    pub fn mean_inner(self) -> Var<'g, T> {
        let (a, b) = self.outer_inner();
        let x = self.value();
        let inv = T::one() / T::lit(b as f64);
        let d: Vec<T> = x.data().chunks(b).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let shape = x.shape().to_vec();
        self.graph.push(
            Tensor::from_vec(&[a], d),
            &[self],
            Box::new(move |g, _, _| {
                let mut o = Vec::with_capacity(a * b);
                for &gv in g.data() {
                    o.extend(std::iter::repeat(gv * inv).take(b));
                }
                vec![Some(Tensor::from_vec(&shape, o))]
            }),
        )
    }

    /// Mean across the leading axis: `[A, rest..] -> [1, rest..]`.
    pub fn mean_outer(self) -> Var<'g, T> {
        let (a, b) = self.outer_inner();
        let x = self.value();
        let inv = T::one() / T::lit(a as f64);
        let mut d = vec![T::zero(); b];
        for r in x.data().chunks(b) {
            for (acc, &v) in d.iter_mut().zip(r) {
                *acc += v;
            }
        }
        d.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = x.shape().to_vec();
        oshape[0] = 1;
        let shape = x.shape().to_vec();
        self.graph.push(
            Tensor::from_vec(&oshape, d),
            &[self],
            Box::new(move |g, _, _| {
                let mut o = Vec::with_capacity(a * b);
                for _ in 0..a {
                    o.extend(g.data().iter().map(|&v| v * inv));
                }
                vec![Some(Tensor::from_vec(&shape, o))]
            }),
        )
    }

    /// Max across the leading axis (first index wins ties).
    pub fn max_outer(self) -> Var<'g, T> {
        let (a, b) = self.outer_inner();
        let x = self.value();
        let mut d = x.data()[..b].to_vec();
        let mut arg = vec![0usize; b];
        for (i, r) in x.data().chunks(b).enumerate().skip(1) {
            for j in 0..b {
                if r[j] > d[j] {
                    d[j] = r[j];
                    arg[j] = i;
                }
            }
        }
        let mut oshape = x.shape().to_vec();
        oshape[0] = 1;
        let shape = x.shape().to_vec();
        self.graph.push(
            Tensor::from_vec(&oshape, d),
            &[self],
            Box::new(move |g, _, _| {
                let mut o = vec![T::zero(); a * b];
                for (j, &i) in arg.iter().enumerate() {
                    o[i * b + j] = g.data()[j];
                }
                vec![Some(Tensor::from_vec(&shape, o))]
            }),
        )
    }

    /// Matrix product of 2-D vars with optional transposes of either side.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul inner dimension {:?} x {:?}", sa, sb);
        let k = ka;
        let mut c = vec![T::zero(); m * n];
        gemm(ta, tb, m, k, n, a.data(), b.data(), T::zero(), &mut c);
        let (sa, sb) = (sa.to_vec(), sb.to_vec());
        self.graph.push(
            Tensor::from_vec(&[m, n], c),
            &[self, other],
            Box::new(move |g, p, need| {
                let (a, b) = (&p[0], &p[1]);
                let gd = g.data();
                let ga = need[0].then(|| {
                    let mut o = vec![T::zero(); m * k];
                    if ta {
                        // A stored k×m: dA = op(B)·gᵀ
                        gemm(tb, true, k, n, m, b.data(), gd, T::zero(), &mut o);
                    } else {
                        gemm(false, !tb, m, n, k, gd, b.data(), T::zero(), &mut o);
                    }
                    Tensor::from_vec(&sa, o)
                });
                let gb = need[1].then(|| {
                    let mut o = vec![T::zero(); k * n];
                    if tb {
                        // B stored n×k: dB = gᵀ·op(A)
                        gemm(true, ta, n, m, k, gd, a.data(), T::zero(), &mut o);
                    } else {
                        gemm(!ta, false, k, m, n, a.data(), gd, T::zero(), &mut o);
                    }
                    Tensor::from_vec(&sb, o)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, false)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(self) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape();
        assert_eq!(s.len(), 2);
        let cols = s[1];
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let yc = Rc::new(y.clone());
        self.graph.push(
            y,
            &[self],
            Box::new(move |g, _, _| {
                let mut o = g.clone();
                for (orow, yrow) in o.data_mut().chunks_mut(cols).zip(yc.data().chunks(cols)) {
                    let dot: T = orow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (ov, &yv) in orow.iter_mut().zip(yrow) {
                        *ov = yv * (*ov - dot);
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape();
        assert_eq!(s.len(), 2);
        let cols = s[1];
        let nf = T::lit(cols as f64);
        let mut y = (*x).clone();
        let mut inv_std = Vec::with_capacity(s[0]);
        for row in y.data_mut().chunks_mut(cols) {
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let yc = Rc::new(y.clone());
        self.graph.push(
            y,
            &[self],
            Box::new(move |g, _, _| {
                let mut o = g.clone();
                for ((orow, yrow), &is) in o
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(yc.data().chunks(cols))
                    .zip(&inv_std)
                {
                    let mg = orow.iter().copied().sum::<T>() / nf;
                    let mgy = orow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for (ov, &yv) in orow.iter_mut().zip(yrow) {
                        *ov = is * (*ov - mg - yv * mgy);
                    }
                }
                vec![Some(o)]
            }),
        )
    }

    /// 2-D cross-correlation of a `[Cin, H, W]` input with `[Cout, Cin, k, k]`
    /// weights, zero padding `pad`, stride `stride`, optional `[Cout]` bias.
    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let xs = x.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be CxHxW");
        assert_eq!(ws.len(), 4, "conv2d weight must be CoutxCinxKxK");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(x.data(), &geo);
        let rows = cin * k * k;
        let npix = ho * wo;
        let mut out = vec![T::zero(); cout * npix];
        if let Some(b) = &b {
            let bv = b.value();
            for (o, &bb) in out.chunks_mut(npix).zip(bv.data()) {
                o.iter_mut().for_each(|v| *v = bb);
            }
        }
        gemm(false, false, cout, rows, npix, wv.data(), &cols, T::one(), &mut out);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let xshape = xs.to_vec();
        let wshape = ws.to_vec();
        let has_bias = parents.len() == 3;
        self.graph.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            &parents,
            Box::new(move |g, p, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * npix];
                    gemm(true, false, rows, cout, npix, p[1].data(), gd, T::zero(), &mut dcols);
                    Tensor::from_vec(&xshape, col2im(&dcols, &geo))
                });
                let gw = need[1].then(|| {
                    let mut dw = vec![T::zero(); cout * rows];
                    gemm(false, true, cout, npix, rows, gd, &cols, T::zero(), &mut dw);
                    Tensor::from_vec(&wshape, dw)
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(need[2].then(|| {
                        let d: Vec<T> = gd.chunks(npix).map(|r| r.iter().copied().sum()).collect();
                        Tensor::from_vec(&[cout], d)
                    }));
                }
                res
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * npix];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.ho * g.wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn chw(s: &[usize]) -> (usize, usize, usize) {
    match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("expected a CxHxW or HxW tensor, got {:?}", s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'a> Fn(&'a Graph<f64>, Var<'a, f64>) -> Var<'a, f64>, x0: Tensor<f64>) -> f64 {
        let g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&g, x);
        let grads = g.backward(y);
        let analytic = grads.get_or_zeros(x);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += d;
                let g = Graph::new();
                let x = g.constant(t);
                build(&g, x).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i * 37 % 17) as f64 / 17.0 - 0.45) * scale).collect(),
        )
    }

    #[test]
    fn conv2d_gradients() {
        let w0 = ramp(&[3, 2, 3, 3], 0.7);
        let err = fd_check(
            |g, x| {
                let w = g.constant(w0.clone());
                x.conv2d(w, None, 2, 1).square().sum()
            },
            ramp(&[2, 7, 6], 1.0),
        );
        assert!(err < 1e-6, "{err}");
        let x0 = ramp(&[2, 6, 6], 1.0);
        let err = fd_check(
            |g, w| {
                let x = g.constant(x0.clone());
                x.conv2d(w, None, 1, 1).square().sum()
            },
            ramp(&[3, 2, 3, 3], 0.5),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_transposes() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let b0 = ramp(&[4, 4], 0.3);
            let err = fd_check(
                |g, a| {
                    let b = g.constant(b0.clone());
                    a.matmul_t(b, ta, tb).square().sum()
                },
                ramp(&[4, 4], 1.0),
            );
            assert!(err < 1e-6, "a ta={ta} tb={tb}: {err}");
            let a0 = ramp(&[3, 4], 0.8);
            let bshape = if tb { [2, 4] } else { [4, 2] };
            let a0s = if ta { ramp(&[4, 3], 0.8) } else { a0.clone() };
            let err = fd_check(
                |g, b| {
                    let a = g.constant(a0s.clone());
                    a.matmul_t(b, ta, tb).square().sum()
                },
                ramp(&bshape, 1.0),
            );
            assert!(err < 1e-6, "b ta={ta} tb={tb}: {err}");
        }
    }

    #[test]
    fn softmax_and_layernorm_gradients() {
        let wts = Tensor::from_vec(&[3, 5], (0..15).map(|i| ((i * 7 % 5) as f64 - 1.7) * (1.0 + i as f64 / 9.0)).collect());
        let err = fd_check(
            |g, x| x.softmax_rows().mul(g.constant(wts.clone())).sum(),
            ramp(&[3, 5], 1.5),
        );
        assert!(err < 1e-6, "{err}");
        let err = fd_check(
            |g, x| x.layer_norm_rows(1e-5).mul(g.constant(wts.clone())).sum(),
            ramp(&[3, 5], 1.5),
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reflect_padding_layout() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 5), 1);
        let (idx, shape) = index::reflect_pad(1, 3, 3, 1);
        assert_eq!(shape, [1, 5, 5]);
        assert_eq!(&idx[..5], &[4, 3, 4, 5, 4]);
    }

    #[test]
    fn patchify_unpatchify_are_inverse_for_one_channel() {
        let (p, _) = index::patchify(8, 8, 4);
        let (u, _) = index::unpatchify(1, 8, 8, 4);
        for (pix, &slot) in u.iter().enumerate() {
            assert_eq!(p[slot], pix);
        }
    }

    #[test]
    fn pooling_gradients() {
        let err = fd_check(|_, x| x.max_outer().square().sum(), ramp(&[3, 4, 4], 1.0));
        assert!(err < 1e-6, "{err}");
        let err = fd_check(|_, x| x.mean_inner().square().sum(), ramp(&[3, 4, 4], 1.0));
        assert!(err < 1e-6, "{err}");
        let err = fd_check(|_, x| x.mean_outer().square().sum(), ramp(&[3, 4, 4], 1.0));
        assert!(err < 1e-6, "{err}");
    }
}
