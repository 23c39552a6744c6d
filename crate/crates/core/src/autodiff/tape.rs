use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{Gradients, ParamId, ParamStore};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Affine { w: ParamId, b: Option<ParamId>, x: Var },
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// Adds a constant; gradient passes through unchanged.
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    SumN(Vec<Var>),
    Norm(Var),
    Softmax(Var),
    /// Softmax-weighted sum; `order` is the canonical summation order.
    Attend { scores: Vec<Var>, items: Vec<Var>, order: Vec<usize>, weights: Vec<F> },
    /// Clamp; `pass[k]` is false where the bound was active.
    Clamp(Var, Vec<bool>),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Sum(_) => "sum",
            Op::SumN(_) => "sum_n",
            Op::Norm(_) => "norm",
            Op::Softmax(_) => "softmax",
            Op::Attend { .. } => "attend",
            Op::Clamp(..) => "clamp",
        }
    }
}

struct Node<F> {
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Backward<F> {
    pub params: Gradients<F>,
    nodes: Vec<Vec<F>>,
}

impl<F: Scalar> Backward<F> {
    /// Gradient with respect to a node created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> &[F] {
        &self.nodes[v.0]
    }
}

/// Reverse-mode tape over dense vectors. Parameters are borrowed from a
/// [`ParamStore`] rather than copied onto the tape.
pub struct Tape<'p, F> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    consumed: bool,
}

fn lex_cmp<F: Scalar>(a: &[F], b: &[F]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    a.len().cmp(&b.len())
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Vec<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Backward::wrt`].
    pub fn input(&mut self, value: Vec<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter tensor viewed as a flat vector.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data.clone();
        self.push(value, Op::Param(id), true)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(wt.cols, xv.len(), "affine: {} expects {} inputs, got {}",
            self.params.name(w), wt.cols, xv.len());
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![F::zero(); wt.rows],
        };
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wt.data[r * wt.cols..(r + 1) * wt.cols];
            let mut acc = F::zero();
            for (a, bx) in row.iter().zip(xv) {
                acc += *a * *bx;
            }
            *o += acc;
        }
        self.push(out, Op::Affine { w, b, x }, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "{}: length mismatch", op.name());
        let out = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant vector `c`.
    pub fn offset(&mut self, a: Var, c: &[F]) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), c.len(), "offset: length mismatch");
        let out = va.iter().zip(c).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a);
        self.push(out, Op::Offset(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        let ng = self.ng(a);
        self.push(out, Op::Slice(a, start), ng)
    }

    /// Sum of all components, as a length-1 vector.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![s], Op::Sum(a), ng)
    }

    /// Elementwise sum of equally sized vectors.
    pub fn sum_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum_n of nothing");
        let mut out = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.len(), out.len(), "sum_n: length mismatch");
            for (o, x) in out.iter_mut().zip(v) {
                *o += *x;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::SumN(parts.to_vec()), ng)
    }

    /// Euclidean norm; the subgradient at zero is zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.iter().map(|&x| x * x).sum::<F>().sqrt();
        let ng = self.ng(a);
        self.push(vec![n], Op::Norm(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().copied().fold(F::neg_infinity(), F::max);
        let e: Vec<F> = v.iter().map(|&x| (x - m).exp()).collect();
        let z: F = e.iter().copied().sum();
        let out = e.into_iter().map(|x| x / z).collect();
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// `sum_k softmax(scores)_k * items_k`, each score a length-1 node.
    ///
    /// Terms are summed in a canonical order (lexicographic on item values),
    /// so the result is bit-identical under any permutation of the inputs.
    pub fn attend(&mut self, scores: &[Var], items: &[Var]) -> Var {
        assert_eq!(scores.len(), items.len(), "attend: one score per item");
        assert!(!items.is_empty(), "attend over an empty set");
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| {
            lex_cmp(&self.nodes[items[a].0].value, &self.nodes[items[b].0].value).then_with(|| {
                self.nodes[scores[a].0].value[0]
                    .partial_cmp(&self.nodes[scores[b].0].value[0])
                    .unwrap_or(Ordering::Equal)
            })
        });
        let s: Vec<F> = scores.iter().map(|v| self.nodes[v.0].value[0]).collect();
        let m = order.iter().map(|&k| s[k]).fold(F::neg_infinity(), F::max);
        let e: Vec<F> = s.iter().map(|&x| (x - m).exp()).collect();
        let mut z = F::zero();
        for &k in &order {
            z += e[k];
        }
        let weights: Vec<F> = e.iter().map(|&x| x / z).collect();
        let dim = self.nodes[items[0].0].value.len();
        let mut out = vec![F::zero(); dim];
        for &k in &order {
            let v = &self.nodes[items[k].0].value;
            assert_eq!(v.len(), dim, "attend: ragged items");
            for (o, x) in out.iter_mut().zip(v) {
                *o += weights[k] * *x;
            }
        }
        let ng = scores.iter().chain(items).any(|&p| self.ng(p));
        self.push(
            out,
            Op::Attend {
                scores: scores.to_vec(),
                items: items.to_vec(),
                order,
                weights,
            },
            ng,
        )
    }

    /// Componentwise clamp to `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: &[F], hi: &[F]) -> Var {
        let v = &self.nodes[a.0].value;
        let mut pass = Vec::with_capacity(v.len());
        let out = v
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let c = x.max(lo[k]).min(hi[k]);
                pass.push(c == x);
                c
            })
            .collect();
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, pass), ng)
    }

    /// `max(a, 0)` on a scalar node; the hinge of the barrier losses.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|x| !x.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar output. A tape can be differentiated once.
    pub fn backward(&mut self, out: Var) -> Result<Backward<F>> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice on the same tape".into()));
        }
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar output, node {} has length {}",
                out.0,
                self.nodes[out.0].value.len()
            )));
        }
        if let Some((idx, op)) = self.first_non_finite() {
            return Err(Error::Autodiff(format!("non-finite value at node {idx} ({op})")));
        }
        self.consumed = true;

        let mut grads: Vec<Vec<F>> = Vec::with_capacity(out.0 + 1);
        for n in &self.nodes[..=out.0] {
            grads.push(if n.needs_grad { vec![F::zero(); n.value.len()] } else { Vec::new() });
        }
        grads[out.0][0] = F::one();
        let mut pgrads = Gradients::zeros_like(self.params);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|x| x.is_zero()) {
                grads[idx] = g;
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, k: usize, d: F| {
                if nodes[v.0].needs_grad {
                    grads[v.0][k] += d;
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (p, d) in pgrads.grads[id.0].iter_mut().zip(&g) {
                        *p += *d;
                    }
                }
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let xv = &nodes[x.0].value;
                    let gw = &mut pgrads.grads[w.0];
                    for (r, &dy) in g.iter().enumerate() {
                        if dy.is_zero() {
                            continue;
                        }
                        let row = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                        for (gwv, &xv) in row.iter_mut().zip(xv) {
                            *gwv += dy * xv;
                        }
                    }
                    if let Some(b) = b {
                        for (p, d) in pgrads.grads[b.0].iter_mut().zip(&g) {
                            *p += *d;
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let gx = &mut grads[x.0];
                        for (r, &dy) in g.iter().enumerate() {
                            if dy.is_zero() {
                                continue;
                            }
                            let row = &wt.data[r * wt.cols..(r + 1) * wt.cols];
                            for (gxv, &wv) in gx.iter_mut().zip(row) {
                                *gxv += dy * wv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, k, d);
                        acc(*b, k, d);
                    }
                }
                Op::Sub(a, b) => {
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, k, d);
                        acc(*b, k, -d);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, k, d * vb[k]);
                        acc(*b, k, d * va[k]);
                    }
                }
                Op::Scale(a, c) => {
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, k, d * *c);
                    }
                }
                Op::Offset(a) => {
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, k, d);
                    }
                }
                Op::Relu(a) => {
                    let va = &nodes[a.0].value;
                    for (k, &d) in g.iter().enumerate() {
                        if va[k] > F::zero() {
                            acc(*a, k, d);
                        }
                    }
                }
                Op::Tanh(a) => {
                    for (k, &d) in g.iter().enumerate() {
                        let y = node.value[k];
                        acc(*a, k, d * (F::one() - y * y));
                    }
                }
                Op::Sigmoid(a) => {
                    for (k, &d) in g.iter().enumerate() {
                        let y = node.value[k];
                        acc(*a, k, d * y * (F::one() - y));
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        for k in 0..len {
                            acc(*p, k, g[off + k]);
                        }
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    for (k, &d) in g.iter().enumerate() {
                        acc(*a, start + k, d);
                    }
                }
                Op::Sum(a) => {
                    for k in 0..nodes[a.0].value.len() {
                        acc(*a, k, g[0]);
                    }
                }
                Op::SumN(parts) => {
                    for p in parts {
                        for (k, &d) in g.iter().enumerate() {
                            acc(*p, k, d);
                        }
                    }
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    if n > F::zero() {
                        let va = &nodes[a.0].value;
                        for (k, &x) in va.iter().enumerate() {
                            acc(*a, k, g[0] * x / n);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: F = y.iter().zip(&g).map(|(&yi, &gi)| yi * gi).sum();
                    for k in 0..y.len() {
                        acc(*a, k, y[k] * (g[k] - dot));
                    }
                }
                Op::Attend { scores, items, order, weights } => {
                    // d item_k = w_k g;  d s_k = w_k (g . item_k - g . out)
                    let g_out: F = g.iter().zip(&node.value).map(|(&a, &b)| a * b).sum();
                    for &k in order {
                        let item = items[k];
                        let wk = weights[k];
                        let g_item: F =
                            g.iter().zip(&nodes[item.0].value).map(|(&a, &b)| a * b).sum();
                        for (c, &d) in g.iter().enumerate() {
                            acc(item, c, wk * d);
                        }
                        acc(scores[k], 0, wk * (g_item - g_out));
                    }
                }
                Op::Clamp(a, pass) => {
                    for (k, &d) in g.iter().enumerate() {
                        if pass[k] {
                            acc(*a, k, d);
                        }
                    }
                }
            }
            grads[idx] = g;
        }

        for g in pgrads.grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Autodiff("non-finite parameter gradient".into()));
            }
        }
        grads.resize_with(self.nodes.len(), Vec::new);
        Ok(Backward {
            params: pgrads,
            nodes: grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn square_and_product() {
        let ps = store();
        let mut t = Tape::new(&ps);
        let x = t.input(vec![3.0]);
        let y = t.mul(x, x);
        let b = t.backward(y).unwrap();
        assert_eq!(b.wrt(x), &[6.0]);

        let mut t = Tape::new(&ps);
        let x = t.input(vec![2.0]);
        let y = t.input(vec![5.0]);
        let z = t.mul(x, y);
        let b = t.backward(z).unwrap();
        assert_eq!((b.wrt(x)[0], b.wrt(y)[0]), (5.0, 2.0));
    }

    #[test]
    fn backward_errors() {
        let ps = store();
        let mut t = Tape::new(&ps);
        let x = t.input(vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
        let s = t.sum(x);
        assert!(t.backward(s).is_ok());
        assert!(t.backward(s).is_err(), "second backward must fail");

        let mut t = Tape::new(&ps);
        let x = t.input(vec![f64::NAN]);
        let y = t.tanh(x);
        let err = t.backward(y).unwrap_err().to_string();
        assert!(err.contains("node 0"), "{err}");
    }

    #[test]
    fn softmax_sums_to_one() {
        let ps = store();
        let mut t = Tape::new(&ps);
        let x = t.input(vec![1.0, -3.0, 700.0, 0.5]);
        let s = t.softmax(x);
        let v = t.value(s);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn clamp_blocks_gradient() {
        let ps = store();
        let mut t = Tape::new(&ps);
        let x = t.input(vec![0.5, 0.1]);
        let c = t.clamp(x, &[-0.4, -0.4], &[0.4, 0.4]);
        let s = t.sum(c);
        let b = t.backward(s).unwrap();
        assert_eq!(b.wrt(x), &[0.0, 1.0]);
    }

    #[test]
    fn attend_is_permutation_exact() {
        let ps = store();
        let items = [vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.7, 0.4]];
        let scores = [0.2, -1.3, 0.9];
        let run = |perm: [usize; 3]| {
            let mut t = Tape::new(&ps);
            let iv: Vec<Var> = perm.iter().map(|&k| t.input(items[k].clone())).collect();
            let sv: Vec<Var> = perm.iter().map(|&k| t.input(vec![scores[k]])).collect();
            let o = t.attend(&sv, &iv);
            t.value(o).to_vec()
        };
        let base = run([0, 1, 2]);
        for p in [[2, 1, 0], [1, 0, 2], [1, 2, 0]] {
            assert_eq!(run(p), base);
        }
    }
}
