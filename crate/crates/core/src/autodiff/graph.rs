//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the gradients of all leaf variables. Nodes whose inputs do not
//! require gradients store no backward closure, so inference through a
//! graph of constants only pays for the forward values.

use std::sync::Arc;

use super::tensor::{gemm, Tensor, Trans};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of leaf variables after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn bcast_index(shape: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> [usize; 2] {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    [dim(a[0], b[0]), dim(a[1], b[1])]
}

/// Sums a gradient of shape `out` down to a broadcast operand of shape `target`.
fn reduce_to(grad: &Tensor, target: [usize; 2]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target[0], target[1]);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            out.data_mut()[bcast_index(target, r, c)] += grad.get(r, c);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Sparse attention pattern: for each query, the list of keys it may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    n_keys: usize,
}

/// Dense boolean pair mask, `allowed[q][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPairMask {
    pub allowed: Vec<Vec<bool>>,
}

impl AttentionPairMask {
    pub fn all(n_queries: usize, n_keys: usize) -> Self {
        Self { allowed: vec![vec![true; n_keys]; n_queries] }
    }
}

impl AttentionLayout {
    fn from_lists(lists: Vec<Vec<usize>>, n_keys: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for (q, list) in lists.into_iter().enumerate() {
            if list.is_empty() {
                return Err(Error::EmptyKeyRow(q));
            }
            keys.extend(list);
            offsets.push(keys.len());
        }
        Ok(Self { offsets, keys, n_keys })
    }

    pub fn from_pair_mask(mask: &AttentionPairMask, n_keys: usize) -> Result<Self> {
        let lists = mask
            .allowed
            .iter()
            .map(|row| {
                assert_eq!(row.len(), n_keys, "pair mask width");
                row.iter().enumerate().filter(|(_, &ok)| ok).map(|(k, _)| k).collect()
            })
            .collect();
        Self::from_lists(lists, n_keys)
    }

    pub fn dense(n_queries: usize, n_keys: usize) -> Result<Self> {
        Self::from_lists(vec![(0..n_keys).collect(); n_queries], n_keys)
    }

    /// Each query attends exactly the keys carrying the same group id.
    pub fn from_groups(query_groups: &[usize], key_groups: &[usize]) -> Result<Self> {
        let n_groups = query_groups.iter().chain(key_groups).copied().max().map_or(0, |g| g + 1);
        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (k, &g) in key_groups.iter().enumerate() {
            by_group[g].push(k);
        }
        let lists = query_groups.iter().map(|&g| by_group[g].clone()).collect();
        Self::from_lists(lists, key_groups.len())
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn keys_of(&self, q: usize) -> &[usize] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    /// Number of (query, key) pairs scored.
    pub fn pair_count(&self) -> usize {
        self.keys.len()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = backward.is_some();
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied backward rule. The rule
    /// receives the output gradient, the parent values and the output value,
    /// and returns one optional gradient per parent.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let needs = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let bw: Option<BackwardFn> = if needs { Some(Box::new(backward)) } else { None };
        self.push_node(value, parents.iter().map(|p| p.0).collect(), bw)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.rows(), rv.cols(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = bw(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise binary ops with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb);
        let value = self.broadcast_eval(a, b, out_shape, |x, y| x + y);
        self.custom(&[a, b], value, move |g, _, _| vec![Some(reduce_to(g, sa)), Some(reduce_to(g, sb))])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb);
        let value = self.broadcast_eval(a, b, out_shape, |x, y| x - y);
        self.custom(&[a, b], value, move |g, _, _| vec![Some(reduce_to(g, sa)), Some(reduce_to(&g.map(|x| -x), sb))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb);
        let value = self.broadcast_eval(a, b, out_shape, |x, y| x * y);
        self.custom(&[a, b], value, move |g, pv, _| {
            let (av, bv) = (pv[0], pv[1]);
            let mut ga = Tensor::zeros(g.rows(), g.cols());
            let mut gb = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let gi = g.get(r, c);
                    ga.set(r, c, gi * bv.data()[bcast_index(sb, r, c)]);
                    gb.set(r, c, gi * av.data()[bcast_index(sa, r, c)]);
                }
            }
            vec![Some(reduce_to(&ga, sa)), Some(reduce_to(&gb, sb))]
        })
    }

    fn broadcast_eval(&self, a: Var, b: Var, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return av.zip_map(bv, f);
        }
        let (sa, sb) = (av.shape(), bv.shape());
        let mut out = Tensor::zeros(shape[0], shape[1]);
        for r in 0..shape[0] {
            for c in 0..shape[1] {
                out.set(r, c, f(av.data()[bcast_index(sa, r, c)], bv.data()[bcast_index(sb, r, c)]));
            }
        }
        out
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.custom(&[a], value, move |g, _, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.custom(&[a], value, |g, _, _| vec![Some(g.clone())])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- elementwise unary ops ----

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.custom(&[a], value, |g, pv, _| vec![Some(g.zip_map(pv[0], |gi, x| if x > 0.0 { gi } else { 0.0 }))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_scalar);
        self.custom(&[a], value, |g, pv, _| vec![Some(g.zip_map(pv[0], |gi, x| gi * sigmoid(x)))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.custom(&[a], value, |g, _, out| vec![Some(g.zip_map(out, |gi, s| gi * s * (1.0 - s)))])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.custom(&[a], value, |g, _, out| vec![Some(g.zip_map(out, |gi, e| gi * e))])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.custom(&[a], value, |g, pv, _| vec![Some(g.zip_map(pv[0], |gi, x| gi / x))])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.custom(&[a], value, |g, _, out| vec![Some(g.zip_map(out, |gi, s| gi * 0.5 / s))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.custom(&[a], value, |g, pv, _| vec![Some(g.zip_map(pv[0], |gi, x| 2.0 * gi * x))])
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], value, move |g, _, _| vec![Some(Tensor::full(shape[0], shape[1], g.item()))])
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let value = Tensor::column_vector((0..av.rows()).map(|r| av.row(r).iter().sum()).collect());
        self.custom(&[a], value, move |g, _, _| {
            let mut out = Tensor::zeros(g.rows(), cols);
            for r in 0..g.rows() {
                out.row_mut(r).iter_mut().for_each(|x| *x = g.get(r, 0));
            }
            vec![Some(out)]
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, Trans::No, bv, Trans::No, 0.0, &mut value);
        let (a_rg, b_rg) = (self.requires_grad(a), self.requires_grad(b));
        self.custom(&[a, b], value, move |g, pv, _| {
            let (av, bv) = (pv[0], pv[1]);
            let ga = a_rg.then(|| {
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                gemm(g, Trans::No, bv, Trans::Yes, 0.0, &mut ga);
                ga
            });
            let gb = b_rg.then(|| {
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                gemm(av, Trans::Yes, g, Trans::No, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// `x * w + b` with `b` a `1 x n` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.custom(&[a], value, |g, _, y| {
            let mut out = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let (gr, yr) = (g.row(r), y.row(r));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (o, (gi, yi)) in out.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(out)]
        })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.custom(&[a], value, |g, _, y| {
            let mut out = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for (o, (gi, yi)) in out.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                    *o = gi - yi.exp() * gsum;
                }
            }
            vec![Some(out)]
        })
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = *o * gv.data()[c] + bv.data()[c];
            }
        }
        self.custom(&[x, gain, bias], value, move |g, pv, _| {
            let gv = pv[1];
            let mut dx = Tensor::zeros(rows, cols);
            let mut dgain = Tensor::zeros(1, cols);
            let mut dbias = Tensor::zeros(1, cols);
            let n = cols as f64;
            for r in 0..rows {
                let (gr, xr) = (g.row(r), xhat.row(r));
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for c in 0..cols {
                    dgain.data_mut()[c] += gr[c] * xr[c];
                    dbias.data_mut()[c] += gr[c];
                    let d = gr[c] * gv.data()[c];
                    mean_d += d;
                    mean_dx += d * xr[c];
                }
                mean_d /= n;
                mean_dx /= n;
                for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                    let d = gr[c] * gv.data()[c];
                    *o = inv_std[r] * (d - mean_d - xr[c] * mean_dx);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        })
    }

    // ---- structural ops ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p)[0], rows, "concat_cols row mismatch");
                self.shape(p)[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                value.row_mut(r)[off..off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        self.custom(parts, value, move |g, _, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut part = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    Some(part)
                })
                .collect()
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut value = Tensor::zeros(rows, len);
        for r in 0..rows {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.custom(&[a], value, move |g, _, _| {
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                out.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
            }
            vec![Some(out)]
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0])[1];
        let heights: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p)[1], cols, "concat_rows column mismatch");
                self.shape(p)[0]
            })
            .collect();
        let mut data = Vec::with_capacity(heights.iter().sum::<usize>() * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(heights.iter().sum(), cols, data);
        self.custom(parts, value, move |g, _, _| {
            let mut off = 0;
            heights
                .iter()
                .map(|&h| {
                    let part = Tensor::from_vec(h, cols, g.data()[off * cols..(off + h) * cols].to_vec());
                    off += h;
                    Some(part)
                })
                .collect()
        })
    }

    /// `out[i] = a[indices[i]]`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut value = Tensor::zeros(indices.len(), cols);
        for (o, &i) in indices.iter().enumerate() {
            value.row_mut(o).copy_from_slice(av.row(i));
        }
        self.custom(&[a], value, move |g, _, _| {
            let mut out = Tensor::zeros(rows, cols);
            for (o, &i) in indices.iter().enumerate() {
                for (x, gi) in out.row_mut(i).iter_mut().zip(g.row(o)) {
                    *x += gi;
                }
            }
            vec![Some(out)]
        })
    }

    /// Builds `n_out` rows as weighted sums of table rows:
    /// `out[o] += coef * table[t]` for every entry `(o, t, coef)`.
    pub fn sparse_rows(&mut self, table: Var, entries: Vec<(usize, usize, f64)>, n_out: usize) -> Var {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut value = Tensor::zeros(n_out, cols);
        for &(o, t, coef) in &entries {
            let src = tv.row(t);
            for (x, s) in value.row_mut(o).iter_mut().zip(src) {
                *x += coef * s;
            }
        }
        self.custom(&[table], value, move |g, _, _| {
            let mut out = Tensor::zeros(rows, cols);
            for &(o, t, coef) in &entries {
                for (x, gi) in out.row_mut(t).iter_mut().zip(g.row(o)) {
                    *x += coef * gi;
                }
            }
            vec![Some(out)]
        })
    }

    /// Scaled dot-product multi-head attention over a sparse layout.
    /// `q` is `n_q x d`, `k` and `v` are `n_k x d`; head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`. Keys outside a query's list receive
    /// zero weight (equivalent to a -inf logit).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttentionLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("model dim {d} not divisible by {heads} heads")));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::ShapeMismatch("attention key/value shapes".into()));
        }
        if layout.n_queries() != qv.rows() || layout.n_keys() != kv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "layout is {}x{}, inputs are {}x{}",
                layout.n_queries(),
                layout.n_keys(),
                qv.rows(),
                kv.rows()
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let nnz = layout.pair_count();
        let mut weights = vec![0.0; nnz * heads];
        let mut value = Tensor::zeros(qv.rows(), d);
        for i in 0..qv.rows() {
            let keys = layout.keys_of(i);
            let base = layout.offsets[i];
            for h in 0..heads {
                let cs = h * hd;
                let qi = &qv.row(i)[cs..cs + hd];
                let w = &mut weights[(base * heads + h * keys.len())..(base * heads + (h + 1) * keys.len())];
                for (slot, &kk) in w.iter_mut().zip(keys) {
                    let kr = &kv.row(kk)[cs..cs + hd];
                    *slot = qi.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(w);
                let out = &mut value.row_mut(i)[cs..cs + hd];
                for (&wk, &kk) in w.iter().zip(keys) {
                    let vr = &vv.row(kk)[cs..cs + hd];
                    for (o, x) in out.iter_mut().zip(vr) {
                        *o += wk * x;
                    }
                }
            }
        }
        Ok(self.custom(&[q, k, v], value, move |g, pv, _| {
            let (qv, kv, vv) = (pv[0], pv[1], pv[2]);
            let mut dq = Tensor::zeros(qv.rows(), d);
            let mut dk = Tensor::zeros(kv.rows(), d);
            let mut dv = Tensor::zeros(vv.rows(), d);
            let mut dw: Vec<f64> = Vec::new();
            for i in 0..qv.rows() {
                let keys = layout.keys_of(i);
                let base = layout.offsets[i];
                for h in 0..heads {
                    let cs = h * hd;
                    let w = &weights[(base * heads + h * keys.len())..(base * heads + (h + 1) * keys.len())];
                    let go = &g.row(i)[cs..cs + hd];
                    dw.clear();
                    for (&wk, &kk) in w.iter().zip(keys) {
                        let vr = &vv.row(kk)[cs..cs + hd];
                        dw.push(go.iter().zip(vr).map(|(a, b)| a * b).sum());
                        for (o, gi) in dv.row_mut(kk)[cs..cs + hd].iter_mut().zip(go) {
                            *o += wk * gi;
                        }
                    }
                    let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    for ((&wk, &dwk), &kk) in w.iter().zip(&dw).zip(keys) {
                        let ds = wk * (dwk - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = &kv.row(kk)[cs..cs + hd];
                        for (o, x) in dq.row_mut(i)[cs..cs + hd].iter_mut().zip(kr) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(i)[cs..cs + hd];
                        for (o, x) in dk.row_mut(kk)[cs..cs + hd].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        }))
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}
