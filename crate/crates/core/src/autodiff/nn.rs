//! Parameter storage and the small layer vocabulary both models use.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{AttentionLayout, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor added to softplus outputs that parameterize variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor by name; shapes must match exactly.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.names.len()];
        for (name, t) in named {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.tensors[idx].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = t;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", self.names[missing])));
        }
        Ok(())
    }

    /// Adds every parameter to the graph, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars =
            self.tensors.iter().map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }).collect();
        Bound { vars }
    }
}

/// Graph variables of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already in a graph, in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Small random-normal initialization used for embeddings.
pub fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>(),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_tensor(fan_in, fan_out, bound, rng));
        let b = store.add(format!("{name}.b"), uniform_tensor(1, fan_out, bound, rng));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.affine(x, p[self.w], p[self.b])
    }
}

/// Stack of linear layers with ReLU between them and no output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Projected multi-head attention: `softmax(QK^T / sqrt(d_h)) V W_o`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model dim must be divisible by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        keys: Var,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, keys);
        let v = self.v.forward(g, p, keys);
        let att = g.attention(q, k, v, self.heads, layout)?;
        Ok(self.o.forward(g, p, att))
    }
}

/// Positive outputs via `softplus(x) + floor`.
pub fn positive(g: &mut Graph, x: Var) -> Var {
    let s = g.softplus(x);
    g.add_scalar(s, VARIANCE_FLOOR)
}

/// Gumbel(0, 1) noise of the given shape.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
                -(-u.ln()).ln()
            })
            .collect(),
    )
}

/// Relaxed one-hot draw `softmax((logits + noise) / temperature)` for fixed noise.
pub fn gumbel_softmax_with_noise(g: &mut Graph, logits: Var, noise: Tensor, temperature: f64) -> Var {
    assert!(temperature > 0.0, "Gumbel-Softmax temperature must be positive");
    let n = g.constant(noise);
    let perturbed = g.add(logits, n);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    g.softmax_rows(scaled)
}

pub fn gumbel_softmax_sample(g: &mut Graph, logits: Var, temperature: f64, rng: &mut impl Rng) -> Var {
    let [rows, cols] = g.shape(logits);
    let noise = gumbel_noise(rows, cols, rng);
    gumbel_softmax_with_noise(g, logits, noise, temperature)
}

/// `mu + sqrt(sigma2) * eps` with `eps ~ N(0, I)`.
pub fn gaussian_reparam_sample(g: &mut Graph, mu: Var, sigma2: Var, rng: &mut impl Rng) -> Result<Var> {
    if g.value(sigma2).data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonpositiveVariance);
    }
    let [rows, cols] = g.shape(mu);
    let eps = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>());
    let eps = g.constant(eps);
    let sd = g.sqrt(sigma2);
    let noise = g.mul(sd, eps);
    Ok(g.add(mu, noise))
}
