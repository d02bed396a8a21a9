//! Hierarchical VAE for heterogeneous rows: a categorical latent `s`, a
//! Gaussian latent `z` whose prior mean depends on `s`, a shared decoder, and
//! one linear likelihood head per attribute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    gaussian_reparam_sample, gumbel_softmax_sample, positive, Bound, Graph, Linear, Mlp, ParamId, ParamStore, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::heads::{Codec, DistributionParams};
use crate::model::{check_row_width, Imputer, MaskedBatch};
use crate::schema::{Cell, DatasetSchema, TrainStats};

/// Rows per forward pass at inference time.
const PREDICT_CHUNK: usize = 1024;

/// What the deterministic path feeds the decoder in place of a sampled `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeterministicS {
    /// The relaxed probability vector itself.
    #[default]
    Probabilities,
    /// One-hot at the most probable component.
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HivaeConfig {
    pub d_s: usize,
    pub d_z: usize,
    pub d_y_shared: usize,
    pub d_y_specific: usize,
    /// Hidden widths of every MLP (encoders and the shared decoder).
    pub hidden: Vec<usize>,
    pub gumbel_temperature: f64,
    #[serde(default)]
    pub deterministic_s_mode: DeterministicS,
}

impl Default for HivaeConfig {
    fn default() -> Self {
        Self {
            d_s: 83,
            d_z: 57,
            d_y_shared: 370,
            d_y_specific: 5,
            hidden: vec![850, 850],
            gumbel_temperature: 1.0,
            deterministic_s_mode: DeterministicS::Probabilities,
        }
    }
}

impl HivaeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_s, self.d_z, self.d_y_shared, self.d_y_specific];
        if dims.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("HIVAE dimensions must be at least 1".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::InvalidConfig("Gumbel-Softmax temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of rows, one row per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub pi_s: Tensor,
    pub s: Tensor,
    pub mu_z: Tensor,
    pub sigma2_z: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct HeadParams {
    ws: ParamId,
    wy: ParamId,
    b: ParamId,
}

/// Graph nodes of one forward pass.
struct Latents {
    log_pi: Var,
    s: Var,
    mu_z: Var,
    sigma2_z: Var,
    z: Var,
}

/// Loss components, each summed over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub nll: Var,
    pub kl_s: Var,
    pub kl_z: Var,
}

#[derive(Debug, Clone)]
pub struct HivaeModel {
    pub config: HivaeConfig,
    schema: DatasetSchema,
    stats: TrainStats,
    codec: Codec,
    store: ParamStore,
    enc_s: Mlp,
    enc_z: Mlp,
    dec_z: Linear,
    dec_y: Mlp,
    heads: Vec<HeadParams>,
    head_offsets: Vec<usize>,
    trained: bool,
}

impl HivaeModel {
    pub fn new(schema: &DatasetSchema, stats: &TrainStats, config: HivaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let codec = Codec::new(schema, stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = codec.input_width();
        let p = schema.len();
        let enc_s = Mlp::new(&mut store, "enc_s", w, &config.hidden, config.d_s, &mut rng);
        let enc_z = Mlp::new(&mut store, "enc_z", w + config.d_s, &config.hidden, 2 * config.d_z, &mut rng);
        let dec_z = Linear::new(&mut store, "dec_z", config.d_s, config.d_z, &mut rng);
        let dec_y = Mlp::new(
            &mut store,
            "dec_y",
            config.d_s + config.d_z,
            &config.hidden,
            config.d_y_shared + p * config.d_y_specific,
            &mut rng,
        );
        let shared_in = config.d_s + config.d_y_shared;
        let fan_in = shared_in + config.d_y_specific;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
        };
        let mut heads = Vec::with_capacity(p);
        let mut head_offsets = Vec::with_capacity(p);
        let mut off = 0;
        for (j, head) in codec.heads.iter().enumerate() {
            let k = head.out_dim();
            heads.push(HeadParams {
                ws: store.add(format!("head.{j}.ws"), uniform(shared_in, k)),
                wy: store.add(format!("head.{j}.wy"), uniform(config.d_y_specific, k)),
                b: store.add(format!("head.{j}.b"), uniform(1, k)),
            });
            head_offsets.push(off);
            off += k;
        }
        Ok(Self {
            config,
            schema: schema.clone(),
            stats: stats.clone(),
            codec,
            store,
            enc_s,
            enc_z,
            dec_z,
            dec_y,
            heads,
            head_offsets,
            trained: false,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stats(&self) -> &TrainStats {
        &self.stats
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the parameters as fit for inference; set by the trainer and the
    /// checkpoint loader.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn encode_graph<R: Rng>(&self, g: &mut Graph, p: &Bound, x: Var, rng: Option<&mut R>) -> Result<Latents> {
        let logits = self.enc_s.forward(g, p, x);
        let log_pi = g.log_softmax_rows(logits);
        let pi = g.exp(log_pi);
        let (s, rng) = match rng {
            Some(rng) => (gumbel_softmax_sample(g, log_pi, self.config.gumbel_temperature, rng), Some(rng)),
            None => match self.config.deterministic_s_mode {
                DeterministicS::Probabilities => (pi, None),
                DeterministicS::Argmax => {
                    let pv = g.value(pi);
                    let mut hot = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        let row = pv.row(r);
                        let k = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                        hot.set(r, k, 1.0);
                    }
                    (g.constant(hot), None)
                }
            },
        };
        let xs = g.concat_cols(&[x, s]);
        let h = self.enc_z.forward(g, p, xs);
        let mu_z = g.slice_cols(h, 0, self.config.d_z);
        let raw_var = g.slice_cols(h, self.config.d_z, self.config.d_z);
        let sigma2_z = positive(g, raw_var);
        let z = match rng {
            Some(rng) => gaussian_reparam_sample(g, mu_z, sigma2_z, rng)?,
            None => mu_z,
        };
        Ok(Latents { log_pi, s, mu_z, sigma2_z, z })
    }

    /// Per-attribute head outputs for decoder inputs `s` and `z`.
    fn decode_graph(&self, g: &mut Graph, p: &Bound, s: Var, z: Var) -> Vec<Var> {
        let sz = g.concat_cols(&[s, z]);
        let y = self.dec_y.forward(g, p, sz);
        self.heads_graph(g, p, s, y)
    }

    /// Head `j` reads `(s, y_shared, y_j)` only.
    fn heads_graph(&self, g: &mut Graph, p: &Bound, s: Var, y: Var) -> Vec<Var> {
        let dsh = self.config.d_y_shared;
        let dsp = self.config.d_y_specific;
        let y_shared = g.slice_cols(y, 0, dsh);
        let sy = g.concat_cols(&[s, y_shared]);
        let ws: Vec<Var> = self.heads.iter().map(|h| p[h.ws]).collect();
        let ws_all = g.concat_cols(&ws);
        let shared_out = g.matmul(sy, ws_all);
        self.heads
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let k = self.codec.heads[j].out_dim();
                let yj = g.slice_cols(y, dsh + j * dsp, dsp);
                let specific = g.matmul(yj, p[h.wy]);
                let shared = g.slice_cols(shared_out, self.head_offsets[j], k);
                let sum = g.add(shared, specific);
                g.add(sum, p[h.b])
            })
            .collect()
    }

    /// `KL(q(s|x) || uniform)` and `KL(q(z|s,x) || N(dec_z(s), I))`, summed over rows.
    fn kl_graph(&self, g: &mut Graph, p: &Bound, lat: &Latents) -> (Var, Var) {
        let pi = g.exp(lat.log_pi);
        let shifted = g.add_scalar(lat.log_pi, (self.config.d_s as f64).ln());
        let terms = g.mul(pi, shifted);
        let kl_s = g.sum(terms);

        let prior_mu = self.dec_z.forward(g, p, lat.s);
        let diff = g.sub(lat.mu_z, prior_mu);
        let d2 = g.square(diff);
        let log_var = g.ln(lat.sigma2_z);
        let a = g.add(lat.sigma2_z, d2);
        let b = g.sub(a, log_var);
        let c = g.add_scalar(b, -1.0);
        let total = g.sum(c);
        let kl_z = g.scale(total, 0.5);
        (kl_s, kl_z)
    }

    /// Masked-modeling objective for one batch, summed over rows:
    /// `sum -log p(target cells) + beta_s KL_s + beta_z KL_z`.
    pub fn loss_graph<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &MaskedBatch<'_>,
        beta_s: f64,
        beta_z: f64,
        rng: &mut R,
    ) -> Result<LossParts> {
        let x = self.codec.encode_rows(batch.rows.iter().copied(), Some(&batch.visible));
        let x = g.constant(x);
        let lat = self.encode_graph(g, p, x, Some(rng))?;
        let outs = self.decode_graph(g, p, lat.s, lat.z);
        let mut nll_terms = Vec::new();
        for (j, &out) in outs.iter().enumerate() {
            let (rows, values) = batch.column_targets(j);
            if rows.is_empty() {
                continue;
            }
            let head = &self.codec.heads[j];
            let targets = values.iter().map(|&v| head.target(v)).collect();
            nll_terms.push(head.nll_sum(g, out, rows, targets));
        }
        let nll = match nll_terms.split_first() {
            None => g.constant(Tensor::scalar(0.0)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
        };
        let (kl_s, kl_z) = self.kl_graph(g, p, &lat);
        let ws = g.scale(kl_s, beta_s);
        let wz = g.scale(kl_z, beta_z);
        let kl = g.add(ws, wz);
        let total = g.add(nll, kl);
        Ok(LossParts { total, nll, kl_s, kl_z })
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.codec.input_width() {
            return Err(Error::DimensionMismatch { expected: self.codec.input_width(), got: x.cols() });
        }
        Ok(())
    }

    /// Encodes preprocessed rows. With an RNG the latents are sampled;
    /// without one `s` and `z` are set from their distribution parameters.
    pub fn encode<R: Rng>(&self, x: &Tensor, rng: Option<&mut R>) -> Result<EncoderState> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let lat = self.encode_graph(&mut g, &p, xv, rng)?;
        let pi = g.exp(lat.log_pi);
        Ok(EncoderState {
            pi_s: g.value(pi).clone(),
            s: g.value(lat.s).clone(),
            mu_z: g.value(lat.mu_z).clone(),
            sigma2_z: g.value(lat.sigma2_z).clone(),
            z: g.value(lat.z).clone(),
        })
    }

    /// Raw head outputs for given latents, one `n x out_dim` tensor per attribute.
    pub fn decode_outputs(&self, state: &EncoderState) -> Result<Vec<Tensor>> {
        if state.s.cols() != self.config.d_s || state.z.cols() != self.config.d_z {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_s + self.config.d_z,
                got: state.s.cols() + state.z.cols(),
            });
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let s = g.constant(state.s.clone());
        let z = g.constant(state.z.clone());
        Ok(self.decode_graph(&mut g, &p, s, z).into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Head outputs driven directly by a decoder vector `y = (y_shared, y_1..y_p)`.
    pub fn head_outputs_from_y(&self, s: &Tensor, y: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let s = g.constant(s.clone());
        let y = g.constant(y.clone());
        self.heads_graph(&mut g, &p, s, y).into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Per-row parameter lists in raw units.
    pub fn decode(&self, state: &EncoderState) -> Result<Vec<Vec<DistributionParams>>> {
        let outs = self.decode_outputs(state)?;
        Ok((0..state.s.rows())
            .map(|i| self.codec.heads.iter().zip(&outs).map(|(h, o)| h.params(o.row(i))).collect())
            .collect())
    }

    /// `(KL_s, KL_z)` summed over the rows of a state.
    pub fn kl_terms(&self, state: &EncoderState) -> (f64, f64) {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let pi = state.pi_s.map(|v| v.max(f64::MIN_POSITIVE));
        let log_pi = g.constant(pi.map(f64::ln));
        let lat = Latents {
            log_pi,
            s: g.constant(state.s.clone()),
            mu_z: g.constant(state.mu_z.clone()),
            sigma2_z: g.constant(state.sigma2_z.clone()),
            z: g.constant(state.z.clone()),
        };
        let (ks, kz) = self.kl_graph(&mut g, &p, &lat);
        (g.value(ks).item(), g.value(kz).item())
    }

    /// Imputes one row. `n_latent_samples == 0` runs the deterministic path
    /// and returns a single list; otherwise `n` stochastic encoder passes.
    pub fn impute<R: Rng>(
        &self,
        row: &[Cell],
        n_latent_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<DistributionParams>>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        check_row_width(&[row], self.schema.len())?;
        if n_latent_samples == 0 {
            return self.predict(&[row]);
        }
        let x = self.codec.encode_rows(std::iter::repeat_n(row, n_latent_samples), None);
        let state = self.encode(&x, Some(rng))?;
        self.decode(&state)
    }
}

impl Imputer for HivaeModel {
    fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        check_row_width(rows, self.schema.len())?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let x = self.codec.encode_rows(chunk.iter().copied(), None);
            let state = self.encode::<ChaCha8Rng>(&x, None)?;
            out.extend(self.decode(&state)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
