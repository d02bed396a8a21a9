//! Masked autoencoder over attribute tokens. Observed cells become tokens
//! that attend to each other in the encoder; every missing column of a row
//! becomes a mask-token query that cross-attends to that row's encoded
//! tokens only, so queries never see each other.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    normal_tensor, AttentionLayout, Bound, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::heads::{Codec, DistributionParams};
use crate::model::{check_row_width, Imputer, MaskedBatch};
use crate::schema::{Cell, DatasetSchema, TrainStats, VariableType};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Width of the common decoder output feeding the attribute heads.
    pub d_y: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { d_model: 96, heads: 4, ffn_hidden: 384, encoder_blocks: 2, decoder_blocks: 2, d_y: 384 }
    }
}

impl MaeConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.d_y == 0 {
            return Err(Error::InvalidConfig("MAE widths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm_q: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &MaeConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), cfg.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), cfg.d_model),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), cfg.d_model, cfg.ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_hidden, cfg.d_model, rng),
        }
    }

    /// Pre-norm residual block. With `keys == None` this is self-attention.
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        keys: Option<Var>,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let xn = self.norm_q.forward(g, p, x);
        let kv = keys.unwrap_or(xn);
        let a = self.attn.forward(g, p, xn, kv, layout)?;
        let h = g.add(x, a);
        let hn = self.norm_ff.forward(g, p, h);
        let f = self.ffn_in.forward(g, p, hn);
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, p, f);
        Ok(g.add(h, f))
    }
}

/// Graph nodes and bookkeeping of one forward pass.
struct Pass {
    /// `(row, column)` of each encoder token, row-major.
    enc_tokens: Vec<(usize, usize)>,
    enc_out: Option<Var>,
    /// `(row, column)` of each decoder query, column-major.
    queries: Vec<(usize, usize)>,
    dec_out: Option<Var>,
    attention_pairs: u64,
}

impl Pass {
    /// Stacks decoder and encoder outputs and maps each `(row, column)` to
    /// its row in the stack, `usize::MAX` where the cell has neither.
    fn sources(&self, g: &mut Graph, n: usize, p: usize) -> (Option<Var>, Vec<usize>) {
        let mut source = vec![usize::MAX; n * p];
        let mut parts = Vec::new();
        if let Some(dec) = self.dec_out {
            for (qi, &(i, j)) in self.queries.iter().enumerate() {
                source[i * p + j] = qi;
            }
            parts.push(dec);
        }
        if let Some(enc) = self.enc_out {
            let base = if self.dec_out.is_some() { self.queries.len() } else { 0 };
            for (t, &(i, j)) in self.enc_tokens.iter().enumerate() {
                source[i * p + j] = base + t;
            }
            parts.push(enc);
        }
        let all = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_rows(&parts)),
        };
        (all, source)
    }
}

/// Loss of one batch plus the number of query-key pairs scored.
#[derive(Debug, Clone, Copy)]
pub struct MaeLoss {
    pub total: Var,
    pub attention_pairs: u64,
}

/// `(row, column)` of a cell within a batch.
type CellRef = (usize, usize);

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: MaeConfig,
    schema: DatasetSchema,
    stats: TrainStats,
    codec: Codec,
    store: ParamStore,
    val_w: ParamId,
    val_b: ParamId,
    col_emb: ParamId,
    class_emb: Option<ParamId>,
    mask_token: ParamId,
    null_token: ParamId,
    class_offsets: Vec<usize>,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    dec_y: Mlp,
    heads: Vec<Linear>,
    trained: bool,
}

impl MaeModel {
    pub fn new(schema: &DatasetSchema, stats: &TrainStats, config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let codec = Codec::new(schema, stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = schema.len();
        let d = config.d_model;
        let init_std = 1.0 / (d as f64).sqrt();
        let val_w = store.add("tok.val_w", normal_tensor(p, d, init_std, &mut rng));
        let val_b = store.add("tok.val_b", normal_tensor(p, d, init_std, &mut rng));
        let col_emb = store.add("tok.col_emb", normal_tensor(p, d, init_std, &mut rng));
        let mut class_offsets = Vec::with_capacity(p);
        let mut n_class = 0;
        for a in &schema.attributes {
            class_offsets.push(n_class);
            n_class += match a.var_type {
                VariableType::Categorical(c) => c,
                VariableType::Ordinal(c) => c - 1,
                _ => 0,
            };
        }
        let class_emb =
            (n_class > 0).then(|| store.add("tok.class_emb", normal_tensor(n_class, d, init_std, &mut rng)));
        let mask_token = store.add("tok.mask", normal_tensor(1, d, init_std, &mut rng));
        let null_token = store.add("tok.null", normal_tensor(1, d, init_std, &mut rng));
        let encoder = (0..config.encoder_blocks)
            .map(|b| Block::new(&mut store, &format!("enc.{b}"), &config, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let decoder = (0..config.decoder_blocks)
            .map(|b| Block::new(&mut store, &format!("dec.{b}"), &config, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let dec_y = Mlp::new(&mut store, "dec_y", d, &[], config.d_y, &mut rng);
        let heads = codec
            .heads
            .iter()
            .enumerate()
            .map(|(j, h)| Linear::new(&mut store, &format!("head.{j}"), config.d_y, h.out_dim(), &mut rng))
            .collect();
        Ok(Self {
            config,
            schema: schema.clone(),
            stats: stats.clone(),
            codec,
            store,
            val_w,
            val_b,
            col_emb,
            class_emb,
            mask_token,
            null_token,
            class_offsets,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            dec_y,
            heads,
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

    fn p(&self) -> usize {
        self.schema.len()
    }

    /// Stacked embedding table: value weights, value biases, column
    /// embeddings, class embeddings, mask token.
    fn token_table(&self, g: &mut Graph, p: &Bound) -> Var {
        let mut parts = vec![p[self.val_w], p[self.val_b], p[self.col_emb]];
        if let Some(c) = self.class_emb {
            parts.push(p[c]);
        }
        parts.push(p[self.mask_token]);
        g.concat_rows(&parts)
    }

    fn mask_row(&self) -> usize {
        let n_class = self.class_emb.map_or(0, |c| self.store.get(c).rows());
        3 * self.p() + n_class
    }

    /// Sparse recipe for the token of column `j` holding `cell`.
    fn token_entries(&self, t: usize, j: usize, cell: Cell, out: &mut Vec<(usize, usize, f64)>) {
        let p = self.p();
        out.push((t, 2 * p + j, 1.0));
        let Some(x) = cell else {
            out.push((t, self.mask_row(), 1.0));
            return;
        };
        let head = &self.codec.heads[j];
        let cls = 3 * p + self.class_offsets[j];
        match head.var_type {
            VariableType::Categorical(_) => out.push((t, cls + x as usize - 1, 1.0)),
            VariableType::Ordinal(_) => {
                out.push((t, p + j, 1.0));
                for k in 1..x as usize {
                    out.push((t, cls + k - 1, 1.0));
                }
            }
            _ => {
                out.push((t, j, head.standardize(x)));
                out.push((t, p + j, 1.0));
            }
        }
    }

    /// Runs encoder and decoder. `queries` must be column-major and
    /// `enc_tokens` row-major; rows are batch-local indices.
    fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        rows: &[&[Cell]],
        enc_tokens: Vec<(usize, usize)>,
        queries: Vec<(usize, usize)>,
    ) -> Result<Pass> {
        let table = self.token_table(g, p);
        let mut attention_pairs = 0u64;

        let enc_out = if enc_tokens.is_empty() {
            None
        } else {
            let mut entries = Vec::with_capacity(enc_tokens.len() * 3);
            for (t, &(i, j)) in enc_tokens.iter().enumerate() {
                self.token_entries(t, j, rows[i][j], &mut entries);
            }
            let mut x = g.sparse_rows(table, entries, enc_tokens.len());
            let groups: Vec<usize> = enc_tokens.iter().map(|&(i, _)| i).collect();
            let layout = Arc::new(AttentionLayout::from_groups(&groups, &groups)?);
            for block in &self.encoder {
                attention_pairs += layout.pair_count() as u64;
                x = block.forward(g, p, x, None, layout.clone())?;
            }
            Some(self.enc_norm.forward(g, p, x))
        };

        let dec_out = if queries.is_empty() {
            None
        } else {
            let mut entries = Vec::with_capacity(queries.len() * 2);
            for (t, &(_, j)) in queries.iter().enumerate() {
                self.token_entries(t, j, None, &mut entries);
            }
            let mut q = g.sparse_rows(table, entries, queries.len());
            // Rows without any encoder token read a learned null context instead.
            let mut has_token = vec![false; rows.len()];
            for &(i, _) in &enc_tokens {
                has_token[i] = true;
            }
            let mut key_groups: Vec<usize> = enc_tokens.iter().map(|&(i, _)| i).collect();
            let mut null_rows = Vec::new();
            for &(i, _) in &queries {
                if !has_token[i] {
                    has_token[i] = true;
                    null_rows.push(i);
                }
            }
            key_groups.extend(&null_rows);
            let keys = match (enc_out, null_rows.is_empty()) {
                (Some(e), true) => e,
                (e, _) => {
                    let nulls = g.gather_rows(p[self.null_token], vec![0; null_rows.len()]);
                    match e {
                        Some(e) => g.concat_rows(&[e, nulls]),
                        None => nulls,
                    }
                }
            };
            let query_groups: Vec<usize> = queries.iter().map(|&(i, _)| i).collect();
            let layout = Arc::new(AttentionLayout::from_groups(&query_groups, &key_groups)?);
            for block in &self.decoder {
                attention_pairs += layout.pair_count() as u64;
                q = block.forward(g, p, q, Some(keys), layout.clone())?;
            }
            Some(self.dec_norm.forward(g, p, q))
        };

        Ok(Pass { enc_tokens, enc_out, queries, dec_out, attention_pairs })
    }

    /// Visible cells become encoder tokens; active, non-visible columns become queries.
    fn plan(&self, batch: &MaskedBatch<'_>) -> (Vec<CellRef>, Vec<CellRef>) {
        let p = self.p();
        let mut enc = Vec::new();
        for i in 0..batch.n_rows() {
            for j in 0..p {
                if batch.active[j] && batch.is_visible(i, j) {
                    enc.push((i, j));
                }
            }
        }
        let mut queries = Vec::new();
        for j in (0..p).filter(|&j| batch.active[j]) {
            for i in 0..batch.n_rows() {
                if !batch.is_visible(i, j) {
                    queries.push((i, j));
                }
            }
        }
        (enc, queries)
    }

    /// Negative log-likelihood summed over the scored cells. Hidden targets
    /// are read from decoder queries, visible ones (reconstruction training)
    /// from their encoded tokens.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, batch: &MaskedBatch<'_>) -> Result<MaeLoss> {
        let (enc, queries) = self.plan(batch);
        let pass = self.run(g, p, &batch.rows, enc, queries)?;
        let width = self.p();
        let (parts, source) = pass.sources(g, batch.n_rows(), width);
        let mut picked = Vec::new();
        let mut spans = Vec::new();
        for j in 0..width {
            let mut values = Vec::new();
            let start = picked.len();
            for i in 0..batch.n_rows() {
                let idx = source[i * width + j];
                if batch.is_target(i, j) && idx != usize::MAX {
                    picked.push(idx);
                    values.push(batch.rows[i][j].expect("scored cell must be observed"));
                }
            }
            if !values.is_empty() {
                spans.push((j, start, values));
            }
        }
        let total = match parts {
            Some(all) if !picked.is_empty() => {
                let selected = g.gather_rows(all, picked);
                let y = self.dec_y.forward(g, p, selected);
                let y = g.relu(y);
                let mut terms = Vec::with_capacity(spans.len());
                for (j, off, values) in spans {
                    let yj = g.gather_rows(y, (off..off + values.len()).collect());
                    let out = self.heads[j].forward(g, p, yj);
                    let head = &self.codec.heads[j];
                    let targets = values.iter().map(|&v| head.target(v)).collect();
                    terms.push(head.nll_sum(g, out, (0..values.len()).collect(), targets));
                }
                let first = terms[0];
                terms[1..].iter().fold(first, |acc, &t| g.add(acc, t))
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };
        Ok(MaeLoss { total, attention_pairs: pass.attention_pairs })
    }

    /// Head outputs for every cell of every row: missing cells through the
    /// decoder, observed cells through their encoded tokens.
    fn predict_outputs(&self, rows: &[&[Cell]]) -> Result<Vec<Tensor>> {
        let batch = MaskedBatch::unmasked(rows.to_vec(), self.p());
        let (enc, queries) = self.plan(&batch);
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let pass = self.run(&mut g, &p, rows, enc, queries)?;
        let width = self.p();
        let (all, source) = pass.sources(&mut g, rows.len(), width);
        let all = all.expect("every cell is either a token or a query");
        let y = self.dec_y.forward(&mut g, &p, all);
        let y = g.relu(y);
        Ok((0..width)
            .map(|j| {
                let idx = (0..rows.len()).map(|i| source[i * width + j]).collect();
                let yj = g.gather_rows(y, idx);
                let out = self.heads[j].forward(&mut g, &p, yj);
                g.value(out).clone()
            })
            .collect())
    }

    /// Decodes only the requested hidden cells. `visible` (row-major
    /// `n x p`) selects the encoder tokens; every query must be a cell that
    /// is not visible. Used to show that a cell's prediction ignores which
    /// other cells are decoded alongside it.
    pub fn predict_cells(
        &self,
        rows: &[&[Cell]],
        visible: &[bool],
        queries: &[(usize, usize)],
    ) -> Result<Vec<DistributionParams>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        let p = self.p();
        check_row_width(rows, p)?;
        if visible.len() != rows.len() * p {
            return Err(Error::DimensionMismatch { expected: rows.len() * p, got: visible.len() });
        }
        let mut enc = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for j in 0..p {
                if visible[i * p + j] && row[j].is_some() {
                    enc.push((i, j));
                }
            }
        }
        if let Some(&(i, j)) = queries.iter().find(|&&(i, j)| i >= rows.len() || j >= p || visible[i * p + j]) {
            return Err(Error::InvalidConfig(format!("cell ({i}, {j}) is not a hidden cell of the batch")));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let pass = self.run(&mut g, &bound, rows, enc, queries.to_vec())?;
        let dec = pass.dec_out.expect("queries were decoded");
        let y = self.dec_y.forward(&mut g, &bound, dec);
        let y = g.relu(y);
        let mut out = Vec::with_capacity(queries.len());
        for (qi, &(_, j)) in queries.iter().enumerate() {
            let yq = g.gather_rows(y, vec![qi]);
            let o = self.heads[j].forward(&mut g, &bound, yq);
            out.push(self.codec.heads[j].params(g.value(o).row(0)));
        }
        Ok(out)
    }

    /// Column-ordered tokens for one row: value tokens for observed cells,
    /// the shared mask token for missing ones, each plus its column embedding.
    pub fn tokenize(&self, row: &[Cell]) -> Result<Tensor> {
        check_row_width(&[row], self.p())?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let table = self.token_table(&mut g, &p);
        let mut entries = Vec::new();
        for (j, &cell) in row.iter().enumerate() {
            self.token_entries(j, j, cell, &mut entries);
        }
        let t = g.sparse_rows(table, entries, self.p());
        Ok(g.value(t).clone())
    }

    /// Latent tokens for one row in column order: encoded tokens at observed
    /// columns, untouched mask tokens at missing ones.
    pub fn encode_row(&self, row: &[Cell]) -> Result<Tensor> {
        let mut out = self.tokenize(row)?;
        let enc: Vec<(usize, usize)> = (0..self.p()).filter(|&j| row[j].is_some()).map(|j| (0, j)).collect();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let pass = self.run(&mut g, &p, &[row], enc, Vec::new())?;
        if let Some(e) = pass.enc_out {
            for (t, &(_, j)) in pass.enc_tokens.iter().enumerate() {
                out.row_mut(j).copy_from_slice(g.value(e).row(t));
            }
        }
        Ok(out)
    }

    /// Attention pairs a batch would score; used for cost accounting.
    pub fn attention_pairs(&self, batch: &MaskedBatch<'_>) -> u64 {
        let (enc, queries) = self.plan(batch);
        let mut per_row = vec![0u64; batch.n_rows()];
        for &(i, _) in &enc {
            per_row[i] += 1;
        }
        let enc_pairs: u64 = per_row.iter().map(|c| c * c).sum();
        let dec_pairs: u64 = queries.iter().map(|&(i, _)| per_row[i].max(1)).sum();
        enc_pairs * self.encoder.len() as u64 + dec_pairs * self.decoder.len() as u64
    }
}

impl Imputer for MaeModel {
    fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        check_row_width(rows, self.p())?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let outs = self.predict_outputs(chunk)?;
            for i in 0..chunk.len() {
                out.push(self.codec.heads.iter().zip(&outs).map(|(h, o)| h.params(o.row(i))).collect());
            }
        }
        Ok(out)
    }
}
