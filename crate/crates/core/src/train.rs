//! Masked-modeling training for both networks: mask augmentation, the
//! annealed KL weights, the two-stage MAE schedule, validation, early
//! stopping and the run directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::checkpoint::{Checkpoint, Model, ModelConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::eval::validation_objective;
use crate::hivae::HivaeModel;
use crate::mae::MaeModel;
use crate::model::MaskedBatch;
use crate::schema::{merge_tables, Cell, HeteroTable};

/// Which cells the likelihood term scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// The artificially hidden cells.
    #[default]
    Masked,
    /// The observed cells left visible, as in a denoising autoencoder.
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// Linear up to `anneal_end_epoch`, constant afterwards.
    #[default]
    Capped,
    /// Linear over the whole run, `t / t_max`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// HIVAE: all epochs. MAE: dataset-wise first-stage epochs.
    pub epochs: usize,
    /// MAE only: epochs over the merged table.
    pub stage2_epochs: usize,
    /// Validations without improvement before stopping; `None` never stops.
    pub patience: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta_s_max: f64,
    pub beta_z_max: f64,
    pub anneal_end_epoch: usize,
    pub beta_schedule: BetaSchedule,
    pub loss_mode: LossMode,
    pub mask_augmentation: bool,
    /// Missing rate applied to validation tables; defaults to `mask_ratio`.
    pub val_missing_rate: Option<f64>,
    pub validate_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn hivae() -> Self {
        Self {
            mask_ratio: 0.99,
            batch_size: 1024,
            epochs: 1000,
            stage2_epochs: 0,
            patience: Some(50),
            learning_rate: 4.6e-5,
            weight_decay: 0.097,
            beta1: 0.9,
            beta2: 0.999,
            beta_s_max: 0.0002,
            beta_z_max: 0.00007,
            anneal_end_epoch: 100,
            beta_schedule: BetaSchedule::Capped,
            loss_mode: LossMode::Masked,
            mask_augmentation: true,
            val_missing_rate: None,
            validate_every: 1,
            seed: 0,
        }
    }

    pub fn mae() -> Self {
        Self {
            batch_size: 32,
            epochs: 300,
            stage2_epochs: 10,
            patience: None,
            learning_rate: 5e-4,
            weight_decay: 2.5e-4,
            beta_s_max: 0.0,
            beta_z_max: 0.0,
            ..Self::hivae()
        }
    }

    pub fn default_for(model: &ModelConfig) -> Self {
        match model {
            ModelConfig::Hivae(_) => Self::hivae(),
            ModelConfig::Mae(_) => Self::mae(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        // Reconstruction can train on unmasked rows; the masked objective
        // needs something hidden to score.
        let floor_ok = match self.loss_mode {
            LossMode::Masked => self.mask_ratio > 0.0,
            LossMode::Reconstruction => self.mask_ratio >= 0.0,
        };
        if !floor_ok || !(self.mask_ratio < 1.0) {
            return bad(format!(
                "mask_ratio {} is outside the range allowed for {:?} loss",
                self.mask_ratio, self.loss_mode
            ));
        }
        if let Some(r) = self.val_missing_rate {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("val_missing_rate {r} must lie in (0, 1)"));
            }
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("AdamW betas must lie in [0, 1)".into());
        }
        if self.beta_s_max < 0.0 || self.beta_z_max < 0.0 || self.anneal_end_epoch == 0 || self.validate_every == 0 {
            return bad("KL weights must be nonnegative and epoch counts positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamWConfig::default()
        }
    }

    /// KL weights `(beta_s, beta_z)` at epoch `t`.
    pub fn betas(&self, t: usize) -> (f64, f64) {
        let frac = match self.beta_schedule {
            BetaSchedule::Capped => t.min(self.anneal_end_epoch) as f64 / self.anneal_end_epoch as f64,
            BetaSchedule::Linear => t as f64 / (self.epochs + self.stage2_epochs).max(1) as f64,
        };
        (self.beta_s_max * frac, self.beta_z_max * frac)
    }
}

/// Builds a training batch: each observed cell of an active column is hidden
/// with probability `alpha` (or per `fixed`, a precomputed pattern), and
/// hidden cells are fed to the model exactly as missing ones.
/// Mixed into the training seed to derive the fixed validation mask.
pub const VALIDATION_SALT: u64 = 0x5eed0f7a11;

pub fn mask_augment<'a, R: Rng + ?Sized>(
    rows: Vec<&'a [Cell]>,
    active: &[bool],
    alpha: f64,
    loss_mode: LossMode,
    fixed: Option<&[bool]>,
    rng: &mut R,
) -> MaskedBatch<'a> {
    let p = active.len();
    let n = rows.len();
    let mut visible = vec![false; n * p];
    let mut targets = vec![false; n * p];
    for (i, row) in rows.iter().enumerate() {
        for j in 0..p {
            if row[j].is_none() || !active[j] {
                continue;
            }
            let hidden = match fixed {
                Some(f) => f[i * p + j],
                None => rng.random::<f64>() < alpha,
            };
            visible[i * p + j] = !hidden;
            targets[i * p + j] = match loss_mode {
                LossMode::Masked => hidden,
                LossMode::Reconstruction => !hidden,
            };
        }
    }
    MaskedBatch { rows, visible, targets, active: active.to_vec() }
}

/// Early-stopping verdict over a validation history (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    pub best: usize,
}

/// Stops once `patience` validations have passed without a strict
/// improvement on the best value so far.
pub fn early_stop(history: &[f64], patience: usize) -> EarlyStop {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best] {
            best = i;
        }
    }
    EarlyStop { stop: !history.is_empty() && history.len() - 1 - best >= patience, best }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean loss per training row.
    pub train_loss: f64,
    pub val_objective: Option<f64>,
    pub beta_s: f64,
    pub beta_z: f64,
    /// Query-key pairs scored by attention this epoch (MAE only).
    pub attention_pairs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: Option<usize>,
    pub best_objective: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn stage_epochs(&self, stage: u8) -> usize {
        self.records.iter().filter(|r| r.stage == stage).count()
    }

    pub fn attention_pairs(&self) -> u64 {
        self.records.iter().map(|r| r.attention_pairs).sum()
    }

    /// Forward attention cost: scores and weighted sums each take `2 d`
    /// flops per pair.
    pub fn attention_flops(&self, d_model: usize) -> f64 {
        self.attention_pairs() as f64 * 4.0 * d_model as f64
    }
}

struct Segment {
    rows: Vec<usize>,
    active: Vec<bool>,
}

struct Phase {
    stage: u8,
    epochs: usize,
    segments: Vec<Segment>,
}

/// Rows of each source tag, with the columns that tag ever observes.
fn per_source_segments(merged: &HeteroTable) -> Vec<Segment> {
    let p = merged.n_cols();
    let mut out: Vec<Segment> = Vec::new();
    let mut tag_index: Vec<(String, usize)> = Vec::new();
    for i in 0..merged.n_rows() {
        let tag = merged.row_tag(i);
        let k = match tag_index.iter().find(|(t, _)| t == tag) {
            Some(&(_, k)) => k,
            None => {
                tag_index.push((tag.to_string(), out.len()));
                out.push(Segment { rows: Vec::new(), active: vec![false; p] });
                out.len() - 1
            }
        };
        out[k].rows.push(i);
        for (j, c) in merged.row(i).iter().enumerate() {
            out[k].active[j] |= c.is_some();
        }
    }
    out
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains `model` on the given source tables. HIVAE runs `epochs` epochs
/// over the merged table. MAE first runs `epochs` epochs that visit each
/// source table in turn with attention restricted to its columns, then
/// `stage2_epochs` over the merged table.
///
/// After training the model holds the parameters of the best validation
/// epoch (the last epoch without validation tables).
pub fn train(
    model: &mut Model,
    train_tables: &[HeteroTable],
    val_tables: &[HeteroTable],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    if train_tables.is_empty() {
        return Err(Error::InvalidConfig("no training tables".into()));
    }
    let schema = crate::model::Imputer::schema(model).clone();
    let merged = merge_tables(train_tables, &schema)?;
    let p = schema.len();
    let all_rows = Segment { rows: (0..merged.n_rows()).collect(), active: vec![true; p] };
    let phases = match model {
        Model::Hivae(_) => vec![Phase { stage: 1, epochs: cfg.epochs, segments: vec![all_rows] }],
        Model::Mae(_) => vec![
            Phase { stage: 1, epochs: cfg.epochs, segments: per_source_segments(&merged) },
            Phase { stage: 2, epochs: cfg.stage2_epochs, segments: vec![all_rows] },
        ],
    };

    let rows: Vec<&[Cell]> = merged.rows().collect();
    let fixed = (!cfg.mask_augmentation).then(|| {
        let mut rng = stream(cfg.seed, 4);
        crate::model::sample_mask(&rows, cfg.mask_ratio, &mut rng)
    });
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut mask_rng = stream(cfg.seed, 2);
    let mut noise_rng = stream(cfg.seed, 3);
    let mut optimizer = AdamW::new(cfg.optimizer(), model.params());
    let val_rate = cfg.val_missing_rate.unwrap_or(cfg.mask_ratio);
    let val_seed = cfg.seed ^ VALIDATION_SALT;

    let mut metrics = match run_dir {
        Some(dir) => Some(RunWriter::create(dir, model, cfg)?),
        None => None,
    };
    let mut history = History::default();
    let mut objectives = Vec::new();
    let mut best_params: Option<ParamStore> = None;
    let mut epoch = 0;

    'phases: for phase in &phases {
        for _ in 0..phase.epochs {
            let (beta_s, beta_z) = cfg.betas(epoch);
            let mut loss_sum = 0.0;
            let mut row_count = 0usize;
            let mut pairs = 0u64;
            for seg in &phase.segments {
                let mut order = seg.rows.clone();
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch_rows: Vec<&[Cell]> = chunk.iter().map(|&i| rows[i]).collect();
                    let batch_fixed: Option<Vec<bool>> = fixed
                        .as_ref()
                        .map(|f| chunk.iter().flat_map(|&i| f[i * p..(i + 1) * p].iter().copied()).collect());
                    let batch = mask_augment(
                        batch_rows,
                        &seg.active,
                        cfg.mask_ratio,
                        cfg.loss_mode,
                        batch_fixed.as_deref(),
                        &mut mask_rng,
                    );
                    let mut g = Graph::new();
                    let bound = model.params().bind(&mut g, true);
                    let total = match &*model {
                        Model::Hivae(m) => m.loss_graph(&mut g, &bound, &batch, beta_s, beta_z, &mut noise_rng)?.total,
                        Model::Mae(m) => {
                            let l = m.loss_graph(&mut g, &bound, &batch)?;
                            pairs += l.attention_pairs;
                            l.total
                        }
                    };
                    let mean = g.scale(total, 1.0 / chunk.len() as f64);
                    loss_sum += g.value(total).item();
                    row_count += chunk.len();
                    let mut grads = g.backward(mean);
                    let grads: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
                    optimizer.step(model.params_mut(), &grads)?;
                }
            }
            model.mark_trained();

            let validate_now = !val_tables.is_empty() && (epoch + 1) % cfg.validate_every == 0;
            let val_objective =
                if validate_now { Some(validation_objective(&*model, val_tables, val_rate, val_seed)?) } else { None };
            let record = EpochRecord {
                stage: phase.stage,
                epoch,
                train_loss: loss_sum / row_count.max(1) as f64,
                val_objective,
                beta_s,
                beta_z,
                attention_pairs: pairs,
            };
            tracing::debug!(epoch, stage = phase.stage, loss = record.train_loss, val = ?val_objective, "epoch");
            if let Some(w) = metrics.as_mut() {
                w.record(&record)?;
            }
            history.records.push(record);

            if let Some(v) = val_objective {
                objectives.push((epoch, v));
                let values: Vec<f64> = objectives.iter().map(|o| o.1).collect();
                let verdict = early_stop(&values, cfg.patience.unwrap_or(usize::MAX));
                if verdict.best == values.len() - 1 {
                    best_params = Some(model.params().clone());
                    history.best_epoch = Some(epoch);
                    history.best_objective = Some(v);
                }
                if verdict.stop {
                    history.stopped_early = true;
                    epoch += 1;
                    break 'phases;
                }
            }
            epoch += 1;
        }
    }

    if let Some(w) = metrics.as_mut() {
        w.checkpoint(model, "last.json")?;
    }
    match best_params {
        Some(best) => *model.params_mut() = best,
        None => history.best_epoch = epoch.checked_sub(1),
    }
    if let Some(w) = metrics.as_mut() {
        w.checkpoint(model, "best.json")?;
    }
    Ok(history)
}

/// HIVAE likelihood-plus-KL loss of one batch, averaged over its rows.
pub fn hivae_loss<R: Rng>(
    model: &HivaeModel,
    batch: &MaskedBatch<'_>,
    epoch: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let (beta_s, beta_z) = cfg.betas(epoch);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let parts = model.loss_graph(&mut g, &p, batch, beta_s, beta_z, rng)?;
    Ok(g.value(parts.total).item())
}

/// MAE likelihood loss of one batch, summed over the scored cells.
pub fn mae_loss(model: &MaeModel, batch: &MaskedBatch<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let l = model.loss_graph(&mut g, &p, batch)?;
    Ok(g.value(l.total).item())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    format_version: u32,
    model_kind: &'a str,
    model: ModelConfig,
    train: &'a TrainConfig,
}

struct RunWriter {
    dir: std::path::PathBuf,
    metrics: csv::Writer<BufWriter<File>>,
}

impl RunWriter {
    fn create(dir: &Path, model: &Model, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let snapshot = RunConfig {
            format_version: FORMAT_VERSION,
            model_kind: model.kind().as_str(),
            model: model.config(),
            train: cfg,
        };
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
        let mut metrics = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        metrics.write_record(["epoch", "train_loss", "val_objective", "beta_s", "beta_z"])?;
        Ok(Self { dir: dir.to_path_buf(), metrics })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let val = r.val_objective.map(|v| v.to_string()).unwrap_or_default();
        self.metrics.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            val,
            r.beta_s.to_string(),
            r.beta_z.to_string(),
        ])?;
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, model: &Model, name: &str) -> Result<()> {
        Checkpoint::from_model(model).save(&self.dir.join(name))
    }
}

#[cfg(test)]
mod tests;
