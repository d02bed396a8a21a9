//! Out-of-distribution table integration: does pooling several source
//! tables help on a table the model never trained on?

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Model, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ErrorReport};
use crate::schema::{compute_train_stats, merge_tables, DatasetSchema, HeteroTable, VarKind};
use crate::train::{train, TrainConfig};

/// The paper's setting hides half the cells at train and test time.
pub const OOD_MISSING_RATE: f64 = 0.5;

/// One source's splits.
#[derive(Debug, Clone)]
pub struct SourceSplits {
    pub name: String,
    pub train: HeteroTable,
    pub val: HeteroTable,
    pub test: HeteroTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodRole {
    /// Every source except the held-out one.
    Combined,
    Single,
    /// Trained on the held-out source itself.
    InDomain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodRow {
    pub role: OodRole,
    pub trained_on: Vec<String>,
    pub report: ErrorReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodTable {
    pub held_out: String,
    pub core: Vec<String>,
    pub rows: Vec<OodRow>,
}

impl OodTable {
    pub fn combined(&self) -> &OodRow {
        self.rows.iter().find(|r| r.role == OodRole::Combined).expect("combined row")
    }

    /// Largest total error among the single-source models.
    pub fn worst_single(&self) -> f64 {
        self.rows.iter().filter(|r| r.role == OodRole::Single).map(|r| r.report.total).fold(f64::NAN, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["role".to_string(), "trained_on".into(), "total".into()];
        header.extend(VarKind::ALL.iter().map(|k| k.as_str().to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let role = serde_json::to_value(r.role)?.as_str().unwrap_or_default().to_string();
            let mut rec = vec![role, r.trained_on.join("+"), r.report.total.to_string()];
            rec.extend(VarKind::ALL.iter().map(|&k| r.report.type_error(k).map(|e| e.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Attribute ids every source carries, in schema order.
pub fn common_core(schema: &DatasetSchema, sources: &[SourceSplits]) -> Vec<String> {
    schema.ids().into_iter().filter(|id| sources.iter().all(|s| s.train.columns().contains(id))).collect()
}

/// Grows `table` to `n` rows: whole copies first, then a seeded draw without
/// replacement for the remainder. Tables already that large are returned
/// unchanged.
pub fn upsample(table: &HeteroTable, n: usize, seed: u64) -> HeteroTable {
    let m = table.n_rows();
    if m == 0 || m >= n {
        return table.clone();
    }
    let mut idx: Vec<usize> = (0..n / m).flat_map(|_| 0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rest = sample(&mut rng, m, n % m).into_vec();
    rest.sort_unstable();
    idx.extend(rest);
    table.select_rows(&idx)
}

/// Trains one model per training set (the pooled other sources, each other
/// source alone, and the held-out source) on the shared attribute core and
/// scores all of them on the held-out source's test split.
///
/// Every source's training table is first upsampled to the size of the
/// largest one, so a pooled set is never judged against a single source that
/// simply had less data. Sources share their columns here, so the MAE skips
/// the per-source stage and trains on the pooled rows for its whole budget.
pub fn ood_experiment(
    schema: &DatasetSchema,
    sources: &[SourceSplits],
    held_out: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<OodTable> {
    if sources.len() < 3 {
        return Err(Error::InvalidConfig("the integration experiment needs at least three sources".into()));
    }
    if held_out >= sources.len() {
        return Err(Error::InvalidConfig(format!("held-out index {held_out} of {} sources", sources.len())));
    }
    let core = common_core(schema, sources);
    if core.is_empty() {
        return Err(Error::InvalidConfig("sources share no attributes".into()));
    }
    let core_schema = schema.restricted(&core, schema.version)?;
    let restrict = |t: &HeteroTable| t.select_columns(&core);
    let test = restrict(&sources[held_out].test)?;
    let mut cfg = TrainConfig { mask_ratio: OOD_MISSING_RATE, val_missing_rate: Some(OOD_MISSING_RATE), ..cfg.clone() };
    if model.kind() == ModelKind::Mae {
        cfg.stage2_epochs += cfg.epochs;
        cfg.epochs = 0;
    }
    let size = sources.iter().map(|s| s.train.n_rows()).max().unwrap_or(0);

    let others: Vec<usize> = (0..sources.len()).filter(|&k| k != held_out).collect();
    let mut plans = vec![(OodRole::Combined, others.clone())];
    plans.extend(others.iter().map(|&k| (OodRole::Single, vec![k])));
    plans.push((OodRole::InDomain, vec![held_out]));

    let mut rows = Vec::with_capacity(plans.len());
    for (role, members) in plans {
        let train_t: Vec<HeteroTable> = members
            .iter()
            .map(|&k| Ok(upsample(&restrict(&sources[k].train)?, size, cfg.seed ^ k as u64)))
            .collect::<Result<_>>()?;
        let val_t: Vec<HeteroTable> = members.iter().map(|&k| restrict(&sources[k].val)).collect::<Result<_>>()?;
        let stats = compute_train_stats(&merge_tables(&train_t, &core_schema)?, &core_schema)?;
        let mut m = Model::new(&core_schema, &stats, model, cfg.seed)?;
        train(&mut m, &train_t, &val_t, &cfg, None)?;
        let trained_on: Vec<String> = members.iter().map(|&k| sources[k].name.clone()).collect();
        let id = format!("{}:{}", serde_json::to_value(role)?.as_str().unwrap_or_default(), trained_on.join("+"));
        let report = evaluate(&m, &test, OOD_MISSING_RATE, cfg.seed, &id)?;
        tracing::info!(held_out = %sources[held_out].name, model = %id, total = report.total, "ood");
        rows.push(OodRow { role, trained_on, report });
    }
    Ok(OodTable { held_out: sources[held_out].name.clone(), core, rows })
}
