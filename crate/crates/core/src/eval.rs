//! Error metrics, baseline imputers, and the report produced by scoring an
//! imputer on artificially hidden test cells.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::error::{Error, Result};
use crate::heads::DistributionParams;
use crate::model::{check_row_width, sample_mask, Imputer};
use crate::schema::{merge_tables, Cell, ColumnStats, DatasetSchema, HeteroTable, TrainStats, VarKind, VariableType};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Fraction of mismatched class predictions.
pub fn categorical_error(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    let wrong = preds.iter().zip(truths).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / truths.len() as f64)
}

/// Mean absolute class distance divided by the number of levels `c`.
pub fn ordinal_error(preds: &[f64], truths: &[f64], c: usize) -> Result<f64> {
    check_lengths(preds, truths)?;
    let total: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / truths.len() as f64 / c as f64)
}

/// Root mean squared error over the range of the ground truth.
pub fn continuous_error(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds, truths)?;
    let (lo, hi) = truths.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    if hi <= lo {
        return Err(Error::DegenerateRange);
    }
    let mse = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truths.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

fn check_lengths(preds: &[f64], truths: &[f64]) -> Result<()> {
    if truths.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if preds.len() != truths.len() {
        return Err(Error::DimensionMismatch { expected: truths.len(), got: preds.len() });
    }
    Ok(())
}

/// The type-appropriate error for one column.
pub fn column_error(var_type: VariableType, preds: &[f64], truths: &[f64]) -> Result<f64> {
    match var_type {
        VariableType::Categorical(_) => categorical_error(preds, truths),
        VariableType::Ordinal(c) => ordinal_error(preds, truths, c),
        _ => continuous_error(preds, truths),
    }
}

/// Mean over groups of each group's mean; empty groups are skipped.
pub fn two_level_mean(groups: &[Vec<f64>]) -> Option<f64> {
    let means: Vec<f64> =
        groups.iter().filter(|g| !g.is_empty()).map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
}

/// Constant-per-column predictor; the two baselines differ only in how the
/// constant is chosen.
#[derive(Debug, Clone)]
pub struct ConstantImputer {
    schema: DatasetSchema,
    params: Vec<DistributionParams>,
}

impl ConstantImputer {
    /// Most frequent value per column. Continuous columns have no repeated
    /// values to count, so their mode is the centre of the fullest bin of a
    /// Sturges histogram.
    pub fn mode(table: &HeteroTable, schema: &DatasetSchema, stats: &TrainStats) -> Result<Self> {
        Self::build(table, schema, stats, |t, values, stats| match t {
            VariableType::Real | VariableType::Positive => histogram_mode(values),
            VariableType::Count => most_frequent(values),
            _ => class_mode(stats),
        })
    }

    /// Mean for real and positive columns, mean rounded half away from zero
    /// for counts and ordinals, mode for categoricals.
    pub fn mode_mean(table: &HeteroTable, schema: &DatasetSchema, stats: &TrainStats) -> Result<Self> {
        Self::build(table, schema, stats, |t, values, stats| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            match t {
                VariableType::Real | VariableType::Positive => mean,
                VariableType::Count | VariableType::Ordinal(_) => mean.round(),
                VariableType::Categorical(_) => class_mode(stats),
            }
        })
    }

    fn build(
        table: &HeteroTable,
        schema: &DatasetSchema,
        stats: &TrainStats,
        pick: impl Fn(VariableType, &[f64], &ColumnStats) -> f64,
    ) -> Result<Self> {
        stats.check_schema(schema)?;
        if !table.conforms_to(schema) {
            return Err(Error::ColumnCountMismatch { table: table.n_cols(), schema: schema.len() });
        }
        let mut params = Vec::with_capacity(schema.len());
        for (j, (attr, st)) in schema.attributes.iter().zip(&stats.columns).enumerate() {
            let values: Vec<f64> = (0..table.n_rows()).filter_map(|i| table.get(i, j)).collect();
            if values.is_empty() {
                return Err(Error::AllMissingColumn(j));
            }
            params.push(point_mass(attr.var_type, pick(attr.var_type, &values, st), st));
        }
        Ok(Self { schema: schema.clone(), params })
    }

    pub fn params(&self) -> &[DistributionParams] {
        &self.params
    }
}

impl Imputer for ConstantImputer {
    fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>> {
        check_row_width(rows, self.schema.len())?;
        Ok(vec![self.params.clone(); rows.len()])
    }
}

fn class_mode(stats: &ColumnStats) -> f64 {
    match stats {
        ColumnStats::Categorical { probs } | ColumnStats::Ordinal { probs } => {
            let best = probs.iter().enumerate().fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
            (best + 1) as f64
        }
        _ => unreachable!("class mode of a continuous column"),
    }
}

fn most_frequent(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut best, mut best_n) = (sorted[0], 0);
    let mut i = 0;
    while i < sorted.len() {
        let n = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        if n > best_n {
            best = sorted[i];
            best_n = n;
        }
        i += n;
    }
    best
}

fn histogram_mode(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return lo;
    }
    let bins = (values.len() as f64).log2().ceil() as usize + 1;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let best = counts.iter().enumerate().fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
    lo + (best as f64 + 0.5) * width
}

/// A distribution whose mode is `value`; continuous spread from the train
/// statistics so that likelihood-based consumers still get sane numbers.
fn point_mass(t: VariableType, value: f64, stats: &ColumnStats) -> DistributionParams {
    match (t, stats) {
        (VariableType::Real, ColumnStats::Real { std, .. }) => {
            DistributionParams::Real { mu: value, sigma2: std * std }
        }
        (VariableType::Positive, ColumnStats::Positive { log_std, .. }) => {
            let sigma2 = log_std * log_std;
            DistributionParams::Positive { mu: value.ln() + sigma2, sigma2 }
        }
        (VariableType::Count, _) => DistributionParams::Count { lambda: value + 0.5 },
        // The only categorical constant either baseline picks is the training mode.
        (VariableType::Categorical(_), ColumnStats::Categorical { probs }) => {
            DistributionParams::Categorical { pi: probs.clone() }
        }
        (VariableType::Ordinal(c), _) => {
            let mut probs = vec![0.0; c];
            probs[value as usize - 1] = 1.0;
            DistributionParams::ordinal_from_probs(&probs)
        }
        _ => unreachable!("stats were checked against the schema"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeError {
    pub id: String,
    pub kind: VarKind,
    pub n_scored: usize,
    /// `None` when nothing was scored or the truth range is degenerate.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeError {
    pub kind: VarKind,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub format_version: u32,
    pub model_id: String,
    pub test_missing_rate: f64,
    pub seed: u64,
    pub attributes: Vec<AttributeError>,
    pub per_type: Vec<TypeError>,
    /// Mean of the per-type means.
    pub total: f64,
    /// Mean over scored columns.
    pub column_mean: f64,
}

impl ErrorReport {
    pub fn type_error(&self, kind: VarKind) -> Option<f64> {
        self.per_type.iter().find(|t| t.kind == kind).and_then(|t| t.error)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["attribute", "kind", "n_scored", "error"])?;
        for a in &self.attributes {
            let err = a.error.map(|e| e.to_string()).unwrap_or_default();
            w.write_record([a.id.as_str(), a.kind.as_str(), &a.n_scored.to_string(), &err])?;
        }
        for t in &self.per_type {
            let err = t.error.map(|e| e.to_string()).unwrap_or_default();
            w.write_record([&format!("__type_{}", t.kind.as_str()), t.kind.as_str(), "", &err])?;
        }
        w.write_record(["__total", "", "", &self.total.to_string()])?;
        w.write_record(["__column_mean", "", "", &self.column_mean.to_string()])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Hides observed test cells at `rate`, imputes them, and scores the hidden
/// cells only.
pub fn evaluate(
    model: &dyn Imputer,
    test: &HeteroTable,
    test_missing_rate: f64,
    seed: u64,
    model_id: &str,
) -> Result<ErrorReport> {
    let schema = model.schema();
    if !test.conforms_to(schema) {
        return Err(Error::ColumnCountMismatch { table: test.n_cols(), schema: schema.len() });
    }
    let p = schema.len();
    let rows: Vec<&[Cell]> = test.rows().collect();
    let hidden = sample_mask(&rows, test_missing_rate, &mut ChaCha8Rng::seed_from_u64(seed));
    let inputs: Vec<Vec<Cell>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, &c)| if hidden[i * p + j] { None } else { c }).collect())
        .collect();
    let input_refs: Vec<&[Cell]> = inputs.iter().map(Vec::as_slice).collect();
    let points = model.point_estimates(&input_refs)?;

    let mut attributes = Vec::with_capacity(p);
    for (j, attr) in schema.attributes.iter().enumerate() {
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for i in 0..rows.len() {
            if hidden[i * p + j] {
                assert!(inputs[i][j].is_none(), "scored cell ({i}, {j}) was visible to the model");
                preds.push(points[i][j]);
                truths.push(rows[i][j].expect("hidden cells are observed"));
            }
        }
        let error = match column_error(attr.var_type, &preds, &truths) {
            Ok(e) => Some(e),
            Err(Error::DegenerateRange) => {
                tracing::warn!(attribute = %attr.id, "constant ground truth; column excluded");
                None
            }
            Err(Error::EmptyTestSet) => None,
            Err(e) => return Err(e),
        };
        attributes.push(AttributeError { id: attr.id.clone(), kind: attr.kind(), n_scored: truths.len(), error });
    }
    Ok(aggregate(model_id, test_missing_rate, seed, attributes))
}

fn aggregate(model_id: &str, rate: f64, seed: u64, attributes: Vec<AttributeError>) -> ErrorReport {
    let per_type: Vec<TypeError> = VarKind::ALL
        .iter()
        .map(|&kind| {
            let errs: Vec<f64> = attributes.iter().filter(|a| a.kind == kind).filter_map(|a| a.error).collect();
            TypeError { kind, error: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64) }
        })
        .collect();
    let type_means: Vec<f64> = per_type.iter().filter_map(|t| t.error).collect();
    let scored: Vec<f64> = attributes.iter().filter_map(|a| a.error).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    ErrorReport {
        format_version: REPORT_FORMAT_VERSION,
        model_id: model_id.to_string(),
        test_missing_rate: rate,
        seed,
        total: mean(&type_means),
        column_mean: mean(&scored),
        attributes,
        per_type,
    }
}

/// Mean over tables of each table's mean column error.
pub fn validation_objective(model: &dyn Imputer, tables: &[HeteroTable], rate: f64, seed: u64) -> Result<f64> {
    let mut groups = Vec::with_capacity(tables.len());
    for (k, t) in tables.iter().enumerate() {
        // a source table only scores the columns it carries
        let lifted;
        let t = if t.conforms_to(model.schema()) {
            t
        } else {
            lifted = merge_tables(std::slice::from_ref(t), model.schema())?;
            &lifted
        };
        let report = evaluate(model, t, rate, seed.wrapping_add(k as u64), "validation")?;
        groups.push(report.attributes.iter().filter_map(|a| a.error).collect::<Vec<_>>());
    }
    two_level_mean(&groups).ok_or(Error::EmptyTestSet)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub x: f64,
    pub mean: f64,
    pub spread: f64,
}

/// Sweeps attribute `x` over `grid` with every other attribute missing and
/// records the predicted mean of `y`. HIVAE averages `n_sampling` latent
/// draws and reports their standard deviation; MAE is deterministic and
/// reports the predictive standard deviation.
pub fn correlation_probe(
    model: &Model,
    x: usize,
    y: usize,
    grid: &[f64],
    n_sampling: usize,
    seed: u64,
) -> Result<Vec<ProbePoint>> {
    let schema = model.schema();
    let p = schema.len();
    if x >= p || y >= p {
        return Err(Error::DimensionMismatch { expected: p, got: x.max(y) + 1 });
    }
    if !matches!(schema.attributes[x].var_type, VariableType::Real | VariableType::Positive) {
        return Err(Error::InvalidConfig(format!(
            "probe input `{}` must be real or positive",
            schema.attributes[x].id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut row = vec![None; p];
        row[x] = Some(v);
        let point = match model {
            Model::Hivae(m) if n_sampling > 0 => {
                let draws: Vec<f64> = m.impute(&row, n_sampling, &mut rng)?.iter().map(|g| g[y].mean()).collect();
                let mean = draws.iter().sum::<f64>() / draws.len() as f64;
                let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
                ProbePoint { x: v, mean, spread: var.sqrt() }
            }
            _ => {
                let gamma = &model.predict(&[&row])?[0][y];
                ProbePoint { x: v, mean: gamma.mean(), spread: gamma.variance().sqrt() }
            }
        };
        out.push(point);
    }
    Ok(out)
}

pub fn write_probe_csv<W: Write>(points: &[ProbePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["grid", "mean", "spread"])?;
    for pt in points {
        w.write_record([pt.x.to_string(), pt.mean.to_string(), pt.spread.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope and Pearson correlation of `(x, y)` pairs.
pub fn slope_and_pearson(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    (if sxx > 0.0 { sxy / sxx } else { 0.0 }, r)
}
