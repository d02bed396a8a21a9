//! Types shared by both networks and the baselines.

use crate::error::{Error, Result};
use crate::heads::DistributionParams;
use crate::schema::{Cell, DatasetSchema};

/// A training or evaluation batch after artificial masking.
///
/// `visible` marks cells fed to the model as inputs, `targets` marks cells
/// scored by the loss; both are row-major `n x p`. `active` lists the
/// columns the batch is about (a source table's columns during dataset-wise
/// training); models that do not care may ignore it.
#[derive(Debug, Clone)]
pub struct MaskedBatch<'a> {
    pub rows: Vec<&'a [Cell]>,
    pub visible: Vec<bool>,
    pub targets: Vec<bool>,
    pub active: Vec<bool>,
}

impl<'a> MaskedBatch<'a> {
    /// Every observed cell visible, nothing scored.
    pub fn unmasked(rows: Vec<&'a [Cell]>, p: usize) -> Self {
        let visible = rows.iter().flat_map(|r| r.iter().map(Option::is_some)).collect();
        let n = rows.len();
        Self { rows, visible, targets: vec![false; n * p], active: vec![true; p] }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.active.len()
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.n_cols() + j]
    }

    pub fn is_target(&self, i: usize, j: usize) -> bool {
        self.targets[i * self.n_cols() + j]
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    /// Row indices and raw values of the scored cells in column `j`.
    pub fn column_targets(&self, j: usize) -> (Vec<usize>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            if self.is_target(i, j) {
                let x = row[j].expect("scored cell must be observed");
                rows.push(i);
                values.push(x);
            }
        }
        (rows, values)
    }
}

/// Anything that maps partially observed rows to per-attribute predictive
/// distributions in raw units.
pub trait Imputer: Send + Sync {
    fn schema(&self) -> &DatasetSchema;

    /// Deterministic predictions, one parameter list per row.
    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>>;

    /// Point estimates (modes) for every cell of every row.
    fn point_estimates(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .predict(rows)?
            .into_iter()
            .map(|params| params.iter().map(DistributionParams::mode).collect())
            .collect())
    }
}

pub(crate) fn check_row_width(rows: &[&[Cell]], p: usize) -> Result<()> {
    match rows.iter().find(|r| r.len() != p) {
        Some(r) => Err(Error::DimensionMismatch { expected: p, got: r.len() }),
        None => Ok(()),
    }
}

/// Hides each observed cell independently with probability `rate`; the
/// result is row-major `n x p` and never marks a missing cell.
pub fn sample_mask<R: rand::Rng + ?Sized>(rows: &[&[Cell]], rate: f64, rng: &mut R) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows.iter().map(|r| r.len()).sum());
    for row in rows {
        for cell in row.iter() {
            out.push(cell.is_some() && rng.random::<f64>() < rate);
        }
    }
    out
}
