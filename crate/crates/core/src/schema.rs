//! Attribute metadata, versioned schemas, heterogeneous tables and the
//! training statistics used by preprocessing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to standard deviations of near-constant columns.
pub const STD_FLOOR: f64 = 1e-6;

/// Reserved CSV column carrying the source-table name of each row.
pub const DATASET_TAG_COLUMN: &str = "__dataset_tag";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Real,
    Positive,
    Count,
    Categorical,
    Ordinal,
}

impl VarKind {
    pub const ALL: [VarKind; 5] =
        [VarKind::Categorical, VarKind::Count, VarKind::Ordinal, VarKind::Positive, VarKind::Real];

    pub fn as_str(self) -> &'static str {
        match self {
            VarKind::Real => "real",
            VarKind::Positive => "positive",
            VarKind::Count => "count",
            VarKind::Categorical => "categorical",
            VarKind::Ordinal => "ordinal",
        }
    }
}

/// Variable type of one attribute. Categorical and ordinal carry their
/// number of classes `c >= 2`; class codes are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariableType {
    Real,
    Positive,
    Count,
    Categorical(usize),
    Ordinal(usize),
}

impl VariableType {
    pub fn kind(self) -> VarKind {
        match self {
            VariableType::Real => VarKind::Real,
            VariableType::Positive => VarKind::Positive,
            VariableType::Count => VarKind::Count,
            VariableType::Categorical(_) => VarKind::Categorical,
            VariableType::Ordinal(_) => VarKind::Ordinal,
        }
    }

    pub fn num_categories(self) -> Option<usize> {
        match self {
            VariableType::Categorical(c) | VariableType::Ordinal(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_discrete_class(self) -> bool {
        matches!(self, VariableType::Categorical(_) | VariableType::Ordinal(_))
    }

    /// Checks a raw value against the type invariants.
    pub fn check(self, x: f64) -> std::result::Result<(), String> {
        if !x.is_finite() {
            return Err(format!("non-finite value {x}"));
        }
        match self {
            VariableType::Real => Ok(()),
            VariableType::Positive if x > 0.0 => Ok(()),
            VariableType::Positive => Err(format!("positive value required, got {x}")),
            VariableType::Count if x >= 0.0 && x.fract() == 0.0 => Ok(()),
            VariableType::Count => Err(format!("non-negative integer required, got {x}")),
            VariableType::Categorical(c) | VariableType::Ordinal(c) => {
                if x.fract() == 0.0 && x >= 1.0 && x <= c as f64 {
                    Ok(())
                } else {
                    Err(format!("class code in 1..={c} required, got {x}"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttribute", into = "RawAttribute")]
pub struct AttributeSpec {
    pub id: String,
    pub name: String,
    pub var_type: VariableType,
    pub category_labels: Vec<String>,
}

impl AttributeSpec {
    pub fn new(id: impl Into<String>, var_type: VariableType) -> Self {
        let id = id.into();
        let category_labels = match var_type.num_categories() {
            Some(c) => (1..=c).map(|k| k.to_string()).collect(),
            None => Vec::new(),
        };
        Self { name: id.clone(), id, var_type, category_labels }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn kind(&self) -> VarKind {
        self.var_type.kind()
    }
}

#[derive(Serialize, Deserialize)]
struct RawAttribute {
    id: String,
    name: String,
    kind: VarKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_categories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_labels: Option<Vec<String>>,
}

impl TryFrom<RawAttribute> for AttributeSpec {
    type Error = String;

    fn try_from(raw: RawAttribute) -> std::result::Result<Self, String> {
        let var_type = match raw.kind {
            VarKind::Real => VariableType::Real,
            VarKind::Positive => VariableType::Positive,
            VarKind::Count => VariableType::Count,
            VarKind::Categorical | VarKind::Ordinal => {
                let c = raw.num_categories.ok_or_else(|| format!("attribute `{}` needs num_categories", raw.id))?;
                if c < 2 {
                    return Err(format!("attribute `{}` needs at least 2 categories", raw.id));
                }
                if raw.kind == VarKind::Categorical {
                    VariableType::Categorical(c)
                } else {
                    VariableType::Ordinal(c)
                }
            }
        };
        let category_labels = match (var_type.num_categories(), raw.category_labels) {
            (Some(c), Some(labels)) if labels.len() == c => labels,
            (Some(c), Some(labels)) => {
                return Err(format!("attribute `{}` has {} labels for {c} categories", raw.id, labels.len()))
            }
            (Some(c), None) => (1..=c).map(|k| k.to_string()).collect(),
            (None, _) => Vec::new(),
        };
        Ok(AttributeSpec { id: raw.id, name: raw.name, var_type, category_labels })
    }
}

impl From<AttributeSpec> for RawAttribute {
    fn from(a: AttributeSpec) -> Self {
        RawAttribute {
            kind: a.var_type.kind(),
            num_categories: a.var_type.num_categories(),
            category_labels: a.var_type.num_categories().map(|_| a.category_labels),
            id: a.id,
            name: a.name,
        }
    }
}

/// Ordered attribute list; the order is the canonical column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub version: u64,
    pub attributes: Vec<AttributeSpec>,
}

impl DatasetSchema {
    pub fn new(version: u64, attributes: Vec<AttributeSpec>) -> Result<Self> {
        let schema = Self { version, attributes };
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.attributes {
            if !seen.insert(a.id.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate attribute id `{}`", a.id)));
            }
            if a.id == DATASET_TAG_COLUMN {
                return Err(Error::InvalidSchema(format!("`{}` is reserved", a.id)));
            }
            if let Some(c) = a.var_type.num_categories() {
                if c < 2 || a.category_labels.len() != c {
                    return Err(Error::InvalidSchema(format!("attribute `{}` has inconsistent categories", a.id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.id.clone()).collect()
    }

    pub fn types(&self) -> Vec<VariableType> {
        self.attributes.iter().map(|a| a.var_type).collect()
    }

    pub fn with_attribute(&self, attr: AttributeSpec) -> Result<Self> {
        let mut attributes = self.attributes.clone();
        attributes.push(attr);
        Self::new(self.version + 1, attributes)
    }

    pub fn without_attribute(&self, id: &str) -> Result<Self> {
        let idx = self.index_of(id).ok_or_else(|| Error::AttributeNotInSchema(id.to_string()))?;
        let mut attributes = self.attributes.clone();
        attributes.remove(idx);
        Self::new(self.version + 1, attributes)
    }

    pub fn with_edited(&self, attr: AttributeSpec) -> Result<Self> {
        let idx = self.index_of(&attr.id).ok_or_else(|| Error::AttributeNotInSchema(attr.id.clone()))?;
        let mut attributes = self.attributes.clone();
        attributes[idx] = attr;
        Self::new(self.version + 1, attributes)
    }

    /// Sub-schema over the given attribute ids, kept in this schema's order.
    pub fn restricted(&self, ids: &[String], version: u64) -> Result<Self> {
        for id in ids {
            if self.index_of(id).is_none() {
                return Err(Error::AttributeNotInSchema(id.clone()));
            }
        }
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let attributes = self.attributes.iter().filter(|a| keep.contains(a.id.as_str())).cloned().collect();
        Self::new(version, attributes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: DatasetSchema = serde_json::from_str(text)?;
        schema.check()?;
        Ok(schema)
    }
}

/// Registry of schema versions.
#[derive(Debug, Clone, Default)]
pub struct SchemaStore {
    versions: BTreeMap<u64, DatasetSchema>,
}

impl SchemaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: DatasetSchema) {
        self.versions.insert(schema.version, schema);
    }

    pub fn get(&self, version: u64) -> Result<&DatasetSchema> {
        self.versions.get(&version).ok_or(Error::UnknownSchemaVersion(version))
    }

    pub fn latest(&self) -> Option<&DatasetSchema> {
        self.versions.values().next_back()
    }

    pub fn versions(&self) -> impl Iterator<Item = u64> + '_ {
        self.versions.keys().copied()
    }
}

/// One table cell: `None` is missing, otherwise the raw value.
/// Categorical and ordinal values are 1-based class codes.
pub type Cell = Option<f64>;

/// n x p grid of cells over a list of attribute ids.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroTable {
    pub schema_version: u64,
    columns: Vec<String>,
    cells: Vec<Cell>,
    tags: Vec<String>,
    row_tags: Vec<u32>,
}

impl HeteroTable {
    /// Builds a table whose rows all come from one source named `tag`.
    pub fn new(
        schema_version: u64,
        columns: Vec<String>,
        rows: Vec<Vec<Cell>>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let p = columns.len();
        let mut cells = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidTable(format!("row {i} has {} cells, expected {p}", row.len())));
            }
            cells.extend_from_slice(row);
        }
        let n = rows.len();
        Ok(Self { schema_version, columns, cells, tags: vec![tag.into()], row_tags: vec![0; n] })
    }

    pub fn from_parts(
        schema_version: u64,
        columns: Vec<String>,
        cells: Vec<Cell>,
        row_tags: Vec<String>,
    ) -> Result<Self> {
        let p = columns.len();
        if p == 0 && !cells.is_empty() || p > 0 && cells.len() != row_tags.len() * p {
            return Err(Error::InvalidTable("cell count does not match rows x columns".into()));
        }
        let mut tags: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let row_tags = row_tags
            .into_iter()
            .map(|t| {
                *index.entry(t.clone()).or_insert_with(|| {
                    tags.push(t);
                    (tags.len() - 1) as u32
                })
            })
            .collect();
        Ok(Self { schema_version, columns, cells, tags, row_tags })
    }

    pub fn n_rows(&self) -> usize {
        self.row_tags.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        let p = self.columns.len();
        &self.cells[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Cell]> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> Cell {
        self.cells[i * self.columns.len() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, cell: Cell) {
        let p = self.columns.len();
        self.cells[i * p + j] = cell;
    }

    pub fn row_tag(&self, i: usize) -> &str {
        &self.tags[self.row_tags[i] as usize]
    }

    /// Distinct dataset tags in order of first appearance.
    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == id)
    }

    pub fn mask(&self) -> MissMask {
        MissMask { n: self.n_rows(), p: self.n_cols(), flags: self.cells.iter().map(Option::is_some).collect() }
    }

    /// True when the columns are exactly the schema's ids in schema order.
    pub fn conforms_to(&self, schema: &DatasetSchema) -> bool {
        self.columns.len() == schema.len() && self.columns.iter().zip(&schema.attributes).all(|(c, a)| *c == a.id)
    }

    pub fn select_rows(&self, indices: &[usize]) -> HeteroTable {
        let p = self.n_cols();
        let mut cells = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            cells.extend_from_slice(self.row(i));
        }
        let row_tags = indices.iter().map(|&i| self.row_tag(i).to_string()).collect();
        HeteroTable::from_parts(self.schema_version, self.columns.clone(), cells, row_tags)
            .expect("row selection keeps shape")
    }

    /// Keeps only the listed columns (in the given order).
    pub fn select_columns(&self, ids: &[String]) -> Result<HeteroTable> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| self.column_index(id).ok_or_else(|| Error::AttributeNotInSchema(id.clone())))
            .collect::<Result<_>>()?;
        let mut cells = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            cells.extend(idx.iter().map(|&j| row[j]));
        }
        let row_tags = (0..self.n_rows()).map(|i| self.row_tag(i).to_string()).collect();
        HeteroTable::from_parts(self.schema_version, ids.to_vec(), cells, row_tags)
    }

    /// Renames every row's dataset tag.
    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tags = vec![tag.into()];
        self.row_tags.iter_mut().for_each(|t| *t = 0);
        self
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        header.push(DATASET_TAG_COLUMN);
        w.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            record.extend(self.row(i).iter().map(|c| match c {
                Some(x) => format!("{x}"),
                None => String::new(),
            }));
            record.push(self.row_tag(i).to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV table format. Rows without a tag column are tagged `default_tag`.
    pub fn read_csv<R: Read>(reader: R, schema_version: u64, default_tag: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let tag_col = header.iter().position(|h| h == DATASET_TAG_COLUMN);
        let columns: Vec<String> = header.iter().filter(|h| *h != DATASET_TAG_COLUMN).cloned().collect();
        let mut cells = Vec::new();
        let mut row_tags = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            for (k, field) in record.iter().enumerate() {
                if Some(k) == tag_col {
                    continue;
                }
                if field.is_empty() {
                    cells.push(None);
                } else {
                    let x: f64 = field.parse().map_err(|_| {
                        Error::InvalidTable(format!("row {line}, column `{}`: cannot parse `{field}`", header[k]))
                    })?;
                    cells.push(Some(x));
                }
            }
            row_tags.push(match tag_col {
                Some(k) => record.get(k).unwrap_or(default_tag).to_string(),
                None => default_tag.to_string(),
            });
        }
        Self::from_parts(schema_version, columns, cells, row_tags)
    }
}

/// Observed (true) / missing (false) flags, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissMask {
    pub n: usize,
    pub p: usize,
    pub flags: Vec<bool>,
}

impl MissMask {
    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.flags[i * self.p + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.flags[i * self.p..(i + 1) * self.p]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub column: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every cell violating its column's type.
pub fn validate_table(table: &HeteroTable, schema: &DatasetSchema) -> Result<ValidationReport> {
    if table.schema_version != schema.version {
        return Err(Error::UnknownSchemaVersion(table.schema_version));
    }
    if table.n_cols() > schema.len() {
        return Err(Error::ColumnCountMismatch { table: table.n_cols(), schema: schema.len() });
    }
    let types: Vec<VariableType> = table
        .columns()
        .iter()
        .map(|id| {
            schema
                .index_of(id)
                .map(|j| schema.attributes[j].var_type)
                .ok_or_else(|| Error::AttributeNotInSchema(id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut report = ValidationReport::default();
    for i in 0..table.n_rows() {
        for (j, (cell, ty)) in table.row(i).iter().zip(&types).enumerate() {
            if let Some(x) = cell {
                if let Err(message) = ty.check(*x) {
                    report.violations.push(Violation { row: i, column: table.columns()[j].clone(), message });
                }
            }
        }
    }
    Ok(report)
}

/// Training-split statistics of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnStats {
    Real {
        mean: f64,
        std: f64,
    },
    /// Mean and std of log-values.
    Positive {
        log_mean: f64,
        log_std: f64,
    },
    /// Raw mean (missing fill) plus mean and std of log(1 + x) for standardization.
    Count {
        mean: f64,
        log1p_mean: f64,
        log1p_std: f64,
    },
    Categorical {
        probs: Vec<f64>,
    },
    Ordinal {
        probs: Vec<f64>,
    },
}

impl ColumnStats {
    pub fn kind(&self) -> VarKind {
        match self {
            ColumnStats::Real { .. } => VarKind::Real,
            ColumnStats::Positive { .. } => VarKind::Positive,
            ColumnStats::Count { .. } => VarKind::Count,
            ColumnStats::Categorical { .. } => VarKind::Categorical,
            ColumnStats::Ordinal { .. } => VarKind::Ordinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub schema_version: u64,
    pub columns: Vec<ColumnStats>,
}

impl TrainStats {
    /// Checks that the statistics line up with the schema column by column.
    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<()> {
        if self.schema_version != schema.version || self.columns.len() != schema.len() {
            return Err(Error::StatsSchemaMismatch(format!(
                "stats cover {} columns of schema v{}, schema v{} has {}",
                self.columns.len(),
                self.schema_version,
                schema.version,
                schema.len()
            )));
        }
        for (s, a) in self.columns.iter().zip(&schema.attributes) {
            let ok = s.kind() == a.kind()
                && match s {
                    ColumnStats::Categorical { probs } | ColumnStats::Ordinal { probs } => {
                        Some(probs.len()) == a.var_type.num_categories()
                    }
                    _ => true,
                };
            if !ok {
                return Err(Error::StatsSchemaMismatch(format!("attribute `{}`", a.id)));
            }
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std.max(STD_FLOOR))
}

/// Statistics over observed cells of a schema-conformant table.
pub fn compute_train_stats(table: &HeteroTable, schema: &DatasetSchema) -> Result<TrainStats> {
    if !table.conforms_to(schema) {
        return Err(Error::ColumnCountMismatch { table: table.n_cols(), schema: schema.len() });
    }
    let mut columns = Vec::with_capacity(schema.len());
    for (j, attr) in schema.attributes.iter().enumerate() {
        let values: Vec<f64> = (0..table.n_rows()).filter_map(|i| table.get(i, j)).collect();
        if values.is_empty() {
            return Err(Error::AllMissingColumn(j));
        }
        let stats = match attr.var_type {
            VariableType::Real => {
                let (mean, std) = mean_std(&values);
                ColumnStats::Real { mean, std }
            }
            VariableType::Positive => {
                let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
                let (log_mean, log_std) = mean_std(&logs);
                ColumnStats::Positive { log_mean, log_std }
            }
            VariableType::Count => {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let logs: Vec<f64> = values.iter().map(|v| v.ln_1p()).collect();
                let (log1p_mean, log1p_std) = mean_std(&logs);
                ColumnStats::Count { mean, log1p_mean, log1p_std }
            }
            VariableType::Categorical(c) | VariableType::Ordinal(c) => {
                let mut counts = vec![0.0; c];
                for v in &values {
                    counts[*v as usize - 1] += 1.0;
                }
                let probs: Vec<f64> = counts.iter().map(|k| k / values.len() as f64).collect();
                if attr.kind() == VarKind::Categorical {
                    ColumnStats::Categorical { probs }
                } else {
                    ColumnStats::Ordinal { probs }
                }
            }
        };
        columns.push(stats);
    }
    Ok(TrainStats { schema_version: schema.version, columns })
}

/// Stacks source tables under the schema's column order. Columns a source
/// does not carry become missing for all of its rows.
pub fn merge_tables(tables: &[HeteroTable], schema: &DatasetSchema) -> Result<HeteroTable> {
    let p = schema.len();
    let mut cells = Vec::new();
    let mut row_tags = Vec::new();
    for table in tables {
        let targets: Vec<usize> = table
            .columns()
            .iter()
            .map(|id| schema.index_of(id).ok_or_else(|| Error::AttributeNotInSchema(id.clone())))
            .collect::<Result<_>>()?;
        for i in 0..table.n_rows() {
            let mut row = vec![None; p];
            for (cell, &j) in table.row(i).iter().zip(&targets) {
                row[j] = *cell;
            }
            cells.extend(row);
            row_tags.push(table.row_tag(i).to_string());
        }
    }
    HeteroTable::from_parts(schema.version, schema.ids(), cells, row_tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_abc() -> DatasetSchema {
        DatasetSchema::new(
            1,
            vec![
                AttributeSpec::new("A", VariableType::Real),
                AttributeSpec::new("B", VariableType::Positive),
                AttributeSpec::new("C", VariableType::Ordinal(3)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn all_missing_table_is_valid() {
        let s = schema_abc();
        let t = HeteroTable::new(1, s.ids(), vec![vec![None; 3]; 4], "t").unwrap();
        assert!(validate_table(&t, &s).unwrap().is_valid());
    }

    #[test]
    fn positive_zero_and_ordinal_overflow_are_violations() {
        let s = schema_abc();
        let t = HeteroTable::new(
            1,
            s.ids(),
            vec![vec![Some(1.0), Some(0.0), Some(2.0)], vec![None, Some(1.5), Some(4.0)]],
            "t",
        )
        .unwrap();
        let report = validate_table(&t, &s).unwrap();
        assert_eq!(report.violations.len(), 2);
        assert_eq!((report.violations[0].row, report.violations[0].column.as_str()), (0, "B"));
        assert_eq!((report.violations[1].row, report.violations[1].column.as_str()), (1, "C"));
    }

    #[test]
    fn validate_rejects_wrong_version_and_too_many_columns() {
        let s = schema_abc();
        let t = HeteroTable::new(2, s.ids(), vec![vec![None; 3]], "t").unwrap();
        assert!(matches!(validate_table(&t, &s), Err(Error::UnknownSchemaVersion(2))));
        let mut ids = s.ids();
        ids.push("D".into());
        let t = HeteroTable::new(1, ids, vec![vec![None; 4]], "t").unwrap();
        assert!(matches!(validate_table(&t, &s), Err(Error::ColumnCountMismatch { .. })));
    }

    #[test]
    fn real_stats_use_sample_std() {
        let s = DatasetSchema::new(1, vec![AttributeSpec::new("x", VariableType::Real)]).unwrap();
        let rows = vec![vec![Some(1.0)], vec![None], vec![Some(2.0)], vec![Some(3.0)]];
        let t = HeteroTable::new(1, s.ids(), rows, "t").unwrap();
        let stats = compute_train_stats(&t, &s).unwrap();
        assert_eq!(stats.columns[0], ColumnStats::Real { mean: 2.0, std: 1.0 });
    }

    #[test]
    fn categorical_stats_count_classes() {
        let s = DatasetSchema::new(1, vec![AttributeSpec::new("c", VariableType::Categorical(3))]).unwrap();
        let rows = vec![vec![Some(1.0)], vec![Some(1.0)], vec![Some(2.0)], vec![None]];
        let t = HeteroTable::new(1, s.ids(), rows, "t").unwrap();
        match &compute_train_stats(&t, &s).unwrap().columns[0] {
            ColumnStats::Categorical { probs } => {
                assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
                assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
                assert_eq!(probs[2], 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positive_stats_are_in_log_space() {
        let s = DatasetSchema::new(1, vec![AttributeSpec::new("p", VariableType::Positive)]).unwrap();
        let e2 = 2.0f64.exp();
        let t = HeteroTable::new(1, s.ids(), vec![vec![Some(1.0)], vec![Some(e2)]], "t").unwrap();
        match compute_train_stats(&t, &s).unwrap().columns[0] {
            ColumnStats::Positive { log_mean, log_std } => {
                // log-values {0, 2}: mean 1, sample std sqrt(2)
                assert!((log_mean - 1.0).abs() < 1e-12);
                assert!((log_std - 2f64.sqrt()).abs() < 1e-12);
            }
            ref other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_column_std_is_floored() {
        let s = DatasetSchema::new(1, vec![AttributeSpec::new("x", VariableType::Real)]).unwrap();
        let t = HeteroTable::new(1, s.ids(), vec![vec![Some(4.0)]; 5], "t").unwrap();
        assert_eq!(compute_train_stats(&t, &s).unwrap().columns[0], ColumnStats::Real { mean: 4.0, std: STD_FLOOR });
    }

    #[test]
    fn all_missing_column_is_an_error() {
        let s = schema_abc();
        let rows = vec![vec![Some(1.0), None, Some(1.0)]];
        let t = HeteroTable::new(1, s.ids(), rows, "t").unwrap();
        assert!(matches!(compute_train_stats(&t, &s), Err(Error::AllMissingColumn(1))));
    }

    #[test]
    fn merge_fills_absent_columns_with_missing() {
        let s = schema_abc();
        let t1 = HeteroTable::new(1, vec!["A".into(), "B".into()], vec![vec![Some(1.0), Some(2.0)]], "one").unwrap();
        let t2 = HeteroTable::new(
            1,
            vec!["B".into(), "C".into()],
            vec![vec![Some(3.0), Some(1.0)], vec![Some(4.0), None]],
            "two",
        )
        .unwrap();
        let m = merge_tables(&[t1, t2], &s).unwrap();
        assert_eq!(m.n_rows(), 3);
        assert_eq!(m.row(0), &[Some(1.0), Some(2.0), None]);
        assert_eq!(m.row(1), &[None, Some(3.0), Some(1.0)]);
        assert_eq!(m.row(2), &[None, Some(4.0), None]);
        assert_eq!((m.row_tag(0), m.row_tag(2)), ("one", "two"));
    }

    #[test]
    fn merge_with_itself_doubles_rows() {
        let s = schema_abc();
        let t = HeteroTable::new(1, s.ids(), vec![vec![Some(1.0), None, Some(3.0)]; 5], "t").unwrap();
        let m = merge_tables(&[t.clone(), t.clone()], &s).unwrap();
        assert_eq!(m.n_rows(), 10);
        assert!(m.rows().all(|r| r == t.row(0)));
    }

    #[test]
    fn merge_sizes_add_up_and_unknown_columns_fail() {
        let s = schema_abc();
        let a = HeteroTable::new(1, vec!["A".into()], vec![vec![Some(0.0)]; 100], "a").unwrap();
        let b = HeteroTable::new(1, vec!["C".into()], vec![vec![Some(1.0)]; 50], "b").unwrap();
        assert_eq!(merge_tables(&[a, b], &s).unwrap().n_rows(), 150);
        let bad = HeteroTable::new(1, vec!["Z".into()], vec![vec![None]], "z").unwrap();
        assert!(matches!(merge_tables(&[bad], &s), Err(Error::AttributeNotInSchema(_))));
    }

    #[test]
    fn schema_edits_bump_version() {
        let s = schema_abc();
        let s2 = s.with_attribute(AttributeSpec::new("D", VariableType::Count)).unwrap();
        assert_eq!((s2.version, s2.len()), (2, 4));
        let s3 = s2.without_attribute("A").unwrap();
        assert_eq!((s3.version, s3.len()), (3, 3));
        let s4 = s3.with_edited(AttributeSpec::new("D", VariableType::Real)).unwrap();
        assert_eq!(s4.version, 4);
        assert!(s.with_attribute(AttributeSpec::new("A", VariableType::Real)).is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let mut s = schema_abc();
        s.attributes[2].category_labels = vec!["low".into(), "mid".into(), "high".into()];
        let text = s.to_json().unwrap();
        assert!(text.contains("\"num_categories\": 3"));
        assert_eq!(DatasetSchema::from_json(&text).unwrap(), s);
        let bad = r#"{"version":1,"attributes":[{"id":"x","name":"x","kind":"ordinal"}]}"#;
        assert!(DatasetSchema::from_json(bad).is_err());
    }

    #[test]
    fn csv_round_trip_keeps_missing_and_tags() {
        let s = schema_abc();
        let rows = vec![vec![Some(0.1 + 0.2), None, Some(2.0)], vec![None, Some(1e-300), None]];
        let t = HeteroTable::new(1, s.ids(), rows, "src").unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = HeteroTable::read_csv(buf.as_slice(), 1, "x").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.mask(), t.mask());
    }
}
