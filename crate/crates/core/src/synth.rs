//! Gaussian-copula virtual population with a known latent correlation
//! matrix, and the carving of that population into overlapping source
//! tables whose union has block-structured missingness.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::schema::{AttributeSpec, Cell, DatasetSchema, HeteroTable, VariableType};

mod oracle;
pub use oracle::{CellPosterior, OracleImputer};

/// How one latent coordinate `z ~ N(0, 1)` becomes an attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Marginal {
    Real {
        loc: f64,
        scale: f64,
    },
    /// `exp(log_loc + log_scale * z)`.
    Positive {
        log_loc: f64,
        log_scale: f64,
    },
    /// Poisson quantile of `Phi(z)`.
    Count {
        rate: f64,
    },
    /// Class whose probability bin holds `Phi(z)`.
    Categorical {
        probs: Vec<f64>,
    },
    Ordinal {
        probs: Vec<f64>,
    },
}

fn phi(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

fn bin_of(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn poisson_quantile(rate: f64, u: f64) -> u64 {
    let mut k = 0u64;
    let mut pmf = (-rate).exp();
    let mut cdf = pmf;
    while u >= cdf && k < 10_000 {
        k += 1;
        pmf *= rate / k as f64;
        cdf += pmf;
    }
    k
}

impl Marginal {
    pub fn var_type(&self) -> VariableType {
        match self {
            Marginal::Real { .. } => VariableType::Real,
            Marginal::Positive { .. } => VariableType::Positive,
            Marginal::Count { .. } => VariableType::Count,
            Marginal::Categorical { probs } => VariableType::Categorical(probs.len()),
            Marginal::Ordinal { probs } => VariableType::Ordinal(probs.len()),
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Marginal::Real { loc, scale } => loc + scale * z,
            Marginal::Positive { log_loc, log_scale } => (log_loc + log_scale * z).exp(),
            Marginal::Count { rate } => poisson_quantile(*rate, phi(z)) as f64,
            Marginal::Categorical { probs } | Marginal::Ordinal { probs } => (bin_of(probs, phi(z)) + 1) as f64,
        }
    }

    /// Latent value of a continuous observation; `None` for discrete types.
    pub fn invert(&self, x: f64) -> Option<f64> {
        match self {
            Marginal::Real { loc, scale } => Some((x - loc) / scale),
            Marginal::Positive { log_loc, log_scale } => Some((x.ln() - log_loc) / log_scale),
            _ => None,
        }
    }

    /// Standard deviation of the attribute on its raw scale.
    pub fn std(&self) -> f64 {
        let class_std = |p: &[f64]| {
            let m: f64 = p.iter().enumerate().map(|(k, q)| (k + 1) as f64 * q).sum();
            p.iter().enumerate().map(|(k, q)| q * ((k + 1) as f64 - m).powi(2)).sum::<f64>().sqrt()
        };
        match self {
            Marginal::Real { scale, .. } => *scale,
            Marginal::Positive { log_loc, log_scale } => {
                let s2 = log_scale * log_scale;
                (s2.exp_m1() * (2.0 * log_loc + s2).exp()).sqrt()
            }
            Marginal::Count { rate } => rate.sqrt(),
            Marginal::Categorical { probs } | Marginal::Ordinal { probs } => class_std(probs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    pub schema: DatasetSchema,
    /// Latent correlation matrix, row-major `p x p`.
    pub sigma: Vec<Vec<f64>>,
    pub marginals: Vec<Marginal>,
    pub seed: u64,
}

impl CopulaSpec {
    pub fn new(schema: DatasetSchema, sigma: Vec<Vec<f64>>, marginals: Vec<Marginal>, seed: u64) -> Result<Self> {
        let p = schema.len();
        if sigma.len() != p || sigma.iter().any(|r| r.len() != p) || marginals.len() != p {
            return Err(Error::InvalidConfig(format!("copula needs a {p} x {p} matrix and {p} marginals")));
        }
        for (m, a) in marginals.iter().zip(&schema.attributes) {
            if m.var_type() != a.var_type {
                return Err(Error::InvalidConfig(format!("marginal of `{}` does not match its type", a.id)));
            }
            if let Marginal::Categorical { probs } | Marginal::Ordinal { probs } = m {
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 || probs.iter().any(|&q| q < 0.0) {
                    return Err(Error::InvalidConfig(format!("bins of `{}` do not partition [0, 1]", a.id)));
                }
            }
        }
        let spec = Self { schema, sigma, marginals, seed };
        spec.cholesky()?;
        Ok(spec)
    }

    pub fn p(&self) -> usize {
        self.schema.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(p, p, |i, j| self.sigma[i][j])
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        let m = self.matrix();
        let p = self.p();
        let symmetric = (0..p).all(|i| (0..p).all(|j| (m[(i, j)] - m[(j, i)]).abs() < 1e-12));
        let unit = (0..p).all(|i| (m[(i, i)] - 1.0).abs() < 1e-9);
        if !symmetric || !unit {
            return Err(Error::NotPositiveDefinite);
        }
        nalgebra::Cholesky::new(m).map(|c| c.l()).ok_or(Error::NotPositiveDefinite)
    }

    /// Desk-scale benchmark: 48 attributes, half real, the rest categorical,
    /// ordinal, count and positive; latent correlations from a sparse rank-6
    /// factor model so that some pairs are strongly related and others
    /// exactly independent.
    pub fn benchmark(seed: u64) -> Self {
        const PATTERN: [char; 12] = ['r', 'c', 'r', 'o', 'r', 'n', 'r', 'c', 'r', 'p', 'r', 'o'];
        const FACTORS: usize = 6;
        let p = 48;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attributes = Vec::with_capacity(p);
        let mut marginals = Vec::with_capacity(p);
        let weights = |rng: &mut ChaCha8Rng, c: usize| {
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        for j in 0..p {
            let m = match PATTERN[j % PATTERN.len()] {
                'r' => Marginal::Real { loc: rng.random_range(-5.0..5.0), scale: rng.random_range(0.5..3.0) },
                'p' => {
                    Marginal::Positive { log_loc: rng.random_range(0.0..2.0), log_scale: rng.random_range(0.2..0.6) }
                }
                'n' => Marginal::Count { rate: rng.random_range(0.5..6.0) },
                'c' => {
                    let c = rng.random_range(2..=5);
                    Marginal::Categorical { probs: weights(&mut rng, c) }
                }
                _ => {
                    let c = rng.random_range(3..=6);
                    Marginal::Ordinal { probs: weights(&mut rng, c) }
                }
            };
            let prefix = match m.var_type() {
                VariableType::Real => "real",
                VariableType::Positive => "pos",
                VariableType::Count => "count",
                VariableType::Categorical(_) => "cat",
                VariableType::Ordinal(_) => "ord",
            };
            attributes.push(AttributeSpec::new(format!("{prefix}_{j:02}"), m.var_type()));
            marginals.push(m);
        }
        let schema = DatasetSchema::new(1, attributes).expect("generated ids are unique");

        let mut load = DMatrix::<f64>::zeros(p, FACTORS);
        for j in 0..p {
            let a = rng.random_range(0..FACTORS);
            let b = (a + rng.random_range(1..FACTORS)) % FACTORS;
            for f in [a, b] {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                load[(j, f)] = sign * rng.random_range(0.6..1.4);
            }
        }
        let mut cov = &load * load.transpose();
        for j in 0..p {
            cov[(j, j)] += rng.random_range(0.1..0.6);
        }
        let d: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
        let sigma =
            (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { cov[(i, j)] / (d[i] * d[j]) }).collect()).collect();
        Self::new(schema, sigma, marginals, seed).expect("factor model is positive definite")
    }
}

/// Draws `n` fully observed rows.
pub fn sample_population(spec: &CopulaSpec, n: usize) -> Result<HeteroTable> {
    let l = spec.cholesky()?;
    let p = spec.p();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(n);
    let mut e = DVector::<f64>::zeros(p);
    for _ in 0..n {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z = &l * &e;
        rows.push(spec.marginals.iter().zip(z.iter()).map(|(m, &zi)| Some(m.apply(zi))).collect::<Vec<Cell>>());
    }
    HeteroTable::new(spec.schema.version, spec.schema.ids(), rows, "population")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesign {
    pub blocks: Vec<Block>,
}

impl BlockDesign {
    /// Three overlapping tables over 48 attributes sharing a six-column core.
    pub fn benchmark() -> Self {
        let core: Vec<usize> = (0..6).collect();
        let with_core = |extra: &mut dyn Iterator<Item = usize>| core.iter().copied().chain(extra).collect::<Vec<_>>();
        Self {
            blocks: vec![
                Block { name: "A".into(), rows: 4000, columns: with_core(&mut (6..20)) },
                Block { name: "B".into(), rows: 600, columns: with_core(&mut (14..48)) },
                Block { name: "C".into(), rows: 1500, columns: with_core(&mut [10, 11, 12, 44, 45, 46].into_iter()) },
            ],
        }
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows).sum()
    }

    /// Columns every block carries.
    pub fn core(&self) -> Vec<usize> {
        let Some(first) = self.blocks.first() else { return Vec::new() };
        first.columns.iter().copied().filter(|c| self.blocks.iter().all(|b| b.columns.contains(c))).collect()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let mut covered = vec![false; p];
        for b in &self.blocks {
            for &c in &b.columns {
                if c >= p {
                    return Err(Error::InvalidConfig(format!("block {} names column {c} of {p}", b.name)));
                }
                covered[c] = true;
            }
        }
        if covered.iter().any(|c| !c) || self.core().is_empty() {
            return Err(Error::InvalidConfig("blocks must cover every attribute and share a core".into()));
        }
        Ok(())
    }
}

/// Assigns consecutive disjoint row ranges to the blocks; each block keeps
/// only its own columns.
pub fn carve_blocks(population: &HeteroTable, design: &BlockDesign) -> Result<Vec<HeteroTable>> {
    let needed = design.total_rows();
    if needed > population.n_rows() {
        return Err(Error::RowBudgetExceeded { needed, available: population.n_rows() });
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(design.blocks.len());
    for b in &design.blocks {
        if let Some(&c) = b.columns.iter().find(|&&c| c >= population.n_cols()) {
            return Err(Error::InvalidConfig(format!("block {} names column {c}", b.name)));
        }
        let ids: Vec<String> = b.columns.iter().map(|&c| population.columns()[c].clone()).collect();
        let rows = (start..start + b.rows).map(|i| b.columns.iter().map(|&c| population.get(i, c)).collect()).collect();
        out.push(HeteroTable::new(population.schema_version, ids, rows, b.name.clone())?);
        start += b.rows;
    }
    Ok(out)
}

/// Splits rows in order into train / validation / test parts.
pub fn split_rows(
    table: &HeteroTable,
    val_fraction: f64,
    test_fraction: f64,
) -> (HeteroTable, HeteroTable, HeteroTable) {
    let n = table.n_rows();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_train = n - n_test - n_val;
    let idx: Vec<usize> = (0..n).collect();
    (
        table.select_rows(&idx[..n_train]),
        table.select_rows(&idx[n_train..n_train + n_val]),
        table.select_rows(&idx[n_train + n_val..]),
    )
}

/// Summary of a target attribute's true conditional distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    pub latent_mean: f64,
    pub latent_var: f64,
    /// Mean and standard deviation on the attribute's raw scale.
    pub mean: f64,
    pub std: f64,
}

fn raw_moments(m: &Marginal, mean: f64, var: f64, seed: u64) -> (f64, f64) {
    match m {
        Marginal::Real { loc, scale } => (loc + scale * mean, scale * var.sqrt()),
        Marginal::Positive { log_loc, log_scale } => {
            let mu = log_loc + log_scale * mean;
            let s2 = log_scale * log_scale * var;
            ((mu + 0.5 * s2).exp(), (s2.exp_m1() * (2.0 * mu + s2).exp()).sqrt())
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m.apply(mean + var.sqrt() * e)
                })
                .collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64;
            (mu, v.sqrt())
        }
    }
}

/// True conditional of `target` given `observed` `(column, value)` pairs.
/// Continuous observations condition the latent Gaussian in closed form;
/// anything else falls back to Monte-Carlo rejection.
pub fn true_conditional(spec: &CopulaSpec, observed: &[(usize, f64)], target: usize) -> Result<Conditional> {
    let latent: Option<Vec<(usize, f64)>> =
        observed.iter().map(|&(j, x)| spec.marginals[j].invert(x).map(|z| (j, z))).collect();
    match latent {
        Some(obs) => {
            let (mean, var) = gaussian_conditional(spec, &obs, target)?;
            let (raw_mean, raw_std) = raw_moments(&spec.marginals[target], mean, var, spec.seed);
            Ok(Conditional { latent_mean: mean, latent_var: var, mean: raw_mean, std: raw_std })
        }
        None => monte_carlo_conditional(spec, observed, target, 20_000, 0.05, spec.seed),
    }
}

fn gaussian_conditional(spec: &CopulaSpec, obs: &[(usize, f64)], target: usize) -> Result<(f64, f64)> {
    if obs.is_empty() {
        return Ok((0.0, 1.0));
    }
    let k = obs.len();
    let s_oo = DMatrix::from_fn(k, k, |a, b| spec.sigma[obs[a].0][obs[b].0]);
    let s_to = DVector::from_fn(k, |a, _| spec.sigma[target][obs[a].0]);
    let z = DVector::from_fn(k, |a, _| obs[a].1);
    let chol = nalgebra::Cholesky::new(s_oo).ok_or(Error::NotPositiveDefinite)?;
    let w = chol.solve(&s_to);
    Ok((w.dot(&z), 1.0 - w.dot(&s_to)))
}

/// Rejection estimate: draws population rows and keeps those matching the
/// observed discrete values exactly and continuous ones within `tol` latent
/// standard deviations, until `accept` rows are kept.
pub fn monte_carlo_conditional(
    spec: &CopulaSpec,
    observed: &[(usize, f64)],
    target: usize,
    accept: usize,
    tol: f64,
    seed: u64,
) -> Result<Conditional> {
    let l = spec.cholesky()?;
    let p = spec.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want: Vec<(usize, Option<f64>, f64)> =
        observed.iter().map(|&(j, x)| (j, spec.marginals[j].invert(x), x)).collect();
    let mut zs = Vec::with_capacity(accept);
    let mut xs = Vec::with_capacity(accept);
    let mut e = DVector::<f64>::zeros(p);
    let max_draws = accept.saturating_mul(100_000).max(1_000_000);
    for _ in 0..max_draws {
        if zs.len() == accept {
            break;
        }
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z = &l * &e;
        let ok = want.iter().all(|&(j, zl, x)| match zl {
            Some(zl) => (z[j] - zl).abs() <= tol,
            None => spec.marginals[j].apply(z[j]) == x,
        });
        if ok {
            zs.push(z[target]);
            xs.push(spec.marginals[target].apply(z[target]));
        }
    }
    if zs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let n = zs.len() as f64;
    let zm = zs.iter().sum::<f64>() / n;
    let zv = zs.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n;
    let xm = xs.iter().sum::<f64>() / n;
    let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
    Ok(Conditional { latent_mean: zm, latent_var: zv, mean: xm, std: xv.sqrt() })
}

/// The full synthetic benchmark: population, per-block tables, and their
/// train / validation / test splits.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: CopulaSpec,
    pub design: BlockDesign,
    pub blocks: Vec<HeteroTable>,
    pub train: Vec<HeteroTable>,
    pub val: Vec<HeteroTable>,
    pub test: Vec<HeteroTable>,
}

pub const VAL_FRACTION: f64 = 0.1;
pub const TEST_FRACTION: f64 = 0.2;

impl Benchmark {
    pub fn generate(seed: u64) -> Result<Self> {
        Self::from_parts(CopulaSpec::benchmark(seed), BlockDesign::benchmark())
    }

    pub fn from_parts(spec: CopulaSpec, design: BlockDesign) -> Result<Self> {
        design.validate(spec.p())?;
        let population = sample_population(&spec, design.total_rows())?;
        let blocks = carve_blocks(&population, &design)?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for b in &blocks {
            let (tr, va, te) = split_rows(b, VAL_FRACTION, TEST_FRACTION);
            train.push(tr);
            val.push(va);
            test.push(te);
        }
        Ok(Self { spec, design, blocks, train, val, test })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.spec.schema
    }

    /// Manifest of the ground truth, for oracle consumers.
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: crate::checkpoint::FORMAT_VERSION,
            seed: self.spec.seed,
            sigma: self.spec.sigma.clone(),
            marginals: self.spec.marginals.clone(),
            design: self.design.clone(),
            val_fraction: VAL_FRACTION,
            test_fraction: TEST_FRACTION,
        }
    }

    /// Pairs of real attributes observed together in at least one block,
    /// ordered by decreasing `|rho|`.
    pub fn co_observed_real_pairs(&self) -> Vec<(usize, usize, f64)> {
        let p = self.spec.p();
        let mut pairs = Vec::new();
        for a in 0..p {
            for b in a + 1..p {
                let real = |j: usize| self.spec.marginals[j].var_type() == VariableType::Real;
                let together =
                    self.design.blocks.iter().any(|blk| blk.columns.contains(&a) && blk.columns.contains(&b));
                if real(a) && real(b) && together {
                    pairs.push((a, b, self.spec.sigma[a][b]));
                }
            }
        }
        pairs.sort_by(|x, y| y.2.abs().total_cmp(&x.2.abs()).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub sigma: Vec<Vec<f64>>,
    pub marginals: Vec<Marginal>,
    pub design: BlockDesign,
    pub val_fraction: f64,
    pub test_fraction: f64,
}
