//! Bayes-optimal imputation under a known copula. Serves as the ceiling
//! any learned model can reach on the synthetic benchmark.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{CopulaSpec, Marginal};
use crate::error::{Error, Result};
use crate::heads::DistributionParams;
use crate::model::{check_row_width, Imputer};
use crate::schema::{Cell, DatasetSchema};

const BURN_IN: usize = 100;

/// Predicts every cell from the true conditional distribution given the
/// visible cells of its row. Point estimates minimize each metric's
/// expected loss: conditional mean for continuous and count columns,
/// most probable class for categorical ones, median class for ordinal ones.
///
/// Continuous evidence conditions the latent Gaussian exactly. Discrete
/// evidence confines its latent coordinate to an interval; those
/// coordinates are Gibbs-sampled and every other coordinate is integrated
/// analytically per draw.
#[derive(Debug, Clone)]
pub struct OracleImputer {
    spec: CopulaSpec,
    draws: usize,
    seed: u64,
}

/// Conditional summary of one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPosterior {
    /// Raw-scale conditional mean.
    pub mean: f64,
    /// Raw-scale conditional variance (continuous and count columns).
    pub var: f64,
    /// Class probabilities for categorical and ordinal columns.
    pub probs: Option<Vec<f64>>,
}

impl CellPosterior {
    /// The loss-minimizing point for the column's metric.
    pub fn point(&self, m: &Marginal) -> f64 {
        match (m, &self.probs) {
            (Marginal::Categorical { .. }, Some(p)) => {
                (p.iter().enumerate().fold((0, f64::MIN), |b, (k, &q)| if q > b.1 { (k, q) } else { b }).0 + 1) as f64
            }
            (Marginal::Ordinal { .. }, Some(p)) => {
                let mut acc = 0.0;
                for (k, q) in p.iter().enumerate() {
                    acc += q;
                    if acc >= 0.5 {
                        return (k + 1) as f64;
                    }
                }
                p.len() as f64
            }
            _ => self.mean,
        }
    }

    fn params(&self, m: &Marginal) -> DistributionParams {
        let var = self.var.max(1e-12);
        match (m, &self.probs) {
            (Marginal::Categorical { .. }, Some(p)) => DistributionParams::Categorical { pi: p.clone() },
            (Marginal::Ordinal { .. }, Some(p)) => DistributionParams::ordinal_from_probs(p),
            (Marginal::Count { .. }, _) => DistributionParams::Count { lambda: self.mean.max(1e-9) },
            (Marginal::Positive { .. }, _) => {
                let s2 = (1.0 + var / (self.mean * self.mean)).ln();
                DistributionParams::Positive { mu: self.mean.ln() - 0.5 * s2, sigma2: s2 }
            }
            _ => DistributionParams::Real { mu: self.mean, sigma2: var },
        }
    }
}

fn n01() -> Normal {
    Normal::standard()
}

/// Latent thresholds `Phi^-1` of the cumulative class masses: class `c`
/// (1-based) owns `[t[c-1], t[c])`.
fn class_thresholds(probs: &[f64]) -> Vec<f64> {
    let mut t = vec![f64::NEG_INFINITY];
    let mut acc = 0.0;
    for p in &probs[..probs.len() - 1] {
        acc += p;
        t.push(n01().inverse_cdf(acc));
    }
    t.push(f64::INFINITY);
    t
}

fn poisson_cdf_thresholds(rate: f64) -> Vec<f64> {
    // t[k] = Phi^-1(F(k)); stop once the upper tail is negligible
    let mut t = Vec::new();
    let mut pmf = (-rate).exp();
    let mut cdf = pmf;
    let mut k = 0u64;
    while cdf < 1.0 - 1e-13 && k < 10_000 {
        t.push(n01().inverse_cdf(cdf));
        k += 1;
        pmf *= rate / k as f64;
        cdf += pmf;
    }
    t
}

/// Latent interval of a discrete observation.
fn latent_interval(m: &Marginal, x: f64) -> Option<(f64, f64)> {
    match m {
        Marginal::Categorical { probs } | Marginal::Ordinal { probs } => {
            let t = class_thresholds(probs);
            let c = x.round() as usize;
            (c >= 1 && c <= probs.len()).then(|| (t[c - 1], t[c]))
        }
        Marginal::Count { rate } => {
            let t = poisson_cdf_thresholds(*rate);
            let k = x.round() as usize;
            let lo = if k == 0 { f64::NEG_INFINITY } else { t.get(k - 1).copied().unwrap_or(f64::INFINITY) };
            let hi = t.get(k).copied().unwrap_or(f64::INFINITY);
            Some((lo, hi))
        }
        _ => None,
    }
}

/// Raw-scale moments and class masses of `apply(z)` for `z ~ N(mean, var)`.
fn moments_1d(m: &Marginal, mean: f64, var: f64) -> CellPosterior {
    let sd = var.max(0.0).sqrt();
    let cdf = |t: f64| {
        if sd == 0.0 {
            if mean < t {
                1.0
            } else {
                0.0
            }
        } else {
            n01().cdf((t - mean) / sd)
        }
    };
    match m {
        Marginal::Real { loc, scale } => {
            CellPosterior { mean: loc + scale * mean, var: scale * scale * var, probs: None }
        }
        Marginal::Positive { log_loc, log_scale } => {
            let mu = log_loc + log_scale * mean;
            let s2 = log_scale * log_scale * var;
            CellPosterior { mean: (mu + 0.5 * s2).exp(), var: s2.exp_m1() * (2.0 * mu + s2).exp(), probs: None }
        }
        Marginal::Count { rate } => {
            // E[X] = sum_k P(X > k), E[X^2] = sum_k (2k + 1) P(X > k)
            let (mut e1, mut e2) = (0.0, 0.0);
            for (k, &t) in poisson_cdf_thresholds(*rate).iter().enumerate() {
                let tail = 1.0 - cdf(t);
                e1 += tail;
                e2 += (2 * k + 1) as f64 * tail;
                if tail < 1e-15 && k as f64 > *rate {
                    break;
                }
            }
            CellPosterior { mean: e1, var: (e2 - e1 * e1).max(0.0), probs: None }
        }
        Marginal::Categorical { probs } | Marginal::Ordinal { probs } => {
            let t = class_thresholds(probs);
            let pi: Vec<f64> = (0..probs.len()).map(|c| (cdf(t[c + 1]) - cdf(t[c])).max(0.0)).collect();
            let mean = pi.iter().enumerate().map(|(c, q)| (c + 1) as f64 * q).sum();
            CellPosterior { mean, var: 0.0, probs: Some(pi) }
        }
    }
}

/// Draw from `N(mean, sd^2)` truncated to `[lo, hi)`, sampling the tail
/// nearest the interval to keep the inverse CDF accurate.
fn truncated_normal<R: Rng>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    let u: f64 = rng.random();
    let z = if a > 0.0 {
        let (sa, sb) = (n01().cdf(-a), n01().cdf(-b));
        -n01().inverse_cdf(sb + u * (sa - sb))
    } else {
        let (pa, pb) = (n01().cdf(a), n01().cdf(b));
        n01().inverse_cdf(pa + u * (pb - pa))
    };
    let x = mean + sd * z;
    if x.is_finite() {
        x.clamp(lo, hi)
    } else {
        // interval lost to rounding; any point inside will do
        if lo.is_finite() {
            lo
        } else {
            hi
        }
    }
}

impl OracleImputer {
    pub fn new(spec: CopulaSpec, draws: usize, seed: u64) -> Self {
        Self { spec, draws: draws.max(1), seed }
    }

    pub fn spec(&self) -> &CopulaSpec {
        &self.spec
    }

    /// Conditional summaries of every attribute given the row's observed
    /// cells. Observed attributes come back as point masses.
    pub fn posterior<R: Rng>(&self, row: &[Cell], rng: &mut R) -> Result<Vec<CellPosterior>> {
        let spec = &self.spec;
        let p = spec.p();
        let mut cont = Vec::new();
        let mut disc = Vec::new();
        for (j, c) in row.iter().enumerate() {
            if let Some(x) = *c {
                let m = &spec.marginals[j];
                match m.invert(x) {
                    Some(z) => cont.push((j, z)),
                    None => {
                        let (lo, hi) = latent_interval(m, x).ok_or_else(|| Error::TypeMismatch {
                            attribute: spec.schema.attributes[j].id.clone(),
                            message: format!("{x} is not a valid level"),
                        })?;
                        disc.push((j, lo, hi));
                    }
                }
            }
        }
        let sig = |a: usize, b: usize| spec.sigma[a][b];

        // every coordinate given S = continuous + discrete coordinates
        let s: Vec<usize> = cont.iter().map(|c| c.0).chain(disc.iter().map(|d| d.0)).collect();
        let (weights, resid) = if s.is_empty() {
            (DMatrix::zeros(0, p), vec![1.0; p])
        } else {
            let chol = nalgebra::Cholesky::new(DMatrix::from_fn(s.len(), s.len(), |a, b| sig(s[a], s[b])))
                .ok_or(Error::NotPositiveDefinite)?;
            let w = chol.solve(&DMatrix::from_fn(s.len(), p, |a, t| sig(s[a], t)));
            let resid =
                (0..p).map(|t| (1.0 - (0..s.len()).map(|a| w[(a, t)] * sig(s[a], t)).sum::<f64>()).max(0.0)).collect();
            (w, resid)
        };
        let cond_mean = |zs: &[f64], t: usize| (0..zs.len()).map(|a| weights[(a, t)] * zs[a]).sum::<f64>();

        let mut z_s: Vec<f64> = cont.iter().map(|c| c.1).collect();
        let mut out: Vec<CellPosterior>;
        if disc.is_empty() {
            out = (0..p).map(|t| moments_1d(&spec.marginals[t], cond_mean(&z_s, t), resid[t])).collect();
        } else {
            // discrete coordinates given the continuous ones, as a precision matrix
            let d: Vec<usize> = disc.iter().map(|x| x.0).collect();
            let (mu_d, cov_d) = if cont.is_empty() {
                (DVector::zeros(d.len()), DMatrix::from_fn(d.len(), d.len(), |a, b| sig(d[a], d[b])))
            } else {
                let o: Vec<usize> = cont.iter().map(|c| c.0).collect();
                let chol = nalgebra::Cholesky::new(DMatrix::from_fn(o.len(), o.len(), |a, b| sig(o[a], o[b])))
                    .ok_or(Error::NotPositiveDefinite)?;
                let w = chol.solve(&DMatrix::from_fn(o.len(), d.len(), |a, b| sig(o[a], d[b])));
                let z_o = DVector::from_iterator(o.len(), cont.iter().map(|c| c.1));
                let mu = w.transpose() * z_o;
                let cov = DMatrix::from_fn(d.len(), d.len(), |a, b| {
                    sig(d[a], d[b]) - (0..o.len()).map(|k| w[(k, a)] * sig(o[k], d[b])).sum::<f64>()
                });
                (mu, cov)
            };
            let prec = cov_d.try_inverse().ok_or(Error::NotPositiveDefinite)?;
            let mut zd: Vec<f64> = disc
                .iter()
                .map(|&(_, lo, hi)| match (lo.is_finite(), hi.is_finite()) {
                    (true, true) => 0.5 * (lo + hi),
                    (true, false) => lo + 0.5,
                    (false, true) => hi - 0.5,
                    (false, false) => 0.0,
                })
                .collect();
            let mut acc: Vec<CellPosterior> =
                (0..p).map(|_| CellPosterior { mean: 0.0, var: 0.0, probs: None }).collect();
            let mut second = vec![0.0; p];
            let nc = cont.len();
            z_s.resize(nc + d.len(), 0.0);
            for sweep in 0..BURN_IN + self.draws {
                for a in 0..d.len() {
                    let v = 1.0 / prec[(a, a)];
                    let shift: f64 = (0..d.len()).filter(|&b| b != a).map(|b| prec[(a, b)] * (zd[b] - mu_d[b])).sum();
                    let (_, lo, hi) = disc[a];
                    zd[a] = truncated_normal(mu_d[a] - v * shift, v.sqrt(), lo, hi, rng);
                }
                if sweep < BURN_IN {
                    continue;
                }
                z_s[nc..].copy_from_slice(&zd);
                for t in 0..p {
                    let m = moments_1d(&spec.marginals[t], cond_mean(&z_s, t), resid[t]);
                    acc[t].mean += m.mean;
                    second[t] += m.var + m.mean * m.mean;
                    match (&mut acc[t].probs, m.probs) {
                        (Some(sum), Some(pi)) => sum.iter_mut().zip(pi).for_each(|(s, q)| *s += q),
                        (slot @ None, Some(pi)) => *slot = Some(pi),
                        _ => {}
                    }
                }
            }
            let n = self.draws as f64;
            for (t, a) in acc.iter_mut().enumerate() {
                a.mean /= n;
                a.var = (second[t] / n - a.mean * a.mean).max(0.0);
                if let Some(pi) = a.probs.as_mut() {
                    pi.iter_mut().for_each(|q| *q /= n);
                }
            }
            out = acc;
        }
        for (j, c) in row.iter().enumerate() {
            if let Some(x) = *c {
                let probs = spec.marginals[j]
                    .var_type()
                    .num_categories()
                    .map(|k| (1..=k).map(|c| if c as f64 == x { 1.0 } else { 0.0 }).collect());
                out[j] = CellPosterior { mean: x, var: 0.0, probs };
            }
        }
        Ok(out)
    }

    fn posteriors(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<CellPosterior>>> {
        check_row_width(rows, self.spec.p())?;
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                self.posterior(r, &mut rng)
            })
            .collect()
    }
}

impl Imputer for OracleImputer {
    fn schema(&self) -> &DatasetSchema {
        &self.spec.schema
    }

    fn predict(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<DistributionParams>>> {
        let ms = &self.spec.marginals;
        Ok(self
            .posteriors(rows)?
            .into_iter()
            .map(|post| post.iter().zip(ms).map(|(c, m)| c.params(m)).collect())
            .collect())
    }

    fn point_estimates(&self, rows: &[&[Cell]]) -> Result<Vec<Vec<f64>>> {
        let ms = &self.spec.marginals;
        Ok(self
            .posteriors(rows)?
            .into_iter()
            .map(|post| post.iter().zip(ms).map(|(c, m)| c.point(m)).collect())
            .collect())
    }
}
