//! Per-attribute likelihoods: parameter spaces, densities, modes, samplers,
//! and the encoding that moves raw cells into model space and back.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{sigmoid_scalar, softplus_scalar, Graph, Tensor, Var, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::schema::{Cell, ColumnStats, DatasetSchema, TrainStats, VarKind, VariableType};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bound on the Poisson log-rate; beyond it the rate is clamped and the
/// gradient through it is zero.
const MAX_LOG_RATE: f64 = 40.0;

/// Distribution parameters in raw units. Positive-valued attributes carry
/// the location and variance of `ln x`; ordinal thresholds are the
/// increasing cut points on the logistic scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistributionParams {
    Real { mu: f64, sigma2: f64 },
    Positive { mu: f64, sigma2: f64 },
    Count { lambda: f64 },
    Categorical { pi: Vec<f64> },
    Ordinal { thresholds: Vec<f64> },
}

/// `r'_k = sum_{i<=k} softplus(r_i) - h`.
pub fn ordinal_thresholds(r: &[f64], h: f64) -> Vec<f64> {
    let mut acc = 0.0;
    r.iter()
        .map(|&ri| {
            acc += softplus_scalar(ri);
            acc - h
        })
        .collect()
}

/// `ln sigma(x)`, stable on both tails.
fn ln_sigmoid(x: f64) -> f64 {
    -softplus_scalar(-x)
}

/// Log mass of class `k` (0-based) under cumulative-logit thresholds.
/// Uses `sigma(a) - sigma(b) = sigma(a) sigma(-b) (1 - e^{b-a})` to avoid
/// cancellation when both cut points sit far in the same tail.
fn ordinal_log_mass(thresholds: &[f64], k: usize) -> f64 {
    let c = thresholds.len() + 1;
    let upper = (k + 1 < c).then(|| thresholds[k]);
    let lower = (k > 0).then(|| thresholds[k - 1]);
    match (upper, lower) {
        (Some(a), None) => ln_sigmoid(a),
        (None, Some(b)) => ln_sigmoid(-b),
        (Some(a), Some(b)) => ln_sigmoid(a) + ln_sigmoid(-b) + (-(b - a).exp_m1()).ln(),
        (None, None) => 0.0,
    }
}

/// Class probabilities implied by ordinal thresholds.
pub fn ordinal_probs(thresholds: &[f64]) -> Vec<f64> {
    let c = thresholds.len() + 1;
    (0..c).map(|k| ordinal_log_mass(thresholds, k).exp()).collect()
}

fn class_index(x: f64, c: usize) -> Option<usize> {
    (x.fract() == 0.0 && x >= 1.0 && x <= c as f64).then(|| x as usize - 1)
}

fn argmax(xs: &[f64]) -> usize {
    // First maximum wins ties.
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw_class<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl DistributionParams {
    pub fn kind(&self) -> VarKind {
        match self {
            Self::Real { .. } => VarKind::Real,
            Self::Positive { .. } => VarKind::Positive,
            Self::Count { .. } => VarKind::Count,
            Self::Categorical { .. } => VarKind::Categorical,
            Self::Ordinal { .. } => VarKind::Ordinal,
        }
    }

    pub fn ordinal(r: &[f64], h: f64) -> Self {
        Self::Ordinal { thresholds: ordinal_thresholds(r, h) }
    }

    /// Checks the parameter-space constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TypeMismatch { attribute: self.kind().as_str().into(), message: m.into() });
        match self {
            Self::Real { mu, sigma2 } | Self::Positive { mu, sigma2 } => {
                if !mu.is_finite() || !(*sigma2 > 0.0) || !sigma2.is_finite() {
                    return bad("needs finite mu and sigma2 > 0");
                }
            }
            Self::Count { lambda } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return bad("needs lambda > 0");
                }
            }
            Self::Categorical { pi } => {
                if pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
                    return bad("pi must lie on the simplex");
                }
            }
            Self::Ordinal { thresholds } => {
                if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("thresholds must be finite and strictly increasing");
                }
            }
        }
        Ok(())
    }

    /// Class probabilities for the discrete heads.
    pub fn class_probs(&self) -> Option<Vec<f64>> {
        match self {
            Self::Categorical { pi } => Some(pi.clone()),
            Self::Ordinal { thresholds } => Some(ordinal_probs(thresholds)),
            _ => None,
        }
    }

    /// Log density (continuous) or log mass (discrete) of a raw value.
    pub fn log_prob(&self, x: f64) -> Result<f64> {
        let mismatch = |m: String| Error::TypeMismatch { attribute: self.kind().as_str().into(), message: m };
        if !x.is_finite() {
            return Err(mismatch(format!("value {x} is not finite")));
        }
        Ok(match self {
            Self::Real { mu, sigma2 } => -0.5 * (LN_2PI + sigma2.ln() + (x - mu).powi(2) / sigma2),
            Self::Positive { mu, sigma2 } => {
                if x <= 0.0 {
                    return Err(mismatch(format!("positive attribute got {x}")));
                }
                let lx = x.ln();
                -lx - 0.5 * (LN_2PI + sigma2.ln() + (lx - mu).powi(2) / sigma2)
            }
            Self::Count { lambda } => {
                if x < 0.0 || x.fract() != 0.0 {
                    return Err(mismatch(format!("count attribute got {x}")));
                }
                -lambda + x * lambda.ln() - ln_gamma(x + 1.0)
            }
            Self::Categorical { pi } => {
                let k =
                    class_index(x, pi.len()).ok_or_else(|| mismatch(format!("class {x} outside 1..={}", pi.len())))?;
                pi[k].ln()
            }
            Self::Ordinal { thresholds } => {
                let c = thresholds.len() + 1;
                let k = class_index(x, c).ok_or_else(|| mismatch(format!("class {x} outside 1..={c}")))?;
                ordinal_log_mass(thresholds, k)
            }
        })
    }

    /// Point estimate: the most probable value. Classes are 1-based.
    pub fn mode(&self) -> f64 {
        match self {
            Self::Real { mu, .. } => *mu,
            Self::Positive { mu, sigma2 } => (mu - sigma2).exp(),
            // Integer rates tie between lambda - 1 and lambda; take lambda.
            Self::Count { lambda } => lambda.floor(),
            Self::Categorical { pi } => (argmax(pi) + 1) as f64,
            Self::Ordinal { thresholds } => (argmax(&ordinal_probs(thresholds)) + 1) as f64,
        }
    }

    /// Expected value; classes count from 1.
    pub fn mean(&self) -> f64 {
        let expect = |p: &[f64]| p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        match self {
            Self::Real { mu, .. } => *mu,
            Self::Positive { mu, sigma2 } => (mu + 0.5 * sigma2).exp(),
            Self::Count { lambda } => *lambda,
            Self::Categorical { pi } => expect(pi),
            Self::Ordinal { thresholds } => expect(&ordinal_probs(thresholds)),
        }
    }

    pub fn variance(&self) -> f64 {
        let spread = |p: &[f64]| {
            let m: f64 = p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
            p.iter().enumerate().map(|(i, p)| p * ((i + 1) as f64 - m).powi(2)).sum()
        };
        match self {
            Self::Real { sigma2, .. } => *sigma2,
            Self::Positive { mu, sigma2 } => sigma2.exp_m1() * (2.0 * mu + sigma2).exp(),
            Self::Count { lambda } => *lambda,
            Self::Categorical { pi } => spread(pi),
            Self::Ordinal { thresholds } => spread(&ordinal_probs(thresholds)),
        }
    }

    /// Ordinal parameters with the given class masses, lightly smoothed so
    /// every threshold stays finite and strictly increasing.
    pub fn ordinal_from_probs(probs: &[f64]) -> Self {
        const EPS: f64 = 1e-6;
        let c = probs.len() as f64;
        let mut acc = 0.0;
        let thresholds = probs[..probs.len() - 1]
            .iter()
            .map(|&q| {
                acc += (q + EPS) / (1.0 + c * EPS);
                (acc / (1.0 - acc)).ln()
            })
            .collect();
        Self::Ordinal { thresholds }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Real { mu, sigma2 } => {
                let e: f64 = StandardNormal.sample(rng);
                mu + sigma2.sqrt() * e
            }
            Self::Positive { mu, sigma2 } => {
                let e: f64 = StandardNormal.sample(rng);
                (mu + sigma2.sqrt() * e).exp()
            }
            Self::Count { lambda } => Poisson::new(*lambda).map(|d| d.sample(rng)).unwrap_or(lambda.round()),
            Self::Categorical { pi } => (draw_class(pi, rng) + 1) as f64,
            Self::Ordinal { thresholds } => (draw_class(&ordinal_probs(thresholds), rng) + 1) as f64,
        }
    }
}

/// Maps model-space parameters to raw units. Discrete heads pass through.
pub fn denormalize(params: &DistributionParams, stats: &ColumnStats) -> DistributionParams {
    use DistributionParams as P;
    match (params, stats) {
        (P::Real { mu, sigma2 }, ColumnStats::Real { mean, std }) => {
            P::Real { mu: mu * std + mean, sigma2: (sigma2 * std * std).max(VARIANCE_FLOOR) }
        }
        (P::Positive { mu, sigma2 }, ColumnStats::Positive { log_mean, log_std }) => {
            P::Positive { mu: mu * log_std + log_mean, sigma2: (sigma2 * log_std * log_std).max(VARIANCE_FLOOR) }
        }
        (P::Count { lambda }, ColumnStats::Count { log1p_mean, log1p_std, .. }) => {
            P::Count { lambda: (log1p_mean + log1p_std * lambda.ln()).exp() }
        }
        _ => params.clone(),
    }
}

/// Inverse of [`denormalize`] (exact while the raw variance floor is inactive).
pub fn normalize(params: &DistributionParams, stats: &ColumnStats) -> DistributionParams {
    use DistributionParams as P;
    match (params, stats) {
        (P::Real { mu, sigma2 }, ColumnStats::Real { mean, std }) => {
            P::Real { mu: (mu - mean) / std, sigma2: sigma2 / (std * std) }
        }
        (P::Positive { mu, sigma2 }, ColumnStats::Positive { log_mean, log_std }) => {
            P::Positive { mu: (mu - log_mean) / log_std, sigma2: sigma2 / (log_std * log_std) }
        }
        (P::Count { lambda }, ColumnStats::Count { log1p_mean, log1p_std, .. }) => {
            P::Count { lambda: ((lambda.ln() - log1p_mean) / log1p_std).exp() }
        }
        _ => params.clone(),
    }
}

/// Width of the network output that parameterizes an attribute.
pub fn head_dim(t: VariableType) -> usize {
    match t {
        VariableType::Real | VariableType::Positive => 2,
        VariableType::Count => 1,
        VariableType::Categorical(c) => c,
        // c - 1 raw increments plus the shift h
        VariableType::Ordinal(c) => c,
    }
}

/// Width of an attribute's input encoding.
pub fn enc_dim(t: VariableType) -> usize {
    match t {
        VariableType::Real | VariableType::Positive | VariableType::Count => 1,
        VariableType::Categorical(c) => c,
        VariableType::Ordinal(c) => c - 1,
    }
}

/// One attribute's likelihood head together with its training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnHead {
    pub var_type: VariableType,
    pub stats: ColumnStats,
}

impl ColumnHead {
    pub fn new(var_type: VariableType, stats: ColumnStats) -> Result<Self> {
        let ok = var_type.kind() == stats.kind()
            && match &stats {
                ColumnStats::Categorical { probs } | ColumnStats::Ordinal { probs } => {
                    Some(probs.len()) == var_type.num_categories()
                }
                _ => true,
            };
        if !ok {
            return Err(Error::StatsSchemaMismatch(format!("{:?} stats for a {:?} attribute", stats.kind(), var_type)));
        }
        Ok(Self { var_type, stats })
    }

    pub fn out_dim(&self) -> usize {
        head_dim(self.var_type)
    }

    pub fn enc_dim(&self) -> usize {
        enc_dim(self.var_type)
    }

    /// Scalar model-space value of an observed raw cell: a standardized
    /// number for continuous attributes.
    pub fn standardize(&self, x: f64) -> f64 {
        match &self.stats {
            ColumnStats::Real { mean, std } => (x - mean) / std,
            ColumnStats::Positive { log_mean, log_std } => (x.ln() - log_mean) / log_std,
            ColumnStats::Count { log1p_mean, log1p_std, .. } => (x.ln_1p() - log1p_mean) / log1p_std,
            ColumnStats::Categorical { .. } | ColumnStats::Ordinal { .. } => x,
        }
    }

    /// Training target in the units the fused loss expects: standardized
    /// value for Real/Positive, raw count for Count, 0-based class otherwise.
    pub fn target(&self, x: f64) -> f64 {
        match self.var_type {
            VariableType::Real | VariableType::Positive => self.standardize(x),
            VariableType::Count => x,
            VariableType::Categorical(_) | VariableType::Ordinal(_) => x - 1.0,
        }
    }

    /// Writes the input encoding of a cell; missing cells get the fill value.
    pub fn encode(&self, cell: Cell, dst: &mut [f64]) {
        debug_assert_eq!(dst.len(), self.enc_dim());
        match (&self.stats, cell) {
            (ColumnStats::Categorical { .. }, Some(x)) => {
                dst.fill(0.0);
                dst[x as usize - 1] = 1.0;
            }
            (ColumnStats::Categorical { probs }, None) => dst.copy_from_slice(probs),
            (ColumnStats::Ordinal { .. }, Some(x)) => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = if x > (k + 1) as f64 { 1.0 } else { 0.0 };
                }
            }
            (ColumnStats::Ordinal { probs }, None) => {
                // Expected thermometer: coordinate k is P(x > k).
                let mut tail: f64 = probs.iter().sum();
                for (k, d) in dst.iter_mut().enumerate() {
                    tail -= probs[k];
                    *d = tail.max(0.0);
                }
            }
            (ColumnStats::Count { mean, .. }, None) => dst[0] = self.standardize(*mean),
            (_, Some(x)) => dst[0] = self.standardize(x),
            (_, None) => dst[0] = 0.0,
        }
    }

    /// Model-space parameters from one row of head output.
    pub fn model_params(&self, out: &[f64]) -> DistributionParams {
        debug_assert_eq!(out.len(), self.out_dim());
        match self.var_type {
            VariableType::Real => {
                DistributionParams::Real { mu: out[0], sigma2: softplus_scalar(out[1]) + VARIANCE_FLOOR }
            }
            VariableType::Positive => {
                DistributionParams::Positive { mu: out[0], sigma2: softplus_scalar(out[1]) + VARIANCE_FLOOR }
            }
            VariableType::Count => DistributionParams::Count { lambda: out[0].exp() },
            VariableType::Categorical(_) => {
                let mut pi = out.to_vec();
                crate::autodiff::softmax_in_place(&mut pi);
                DistributionParams::Categorical { pi }
            }
            VariableType::Ordinal(c) => DistributionParams::ordinal(&out[..c - 1], out[c - 1]),
        }
    }

    /// Raw-unit parameters from one row of head output.
    pub fn params(&self, out: &[f64]) -> DistributionParams {
        match self.var_type {
            // Routed through the log-rate directly so the clamp matches the loss.
            VariableType::Count => {
                let (log_rate, _) = self.count_log_rate(out[0]);
                DistributionParams::Count { lambda: log_rate.exp() }
            }
            _ => denormalize(&self.model_params(out), &self.stats),
        }
    }

    fn count_log_rate(&self, eta: f64) -> (f64, f64) {
        let ColumnStats::Count { log1p_mean, log1p_std, .. } = self.stats else {
            unreachable!("count head with non-count stats")
        };
        let lr = log1p_mean + log1p_std * eta;
        if lr > MAX_LOG_RATE {
            (MAX_LOG_RATE, 0.0)
        } else if lr < -MAX_LOG_RATE {
            (-MAX_LOG_RATE, 0.0)
        } else {
            (lr, log1p_std)
        }
    }

    /// Negative log-likelihood of a target (see [`ColumnHead::target`]) under
    /// one row of head output, optionally writing its gradient. Continuous
    /// heads are scored on the standardized scale.
    pub fn nll(&self, out: &[f64], target: f64, grad: Option<&mut [f64]>) -> f64 {
        match self.var_type {
            VariableType::Real | VariableType::Positive => {
                let mu = out[0];
                let s2 = softplus_scalar(out[1]) + VARIANCE_FLOOR;
                let d = target - mu;
                if let Some(g) = grad {
                    g[0] = -d / s2;
                    let ds2 = 0.5 / s2 - 0.5 * d * d / (s2 * s2);
                    g[1] = ds2 * sigmoid_scalar(out[1]);
                }
                0.5 * (LN_2PI + s2.ln() + d * d / s2)
            }
            VariableType::Count => {
                let (lr, dlr) = self.count_log_rate(out[0]);
                let lambda = lr.exp();
                if let Some(g) = grad {
                    g[0] = (lambda - target) * dlr;
                }
                lambda - target * lr + ln_gamma(target + 1.0)
            }
            VariableType::Categorical(_) => {
                let k = target as usize;
                let lse = crate::autodiff::log_sum_exp(out);
                if let Some(g) = grad {
                    for (gi, &o) in g.iter_mut().zip(out) {
                        *gi = (o - lse).exp();
                    }
                    g[k] -= 1.0;
                }
                lse - out[k]
            }
            VariableType::Ordinal(c) => {
                let k = target as usize;
                let r = &out[..c - 1];
                let th = ordinal_thresholds(r, out[c - 1]);
                let nll = -ordinal_log_mass(&th, k);
                if let Some(g) = grad {
                    let upper = (k + 1 < c).then(|| th[k]);
                    let lower = (k > 0).then(|| th[k - 1]);
                    // d nll / d upper threshold, d nll / d lower threshold
                    let (ga, gb) = match (upper, lower) {
                        (Some(a), None) => (-sigmoid_scalar(-a), 0.0),
                        (None, Some(b)) => (0.0, sigmoid_scalar(b)),
                        (Some(a), Some(b)) => {
                            let cross = 1.0 / (a - b).exp_m1();
                            (-sigmoid_scalar(-a) - cross, sigmoid_scalar(b) + cross)
                        }
                        (None, None) => (0.0, 0.0),
                    };
                    for (i, gi) in g[..c - 1].iter_mut().enumerate() {
                        let mut acc = 0.0;
                        if i <= k && k + 1 < c {
                            acc += ga;
                        }
                        if k > 0 && i < k {
                            acc += gb;
                        }
                        *gi = acc * sigmoid_scalar(r[i]);
                    }
                    g[c - 1] = -ga - gb;
                }
                nll
            }
        }
    }

    /// Differentiable `sum_i nll(out[rows[i]], targets[i])` as a 1x1 node.
    pub fn nll_sum(&self, g: &mut Graph, out: Var, rows: Vec<usize>, targets: Vec<f64>) -> Var {
        assert_eq!(rows.len(), targets.len());
        let ov = g.value(out);
        assert_eq!(ov.cols(), self.out_dim(), "head output width");
        let (n, w) = (ov.rows(), ov.cols());
        let mut total = 0.0;
        let mut grad = Tensor::zeros(n, w);
        let mut scratch = vec![0.0; w];
        for (&r, &t) in rows.iter().zip(&targets) {
            total += self.nll(ov.row(r), t, Some(&mut scratch));
            for (d, s) in grad.row_mut(r).iter_mut().zip(&scratch) {
                *d += s;
            }
        }
        g.custom(&[out], Tensor::scalar(total), move |up, _, _| {
            let mut gr = grad.clone();
            gr.scale_in_place(up.item());
            vec![Some(gr)]
        })
    }
}

/// Input encoder and head bank for a whole schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub heads: Vec<ColumnHead>,
    enc_offsets: Vec<usize>,
    enc_width: usize,
}

impl Codec {
    pub fn new(schema: &DatasetSchema, stats: &TrainStats) -> Result<Self> {
        stats.check_schema(schema)?;
        let heads = schema
            .attributes
            .iter()
            .zip(&stats.columns)
            .map(|(a, s)| ColumnHead::new(a.var_type, s.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut enc_offsets = Vec::with_capacity(heads.len());
        let mut enc_width = 0;
        for h in &heads {
            enc_offsets.push(enc_width);
            enc_width += h.enc_dim();
        }
        Ok(Self { heads, enc_offsets, enc_width })
    }

    pub fn n_attrs(&self) -> usize {
        self.heads.len()
    }

    /// Encoded values followed by one observed flag per attribute.
    pub fn input_width(&self) -> usize {
        self.enc_width + self.heads.len()
    }

    pub fn enc_offset(&self, j: usize) -> usize {
        self.enc_offsets[j]
    }

    /// Encodes one row. `visible[j] == false` hides an observed cell so it is
    /// encoded exactly like a missing one.
    pub fn encode_row(&self, row: &[Cell], visible: Option<&[bool]>, dst: &mut [f64]) {
        let p = self.heads.len();
        debug_assert_eq!(row.len(), p);
        debug_assert_eq!(dst.len(), self.input_width());
        for (j, head) in self.heads.iter().enumerate() {
            let cell = row[j].filter(|_| visible.is_none_or(|v| v[j]));
            let off = self.enc_offsets[j];
            head.encode(cell, &mut dst[off..off + head.enc_dim()]);
            dst[self.enc_width + j] = if cell.is_some() { 1.0 } else { 0.0 };
        }
    }

    /// Stacks encoded rows; `visible` is row-major `n x p` when given.
    pub fn encode_rows<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [Cell]>, visible: Option<&[bool]>) -> Tensor {
        let p = self.heads.len();
        let mut out = Tensor::zeros(rows.len(), self.input_width());
        for (i, row) in rows.enumerate() {
            let vis = visible.map(|v| &v[i * p..(i + 1) * p]);
            self.encode_row(row, vis, out.row_mut(i));
        }
        out
    }
}

/// Encodes one row against training statistics; returns the numeric input
/// vector (values then flags) and the observed flags.
pub fn preprocess_row(row: &[Cell], stats: &TrainStats, schema: &DatasetSchema) -> Result<(Vec<f64>, Vec<bool>)> {
    let codec = Codec::new(schema, stats)?;
    if row.len() != schema.len() {
        return Err(Error::DimensionMismatch { expected: schema.len(), got: row.len() });
    }
    let mut out = vec![0.0; codec.input_width()];
    codec.encode_row(row, None, &mut out);
    Ok((out, row.iter().map(Option::is_some).collect()))
}
