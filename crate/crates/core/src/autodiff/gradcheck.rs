//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the per-entry relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, floor: 1e-6 }
    }
}

impl GradCheck {
    /// Max over all entries of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// for a scalar function of several tensor inputs.
    pub fn max_rel_error<F>(&self, f: F, points: &[Tensor]) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars);
        assert_eq!(g.shape(out), [1, 1], "grad_check needs a scalar function");
        let grads = g.backward(out);
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(points)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect();

        let eval = |pts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut worst: f64 = 0.0;
        let mut pts = points.to_vec();
        for t in 0..pts.len() {
            for idx in 0..pts[t].len() {
                let x0 = pts[t].data()[idx];
                pts[t].data_mut()[idx] = x0 + self.step;
                let up = eval(&pts);
                pts[t].data_mut()[idx] = x0 - self.step;
                let down = eval(&pts);
                pts[t].data_mut()[idx] = x0;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[t].data()[idx];
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

/// Max relative error between the reverse-mode gradient of scalar `f` and
/// central differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    GradCheck::default().max_rel_error(|g, v| f(g, v[0]), std::slice::from_ref(point))
}
