//! Analytic Gaussian-mixture data with closed-form diffused scores.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Cond;
use crate::error::{invalid, Result};
use crate::rng::standard_normal;
use crate::schedule::NoiseSchedule;
use crate::solver::EpsModel;

/// Isotropic Gaussian mixture with class conditions selecting component subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    /// `conditions[c]` lists the components condition `c` selects.
    pub conditions: Vec<Vec<usize>>,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self::ring(8, 4.0, 0.2)
    }
}

impl GmmSpec {
    /// `modes` equal-weight components evenly spaced on a circle, one
    /// condition per component.
    pub fn ring(modes: usize, radius: f64, std: f64) -> Self {
        let means = (0..modes)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / modes as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Self {
            weights: vec![1.0 / modes as f64; modes],
            means,
            stds: vec![std; modes],
            conditions: (0..modes).map(|i| vec![i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(invalid("mixture needs matching, non-empty weights, means and stds"));
        }
        let dim = self.means[0].len();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return Err(invalid("mixture means must share one positive dimension"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(invalid("mixture weights must be non-negative and sum to 1"));
        }
        if self.stds.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("mixture stds must be positive"));
        }
        for (c, comps) in self.conditions.iter().enumerate() {
            if comps.is_empty() {
                return Err(invalid(format!("condition {c} selects no components")));
            }
            if comps.iter().any(|&i| i >= k) {
                return Err(invalid(format!("condition {c} references a missing component")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i]
    }

    /// Mean distance of the component centers from the origin.
    pub fn ring_radius(&self) -> f64 {
        self.means.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
            / self.num_components() as f64
    }

    /// Components allowed under `c`; the null condition allows all.
    pub fn allowed(&self, c: Cond) -> Result<Vec<usize>> {
        match c {
            None => Ok((0..self.num_components()).collect()),
            Some(i) => self
                .conditions
                .get(i)
                .cloned()
                .ok_or_else(|| invalid(format!("condition {i} outside 0..{}", self.num_conditions()))),
        }
    }

    /// Unnormalized log-weights of the allowed components.
    fn log_weights(&self, comps: &[usize]) -> Vec<f64> {
        let total: f64 = comps.iter().map(|&i| self.weights[i]).sum();
        comps.iter().map(|&i| (self.weights[i] / total).ln()).collect()
    }

    /// Log-density of the diffused marginal `p_t(x | c)`.
    pub fn log_density(&self, schedule: &NoiseSchedule, x: ArrayView1<f64>, t: usize, c: Cond) -> Result<f64> {
        let comps = self.allowed(c)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let dim = self.dim() as f64;
        let terms: Vec<f64> = comps
            .iter()
            .zip(self.log_weights(&comps))
            .map(|(&i, lw)| {
                let v = a * a * self.stds[i].powi(2) + s * s;
                let d2: f64 = x.iter().zip(&self.means[i]).map(|(xv, m)| (xv - a * m).powi(2)).sum();
                lw - 0.5 * dim * (2.0 * PI * v).ln() - d2 / (2.0 * v)
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Responsibilities, component variances and diffused means at `(x, t)`.
    fn posterior(&self, schedule: &NoiseSchedule, x: ArrayView1<f64>, t: usize, comps: &[usize]) -> Vec<(usize, f64, f64)> {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let dim = self.dim() as f64;
        let logs: Vec<f64> = comps
            .iter()
            .zip(self.log_weights(comps))
            .map(|(&i, lw)| {
                let v = a * a * self.stds[i].powi(2) + s * s;
                let d2: f64 = x.iter().zip(&self.means[i]).map(|(xv, m)| (xv - a * m).powi(2)).sum();
                lw - 0.5 * dim * v.ln() - d2 / (2.0 * v)
            })
            .collect();
        let lse = log_sum_exp(&logs);
        comps
            .iter()
            .zip(logs)
            .map(|(&i, l)| (i, (l - lse).exp(), a * a * self.stds[i].powi(2) + s * s))
            .collect()
    }

    /// `∇ₓ log p_t(x | c)`.
    pub fn score(&self, schedule: &NoiseSchedule, x: ArrayView1<f64>, t: usize, c: Cond) -> Result<Vec<f64>> {
        let comps = self.allowed(c)?;
        let a = schedule.alpha(t);
        let mut out = vec![0.0; self.dim()];
        for (i, r, v) in self.posterior(schedule, x, t, &comps) {
            for (d, o) in out.iter_mut().enumerate() {
                *o += r * (a * self.means[i][d] - x[d]) / v;
            }
        }
        Ok(out)
    }

    /// `E[x_0 | x_t, c]`.
    pub fn posterior_mean(&self, schedule: &NoiseSchedule, x: ArrayView1<f64>, t: usize, c: Cond) -> Result<Vec<f64>> {
        let comps = self.allowed(c)?;
        let a = schedule.alpha(t);
        let mut out = vec![0.0; self.dim()];
        for (i, r, v) in self.posterior(schedule, x, t, &comps) {
            let gain = a * self.stds[i].powi(2) / v;
            for (d, o) in out.iter_mut().enumerate() {
                let m = self.means[i][d];
                *o += r * (m + gain * (x[d] - a * m));
            }
        }
        Ok(out)
    }

    /// Draws one point, returning it with the component it came from.
    pub fn sample_one<R: Rng + ?Sized>(&self, c: Cond, rng: &mut R) -> Result<(Vec<f64>, usize)> {
        let comps = self.allowed(c)?;
        if comps.is_empty() {
            return Err(invalid(format!("condition {c:?} selects no component")));
        }
        let total: f64 = comps.iter().map(|&i| self.weights[i]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = *comps.last().unwrap();
        for &i in &comps {
            if u < self.weights[i] {
                pick = i;
                break;
            }
            u -= self.weights[i];
        }
        let point = self.means[pick]
            .iter()
            .map(|m| m + self.stds[pick] * standard_normal(rng))
            .collect();
        Ok((point, pick))
    }

    /// Component whose condition list contains it first, if any.
    pub fn condition_of(&self, component: usize) -> Cond {
        self.conditions.iter().position(|comps| comps.contains(&component))
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `n` i.i.d. draws from the mixture restricted to `c`.
pub fn gmm_sample<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, c: Cond, rng: &mut R) -> Result<Array2<f64>> {
    gmm_sample_conditioned(spec, &vec![c; n], rng)
}

/// One draw per entry of `conds`.
pub fn gmm_sample_conditioned<R: Rng + ?Sized>(spec: &GmmSpec, conds: &[Cond], rng: &mut R) -> Result<Array2<f64>> {
    if conds.is_empty() {
        return Err(invalid("sample count must be >= 1"));
    }
    let mut out = Array2::zeros((conds.len(), spec.dim()));
    for (b, c) in conds.iter().enumerate() {
        let (p, _) = spec.sample_one(*c, rng)?;
        for (d, v) in p.into_iter().enumerate() {
            out[[b, d]] = v;
        }
    }
    Ok(out)
}

/// Draws labelled training data: points plus the condition of their component.
pub fn gmm_sample_labelled<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> Result<(Array2<f64>, Vec<Cond>)> {
    let mut out = Array2::zeros((n, spec.dim()));
    let mut labels = Vec::with_capacity(n);
    for b in 0..n {
        let (p, comp) = spec.sample_one(None, rng)?;
        for (d, v) in p.into_iter().enumerate() {
            out[[b, d]] = v;
        }
        labels.push(spec.condition_of(comp));
    }
    Ok((out, labels))
}

pub fn gmm_score(spec: &GmmSpec, schedule: &NoiseSchedule, x: ArrayView2<f64>, t: &[usize], cond: &[Cond]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for b in 0..x.nrows() {
        schedule.check_timestep(t[b])?;
        let s = spec.score(schedule, x.row(b), t[b], cond[b])?;
        for (d, v) in s.into_iter().enumerate() {
            out[[b, d]] = v;
        }
    }
    Ok(out)
}

/// Bayes-optimal ε-prediction `ε* = −σ(t) ∇ₓ log p_t(x)`.
pub fn gmm_eps_star(spec: &GmmSpec, schedule: &NoiseSchedule, x: ArrayView2<f64>, t: &[usize], cond: &[Cond]) -> Result<Array2<f64>> {
    let mut score = gmm_score(spec, schedule, x, t, cond)?;
    for (b, mut row) in score.rows_mut().into_iter().enumerate() {
        let s = schedule.sigma(t[b]);
        row.mapv_inplace(|v| -s * v);
    }
    Ok(score)
}

/// The exact ε* wrapped as a model; ignores ω (guidance is applied by
/// [`crate::solver::Guided`]).
#[derive(Debug, Clone, Copy)]
pub struct AnalyticTeacher<'a> {
    pub spec: &'a GmmSpec,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> AnalyticTeacher<'a> {
    pub fn new(spec: &'a GmmSpec, schedule: &'a NoiseSchedule) -> Self {
        Self { spec, schedule }
    }
}

impl EpsModel for AnalyticTeacher<'_> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], _omega: &[f64]) -> Result<Array2<f64>> {
        gmm_eps_star(self.spec, self.schedule, x, t, cond)
    }
}
