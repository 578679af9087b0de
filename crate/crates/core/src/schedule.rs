//! Noise schedules, timestep grids and segment-boundary arithmetic.
//!
//! Timesteps are integers in `[0, T]`. Index 0 is the clean-data endpoint with
//! `α = 1, σ = 0`; index `T` is the most heavily noised state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// DDPM linear-β schedule, β from 1e-4 to 0.02.
    #[default]
    Linear,
    /// Improved-DDPM cosine schedule with β clipped at 0.999.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Unknown { kind: "schedule family", name: other.to_string() }),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear => f.write_str("linear"),
            Self::Cosine => f.write_str("cosine"),
        }
    }
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Variance-preserving coefficient tables `α(t)`, `σ(t)` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    total_timesteps: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(total_timesteps: usize, kind: ScheduleKind) -> Result<Self> {
        if total_timesteps < 2 {
            return Err(invalid(format!("schedule needs T >= 2, got {total_timesteps}")));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(total_timesteps),
            ScheduleKind::Cosine => cosine_betas(total_timesteps),
        };
        let mut alphas = Vec::with_capacity(total_timesteps + 1);
        let mut sigmas = Vec::with_capacity(total_timesteps + 1);
        alphas.push(1.0);
        sigmas.push(0.0);
        let mut alpha_bar = 1.0;
        for beta in betas {
            alpha_bar *= 1.0 - beta;
            alphas.push(alpha_bar.sqrt());
            sigmas.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self { kind, total_timesteps, alphas, sigmas })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_timesteps(&self) -> usize {
        self.total_timesteps
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.total_timesteps {
            return Err(invalid(format!("timestep {t} outside [0, {}]", self.total_timesteps)));
        }
        Ok(())
    }
}

pub fn build_schedule(total_timesteps: usize, kind: &str) -> Result<NoiseSchedule> {
    NoiseSchedule::new(total_timesteps, kind.parse()?)
}

fn linear_betas(total: usize) -> Vec<f64> {
    let span = LINEAR_BETA_END - LINEAR_BETA_START;
    (0..total)
        .map(|i| LINEAR_BETA_START + span * i as f64 / (total - 1) as f64)
        .collect()
}

fn cosine_betas(total: usize) -> Vec<f64> {
    const OFFSET: f64 = 0.008;
    let f = |t: f64| {
        let x = (t / total as f64 + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    (1..=total)
        .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999))
        .collect()
}

/// Uniform grid `{s, 2s, …, N·s = T}` with skipping-step `s = T / N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    total_timesteps: usize,
    skip: usize,
    points: Vec<usize>,
}

impl TimestepGrid {
    /// Training grid; needs at least two points so that `t_1` exists.
    pub fn new(total_timesteps: usize, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(invalid(format!("training grid needs N >= 2, got {steps}")));
        }
        Self::inference(total_timesteps, steps)
    }

    /// Sampling grid; a single point `{T}` is allowed (one jump to 0).
    pub fn inference(total_timesteps: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        if total_timesteps % steps != 0 {
            return Err(invalid(format!(
                "T = {total_timesteps} is not divisible by N = {steps}"
            )));
        }
        let skip = total_timesteps / steps;
        let points = (1..=steps).map(|n| n * skip).collect();
        Ok(Self { total_timesteps, skip, points })
    }

    pub fn total_timesteps(&self) -> usize {
        self.total_timesteps
    }

    /// Skipping-step `s`.
    pub fn skip(&self) -> usize {
        self.skip
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `t_n` for `n = 0..N`.
    pub fn get(&self, n: usize) -> usize {
        self.points[n]
    }

    /// Ascending timesteps `t_0 < … < t_{N-1} = T`.
    pub fn points(&self) -> &[usize] {
        &self.points
    }

    /// Timesteps from `T` down to `t_0`, the order a sampler visits them.
    pub fn descending(&self) -> impl Iterator<Item = usize> + '_ {
        self.points.iter().rev().copied()
    }
}

pub fn build_grid(total_timesteps: usize, steps: usize) -> Result<TimestepGrid> {
    TimestepGrid::new(total_timesteps, steps)
}

/// Lower edge of the segment containing `t_ref` when `[0, T]` is cut into `k`
/// segments of width `⌊T/k⌋`.
pub fn segment_boundary(t_ref: usize, total_timesteps: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(invalid("segment count must be >= 1"));
    }
    if t_ref > total_timesteps {
        return Err(invalid(format!("t_ref {t_ref} outside [0, {total_timesteps}]")));
    }
    let width = total_timesteps / k;
    if width == 0 {
        return Err(invalid(format!("k = {k} exceeds T = {total_timesteps}")));
    }
    Ok(t_ref / width * width)
}

/// Per-stage segment counts and inference-step counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    k_list: Vec<usize>,
    n_list: Vec<usize>,
}

impl SegmentSchedule {
    pub fn new(k_list: Vec<usize>, n_list: Vec<usize>) -> Result<Self> {
        if k_list.is_empty() {
            return Err(invalid("segment list is empty"));
        }
        if k_list.len() != n_list.len() {
            return Err(invalid(format!(
                "segment list has {} stages but step list has {}",
                k_list.len(),
                n_list.len()
            )));
        }
        if k_list.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(format!("segment counts must strictly decrease: {k_list:?}")));
        }
        if *k_list.last().unwrap() != 1 {
            return Err(invalid(format!("segment counts must end at 1: {k_list:?}")));
        }
        Ok(Self { k_list, n_list })
    }

    pub fn k_list(&self) -> &[usize] {
        &self.k_list
    }

    pub fn n_list(&self) -> &[usize] {
        &self.n_list
    }

    pub fn stages(&self) -> usize {
        self.k_list.len()
    }
}

impl Default for SegmentSchedule {
    fn default() -> Self {
        Self { k_list: vec![8, 4, 2, 1], n_list: vec![50, 50, 50, 50] }
    }
}

/// Timesteps of one segmented-consistency training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTuple {
    pub t_n: usize,
    pub t_prev: usize,
    pub t_boundary: usize,
    pub t_end: usize,
}

/// Draws `t_n` uniformly from `{t_1, …, t_{N-1}}` and `t_end` uniformly from
/// `[t_b, t_{n-1}]` where `t_b` is the segment boundary of `t_{n-1}`.
pub fn sample_training_tuple<R: Rng + ?Sized>(
    grid: &TimestepGrid,
    k: usize,
    rng: &mut R,
) -> Result<TrainingTuple> {
    if grid.len() < 2 {
        return Err(invalid("training grid needs at least two points"));
    }
    let n = rng.random_range(1..grid.len());
    let t_n = grid.get(n);
    let t_prev = grid.get(n - 1);
    let t_boundary = segment_boundary(t_prev, grid.total_timesteps(), k)?;
    let t_end = rng.random_range(t_boundary..=t_prev);
    Ok(TrainingTuple { t_n, t_prev, t_boundary, t_end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn linear_endpoint_and_vp_identity() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        for t in 0..=1000 {
            let a = s.alpha(t);
            let sg = s.sigma(t);
            assert!((a * a + sg * sg - 1.0).abs() < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn linear_terminal_alpha_matches_cumulative_product() {
        // Independent recomputation: ᾱ_T = Π_{i=1..T} (1 - β_i), computed in log space.
        let total = 1000;
        let log_bar: f64 = (1..=total)
            .map(|i| {
                let beta = 1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 999.0;
                (1.0 - beta).ln()
            })
            .sum();
        let expected = (0.5 * log_bar).exp();
        let s = NoiseSchedule::new(total, ScheduleKind::Linear).unwrap();
        assert!((s.alpha(1000) - expected).abs() < 1e-12 * expected.max(1e-3));
        // Known value for the DDPM schedule: ᾱ_T ≈ 4.04e-5.
        assert!((s.alpha(1000).powi(2) - 4.036e-5).abs() < 1e-7);
    }

    #[test]
    fn schedules_are_monotone() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(1000, kind).unwrap();
            for t in 1..=1000 {
                assert!(s.alpha(t) <= s.alpha(t - 1));
                assert!(s.sigma(t) >= s.sigma(t - 1));
                assert!(s.alpha(t) > 0.0);
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Linear).is_err());
        assert!(build_schedule(100, "sigmoid").is_err());
        assert!(build_schedule(100, "cosine").is_ok());
    }

    #[test]
    fn grid_arithmetic() {
        let g = build_grid(1000, 50).unwrap();
        assert_eq!(g.skip(), 20);
        assert_eq!(g.get(0), 20);
        assert_eq!(*g.points().last().unwrap(), 1000);
        assert!(g.points().windows(2).all(|w| w[1] - w[0] == 20));
        assert_eq!(build_grid(1000, 1000).unwrap().skip(), 1);
        assert!(build_grid(1000, 3).is_err());
        assert!(build_grid(1000, 1).is_err());
        assert_eq!(TimestepGrid::inference(1000, 1).unwrap().points(), &[1000]);
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(segment_boundary(300, 1000, 8).unwrap(), 250);
        assert_eq!(segment_boundary(0, 1000, 8).unwrap(), 0);
        assert_eq!(segment_boundary(980, 1000, 1).unwrap(), 0);
        assert!(segment_boundary(10, 1000, 0).is_err());
        assert!(segment_boundary(1001, 1000, 2).is_err());
    }

    #[test]
    fn boundary_matches_brute_force() {
        for k in [1, 2, 4, 8] {
            let width = 1000 / k;
            for t_ref in 0..=1000 {
                let brute = (0..=t_ref).rev().find(|m| m % width == 0).unwrap();
                assert_eq!(segment_boundary(t_ref, 1000, k).unwrap(), brute);
            }
        }
        for t_ref in 0..1000 {
            assert_eq!(segment_boundary(t_ref, 1000, 1).unwrap(), 0);
        }
    }

    #[test]
    fn segment_schedule_invariants() {
        assert_eq!(SegmentSchedule::default().k_list(), &[8, 4, 2, 1]);
        assert!(SegmentSchedule::new(vec![8, 4, 2], vec![50; 3]).is_err());
        assert!(SegmentSchedule::new(vec![4, 4, 1], vec![50; 3]).is_err());
        assert!(SegmentSchedule::new(vec![4, 1], vec![50]).is_err());
        assert!(SegmentSchedule::new(vec![1], vec![50]).is_ok());
    }

    #[test]
    fn tuple_ranges() {
        let grid = build_grid(1000, 50).unwrap();
        let mut rng = seeded(3);
        for _ in 0..5000 {
            let tup = sample_training_tuple(&grid, 8, &mut rng).unwrap();
            assert!(tup.t_boundary <= tup.t_end && tup.t_end <= tup.t_prev);
            assert_eq!(tup.t_n - tup.t_prev, 20);
            let ctm = sample_training_tuple(&grid, 1, &mut rng).unwrap();
            assert_eq!(ctm.t_boundary, 0);
            assert!(ctm.t_end <= ctm.t_n - 20);
        }
    }

    #[test]
    fn start_timestep_is_uniform() {
        // χ² goodness of fit over the 49 admissible starting points.
        let grid = build_grid(1000, 50).unwrap();
        let mut rng = seeded(11);
        let mut counts = [0usize; 50];
        let draws = 10_000;
        for _ in 0..draws {
            let tup = sample_training_tuple(&grid, 8, &mut rng).unwrap();
            counts[tup.t_n / 20 - 1] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 49.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of χ²(48) ≈ 84.0
        assert!(chi2 < 84.0, "chi2 = {chi2}");
    }
}
