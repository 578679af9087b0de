//! Two-sample metrics and per-step evaluation reports.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Cond;
use crate::error::{invalid, Result};
use crate::feedback::{reward_oracle, RewardKind};
use crate::oracle::{gmm_sample_conditioned, GmmSpec};
use crate::rng::{derive_seed, normal_matrix, seeded};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::solver::{consistency_sample, ode_endpoint, EpsModel, Guided};

fn check_sets(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(invalid("sample sets need at least two points"));
    }
    if a.ncols() != b.ncols() {
        return Err(invalid("sample sets have different dimensions"));
    }
    Ok(())
}

/// 1-d W2 between two sorted empirical distributions; unequal sizes are
/// handled by integrating the quantile functions exactly.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        return (s / a.len() as f64).sqrt();
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut u, mut acc) = (0, 0, 0.0, 0.0);
    while i < a.len() && j < b.len() {
        let next = ((i + 1) as f64 / na).min((j + 1) as f64 / nb);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if (i + 1) as f64 / na <= u {
            i += 1;
        }
        if (j + 1) as f64 / nb <= u {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Mean over `projections` random unit directions of the 1-d W2 distance
/// between the projected sets.
pub fn sliced_w2<R: Rng + ?Sized>(a: ArrayView2<f64>, b: ArrayView2<f64>, projections: usize, rng: &mut R) -> Result<f64> {
    check_sets(a, b)?;
    if projections == 0 {
        return Err(invalid("need at least one projection"));
    }
    let dim = a.ncols();
    let mut total = 0.0;
    let mut pa = vec![0.0; a.nrows()];
    let mut pb = vec![0.0; b.nrows()];
    for _ in 0..projections {
        let mut u = normal_matrix(rng, 1, dim).row(0).to_owned();
        let norm = u.dot(&u).sqrt();
        u /= norm;
        for (p, row) in pa.iter_mut().zip(a.rows()) {
            *p = row.dot(&u);
        }
        for (p, row) in pb.iter_mut().zip(b.rows()) {
            *p = row.dot(&u);
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += w2_sorted(&pa, &pb);
    }
    Ok(total / projections as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

fn sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise distance over (at most) the first 1024 pooled points.
pub fn median_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let pooled = ndarray::concatenate(Axis(0), &[a, b]).expect("same width");
    let m = pooled.nrows().min(1024);
    // Interleave so both sets are represented when truncating.
    let idx: Vec<usize> = (0..m)
        .map(|k| if k % 2 == 0 { (k / 2).min(a.nrows() - 1) } else { a.nrows() + (k / 2).min(b.nrows() - 1) })
        .collect();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for x in 0..m {
        for y in x + 1..m {
            d.push(sq_dist(pooled.view(), idx[x], pooled.view(), idx[y]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Unbiased MMD² with the kernel `exp(−‖x − y‖² / (2h²))`.
pub fn mmd_rbf(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<f64> {
    check_sets(a, b)?;
    // Fixed argument order keeps the floating-point sum symmetric.
    let (a, b) = if canonical_order(a, b) { (a, b) } else { (b, a) };
    let h = match bandwidth {
        Bandwidth::Median => median_distance(a, b),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) {
        return Err(invalid(format!("kernel bandwidth {h} must be positive")));
    }
    let gamma = 0.5 / (h * h);
    let within = |s: ArrayView2<f64>| {
        let n = s.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += (-gamma * sq_dist(s, i, s, j)).exp();
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            cross += (-gamma * sq_dist(a, i, b, j)).exp();
        }
    }
    cross /= (a.nrows() * b.nrows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

fn canonical_order(a: ArrayView2<f64>, b: ArrayView2<f64>) -> bool {
    if a.nrows() != b.nrows() {
        return a.nrows() < b.nrows();
    }
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o == std::cmp::Ordering::Less,
        }
    }
    true
}

/// Fraction of modes with at least one sample within `multiplier · s_i` of μ_i.
pub fn mode_coverage(samples: ArrayView2<f64>, spec: &GmmSpec, multiplier: f64) -> f64 {
    let covered = (0..spec.num_components())
        .filter(|&i| {
            let mu = spec.mean(i);
            let r2 = (multiplier * spec.stds[i]).powi(2);
            samples
                .rows()
                .into_iter()
                .any(|row| row.iter().zip(mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>() <= r2)
        })
        .count();
    covered as f64 / spec.num_components() as f64
}

/// Conditions cycling through every class, so each class gets `n / C` samples.
pub fn balanced_conditions(spec: &GmmSpec, n: usize) -> Vec<Cond> {
    let c = spec.num_conditions();
    (0..n).map(|i| if c == 0 { None } else { Some(i % c) }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generator: String,
    pub steps: usize,
    pub w2: f64,
    pub mmd: f64,
    pub coverage: f64,
    pub mean_reward: f64,
    pub n: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "generator,steps,w2,mmd,coverage,mean_reward,n,seed";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.6},{:.8},{},{}",
            self.generator, self.steps, self.w2, self.mmd, self.coverage, self.mean_reward, self.n, self.seed
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, reports: &[MetricsReport]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Something that turns noise into samples at a given step count.
pub trait Generator: Sync {
    fn name(&self) -> &str;
    fn generate(&self, steps: usize, z: ArrayView2<f64>, cond: &[Cond], seed: u64) -> Result<Array2<f64>>;
}

/// Multistep consistency sampling of a distilled model.
pub struct ConsistencyGenerator<'a, M: EpsModel> {
    pub name: String,
    pub model: M,
    pub schedule: &'a NoiseSchedule,
    pub omega: f64,
    pub gamma: f64,
}

impl<M: EpsModel> Generator for ConsistencyGenerator<'_, M> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, steps: usize, z: ArrayView2<f64>, cond: &[Cond], seed: u64) -> Result<Array2<f64>> {
        let omega = vec![self.omega; z.nrows()];
        consistency_sample(&self.model, steps, z, cond, &omega, self.schedule, self.gamma, &mut seeded(seed))
    }
}

/// Guided PF-ODE sampling of a teacher.
pub struct OdeGenerator<'a, M: EpsModel> {
    pub name: String,
    pub model: M,
    pub schedule: &'a NoiseSchedule,
    pub omega: f64,
}

impl<M: EpsModel> Generator for OdeGenerator<'_, M> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, steps: usize, z: ArrayView2<f64>, cond: &[Cond], _seed: u64) -> Result<Array2<f64>> {
        let grid = TimestepGrid::inference(self.schedule.total_timesteps(), steps)?;
        let omega: Vec<f64> = cond.iter().map(|c| if c.is_some() { self.omega } else { 1.0 }).collect();
        ode_endpoint(&Guided(&self.model), &grid, z, cond, &omega, self.schedule)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub projections: usize,
    pub coverage_multiplier: f64,
    pub reward: RewardKind,
    pub omega: f64,
    pub gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n: 4096, projections: 128, coverage_multiplier: 3.0, reward: RewardKind::ModeProximity, omega: 1.0, gamma: 1.0 }
    }
}

/// Metrics of a finished sample set against fresh oracle samples.
pub fn score_samples(
    generator: &str,
    steps: usize,
    samples: ArrayView2<f64>,
    cond: &[Cond],
    spec: &GmmSpec,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let reference = gmm_sample_conditioned(spec, cond, &mut seeded(derive_seed(seed, 1)))?;
    let w2 = sliced_w2(samples, reference.view(), config.projections, &mut seeded(derive_seed(seed, 2)))?;
    let mmd = mmd_rbf(samples, reference.view(), Bandwidth::Median)?;
    let rewards = reward_oracle(config.reward, spec, samples, cond)?;
    Ok(MetricsReport {
        generator: generator.to_string(),
        steps,
        w2,
        mmd,
        coverage: mode_coverage(samples, spec, config.coverage_multiplier),
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        n: samples.nrows(),
        seed,
    })
}

/// Samples `config.n` condition-balanced points at every step count and
/// scores them against fresh oracle samples; one report per step count.
///
/// The same initial noise is used at every step count.
pub fn evaluate<G: Generator + ?Sized>(
    generator: &G,
    steps: &[usize],
    spec: &GmmSpec,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let cond = balanced_conditions(spec, config.n);
    let z = normal_matrix(&mut seeded(derive_seed(seed, 0)), config.n, spec.dim());
    let cells: Vec<Result<MetricsReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = steps
            .iter()
            .map(|&k| {
                let (z, cond) = (&z, &cond);
                scope.spawn(move || {
                    let samples = generator.generate(k, z.view(), cond, derive_seed(seed, 100 + k as u64))?;
                    score_samples(generator.name(), k, samples.view(), cond, spec, config, seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    cells.into_iter().collect()
}
