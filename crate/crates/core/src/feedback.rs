//! Reward oracles, synthetic preference pairs, a learned reward model and
//! reward-feedback fine-tuning of a student through a low-rank adapter.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{pred_x0, Cond, LoraAdapter, Student, Tape};
use crate::error::{invalid, Error, Result};
use crate::nn::{Mlp, Parameters, Scalar};
use crate::optim::{Optimizer, OptimizerKind};
use crate::oracle::{gmm_sample_conditioned, GmmSpec};
use crate::rng::{derive_seed, normal_matrix, seeded, standard_normal};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::solver::{ode_endpoint, psi_step, EpsModel, Guided};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    ModeProximity,
    ManifoldMembership,
    Learned,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode_proximity" => Ok(Self::ModeProximity),
            "manifold_membership" => Ok(Self::ManifoldMembership),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Unknown { kind: "reward", name: other.to_string() }),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ModeProximity => "mode_proximity",
            Self::ManifoldMembership => "manifold_membership",
            Self::Learned => "learned",
        })
    }
}

/// A differentiable scalar reward on `(x, c)`.
pub trait RewardFn {
    fn reward(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<Vec<f64>>;
    /// Rewards together with `∂r_b/∂x_b` per row.
    fn reward_and_grad(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<(Vec<f64>, Array2<f64>)>;
}

fn check_rows(x: ArrayView2<f64>, cond: &[Cond], dim: usize) -> Result<()> {
    if x.nrows() != cond.len() || x.ncols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "reward batch {:?} with {} conditions for dimension {dim}",
            x.shape(),
            cond.len()
        )));
    }
    Ok(())
}

/// Analytic reward. `mode_proximity` is `−min_i ‖x − μ_i‖²` over the modes
/// `c` allows; `manifold_membership` is `−(‖x‖ − R)²`.
pub fn reward_oracle(kind: RewardKind, spec: &GmmSpec, x: ArrayView2<f64>, cond: &[Cond]) -> Result<Vec<f64>> {
    Ok(reward_oracle_grad(kind, spec, x, cond)?.0)
}

pub fn reward_oracle_grad(kind: RewardKind, spec: &GmmSpec, x: ArrayView2<f64>, cond: &[Cond]) -> Result<(Vec<f64>, Array2<f64>)> {
    check_rows(x, cond, spec.dim())?;
    let n = x.nrows();
    let mut rewards = Vec::with_capacity(n);
    let mut grad = Array2::zeros(x.raw_dim());
    match kind {
        RewardKind::ModeProximity => {
            for b in 0..n {
                let comps = spec.allowed(cond[b])?;
                let (best, d2) = comps
                    .iter()
                    .map(|&i| (i, x.row(b).iter().zip(spec.mean(i)).map(|(v, m)| (v - m).powi(2)).sum::<f64>()))
                    .fold((comps[0], f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
                rewards.push(-d2);
                for d in 0..x.ncols() {
                    grad[[b, d]] = -2.0 * (x[[b, d]] - spec.mean(best)[d]);
                }
            }
        }
        RewardKind::ManifoldMembership => {
            let radius = spec.ring_radius();
            for b in 0..n {
                let norm = x.row(b).dot(&x.row(b)).sqrt();
                rewards.push(-(norm - radius).powi(2));
                if norm > 0.0 {
                    for d in 0..x.ncols() {
                        grad[[b, d]] = -2.0 * (norm - radius) * x[[b, d]] / norm;
                    }
                }
            }
        }
        RewardKind::Learned => return Err(invalid("the learned reward needs a trained model")),
    }
    Ok((rewards, grad))
}

/// An analytic reward head bound to a mixture.
#[derive(Debug, Clone, Copy)]
pub struct OracleReward<'a> {
    pub kind: RewardKind,
    pub spec: &'a GmmSpec,
}

impl RewardFn for OracleReward<'_> {
    fn reward(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<Vec<f64>> {
        reward_oracle(self.kind, self.spec, x, cond)
    }

    fn reward_and_grad(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<(Vec<f64>, Array2<f64>)> {
        reward_oracle_grad(self.kind, self.spec, x, cond)
    }
}

// --- preference pairs ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub cond: Cond,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
    /// `r(x_w) − r(x_l) > 0`
    pub margin: f64,
}

/// Candidates from the mixture blurred by isotropic noise of std `noise`.
pub fn noisy_gmm_sampler<R: Rng + ?Sized>(spec: &GmmSpec, noise: f64) -> impl FnMut(Cond, &mut R) -> Result<Vec<f64>> + '_ {
    move |c, rng| {
        let (mut p, _) = spec.sample_one(c, rng)?;
        for v in p.iter_mut() {
            *v += noise * standard_normal(rng);
        }
        Ok(p)
    }
}

/// Draws `n` candidate pairs under uniformly chosen conditions and orders each
/// by the oracle. Tied pairs are discarded and redrawn.
pub fn gen_preference_pairs<R: Rng + ?Sized, S>(
    spec: &GmmSpec,
    kind: RewardKind,
    mut sampler: S,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PreferencePair>>
where
    S: FnMut(Cond, &mut R) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(invalid("pair count must be >= 1"));
    }
    let conditions = spec.num_conditions();
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pairs.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(invalid("sampler keeps producing ties"));
        }
        let c = if conditions == 0 { None } else { Some(rng.random_range(0..conditions)) };
        let a = sampler(c, rng)?;
        let b = sampler(c, rng)?;
        let x = Array2::from_shape_fn((2, a.len()), |(i, d)| if i == 0 { a[d] } else { b[d] });
        let r = reward_oracle(kind, spec, x.view(), &[c, c])?;
        if r[0] == r[1] || !r[0].is_finite() || !r[1].is_finite() {
            continue;
        }
        let (x_w, x_l, margin) = if r[0] > r[1] { (a, b, r[0] - r[1]) } else { (b, a, r[1] - r[0]) };
        pairs.push(PreferencePair { cond: c, x_w, x_l, margin });
    }
    Ok(pairs)
}

/// One pair per line: `cond x_w… x_l… margin`, with `-` for the null condition.
pub fn write_pairs<W: Write>(mut out: W, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        match p.cond {
            Some(c) => write!(out, "{c}")?,
            None => write!(out, "-")?,
        }
        for v in p.x_w.iter().chain(&p.x_l) {
            write!(out, " {v:e}")?;
        }
        writeln!(out, " {:e}", p.margin)?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(input: R) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format(format!("pair line {}: {msg}", no + 1));
        if tokens.len() < 4 || (tokens.len() - 2) % 2 != 0 {
            return Err(bad("expected cond, two points of equal dimension and a margin"));
        }
        let cond = match tokens[0] {
            "-" => None,
            s => Some(s.parse::<usize>().map_err(|_| bad("condition is not an index"))?),
        };
        let nums: Vec<f64> = tokens[1..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad("number expected")))
            .collect::<Result<_>>()?;
        let dim = (nums.len() - 1) / 2;
        let margin = nums[2 * dim];
        if !(margin > 0.0) {
            return Err(bad("margin must be positive"));
        }
        pairs.push(PreferencePair { cond, x_w: nums[..dim].to_vec(), x_l: nums[dim..2 * dim].to_vec(), margin });
    }
    Ok(pairs)
}

// --- learned reward ---------------------------------------------------------------

/// `r_θ(x, c)`: an MLP on `[x, one-hot(c)]`, null condition last.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: Mlp<f64>,
    pub data_dim: usize,
    pub num_classes: usize,
}

impl RewardModel {
    pub fn init<R: Rng + ?Sized>(data_dim: usize, num_classes: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![data_dim + num_classes + 1];
        sizes.extend(hidden);
        sizes.push(1);
        Self { net: Mlp::init(&sizes, rng), data_dim, num_classes }
    }

    fn features(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<Array2<f64>> {
        check_rows(x, cond, self.data_dim)?;
        let mut f = Array2::zeros((x.nrows(), self.data_dim + self.num_classes + 1));
        for b in 0..x.nrows() {
            for d in 0..self.data_dim {
                f[[b, d]] = x[[b, d]];
            }
            let slot = match cond[b] {
                Some(c) if c < self.num_classes => c,
                Some(c) => return Err(invalid(format!("condition {c} outside 0..{}", self.num_classes))),
                None => self.num_classes,
            };
            f[[b, self.data_dim + slot]] = 1.0;
        }
        Ok(f)
    }

    /// Scores of `x_w` and `x_l` for every pair.
    pub fn score_pairs(&self, pairs: &[PreferencePair]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (w, l, c) = stack_pairs(pairs, self.data_dim)?;
        Ok((self.reward(w.view(), &c)?, self.reward(l.view(), &c)?))
    }
}

impl Parameters<f64> for RewardModel {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

impl RewardFn for RewardModel {
    fn reward(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<Vec<f64>> {
        let f = self.features(x, cond)?;
        Ok(self.net.forward(f.view()).column(0).to_vec())
    }

    fn reward_and_grad(&self, x: ArrayView2<f64>, cond: &[Cond]) -> Result<(Vec<f64>, Array2<f64>)> {
        let f = self.features(x, cond)?;
        let (out, cache) = self.net.forward_cached(f.view());
        let mut scratch = self.net.zeros_like();
        let gin = self.net.backward(&cache, Array2::ones((x.nrows(), 1)).view(), &mut scratch);
        Ok((out.column(0).to_vec(), gin.slice(ndarray::s![.., ..self.data_dim]).to_owned()))
    }
}

fn stack_pairs(pairs: &[PreferencePair], dim: usize) -> Result<(Array2<f64>, Array2<f64>, Vec<Cond>)> {
    if pairs.iter().any(|p| p.x_w.len() != dim || p.x_l.len() != dim) {
        return Err(Error::ShapeMismatch("preference pair dimension".into()));
    }
    let w = Array2::from_shape_fn((pairs.len(), dim), |(b, d)| pairs[b].x_w[d]);
    let l = Array2::from_shape_fn((pairs.len(), dim), |(b, d)| pairs[b].x_l[d]);
    Ok((w, l, pairs.iter().map(|p| p.cond).collect()))
}

fn log_sigmoid_neg(z: f64) -> f64 {
    // −log σ(z) = softplus(−z)
    if z < 0.0 {
        -z + z.exp().ln_1p()
    } else {
        (-z).exp().ln_1p()
    }
}

/// `mean −log σ(r_θ(c, x_w) − r_θ(c, x_l))` and its parameter gradient.
pub fn reward_model_loss(model: &RewardModel, pairs: &[PreferencePair]) -> Result<(f64, RewardModel)> {
    if pairs.is_empty() {
        return Err(invalid("reward loss needs at least one pair"));
    }
    let (w, l, c) = stack_pairs(pairs, model.data_dim)?;
    let fw = model.features(w.view(), &c)?;
    let fl = model.features(l.view(), &c)?;
    let (rw, cw) = model.net.forward_cached(fw.view());
    let (rl, cl) = model.net.forward_cached(fl.view());
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut seed = Array2::zeros((pairs.len(), 1));
    for b in 0..pairs.len() {
        let z = rw[[b, 0]] - rl[[b, 0]];
        loss += log_sigmoid_neg(z);
        seed[[b, 0]] = -(crate::nn::sigmoid(-z)) / n;
    }
    let mut grads = RewardModel { net: model.net.zeros_like(), ..model.clone() };
    model.net.backward(&cw, seed.view(), &mut grads.net);
    let neg = seed.mapv(|v| -v);
    model.net.backward(&cl, neg.view(), &mut grads.net);
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    /// Preference pairs to generate.
    pub pairs: usize,
    /// Oracle that orders each pair.
    pub oracle: RewardKind,
    /// Std of the blur applied to mixture samples to form candidates.
    pub candidate_noise: f64,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            pairs: 4096,
            oracle: RewardKind::ModeProximity,
            candidate_noise: 0.5,
            hidden: vec![64, 64],
            iterations: 1500,
            batch_size: 256,
            lr: 1e-3,
            holdout: 0.2,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainReport {
    pub losses: Vec<f64>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub holdout_accuracy: f64,
}

/// Fraction of pairs where `r_θ(x_w) > r_θ(x_l)`.
pub fn pair_accuracy(model: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let (w, l) = model.score_pairs(pairs)?;
    Ok(w.iter().zip(&l).filter(|(a, b)| a > b).count() as f64 / pairs.len() as f64)
}

/// Shuffles the pairs, holds out a fraction, and fits `r_θ` on the rest.
pub fn train_reward_model(
    pairs: &[PreferencePair],
    num_classes: usize,
    config: &RewardTrainConfig,
) -> Result<(RewardModel, RewardTrainReport)> {
    if pairs.is_empty() {
        return Err(invalid("reward model training needs at least one pair"));
    }
    if !(0.0..1.0).contains(&config.holdout) || config.batch_size == 0 {
        return Err(invalid("holdout must lie in [0, 1) and batch size be >= 1"));
    }
    let mut rng = seeded(config.seed);
    let dim = pairs[0].x_w.len();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let held = ((pairs.len() as f64) * config.holdout).round() as usize;
    let held = held.min(pairs.len() - 1);
    let test: Vec<PreferencePair> = order[..held].iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<PreferencePair> = order[held..].iter().map(|&i| pairs[i].clone()).collect();
    let mut model = RewardModel::init(dim, num_classes, &config.hidden, &mut rng);
    let mut opt = Optimizer::new(config.optimizer);
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch: Vec<PreferencePair> = (0..config.batch_size.min(train.len()))
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let (loss, grads) = reward_model_loss(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        losses.push(loss);
        opt.step(&mut model, &grads, config.lr)?;
    }
    let holdout_accuracy = pair_accuracy(&model, &test)?;
    Ok((model, RewardTrainReport { losses, train_pairs: train.len(), holdout_pairs: test.len(), holdout_accuracy }))
}

// --- feedback objectives ------------------------------------------------------------

/// `mean_{b,d} max(0, α_d − r_d(x_b, c_b))` over the heads, and its gradient
/// with respect to `x`.
pub fn aes_loss(heads: &[&dyn RewardFn], x: ArrayView2<f64>, cond: &[Cond], alpha: &[f64]) -> Result<(f64, Array2<f64>)> {
    if heads.len() != alpha.len() || heads.is_empty() {
        return Err(invalid("need one threshold per reward head"));
    }
    let n = x.nrows();
    let scale = 1.0 / (n * heads.len()) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(x.raw_dim());
    for (head, &a) in heads.iter().zip(alpha) {
        let (r, g) = head.reward_and_grad(x, cond)?;
        for b in 0..n {
            let gap = a - r[b];
            if gap > 0.0 {
                loss += gap * scale;
                for d in 0..x.ncols() {
                    grad[[b, d]] -= g[[b, d]] * scale;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// `(radius, signed angle to the nearest mode)` of a point.
pub fn ring_descriptor(spec: &GmmSpec, p: &[f64]) -> (f64, f64) {
    let radius = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nearest = (0..spec.num_components())
        .min_by(|&i, &j| {
            let di: f64 = p.iter().zip(spec.mean(i)).map(|(a, b)| (a - b).powi(2)).sum();
            let dj: f64 = p.iter().zip(spec.mean(j)).map(|(a, b)| (a - b).powi(2)).sum();
            di.total_cmp(&dj)
        })
        .unwrap_or(0);
    let m = spec.mean(nearest);
    (radius, wrap_angle(p[1].atan2(p[0]) - m[1].atan2(m[0])))
}

fn wrap_angle(a: f64) -> f64 {
    let mut v = a % (2.0 * PI);
    if v > PI {
        v -= 2.0 * PI;
    } else if v <= -PI {
        v += 2.0 * PI;
    }
    v
}

/// `mean_b ‖desc(x′_b) − desc(x_b)‖²` for the ring descriptor, with its
/// gradient with respect to `x′`.
pub fn percep_loss(spec: &GmmSpec, pred: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.raw_dim() != reference.raw_dim() || pred.ncols() != 2 || spec.dim() != 2 {
        return Err(Error::ShapeMismatch("the ring descriptor is defined for 2-d batches".into()));
    }
    let n = pred.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for b in 0..pred.nrows() {
        let p = [pred[[b, 0]], pred[[b, 1]]];
        let (r1, a1) = ring_descriptor(spec, &p);
        let (r0, a0) = ring_descriptor(spec, &[reference[[b, 0]], reference[[b, 1]]]);
        let (dr, da) = (r1 - r0, wrap_angle(a1 - a0));
        loss += (dr * dr + da * da) / n;
        if r1 > 0.0 {
            let r2 = r1 * r1;
            grad[[b, 0]] = 2.0 * (dr * p[0] / r1 - da * p[1] / r2) / n;
            grad[[b, 1]] = 2.0 * (dr * p[1] / r1 + da * p[0] / r2) / n;
        }
    }
    Ok((loss, grad))
}

// --- rollout ------------------------------------------------------------------------

/// Where a rollout starts.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutStart {
    /// From noise at `T`, denoising down the `steps`-point grid.
    Noise { z: Array2<f64>, steps: usize },
    /// From data noised to `t_a` per row, then one jump to `d_t`.
    Data { x0: Array2<f64>, z: Array2<f64>, t_a: Vec<usize>, d_t: usize },
}

/// Output of [`refl_rollout`]; `∂x′_0/∂ε̂ = scale` per row.
#[derive(Debug, Clone)]
pub struct Rollout<F: Scalar = f32> {
    pub x0_pred: Array2<f64>,
    pub x_t: Array2<f64>,
    pub t: Vec<usize>,
    pub tape: Tape<F>,
    pub scale: Vec<f64>,
}

impl<F: Scalar> Rollout<F> {
    /// `∂L/∂ε̂` from `∂L/∂x′_0`.
    pub fn eps_grad(&self, grad_x0: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_x0.clone();
        for (b, mut row) in g.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * self.scale[b]);
        }
        g
    }
}

/// Runs the student without gradient down to `t` (noise mode: `t` drawn per
/// row from `window`; data mode: `d_t`), then predicts `x′_0` with a tape so
/// the gradient reaches only that last prediction.
pub fn refl_rollout<F: Scalar, R: Rng + ?Sized>(
    student: &Student<F>,
    start: &RolloutStart,
    window: (usize, usize),
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Rollout<F>> {
    let total = schedule.total_timesteps();
    let (x_t, t) = match start {
        RolloutStart::Noise { z, steps } => {
            let (lo, hi) = window;
            if lo > hi || hi > total {
                return Err(invalid(format!("window [{lo}, {hi}] outside [0, {total}]")));
            }
            let n = z.nrows();
            let grid = TimestepGrid::inference(total, *steps)?;
            let target: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
            let mut cur = vec![total; n];
            let mut x = z.clone();
            for p in grid.descending().skip(1).chain(std::iter::once(0)) {
                let next: Vec<usize> = (0..n).map(|b| p.max(target[b]).min(cur[b])).collect();
                if next == cur {
                    continue;
                }
                let eps = student.predict_eps(x.view(), &cur, cond, omega)?;
                x = psi_step(x.view(), eps.view(), &cur, &next, schedule)?.next;
                cur = next;
            }
            (x, target)
        }
        RolloutStart::Data { x0, z, t_a, d_t } => {
            let n = x0.nrows();
            if t_a.len() != n || z.raw_dim() != x0.raw_dim() {
                return Err(Error::ShapeMismatch("data rollout inputs".into()));
            }
            if t_a.iter().any(|&t| t < *d_t || t > total) {
                return Err(invalid(format!("noising times must lie in [{d_t}, {total}]")));
            }
            let mut x = x0.clone();
            for b in 0..n {
                let (a, s) = (schedule.alpha(t_a[b]), schedule.sigma(t_a[b]));
                for d in 0..x.ncols() {
                    x[[b, d]] = a * x0[[b, d]] + s * z[[b, d]];
                }
            }
            let dt = vec![*d_t; n];
            if t_a.iter().any(|&t| t != *d_t) {
                let eps = student.predict_eps(x.view(), t_a, cond, omega)?;
                x = psi_step(x.view(), eps.view(), t_a, &dt, schedule)?.next;
            }
            (x, dt)
        }
    };
    let tape = student.forward_train(x_t.view(), &t, cond, omega)?;
    let x0_pred = pred_x0(tape.eps.view(), x_t.view(), &t, schedule)?;
    let scale = t
        .iter()
        .map(|&tt| if tt == 0 { 0.0 } else { -schedule.sigma(tt) / schedule.alpha(tt) })
        .collect();
    Ok(Rollout { x0_pred, x_t, t, tape, scale })
}

// --- fine-tuning ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    pub heads: Vec<RewardKind>,
    /// Fixed thresholds per head; empty means calibrate from teacher samples.
    pub alpha: Vec<f64>,
    /// Quantile of teacher-sample rewards used as the threshold.
    pub alpha_quantile: f64,
    pub calibration_samples: usize,
    pub calibration_steps: usize,
    pub window: (usize, usize),
    pub rollout_steps: usize,
    pub d_t: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_aes: f64,
    pub lambda_percep: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub omega: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            heads: vec![RewardKind::ModeProximity],
            alpha: Vec::new(),
            alpha_quantile: 0.3,
            calibration_samples: 1024,
            calibration_steps: 50,
            window: (200, 800),
            rollout_steps: 4,
            d_t: 200,
            iterations: 300,
            batch_size: 256,
            lr: 1e-5,
            lambda_aes: 1.0,
            lambda_percep: 1.0,
            lora_rank: 4,
            lora_alpha: 4.0,
            omega: 1.0,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self, total: usize) -> Result<()> {
        let (lo, hi) = self.window;
        if !(lo < hi && hi <= total) {
            return Err(invalid(format!("window [{lo}, {hi}] must satisfy 0 <= left < right <= {total}")));
        }
        if self.heads.is_empty() || (!self.alpha.is_empty() && self.alpha.len() != self.heads.len()) {
            return Err(invalid("need at least one reward head and one threshold per head"));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(invalid("thresholds must be finite"));
        }
        if self.lambda_aes < 0.0 || self.lambda_percep < 0.0 || self.lr < 0.0 {
            return Err(invalid("loss weights and learning rate must be non-negative"));
        }
        if self.d_t > total || self.batch_size == 0 || !(0.0..=1.0).contains(&self.alpha_quantile) {
            return Err(invalid("d_t, batch size or quantile out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub iteration: usize,
    pub loss: f64,
    pub aes: f64,
    pub percep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub alpha: Vec<f64>,
    pub records: Vec<FeedbackRecord>,
}

/// Linear-interpolated quantile of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn make_heads<'a>(kinds: &[RewardKind], spec: &'a GmmSpec, learned: Option<&'a RewardModel>) -> Result<Vec<Box<dyn RewardFn + 'a>>> {
    kinds
        .iter()
        .map(|&k| -> Result<Box<dyn RewardFn + 'a>> {
            match k {
                RewardKind::Learned => {
                    Ok(Box::new(learned.cloned().ok_or_else(|| invalid("learned reward head without a model"))?))
                }
                _ => Ok(Box::new(OracleReward { kind: k, spec })),
            }
        })
        .collect()
}

/// Thresholds per head: the configured quantile of rewards on teacher samples.
pub fn calibrate_alpha<T: EpsModel + ?Sized>(
    config: &FeedbackConfig,
    teacher: &T,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    learned: Option<&RewardModel>,
) -> Result<Vec<f64>> {
    if !config.alpha.is_empty() {
        return Ok(config.alpha.clone());
    }
    let n = config.calibration_samples.max(1);
    let mut rng = seeded(derive_seed(config.seed, 7));
    let cond = crate::eval::balanced_conditions(spec, n);
    let z = normal_matrix(&mut rng, n, spec.dim());
    let grid = TimestepGrid::inference(schedule.total_timesteps(), config.calibration_steps)?;
    let omega = vec![config.omega; n];
    let x = ode_endpoint(&Guided(teacher), &grid, z.view(), &cond, &omega, schedule)?;
    let heads = make_heads(&config.heads, spec, learned)?;
    heads.iter().map(|h| Ok(quantile(&h.reward(x.view(), &cond)?, config.alpha_quantile))).collect()
}

/// Trains a fresh adapter on top of the (merged) student with
/// `λ_aes·aes + λ_percep·percep` on rollout predictions. Returns the student
/// carrying the feedback adapter.
pub fn run_feedback_finetune(
    config: &FeedbackConfig,
    student: &Student<f32>,
    alpha: &[f64],
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    learned: Option<&RewardModel>,
) -> Result<(Student<f32>, FeedbackReport)> {
    config.validate(schedule.total_timesteps())?;
    if alpha.len() != config.heads.len() {
        return Err(invalid("need one threshold per reward head"));
    }
    let mut rng = seeded(config.seed);
    let base = student.merged()?;
    let adapter = LoraAdapter::new(&base.net, config.lora_rank, config.lora_alpha, &mut rng)?;
    let mut tuned = Student::with_adapter(base, adapter)?;
    let heads = make_heads(&config.heads, spec, learned)?;
    let head_refs: Vec<&dyn RewardFn> = heads.iter().map(|h| h.as_ref()).collect();
    let mut opt = Optimizer::new(config.optimizer);
    let n = config.batch_size;
    let conditions = spec.num_conditions();
    let mut records = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let cond: Vec<Cond> = (0..n).map(|_| Some(rng.random_range(0..conditions.max(1)))).collect();
        let omega = vec![config.omega; n];
        let mut grads = tuned.zero_grads();
        let (mut aes, mut percep) = (0.0, 0.0);
        if config.lambda_aes > 0.0 {
            let z = normal_matrix(&mut rng, n, spec.dim());
            let start = RolloutStart::Noise { z, steps: config.rollout_steps };
            let roll = refl_rollout(&tuned, &start, config.window, &cond, &omega, schedule, &mut rng)?;
            let (l, g) = aes_loss(&head_refs, roll.x0_pred.view(), &cond, alpha)?;
            aes = l;
            let ge = roll.eps_grad(&(g * config.lambda_aes));
            grads.add_scaled(&tuned.backward(&roll.tape, ge.view())?, 1.0)?;
        }
        if config.lambda_percep > 0.0 {
            let x0 = gmm_sample_conditioned(spec, &cond, &mut rng)?;
            let z = normal_matrix(&mut rng, n, spec.dim());
            let t_a = (0..n).map(|_| rng.random_range(config.d_t..=config.window.1.max(config.d_t))).collect();
            let start = RolloutStart::Data { x0: x0.clone(), z, t_a, d_t: config.d_t };
            let roll = refl_rollout(&tuned, &start, config.window, &cond, &omega, schedule, &mut rng)?;
            let (l, g) = percep_loss(spec, roll.x0_pred.view(), x0.view())?;
            percep = l;
            let ge = roll.eps_grad(&(g * config.lambda_percep));
            grads.add_scaled(&tuned.backward(&roll.tape, ge.view())?, 1.0)?;
        }
        let loss = config.lambda_aes * aes + config.lambda_percep * percep;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        tuned.apply(&mut opt, &grads, config.lr)?;
        records.push(FeedbackRecord { iteration: it, loss, aes, percep });
    }
    Ok((tuned, FeedbackReport { alpha: alpha.to_vec(), records }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserParams, Role};
    use crate::schedule::ScheduleKind;
    use ndarray::arr2;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap()
    }

    fn mini() -> DenoiserConfig {
        DenoiserConfig {
            num_classes: 8,
            time_features: 4,
            cond_dim: 2,
            guidance_features: 2,
            hidden: vec![8],
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn oracle_rewards_by_hand() {
        let spec = GmmSpec::default();
        let m = spec.mean(3).to_vec();
        let x = arr2(&[[m[0], m[1]], [1.0, 2.0], [4.0, 0.0]]);
        let c = [Some(3), Some(0), None];
        let r = reward_oracle(RewardKind::ModeProximity, &spec, x.view(), &c).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - -((1.0f64 - 4.0).powi(2) + 4.0)).abs() < 1e-12);
        assert!(r[2].abs() < 1e-12);
        let r = reward_oracle(RewardKind::ManifoldMembership, &spec, x.view(), &c).unwrap();
        assert!(r[0].abs() < 1e-12 && r[2].abs() < 1e-12);
        assert!((r[1] - -(5f64.sqrt() - 4.0).powi(2)).abs() < 1e-12);
        assert!(reward_oracle(RewardKind::Learned, &spec, x.view(), &c).is_err());
        assert!("aesthetic".parse::<RewardKind>().is_err());
        assert_eq!("manifold_membership".parse::<RewardKind>().unwrap(), RewardKind::ManifoldMembership);
    }

    #[test]
    fn oracle_gradients_match_finite_differences() {
        let spec = GmmSpec::default();
        let mut rng = seeded(0);
        let x = normal_matrix(&mut rng, 20, 2) * 3.0;
        let c: Vec<Cond> = (0..20).map(|i| if i % 3 == 0 { None } else { Some(i % 8) }).collect();
        for kind in [RewardKind::ModeProximity, RewardKind::ManifoldMembership] {
            let (_, g) = reward_oracle_grad(kind, &spec, x.view(), &c).unwrap();
            for b in 0..20 {
                for d in 0..2 {
                    let h = 1e-6;
                    let mut up = x.clone();
                    up[[b, d]] += h;
                    let mut dn = x.clone();
                    dn[[b, d]] -= h;
                    let fd = (reward_oracle(kind, &spec, up.view(), &c).unwrap()[b] - reward_oracle(kind, &spec, dn.view(), &c).unwrap()[b]) / (2.0 * h);
                    assert!((fd - g[[b, d]]).abs() < 1e-5, "{kind} {fd} {}", g[[b, d]]);
                }
            }
        }
    }

    #[test]
    fn pairs_are_strictly_ordered_and_round_trip() {
        let spec = GmmSpec::default();
        let mut rng = seeded(1);
        let pairs = gen_preference_pairs(&spec, RewardKind::ModeProximity, noisy_gmm_sampler(&spec, 1.0), 500, &mut rng).unwrap();
        for p in &pairs {
            let x = arr2(&[[p.x_w[0], p.x_w[1]], [p.x_l[0], p.x_l[1]]]);
            let r = reward_oracle(RewardKind::ModeProximity, &spec, x.view(), &[p.cond, p.cond]).unwrap();
            assert!(r[0] > r[1]);
            assert!((r[0] - r[1] - p.margin).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        let back = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
        assert!(read_pairs("x 1 2 3 4 5".as_bytes()).is_err());
        assert!(read_pairs("- 1 2 3 4 -1".as_bytes()).is_err());
    }

    #[test]
    fn reward_loss_by_hand() {
        let mut rng = seeded(2);
        let mut model = RewardModel::init(2, 8, &[4], &mut rng);
        // Zero output layer: equal scores.
        let last = model.net.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let pair = PreferencePair { cond: Some(0), x_w: vec![1.0, 0.0], x_l: vec![0.0, 1.0], margin: 1.0 };
        let (loss, _) = reward_model_loss(&model, std::slice::from_ref(&pair)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid_neg(1.5) - -(1.0 / (1.0 + (-1.5f64).exp())).ln()).abs() < 1e-15);
        assert!(log_sigmoid_neg(50.0) < 1e-20);
    }

    #[test]
    fn reward_loss_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let model = RewardModel::init(2, 3, &[6, 5], &mut rng);
        let spec = GmmSpec::ring(3, 2.0, 0.3);
        let pairs = gen_preference_pairs(&spec, RewardKind::ModeProximity, noisy_gmm_sampler(&spec, 1.0), 7, &mut rng).unwrap();
        let (_, grads) = reward_model_loss(&model, &pairs).unwrap();
        let analytic = grads.flatten();
        let mut probe = model.clone();
        let h = 1e-6;
        let mut idx = 0;
        let sizes: Vec<usize> = probe.tensors().iter().map(|t| t.len()).collect();
        for (ti, len) in sizes.into_iter().enumerate() {
            for k in 0..len {
                probe.tensors_mut()[ti][k] += h;
                let up = reward_model_loss(&probe, &pairs).unwrap().0;
                probe.tensors_mut()[ti][k] -= 2.0 * h;
                let dn = reward_model_loss(&probe, &pairs).unwrap().0;
                probe.tensors_mut()[ti][k] += h;
                let fd = (up - dn) / (2.0 * h);
                let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-7);
                assert!(rel < 1e-4, "{idx}: {fd} vs {}", analytic[idx]);
                idx += 1;
            }
        }
    }

    #[test]
    fn learned_reward_input_gradient() {
        let mut rng = seeded(4);
        let model = RewardModel::init(2, 3, &[6], &mut rng);
        let x = normal_matrix(&mut rng, 4, 2);
        let c = [Some(0), None, Some(2), Some(1)];
        let (_, g) = model.reward_and_grad(x.view(), &c).unwrap();
        for b in 0..4 {
            for d in 0..2 {
                let h = 1e-6;
                let mut up = x.clone();
                up[[b, d]] += h;
                let mut dn = x.clone();
                dn[[b, d]] -= h;
                let fd = (model.reward(up.view(), &c).unwrap()[b] - model.reward(dn.view(), &c).unwrap()[b]) / (2.0 * h);
                assert!((fd - g[[b, d]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn reward_training_zero_lr_and_determinism() {
        let spec = GmmSpec::default();
        let mut rng = seeded(5);
        let pairs = gen_preference_pairs(&spec, RewardKind::ModeProximity, noisy_gmm_sampler(&spec, 1.0), 200, &mut rng).unwrap();
        let config = RewardTrainConfig { iterations: 5, batch_size: 32, lr: 0.0, ..Default::default() };
        let (m, report) = train_reward_model(&pairs, 8, &config).unwrap();
        let mut r = seeded(config.seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut r);
        assert_eq!(m, RewardModel::init(2, 8, &config.hidden, &mut r));
        assert_eq!(report.holdout_pairs, 40);
        let config = RewardTrainConfig { lr: 1e-3, ..config };
        assert_eq!(train_reward_model(&pairs, 8, &config).unwrap().0, train_reward_model(&pairs, 8, &config).unwrap().0);
    }

    #[test]
    fn hinge_by_hand() {
        let spec = GmmSpec::default();
        let head = OracleReward { kind: RewardKind::ModeProximity, spec: &spec };
        let m0 = spec.mean(0).to_vec();
        // Rewards 0, −1 and −4 against threshold −2: gaps 0, 0 and 2.
        let x = arr2(&[[m0[0], m0[1]], [m0[0] + 1.0, m0[1]], [m0[0] + 2.0, m0[1]]]);
        let c = [Some(0); 3];
        let (loss, grad) = aes_loss(&[&head], x.view(), &c, &[-2.0]).unwrap();
        assert!((loss - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(grad.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(grad.row(1).to_vec(), vec![0.0, 0.0]);
        assert!((grad[[2, 0]] - 4.0 / 3.0).abs() < 1e-12);
        let (loss, _) = aes_loss(&[&head], x.view(), &c, &[1.0]).unwrap();
        assert!((loss - (1.0 + 2.0 + 5.0) / 3.0).abs() < 1e-12);
        let (loss, grad) = aes_loss(&[&head], x.view(), &c, &[-10.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn percep_by_hand() {
        let spec = GmmSpec::default();
        let x0 = arr2(&[[4.0, 0.0], [0.3, 3.7], [-2.0, -2.5]]);
        let (loss, _) = percep_loss(&spec, x0.view(), x0.view()).unwrap();
        assert_eq!(loss, 0.0);
        // Radial displacement by δ.
        let delta = 0.3;
        let moved = x0.map_axis(ndarray::Axis(1), |r| {
            let n = r.dot(&r).sqrt();
            [r[0] * (n + delta) / n, r[1] * (n + delta) / n]
        });
        let moved = Array2::from_shape_fn((3, 2), |(b, d)| moved[b][d]);
        let (loss, _) = percep_loss(&spec, moved.view(), x0.view()).unwrap();
        assert!((loss - delta * delta).abs() < 1e-12);
        // Independent evaluation for a tangential move near mode 0.
        let a = arr2(&[[4.0, 0.4]]);
        let b = arr2(&[[4.0, 0.0]]);
        let expected = ((16.16f64).sqrt() - 4.0).powi(2) + (0.1f64).atan().powi(2);
        assert!((percep_loss(&spec, a.view(), b.view()).unwrap().0 - expected).abs() < 1e-12);
    }

    #[test]
    fn percep_gradient_matches_finite_differences() {
        let spec = GmmSpec::default();
        let mut rng = seeded(6);
        let a = normal_matrix(&mut rng, 10, 2) + 1.0;
        let b = normal_matrix(&mut rng, 10, 2);
        let (_, g) = percep_loss(&spec, a.view(), b.view()).unwrap();
        for i in 0..10 {
            for d in 0..2 {
                let h = 1e-6;
                let mut up = a.clone();
                up[[i, d]] += h;
                let mut dn = a.clone();
                dn[[i, d]] -= h;
                let fd = (percep_loss(&spec, up.view(), b.view()).unwrap().0 - percep_loss(&spec, dn.view(), b.view()).unwrap().0) / (2.0 * h);
                assert!((fd - g[[i, d]]).abs() < 1e-6, "{fd} {}", g[[i, d]]);
            }
        }
    }

    #[test]
    fn degenerate_rollouts() {
        let sch = schedule();
        let mut rng = seeded(7);
        let student = Student::full(DenoiserParams::<f64>::init(mini(), Role::Student, &mut rng).unwrap());
        let z = normal_matrix(&mut rng, 5, 2);
        let cond = vec![Some(1); 5];
        let omega = vec![1.0; 5];
        let roll = refl_rollout(&student, &RolloutStart::Noise { z: z.clone(), steps: 4 }, (1000, 1000), &cond, &omega, &sch, &mut rng).unwrap();
        assert_eq!(roll.x_t, z);
        let eps = student.predict_eps(z.view(), &[1000; 5], &cond, &omega).unwrap();
        assert_eq!(roll.x0_pred, pred_x0(eps.view(), z.view(), &[1000; 5], &sch).unwrap());
        let x0 = normal_matrix(&mut rng, 5, 2);
        let start = RolloutStart::Data { x0: x0.clone(), z, t_a: vec![0; 5], d_t: 0 };
        let roll = refl_rollout(&student, &start, (200, 800), &cond, &omega, &sch, &mut rng).unwrap();
        assert_eq!(roll.x0_pred, x0);
        assert!(refl_rollout(&student, &RolloutStart::Noise { z: x0, steps: 4 }, (900, 1200), &cond, &omega, &sch, &mut rng).is_err());
    }

    #[test]
    fn rollout_gradient_reaches_only_last_prediction() {
        let sch = schedule();
        let spec = GmmSpec::default();
        let mut rng = seeded(8);
        let config = DenoiserConfig { hidden: vec![3], time_features: 2, cond_dim: 1, guidance_features: 0, num_classes: 8, ..DenoiserConfig::default() };
        let student = Student::full(DenoiserParams::<f64>::init(config, Role::Student, &mut rng).unwrap());
        let z = normal_matrix(&mut rng, 6, 2) ;
        let cond: Vec<Cond> = (0..6).map(|i| Some(i)).collect();
        let omega = vec![1.0; 6];
        let start = RolloutStart::Noise { z, steps: 4 };
        let head = OracleReward { kind: RewardKind::ModeProximity, spec: &spec };
        let roll = refl_rollout(&student, &start, (200, 800), &cond, &omega, &sch, &mut seeded(9)).unwrap();
        let (_, g) = aes_loss(&[&head], roll.x0_pred.view(), &cond, &[1.0]).unwrap();
        let analytic = student.backward(&roll.tape, roll.eps_grad(&g).view()).unwrap().flatten();
        // Surrogate: the detached state x_t is frozen, only the last prediction moves.
        let surrogate = |s: &Student<f64>| {
            let tape = s.forward_train(roll.x_t.view(), &roll.t, &cond, &omega).unwrap();
            let x0 = pred_x0(tape.eps.view(), roll.x_t.view(), &roll.t, &sch).unwrap();
            aes_loss(&[&head], x0.view(), &cond, &[1.0]).unwrap().0
        };
        let mut probe = student.clone();
        let h = 1e-6;
        let mut idx = 0;
        let sizes: Vec<usize> = probe.base.tensors().iter().map(|t| t.len()).collect();
        for (ti, len) in sizes.into_iter().enumerate() {
            for k in 0..len {
                probe.base.tensors_mut()[ti][k] += h;
                let up = surrogate(&probe);
                probe.base.tensors_mut()[ti][k] -= 2.0 * h;
                let dn = surrogate(&probe);
                probe.base.tensors_mut()[ti][k] += h;
                let fd = (up - dn) / (2.0 * h);
                let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
                assert!(rel < 1e-3, "{idx}: {fd} vs {}", analytic[idx]);
                idx += 1;
            }
        }
    }

    #[test]
    fn zero_weights_leave_adapter_unchanged() {
        let sch = schedule();
        let spec = GmmSpec::default();
        let mut rng = seeded(10);
        let student = Student::full(DenoiserParams::<f32>::init(mini(), Role::Student, &mut rng).unwrap());
        let config = FeedbackConfig { iterations: 3, batch_size: 16, lambda_aes: 0.0, lambda_percep: 0.0, ..Default::default() };
        let (tuned, _) = run_feedback_finetune(&config, &student, &[-1.0], &spec, &sch, None).unwrap();
        let fresh = LoraAdapter::new(&student.base.net, config.lora_rank, config.lora_alpha, &mut seeded(config.seed)).unwrap();
        assert_eq!(tuned.adapter.as_ref().unwrap(), &fresh);
        // A threshold below every reward: the hinge is inactive and nothing moves.
        let config = FeedbackConfig { lambda_aes: 1.0, ..config };
        let (tuned, report) = run_feedback_finetune(&config, &student, &[-1e12], &spec, &sch, None).unwrap();
        assert_eq!(tuned.adapter.as_ref().unwrap(), &fresh);
        assert!(report.records.iter().all(|r| r.aes == 0.0));
        let config = FeedbackConfig { lambda_percep: 0.5, ..config };
        let run = || run_feedback_finetune(&config, &student, &[-1.0], &spec, &sch, None).unwrap().0;
        assert_eq!(run(), run());
    }

    #[test]
    fn quantile_endpoints() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
