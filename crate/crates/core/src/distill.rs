//! Trajectory-preserving distillation: PD, CD, CTM and segmented CD losses,
//! the conditional discriminator, and the staged training loops.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{time_features, Cond, DenoiserConfig, DenoiserParams, GradientBuffer, LoraAdapter, Role, Student, Tape};
use crate::error::{invalid, Error, Result};
use crate::nn::{from_f64, sigmoid, slice_of, slice_of_mut, to_f64, Mlp, Parameters, Scalar};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::oracle::{gmm_sample_labelled, GmmSpec};
use crate::rng::{normal_matrix, seeded, standard_normal, SeededRng};
use crate::schedule::{sample_training_tuple, NoiseSchedule, SegmentSchedule, TimestepGrid};
use crate::solver::{cfg_eval, psi_coefficients, psi_step, EpsModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pd,
    Cd,
    Ctm,
    #[default]
    Tscd,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pd" => Ok(Self::Pd),
            "cd" => Ok(Self::Cd),
            "ctm" => Ok(Self::Ctm),
            "tscd" => Ok(Self::Tscd),
            other => Err(Error::Unknown { kind: "distillation method", name: other.to_string() }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pd => "pd",
            Self::Cd => "cd",
            Self::Ctm => "ctm",
            Self::Tscd => "tscd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    pub k_list: Vec<usize>,
    pub n_list: Vec<usize>,
    pub iterations: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub ema_decay: f64,
    pub lambda_mse: Vec<f64>,
    pub lambda_adv: Vec<f64>,
    /// Std of the target perturbation, in units of σ(t_end).
    pub rho: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Fraction of rows distilled with the null condition.
    pub uncond_prob: f64,
    /// Forces `t_end = 0`, turning the segmented loss into CD.
    pub pin_t_end_zero: bool,
    /// Segmented method only: probability that a row ends exactly on its
    /// segment boundary instead of a uniform draw from `[t_b, t_{n-1}]`.
    pub boundary_prob: f64,
    /// Train a low-rank adapter on the frozen teacher instead of all weights.
    pub lora_rank: Option<usize>,
    pub lora_alpha: f64,
    pub disc_hidden: Vec<usize>,
    pub disc_lr: f64,
    pub r1_weight: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Tscd,
            k_list: vec![8, 4, 2, 1],
            n_list: vec![50; 4],
            iterations: vec![2000, 2000, 3000, 3000],
            batch_size: 256,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            ema_decay: 0.95,
            lambda_mse: vec![1.0, 1.0, 1.0, 0.5],
            lambda_adv: vec![0.0, 0.0, 0.3, 0.5],
            rho: 0.0,
            omega_min: 1.0,
            omega_max: 1.0,
            uncond_prob: 0.0,
            pin_t_end_zero: false,
            boundary_prob: 1.0,
            lora_rank: None,
            lora_alpha: 1.0,
            disc_hidden: vec![64, 64],
            disc_lr: 1e-3,
            r1_weight: 0.1,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

/// One stage of a distillation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePlan {
    pub k: usize,
    pub steps: usize,
    pub iterations: usize,
    pub lambda_mse: f64,
    pub lambda_adv: f64,
}

impl DistillConfig {
    pub fn segments(&self) -> Result<SegmentSchedule> {
        SegmentSchedule::new(self.k_list.clone(), self.n_list.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.segments()?.stages();
        for (name, len) in [
            ("iterations", self.iterations.len()),
            ("lambda_mse", self.lambda_mse.len()),
            ("lambda_adv", self.lambda_adv.len()),
        ] {
            if len != stages {
                return Err(invalid(format!("{name} has {len} entries for {stages} stages")));
            }
        }
        for (m, a) in self.lambda_mse.iter().zip(&self.lambda_adv) {
            if *m < 0.0 || *a < 0.0 || m + a <= 0.0 {
                return Err(invalid("loss weights must be non-negative with a positive sum"));
            }
        }
        if self.rho < 0.0 {
            return Err(invalid("rho must be non-negative"));
        }
        if !(1.0 <= self.omega_min && self.omega_min <= self.omega_max) {
            return Err(invalid("guidance range must satisfy 1 <= omega_min <= omega_max"));
        }
        if ![self.uncond_prob, self.ema_decay, self.boundary_prob].iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(invalid("probabilities and decays must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if self.lr < 0.0 || self.disc_lr < 0.0 || self.r1_weight < 0.0 {
            return Err(invalid("learning rates and penalty weights must be non-negative"));
        }
        Ok(())
    }

    /// Stages actually run. Segmented distillation follows the segment
    /// schedule; the other methods are one stage with `k = 1` and the summed
    /// iteration budget.
    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        self.validate()?;
        if self.method == Method::Tscd {
            return Ok((0..self.k_list.len())
                .map(|i| StagePlan {
                    k: self.k_list[i],
                    steps: self.n_list[i],
                    iterations: self.iterations[i],
                    lambda_mse: self.lambda_mse[i],
                    lambda_adv: self.lambda_adv[i],
                })
                .collect());
        }
        Ok(vec![StagePlan {
            k: 1,
            steps: self.n_list[0],
            iterations: self.iterations.iter().sum(),
            lambda_mse: self.lambda_mse[0],
            lambda_adv: self.lambda_adv[0],
        }])
    }
}

// --- discriminator ---------------------------------------------------------

/// Logit network on `[x, time features of t, condition embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<F = f32> {
    pub net: Mlp<F>,
    /// `(C + 1) × cond_dim`, null token last.
    pub cond_embedding: Array2<F>,
    pub data_dim: usize,
    pub time_features: usize,
    pub total_timesteps: usize,
}

impl<F: Scalar> Discriminator<F> {
    pub fn init<R: Rng + ?Sized>(config: &DenoiserConfig, hidden: &[usize], rng: &mut R) -> Self {
        let input = config.data_dim + config.time_features + config.cond_dim;
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(1);
        let net = Mlp::init(&sizes, rng);
        let cond_embedding = Array2::from_shape_simple_fn((config.num_classes + 1, config.cond_dim), || {
            F::of(standard_normal(rng))
        });
        Self {
            net,
            cond_embedding,
            data_dim: config.data_dim,
            time_features: config.time_features,
            total_timesteps: config.total_timesteps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
            cond_embedding: Array2::zeros(self.cond_embedding.raw_dim()),
            ..self.clone()
        }
    }

    pub fn cast<G: Scalar>(&self) -> Discriminator<G> {
        Discriminator {
            net: self.net.cast(),
            cond_embedding: self.cond_embedding.mapv(|v| G::of(v.as_f64())),
            data_dim: self.data_dim,
            time_features: self.time_features,
            total_timesteps: self.total_timesteps,
        }
    }

    fn cond_row(&self, c: Cond) -> Result<usize> {
        let null = self.cond_embedding.nrows() - 1;
        match c {
            None => Ok(null),
            Some(i) if i < null => Ok(i),
            Some(i) => Err(invalid(format!("condition {i} outside 0..{null}"))),
        }
    }

    pub fn features(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond]) -> Result<Array2<F>> {
        let n = x.nrows();
        if x.ncols() != self.data_dim || t.len() != n || cond.len() != n {
            return Err(Error::ShapeMismatch("discriminator batch".into()));
        }
        let mut feats = Array2::zeros((n, self.net.input_dim()));
        let mut tf = vec![0.0; self.time_features];
        let off = self.data_dim + self.time_features;
        for b in 0..n {
            let row_idx = self.cond_row(cond[b])?;
            let mut row = feats.row_mut(b);
            for d in 0..self.data_dim {
                row[d] = F::of(x[[b, d]]);
            }
            time_features(t[b], self.total_timesteps, self.time_features, &mut tf);
            for (i, v) in tf.iter().enumerate() {
                row[self.data_dim + i] = F::of(*v);
            }
            row.slice_mut(s![off..]).assign(&self.cond_embedding.row(row_idx));
        }
        Ok(feats)
    }

    pub fn logits(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond]) -> Result<Vec<f64>> {
        let feats = self.features(x, t, cond)?;
        Ok(self.net.forward(feats.view()).column(0).iter().map(|v| v.as_f64()).collect())
    }

    fn scatter_embedding(&self, input_grad: &Array2<F>, cond: &[Cond], into: &mut Array2<F>) {
        let off = self.data_dim + self.time_features;
        for (b, c) in cond.iter().enumerate() {
            let row = self.cond_row(*c).expect("validated");
            let mut dst = into.row_mut(row);
            dst += &input_grad.slice(s![b, off..]);
        }
    }
}

impl<F: Scalar> Parameters<F> for Discriminator<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut t = self.net.tensors();
        t.push(slice_of(&self.cond_embedding));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.net.tensors_mut();
        t.push(slice_of_mut(&mut self.cond_embedding));
        t
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Generator and discriminator terms of the non-saturating logistic game.
#[derive(Debug, Clone)]
pub struct AdvTerms<F = f32> {
    /// `mean −log σ(D(a))`
    pub generator: f64,
    /// `mean [−log σ(D(b)) − log(1 − σ(D(a)))]`
    pub discriminator: f64,
    /// `(γ/2) mean ‖∇_b D(b)‖²`
    pub r1: f64,
    /// `∂ generator / ∂a`
    pub grad_a: Array2<f64>,
    /// Gradient of `discriminator + r1` with respect to the discriminator.
    pub disc_grads: Discriminator<F>,
}

/// Adversarial distance between predictions `a` and targets `b` at `t`.
pub fn adv_distance<F: Scalar>(
    disc: &Discriminator<F>,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    t: &[usize],
    cond: &[Cond],
    r1_weight: f64,
) -> Result<AdvTerms<F>> {
    let n = a.nrows();
    if b.raw_dim() != a.raw_dim() {
        return Err(Error::ShapeMismatch("adversarial pair".into()));
    }
    let inv = 1.0 / n as f64;
    let mut grads = disc.zeros_like();

    let fa = disc.features(a, t, cond)?;
    let (la, cache_a) = disc.net.forward_cached(fa.view());
    let la: Vec<f64> = la.column(0).iter().map(|v| v.as_f64()).collect();
    let fb = disc.features(b, t, cond)?;
    let (lb, cache_b) = disc.net.forward_cached(fb.view());
    let lb: Vec<f64> = lb.column(0).iter().map(|v| v.as_f64()).collect();

    let generator = la.iter().map(|&z| softplus(-z)).sum::<f64>() * inv;
    let discriminator = (lb.iter().map(|&z| softplus(-z)).sum::<f64>() + la.iter().map(|&z| softplus(z)).sum::<f64>()) * inv;

    // Generator gradient through the (frozen) discriminator input.
    let seed_gen = Array2::from_shape_fn((n, 1), |(i, _)| F::of((sigmoid(la[i]) - 1.0) * inv));
    let mut scratch = disc.net.zeros_like();
    let gin = disc.net.backward(&cache_a, seed_gen.view(), &mut scratch);
    let grad_a = to_f64(&gin.slice(s![.., ..disc.data_dim]).to_owned());

    // Discriminator loss gradients.
    let seed_fake = Array2::from_shape_fn((n, 1), |(i, _)| F::of(sigmoid(la[i]) * inv));
    let gin_fake = disc.net.backward(&cache_a, seed_fake.view(), &mut grads.net);
    disc.scatter_embedding(&gin_fake, cond, &mut grads.cond_embedding);
    let seed_real = Array2::from_shape_fn((n, 1), |(i, _)| F::of((sigmoid(lb[i]) - 1.0) * inv));
    let gin_real = disc.net.backward(&cache_b, seed_real.view(), &mut grads.net);
    disc.scatter_embedding(&gin_real, cond, &mut grads.cond_embedding);

    let mut r1 = 0.0;
    if r1_weight > 0.0 {
        let coef = F::of(0.5 * r1_weight * inv);
        let (pen, gin_pen) = disc.net.input_gradient_penalty(fb.view(), 0..disc.data_dim, coef, &mut grads.net);
        disc.scatter_embedding(&gin_pen, cond, &mut grads.cond_embedding);
        r1 = pen.iter().map(|v| v.as_f64()).sum();
    }
    Ok(AdvTerms { generator, discriminator, r1, grad_a, disc_grads: grads })
}

// --- objectives --------------------------------------------------------------

/// Per-row inputs of a distillation loss. `x` is the noisy state at `t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub cond: Vec<Cond>,
    pub omega: Vec<f64>,
    pub t_n: Vec<usize>,
    pub t_prev: Vec<usize>,
    pub t_end: Vec<usize>,
}

impl Batch {
    fn check(&self) -> Result<()> {
        let n = self.x.nrows();
        if [self.cond.len(), self.omega.len(), self.t_n.len(), self.t_prev.len(), self.t_end.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::ShapeMismatch("distillation batch".into()));
        }
        for b in 0..n {
            if !(self.t_end[b] <= self.t_prev[b] && self.t_prev[b] <= self.t_n[b]) {
                return Err(invalid(format!(
                    "row {b}: need t_end <= t_prev <= t_n, got {} {} {}",
                    self.t_end[b], self.t_prev[b], self.t_n[b]
                )));
            }
        }
        Ok(())
    }
}

/// One classifier-free-guided teacher step `Ψ(x_{t_n}, ε_tea, t_{n−1})`.
pub fn teacher_target<M: EpsModel + ?Sized>(
    teacher: &M,
    x: ArrayView2<f64>,
    t_n: &[usize],
    t_prev: &[usize],
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let eps = cfg_eval(teacher, x, t_n, cond, omega)?;
    Ok(psi_step(x, eps.view(), t_n, t_prev, schedule)?.next)
}

/// A student loss together with what is needed to backpropagate it.
#[derive(Debug, Clone)]
pub struct LossOutput<F: Scalar = f32> {
    pub loss: f64,
    pub mse: f64,
    pub adv: f64,
    /// Student prediction at `t_end`.
    pub pred: Array2<f64>,
    /// Gradient-free target at `t_end`.
    pub target: Array2<f64>,
    pub tape: Tape<F>,
    /// `∂loss / ∂ε̂_student`
    pub grad_eps: Array2<f64>,
}

impl<F: Scalar> LossOutput<F> {
    pub fn gradients(&self, student: &Student<F>) -> Result<GradientBuffer<F>> {
        student.backward(&self.tape, self.grad_eps.view())
    }
}

fn mse_and_grad(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let diff = pred - target;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (mse, diff * (2.0 / n))
}

/// Student jump `Ψ(x, f_stu, t_n, t_end)` with its tape.
fn student_jump<F: Scalar>(student: &Student<F>, batch: &Batch, t_end: &[usize], schedule: &NoiseSchedule) -> Result<(Array2<f64>, Tape<F>)> {
    let tape = student.forward_train(batch.x.view(), &batch.t_n, &batch.cond, &batch.omega)?;
    let pred = psi_step(batch.x.view(), tape.eps.view(), &batch.t_n, t_end, schedule)?.next;
    Ok((pred, tape))
}

/// Chain rule from `∂L/∂pred` to `∂L/∂ε̂` through the student jump.
fn through_jump(grad_pred: Array2<f64>, t_n: &[usize], t_end: &[usize], schedule: &NoiseSchedule) -> Array2<f64> {
    let mut g = grad_pred;
    for (b, mut row) in g.rows_mut().into_iter().enumerate() {
        let (_, c_eps) = psi_coefficients(t_n[b], t_end[b], schedule);
        row.mapv_inplace(|v| v * c_eps);
    }
    g
}

/// EMA jump from the teacher target to `t_end`.
fn ema_target<E: EpsModel + ?Sized>(
    ema: &E,
    x_prev: &Array2<f64>,
    batch: &Batch,
    t_end: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let eps = ema.predict_eps(x_prev.view(), &batch.t_prev, &batch.cond, &batch.omega)?;
    Ok(psi_step(x_prev.view(), eps.view(), &batch.t_prev, t_end, schedule)?.next)
}

/// Two-step progressive distillation: the student's single jump `t_n → t_end`
/// against two teacher steps `t_n → t_prev → t_end`.
pub fn pd_loss<F: Scalar, T: EpsModel + ?Sized>(
    student: &Student<F>,
    teacher: &T,
    batch: &Batch,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    batch.check()?;
    let x1 = teacher_target(teacher, batch.x.view(), &batch.t_n, &batch.t_prev, &batch.cond, &batch.omega, schedule)?;
    let target = teacher_target(teacher, x1.view(), &batch.t_prev, &batch.t_end, &batch.cond, &batch.omega, schedule)?;
    let (pred, tape) = student_jump(student, batch, &batch.t_end, schedule)?;
    let (mse, g) = mse_and_grad(&pred, &target);
    let grad_eps = through_jump(g, &batch.t_n, &batch.t_end, schedule);
    Ok(LossOutput { loss: mse, mse, adv: 0.0, pred, target, tape, grad_eps })
}

/// Consistency-trajectory loss: both jumps land at `batch.t_end`.
pub fn ctm_loss<F: Scalar, E: EpsModel + ?Sized, T: EpsModel + ?Sized>(
    student: &Student<F>,
    ema: &E,
    teacher: &T,
    batch: &Batch,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    batch.check()?;
    let x_prev = teacher_target(teacher, batch.x.view(), &batch.t_n, &batch.t_prev, &batch.cond, &batch.omega, schedule)?;
    let target = ema_target(ema, &x_prev, batch, &batch.t_end, schedule)?;
    let (pred, tape) = student_jump(student, batch, &batch.t_end, schedule)?;
    let (mse, g) = mse_and_grad(&pred, &target);
    let grad_eps = through_jump(g, &batch.t_n, &batch.t_end, schedule);
    Ok(LossOutput { loss: mse, mse, adv: 0.0, pred, target, tape, grad_eps })
}

/// Consistency loss: [`ctm_loss`] with every `t_end` set to 0.
pub fn cd_loss<F: Scalar, E: EpsModel + ?Sized, T: EpsModel + ?Sized>(
    student: &Student<F>,
    ema: &E,
    teacher: &T,
    batch: &Batch,
    schedule: &NoiseSchedule,
) -> Result<LossOutput<F>> {
    let pinned = Batch { t_end: vec![0; batch.x.nrows()], ..batch.clone() };
    ctm_loss(student, ema, teacher, &pinned, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub adv: f64,
}

/// Segmented consistency loss `λ_mse·MSE + λ_adv·adv` between the student
/// jump and the (optionally perturbed) EMA target at `t_end`.
///
/// Returns the student loss and, when the adversarial term is active, the
/// adversarial terms including the discriminator gradients.
#[allow(clippy::too_many_arguments)]
pub fn tscd_loss<F: Scalar, E: EpsModel + ?Sized, T: EpsModel + ?Sized, R: Rng + ?Sized>(
    student: &Student<F>,
    ema: &E,
    teacher: &T,
    disc: Option<&Discriminator<F>>,
    batch: &Batch,
    weights: LossWeights,
    rho: f64,
    r1_weight: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LossOutput<F>, Option<AdvTerms<F>>)> {
    batch.check()?;
    let x_prev = teacher_target(teacher, batch.x.view(), &batch.t_n, &batch.t_prev, &batch.cond, &batch.omega, schedule)?;
    let mut target = ema_target(ema, &x_prev, batch, &batch.t_end, schedule)?;
    if rho > 0.0 {
        for (b, mut row) in target.rows_mut().into_iter().enumerate() {
            let sd = rho * schedule.sigma(batch.t_end[b]);
            row.mapv_inplace(|v| v + sd * standard_normal(rng));
        }
    }
    let (pred, tape) = student_jump(student, batch, &batch.t_end, schedule)?;
    let (mse, g_mse) = mse_and_grad(&pred, &target);
    let mut grad_pred = g_mse * weights.mse;
    let mut adv = 0.0;
    let mut terms = None;
    if weights.adv > 0.0 {
        let d = disc.ok_or_else(|| invalid("adversarial weight set without a discriminator"))?;
        let t = adv_distance(d, pred.view(), target.view(), &batch.t_end, &batch.cond, r1_weight)?;
        adv = t.generator;
        grad_pred = grad_pred + &t.grad_a * weights.adv;
        terms = Some(t);
    }
    let loss = weights.mse * mse + weights.adv * adv;
    let grad_eps = through_jump(grad_pred, &batch.t_n, &batch.t_end, schedule);
    Ok((LossOutput { loss, mse, adv, pred, target, tape, grad_eps }, terms))
}

// --- training loops ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub mse: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub k: usize,
    pub steps: usize,
    pub records: Vec<IterationRecord>,
}

impl StageReport {
    /// Trailing moving average of the loss with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.records.iter().map(|r| r.loss).collect::<Vec<_>>(), window)
    }
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn write_loss_csv<W: Write>(mut out: W, reports: &[StageReport]) -> Result<()> {
    writeln!(out, "stage,k,iteration,loss,mse,adv_gen,adv_disc,wall_ms")?;
    for r in reports {
        for rec in &r.records {
            writeln!(
                out,
                "{},{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.3}",
                r.stage, r.k, rec.iteration, rec.loss, rec.mse, rec.adv_gen, rec.adv_disc, rec.wall_ms
            )?;
        }
    }
    Ok(())
}

/// Mutable state threaded through the stages of a run.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub student: Student<f32>,
    pub ema: Student<f32>,
    pub disc: Discriminator<f32>,
    pub rng: SeededRng,
}

impl DistillState {
    pub fn new(student: Student<f32>, config: &DistillConfig) -> Self {
        let mut rng = seeded(config.seed);
        let disc = Discriminator::init(&student.base.config, &config.disc_hidden, &mut rng);
        let mut ema = student.clone();
        ema.base.role = Role::Ema;
        Self { student, ema, disc, rng }
    }
}

/// Student to distill from teacher weights: a copy that also reads ω, plus a
/// fresh adapter when `lora_rank` is set.
pub fn init_student(teacher: &DenoiserParams<f32>, config: &DistillConfig) -> Result<Student<f32>> {
    let mut base = teacher.clone().with_role(Role::Student);
    base.guidance_input = true;
    match config.lora_rank {
        Some(r) => {
            let mut rng = seeded(config.seed ^ 0x10ca);
            let adapter = LoraAdapter::new(&base.net, r, config.lora_alpha, &mut rng)?;
            Student::with_adapter(base, adapter)
        }
        None => Ok(Student::full(base)),
    }
}

/// Draws data, conditions, guidance scales and a training tuple per row.
fn draw_batch(
    config: &DistillConfig,
    plan: &StagePlan,
    grid: &TimestepGrid,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Batch> {
    let n = config.batch_size;
    let (x0, labels) = gmm_sample_labelled(spec, n, rng)?;
    let mut cond = labels;
    let mut omega = vec![1.0; n];
    for b in 0..n {
        if config.uncond_prob > 0.0 && rng.random::<f64>() < config.uncond_prob {
            cond[b] = None;
        }
        if cond[b].is_some() {
            omega[b] = rng.random_range(config.omega_min..=config.omega_max);
        }
    }
    let (mut t_n, mut t_prev, mut t_end) = (vec![0; n], vec![0; n], vec![0; n]);
    let s = grid.skip();
    for b in 0..n {
        let tuple = sample_training_tuple(grid, plan.k, rng)?;
        t_n[b] = tuple.t_n;
        t_prev[b] = tuple.t_prev;
        t_end[b] = match config.method {
            Method::Pd => tuple.t_prev - s,
            Method::Cd => 0,
            Method::Ctm | Method::Tscd if config.pin_t_end_zero => 0,
            Method::Tscd if config.boundary_prob > 0.0 && rng.random::<f64>() < config.boundary_prob => tuple.t_boundary,
            Method::Ctm | Method::Tscd => tuple.t_end,
        };
    }
    let z = normal_matrix(rng, n, spec.dim());
    let mut x = x0;
    for b in 0..n {
        let (a, sg) = (schedule.alpha(t_n[b]), schedule.sigma(t_n[b]));
        for d in 0..x.ncols() {
            x[[b, d]] = a * x[[b, d]] + sg * z[[b, d]];
        }
    }
    Ok(Batch { x, cond, omega, t_n, t_prev, t_end })
}

/// Runs one stage of distillation on `state`.
pub fn run_tscd_stage<T: EpsModel + ?Sized>(
    config: &DistillConfig,
    stage: usize,
    state: &mut DistillState,
    teacher: &T,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
) -> Result<StageReport> {
    let plans = config.plan()?;
    let plan = *plans
        .get(stage)
        .ok_or_else(|| invalid(format!("stage {stage} out of range for {} stages", plans.len())))?;
    let grid = TimestepGrid::new(schedule.total_timesteps(), plan.steps)?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut disc_opt = Optimizer::new(config.optimizer);
    let weights = LossWeights { mse: plan.lambda_mse, adv: plan.lambda_adv };
    let mut records = Vec::with_capacity(plan.iterations);
    let start = Instant::now();
    for it in 0..plan.iterations {
        let batch = draw_batch(config, &plan, &grid, spec, schedule, &mut state.rng)?;
        let (out, adv) = match config.method {
            Method::Pd => (pd_loss(&state.student, teacher, &batch, schedule)?, None),
            _ => tscd_loss(
                &state.student,
                &state.ema,
                teacher,
                Some(&state.disc),
                &batch,
                weights,
                config.rho,
                config.r1_weight,
                schedule,
                &mut state.rng,
            )?,
        };
        if !out.loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss: out.loss });
        }
        let lr = cosine_lr(config.lr, config.lr_final_fraction, it, plan.iterations);
        let grads = out.gradients(&state.student)?;
        state.student.apply(&mut opt, &grads, lr)?;
        state.ema.ema_toward(&state.student, config.ema_decay)?;
        let mut adv_disc = 0.0;
        if let Some(terms) = adv {
            adv_disc = terms.discriminator + terms.r1;
            disc_opt.step(&mut state.disc, &terms.disc_grads, config.disc_lr)?;
        }
        records.push(IterationRecord {
            iteration: it,
            loss: out.loss,
            mse: out.mse,
            adv_gen: out.adv,
            adv_disc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(StageReport { stage, k: plan.k, steps: plan.steps, records })
}

/// Output of one stage of a full run.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub report: StageReport,
    pub student: Student<f32>,
}

/// Runs every stage of `config`, each resuming from the previous one.
pub fn run_full_tscd<T: EpsModel + ?Sized>(
    config: &DistillConfig,
    teacher: &T,
    init: Student<f32>,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
) -> Result<(DistillState, Vec<StageOutcome>)> {
    let plans = config.plan()?;
    let mut state = DistillState::new(init, config);
    let mut outcomes = Vec::with_capacity(plans.len());
    for stage in 0..plans.len() {
        let report = run_tscd_stage(config, stage, &mut state, teacher, spec, schedule)?;
        outcomes.push(StageOutcome { report, student: state.student.clone() });
    }
    Ok((state, outcomes))
}

// --- teacher -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub denoiser: DenoiserConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub cond_dropout: f64,
    /// The returned teacher is the EMA of the iterates with this decay.
    pub ema_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            iterations: 20_000,
            batch_size: 256,
            lr: 2e-3,
            lr_final_fraction: 0.02,
            cond_dropout: 0.1,
            ema_decay: 0.999,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

/// Denoising score matching `E‖ε̂(α x₀ + σ z, t, c) − z‖²` with condition
/// dropout. Returns the EMA weights and the per-iteration loss.
pub fn train_teacher(config: &TeacherConfig, spec: &GmmSpec, schedule: &NoiseSchedule) -> Result<(DenoiserParams<f32>, Vec<f64>)> {
    if config.batch_size == 0 || !(0.0..=1.0).contains(&config.cond_dropout) {
        return Err(invalid("teacher batch size must be >= 1 and dropout in [0, 1]"));
    }
    if config.denoiser.total_timesteps != schedule.total_timesteps() {
        return Err(invalid("denoiser and schedule disagree on T"));
    }
    let mut rng = seeded(config.seed);
    let params = DenoiserParams::init(config.denoiser.clone(), Role::Teacher, &mut rng)?;
    let mut student = Student::full(params);
    let mut ema = student.clone();
    let mut opt = Optimizer::new(config.optimizer);
    let total = schedule.total_timesteps();
    let n = config.batch_size;
    let mut losses = Vec::with_capacity(config.iterations);
    let omega = vec![1.0; n];
    for it in 0..config.iterations {
        let (x0, mut cond) = gmm_sample_labelled(spec, n, &mut rng)?;
        for c in cond.iter_mut() {
            if rng.random::<f64>() < config.cond_dropout {
                *c = None;
            }
        }
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=total)).collect();
        let z = normal_matrix(&mut rng, n, spec.dim());
        let mut x = x0;
        for b in 0..n {
            let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
            for d in 0..x.ncols() {
                x[[b, d]] = a * x[[b, d]] + s * z[[b, d]];
            }
        }
        let tape = student.forward_train(x.view(), &t, &cond, &omega)?;
        let (loss, g) = mse_and_grad(&tape.eps, &z);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        losses.push(loss);
        let grads = student.backward(&tape, g.view())?;
        let lr = cosine_lr(config.lr, config.lr_final_fraction, it, config.iterations);
        student.apply(&mut opt, &grads, lr)?;
        // Short warm-up so the average does not carry the random init.
        let decay = config.ema_decay.min((1.0 + it as f64) / (10.0 + it as f64));
        ema.ema_toward(&student, decay)?;
    }
    Ok((ema.base.with_role(Role::Teacher), losses))
}

/// Mean over samples of `‖ε̂ − ε*‖²` at `x_t = α x₀ + σ z`, `x₀` from the data.
pub fn eps_error_vs_oracle<M: EpsModel + ?Sized>(
    model: &M,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded(seed);
    let (x0, cond) = gmm_sample_labelled(spec, n, &mut rng)?;
    let z = normal_matrix(&mut rng, n, spec.dim());
    let x = x0 * schedule.alpha(t) + z * schedule.sigma(t);
    let ts = vec![t; n];
    let eps = model.predict_eps(x.view(), &ts, &cond, &vec![1.0; n])?;
    let star = crate::oracle::gmm_eps_star(spec, schedule, x.view(), &ts, &cond)?;
    Ok((&eps - &star).iter().map(|v| v * v).sum::<f64>() / n as f64)
}

/// Converts an `f64` gradient matrix to the network scalar.
#[allow(dead_code)]
fn cast_grad<F: Scalar>(g: &Array2<f64>) -> Array2<F> {
    from_f64(g)
}
