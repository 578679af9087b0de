//! One-step enhancement: distribution-matching updates from the difference
//! between a real and an online fake denoiser, plus paired regression onto
//! teacher ODE endpoints.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{pred_x0, Cond, DenoiserParams, Role, Student, Tape};
use crate::error::{invalid, Error, Result};
use crate::nn::Scalar;
use crate::optim::{Optimizer, OptimizerKind};
use crate::oracle::GmmSpec;
use crate::rng::{derive_seed, normal_matrix, seeded};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::solver::{ode_endpoint, EpsModel, Guided};

/// Which model scores the real distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealScore {
    Oracle,
    #[default]
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub real: RealScore,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_fake: f64,
    /// Fake-model updates per generator update.
    pub fake_steps: usize,
    pub lambda_kl: f64,
    pub lambda_reg: f64,
    /// Time-step fed to the generator.
    pub t_gen: usize,
    pub regression: bool,
    /// Teacher ODE steps used for the regression targets.
    pub reg_steps: usize,
    /// Size of the precomputed (noise, teacher endpoint) pool that batches are
    /// drawn from when regression is on.
    pub reg_pool: usize,
    /// Range of the re-noising time for the distribution-matching term.
    pub t_range: (usize, usize),
    pub omega: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            real: RealScore::Teacher,
            iterations: 1000,
            batch_size: 256,
            lr_gen: 1e-6,
            lr_fake: 1e-3,
            fake_steps: 1,
            lambda_kl: 1.0,
            lambda_reg: 1.0,
            t_gen: 1000,
            regression: true,
            reg_steps: 50,
            reg_pool: 16384,
            t_range: (20, 980),
            omega: 1.0,
            eval_every: 50,
            eval_size: 512,
            optimizer: OptimizerKind::default(),
            seed: 0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self, total: usize) -> Result<()> {
        if self.lambda_kl < 0.0 || self.lambda_reg < 0.0 {
            return Err(invalid("enhancement weights must be non-negative"));
        }
        if self.t_gen == 0 || self.t_gen > total {
            return Err(invalid(format!("generator time-step {} outside (0, {total}]", self.t_gen)));
        }
        let (lo, hi) = self.t_range;
        if lo == 0 || lo > hi || hi > total {
            return Err(invalid(format!("re-noising range [{lo}, {hi}] outside [1, {total}]")));
        }
        if self.regression && self.reg_pool == 0 {
            return Err(invalid("regression needs a non-empty pool"));
        }
        if self.batch_size == 0 || self.lr_gen < 0.0 || self.lr_fake < 0.0 {
            return Err(invalid("batch size must be >= 1 and learning rates non-negative"));
        }
        Ok(())
    }
}

/// A one-step sample with the tape of the generating forward pass.
#[derive(Debug, Clone)]
pub struct OneStep<F: Scalar = f32> {
    pub x: Array2<f64>,
    pub tape: Tape<F>,
    /// `∂x/∂ε̂ = −σ(t_gen)/α(t_gen)`.
    pub scale: f64,
}

/// `x = Ψ(z, ε̂(z, t_gen, c), t_gen → 0)`.
pub fn one_step_generate<F: Scalar>(
    student: &Student<F>,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    t_gen: usize,
    schedule: &NoiseSchedule,
) -> Result<OneStep<F>> {
    let t = vec![t_gen; z.nrows()];
    let tape = student.forward_train(z, &t, cond, omega)?;
    let x = pred_x0(tape.eps.view(), z, &t, schedule)?;
    Ok(OneStep { x, tape, scale: -schedule.sigma(t_gen) / schedule.alpha(t_gen) })
}

/// Per-row distribution-matching direction at a generator sample `x`:
/// `(x̂₀_fake − x̂₀_real) / mean_d |x − x̂₀_real|`, both predictions taken at
/// `x_t = α x + σ n` for one random `t` per row.
///
/// Descending along this direction in `x` moves samples from the fake toward
/// the real distribution.
pub fn dmd_direction<R: EpsModel + ?Sized, K: EpsModel + ?Sized, G: Rng + ?Sized>(
    real: &R,
    fake: &K,
    x: ArrayView2<f64>,
    cond: &[Cond],
    t_range: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut G,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(t_range.0..=t_range.1)).collect();
    let noise = normal_matrix(rng, n, x.ncols());
    let mut x_t = x.to_owned();
    for b in 0..n {
        let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
        for d in 0..x.ncols() {
            x_t[[b, d]] = a * x[[b, d]] + s * noise[[b, d]];
        }
    }
    let ones = vec![1.0; n];
    let e_real = real.predict_eps(x_t.view(), &t, cond, &ones)?;
    let e_fake = fake.predict_eps(x_t.view(), &t, cond, &ones)?;
    let x0_real = pred_x0(e_real.view(), x_t.view(), &t, schedule)?;
    let x0_fake = pred_x0(e_fake.view(), x_t.view(), &t, schedule)?;
    let mut g = &x0_fake - &x0_real;
    for b in 0..n {
        let w = (0..x.ncols()).map(|d| (x[[b, d]] - x0_real[[b, d]]).abs()).sum::<f64>() / x.ncols() as f64;
        let w = w.max(1e-8);
        g.row_mut(b).mapv_inplace(|v| v / w);
    }
    Ok(g)
}

/// `∂/∂ε̂` of the surrogate `(1/B) Σ_b ½‖x_b − sg(x_b − g_b)‖²` through the
/// generator, whose gradient in `x` is `g / B`.
pub fn dmd_eps_grad(direction: &Array2<f64>, scale: f64) -> Array2<f64> {
    direction * (scale / direction.nrows() as f64)
}

/// Generator gradient of the distribution-matching term for one batch.
#[allow(clippy::too_many_arguments)]
pub fn dmd_gradient<F: Scalar, R: EpsModel + ?Sized, K: EpsModel + ?Sized, G: Rng + ?Sized>(
    real: &R,
    fake: &K,
    student: &Student<F>,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    t_gen: usize,
    t_range: (usize, usize),
    schedule: &NoiseSchedule,
    rng: &mut G,
) -> Result<crate::denoiser::GradientBuffer<F>> {
    let gen = one_step_generate(student, z, cond, omega, t_gen, schedule)?;
    let dir = dmd_direction(real, fake, gen.x.view(), cond, t_range, schedule, rng)?;
    student.backward(&gen.tape, dmd_eps_grad(&dir, gen.scale).view())
}

/// One denoising-score-matching step for the fake model on detached samples.
/// Returns the loss before the step.
pub fn train_fake_step<G: Rng + ?Sized>(
    fake: &mut Student<f32>,
    optimizer: &mut Optimizer,
    x: ArrayView2<f64>,
    cond: &[Cond],
    schedule: &NoiseSchedule,
    lr: f64,
    rng: &mut G,
) -> Result<f64> {
    let n = x.nrows();
    let total = schedule.total_timesteps();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=total)).collect();
    let z = normal_matrix(rng, n, x.ncols());
    let mut x_t = x.to_owned();
    for b in 0..n {
        let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
        for d in 0..x.ncols() {
            x_t[[b, d]] = a * x[[b, d]] + s * z[[b, d]];
        }
    }
    let tape = fake.forward_train(x_t.view(), &t, cond, &vec![1.0; n])?;
    let diff = &tape.eps - &z;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("fake-model loss".into()));
    }
    let grads = fake.backward(&tape, (diff * (2.0 / n as f64)).view())?;
    fake.apply(optimizer, &grads, lr)?;
    Ok(loss)
}

/// DSM loss of `model` on fixed samples, averaged over a fixed noise draw.
pub fn dsm_loss<M: EpsModel + ?Sized>(model: &M, x: ArrayView2<f64>, cond: &[Cond], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let n = x.nrows();
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.total_timesteps())).collect();
    let z = normal_matrix(&mut rng, n, x.ncols());
    let mut x_t = x.to_owned();
    for b in 0..n {
        let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
        for d in 0..x.ncols() {
            x_t[[b, d]] = a * x[[b, d]] + s * z[[b, d]];
        }
    }
    let eps = model.predict_eps(x_t.view(), &t, cond, &vec![1.0; n])?;
    Ok((&eps - &z).iter().map(|v| v * v).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceRecord {
    pub iteration: usize,
    pub fake_loss: f64,
    pub dmd_norm: f64,
    pub reg: f64,
    /// Paired MSE on the held-out noise set; NaN when not evaluated.
    pub heldout_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub records: Vec<EnhanceRecord>,
}

fn random_conditions<G: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut G) -> Vec<Cond> {
    let c = spec.num_conditions();
    (0..n).map(|_| if c == 0 { None } else { Some(rng.random_range(0..c)) }).collect()
}

/// Teacher ODE endpoints from `z` on the `steps`-point grid, with guidance.
pub fn teacher_endpoints<T: EpsModel + ?Sized>(
    teacher: &T,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let grid = TimestepGrid::inference(schedule.total_timesteps(), steps)?;
    ode_endpoint(&Guided(teacher), &grid, z, cond, omega, schedule)
}

/// Alternates fake-model updates with generator updates driven by
/// `λ_kl·(distribution matching) + λ_reg·(paired MSE to teacher endpoints)`.
///
/// `real` scores the data distribution; `teacher` supplies the regression
/// targets; `fake_init` seeds the online fake model.
pub fn run_dmd_enhance<R: EpsModel + ?Sized, T: EpsModel + ?Sized>(
    config: &EnhanceConfig,
    student: Student<f32>,
    fake_init: &DenoiserParams<f32>,
    real: &R,
    teacher: &T,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
) -> Result<(Student<f32>, EnhanceReport)> {
    config.validate(schedule.total_timesteps())?;
    let mut rng = seeded(config.seed);
    let mut gen = student;
    let mut fake = Student::full(fake_init.clone().with_role(Role::Fake));
    let mut gen_opt = Optimizer::new(config.optimizer);
    let mut fake_opt = Optimizer::new(config.optimizer);
    let n = config.batch_size;
    let omega = vec![config.omega; n];
    let use_reg = config.regression && config.lambda_reg > 0.0;

    let mut eval_rng = seeded(derive_seed(config.seed, 3));
    let eval_n = config.eval_size.max(1);
    let eval_z = normal_matrix(&mut eval_rng, eval_n, spec.dim());
    let eval_c = random_conditions(spec, eval_n, &mut eval_rng);
    let eval_w = vec![config.omega; eval_n];
    let eval_y = if use_reg {
        Some(teacher_endpoints(teacher, eval_z.view(), &eval_c, &eval_w, config.reg_steps, schedule)?)
    } else {
        None
    };
    let heldout = |g: &Student<f32>| -> Result<f64> {
        let Some(y) = &eval_y else { return Ok(f64::NAN) };
        let x = one_step_generate(g, eval_z.view(), &eval_c, &eval_w, config.t_gen, schedule)?.x;
        Ok((&x - y).iter().map(|v| v * v).sum::<f64>() / eval_n as f64)
    };

    let pool = if use_reg {
        let mut pool_rng = seeded(derive_seed(config.seed, 5));
        let m = config.reg_pool;
        let z = normal_matrix(&mut pool_rng, m, spec.dim());
        let c = random_conditions(spec, m, &mut pool_rng);
        let y = teacher_endpoints(teacher, z.view(), &c, &vec![config.omega; m], config.reg_steps, schedule)?;
        Some((z, c, y))
    } else {
        None
    };

    let mut records = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (cond, z, target) = match &pool {
            Some((pz, pc, py)) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pz.nrows())).collect();
                let cond = idx.iter().map(|&i| pc[i]).collect();
                (cond, pz.select(Axis(0), &idx), Some(py.select(Axis(0), &idx)))
            }
            None => (random_conditions(spec, n, &mut rng), normal_matrix(&mut rng, n, spec.dim()), None),
        };

        let mut fake_loss = 0.0;
        if config.lambda_kl > 0.0 {
            for _ in 0..config.fake_steps {
                let x = one_step_generate(&gen, z.view(), &cond, &omega, config.t_gen, schedule)?.x;
                fake_loss = train_fake_step(&mut fake, &mut fake_opt, x.view(), &cond, schedule, config.lr_fake, &mut rng)?;
            }
        }

        let out = one_step_generate(&gen, z.view(), &cond, &omega, config.t_gen, schedule)?;
        let mut grad_x = Array2::zeros(out.x.raw_dim());
        let mut dmd_norm = 0.0;
        if config.lambda_kl > 0.0 {
            let dir = dmd_direction(real, &fake, out.x.view(), &cond, config.t_range, schedule, &mut rng)?;
            dmd_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt() / (n as f64).sqrt();
            grad_x = grad_x + &dir * (config.lambda_kl / n as f64);
        }
        let mut reg = 0.0;
        if let Some(y) = &target {
            let diff = &out.x - y;
            reg = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
            grad_x = grad_x + diff * (2.0 * config.lambda_reg / n as f64);
        }
        if !(reg.is_finite() && dmd_norm.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss: reg + dmd_norm });
        }
        let grads = gen.backward(&out.tape, (grad_x * out.scale).view())?;
        gen.apply(&mut gen_opt, &grads, config.lr_gen)?;

        let heldout_mse = if config.eval_every > 0 && (it + 1) % config.eval_every == 0 { heldout(&gen)? } else { f64::NAN };
        records.push(EnhanceRecord { iteration: it, fake_loss, dmd_norm, reg, heldout_mse });
    }
    Ok((gen, EnhanceReport { records }))
}
