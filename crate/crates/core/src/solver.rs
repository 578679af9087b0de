//! The DDIM solver step Ψ, classifier-free guidance, and the ODE and
//! multistep consistency samplers.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::denoiser::Cond;
use crate::error::{invalid, Error, Result};
use crate::rng::standard_normal;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Anything that predicts ε for a batch of noisy points.
pub trait EpsModel: Sync {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        (**self).predict_eps(x, t, cond, omega)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    pub next: Array2<f64>,
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
}

/// Coefficients `(c_x, c_eps)` of `Ψ(x, ε̂, t, t') = c_x·x + c_eps·ε̂`.
#[inline]
pub fn psi_coefficients(t: usize, t_to: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    if t == 0 {
        // α(0) = 1, σ(0) = 0: the state is already clean.
        return (schedule.alpha(t_to), schedule.sigma(t_to));
    }
    let ratio = schedule.alpha(t_to) / schedule.alpha(t);
    (ratio, schedule.sigma(t_to) - ratio * schedule.sigma(t))
}

/// Deterministic first-order DDIM step from `t` to `t' ≤ t`, per batch row.
pub fn psi_step(
    x_t: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: &[usize],
    t_to: &[usize],
    schedule: &NoiseSchedule,
) -> Result<SolverOutput> {
    if x_t.raw_dim() != eps.raw_dim() || t.len() != x_t.nrows() || t_to.len() != x_t.nrows() {
        return Err(Error::ShapeMismatch("psi_step inputs".into()));
    }
    let mut x0 = x_t.to_owned();
    let mut next = x_t.to_owned();
    for b in 0..x_t.nrows() {
        schedule.check_timestep(t[b])?;
        if t_to[b] > t[b] {
            return Err(invalid(format!("solver target {} is after source {}", t_to[b], t[b])));
        }
        let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
        let (a_to, s_to) = (schedule.alpha(t_to[b]), schedule.sigma(t_to[b]));
        for d in 0..x_t.ncols() {
            let xv = x_t[[b, d]];
            let e = eps[[b, d]];
            let clean = if t[b] == 0 { xv } else { (xv - s * e) / a };
            x0[[b, d]] = clean;
            next[[b, d]] = if t_to[b] == t[b] { xv } else { a_to * clean + s_to * e };
        }
    }
    Ok(SolverOutput { next, x0, eps: eps.to_owned() })
}

/// `ε_null + ω (ε_c − ε_null)` from two passes of an unguided model.
pub fn cfg_combine(eps_cond: ArrayView2<f64>, eps_null: ArrayView2<f64>, omega: &[f64]) -> Array2<f64> {
    let mut out = eps_null.to_owned();
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        for d in 0..row.len() {
            row[d] += omega[b] * (eps_cond[[b, d]] - eps_null[[b, d]]);
        }
    }
    out
}

/// Classifier-free guided evaluation of a teacher.
///
/// The teacher is queried with ω = 1 (it does not consume ω); rows with a null
/// condition must use ω = 1.
pub fn cfg_eval<M: EpsModel + ?Sized>(
    teacher: &M,
    x: ArrayView2<f64>,
    t: &[usize],
    cond: &[Cond],
    omega: &[f64],
) -> Result<Array2<f64>> {
    if cond.len() != x.nrows() || omega.len() != x.nrows() {
        return Err(Error::ShapeMismatch("cfg_eval batch".into()));
    }
    if let Some(b) = (0..cond.len()).find(|&b| cond[b].is_none() && omega[b] != 1.0) {
        return Err(invalid(format!("row {b}: guidance scale {} needs a condition", omega[b])));
    }
    let ones = vec![1.0; x.nrows()];
    let eps_cond = teacher.predict_eps(x, t, cond, &ones)?;
    let guided: Vec<usize> = (0..cond.len()).filter(|&b| omega[b] != 1.0).collect();
    if guided.is_empty() {
        return Ok(eps_cond);
    }
    let xs = x.select(ndarray::Axis(0), &guided);
    let ts: Vec<usize> = guided.iter().map(|&b| t[b]).collect();
    let nulls = vec![None; guided.len()];
    let eps_null = teacher.predict_eps(xs.view(), &ts, &nulls, &ones[..guided.len()])?;
    let mut out = eps_cond;
    for (i, &b) in guided.iter().enumerate() {
        for d in 0..out.ncols() {
            let n = eps_null[[i, d]];
            out[[b, d]] = n + omega[b] * (out[[b, d]] - n);
        }
    }
    Ok(out)
}

/// A teacher wrapped so that `predict_eps` applies classifier-free guidance.
#[derive(Debug, Clone, Copy)]
pub struct Guided<M>(pub M);

impl<M: EpsModel> EpsModel for Guided<M> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        cfg_eval(&self.0, x, t, cond, omega)
    }
}

/// Integrates the PF-ODE down `grid` from `T` to 0. Returns the states
/// `x_T, …, x_{t_0}, x_0` (length `N + 1`).
pub fn ode_sample<M: EpsModel + ?Sized>(
    model: &M,
    grid: &TimestepGrid,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<Array2<f64>>> {
    let batch = z.nrows();
    let mut trajectory = Vec::with_capacity(grid.len() + 1);
    let mut x = z.to_owned();
    let points: Vec<usize> = grid.descending().collect();
    for (i, &t) in points.iter().enumerate() {
        let t_to = points.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict_eps(x.view(), &vec![t; batch], cond, omega)?;
        let step = psi_step(x.view(), eps.view(), &vec![t; batch], &vec![t_to; batch], schedule)?;
        trajectory.push(std::mem::replace(&mut x, step.next));
    }
    trajectory.push(x);
    Ok(trajectory)
}

/// Final state of [`ode_sample`].
pub fn ode_endpoint<M: EpsModel + ?Sized>(
    model: &M,
    grid: &TimestepGrid,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    Ok(ode_sample(model, grid, z, cond, omega, schedule)?.pop().expect("non-empty trajectory"))
}

/// Multistep consistency sampling on the `steps`-point grid `{T/steps, …, T}`.
///
/// At each grid time the model's ε̂ is used to jump to `s = ⌊(1 − γ) t_next⌋`
/// and the result is re-noised to the next grid time with fresh noise; γ = 1
/// jumps all the way to `x̂_0`. The last grid point jumps straight to 0.
#[allow(clippy::too_many_arguments)]
pub fn consistency_sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    steps: usize,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
    gamma: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut path = consistency_path(model, steps, z, cond, omega, schedule, gamma, rng)?;
    Ok(path.pop().expect("non-empty path"))
}

/// [`consistency_sample`] keeping the state at every grid time plus the
/// final sample (length `steps + 1`).
#[allow(clippy::too_many_arguments)]
pub fn consistency_path<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    steps: usize,
    z: ArrayView2<f64>,
    cond: &[Cond],
    omega: &[f64],
    schedule: &NoiseSchedule,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    if steps == 0 {
        return Err(invalid("consistency sampling needs at least one step"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    let grid = TimestepGrid::inference(schedule.total_timesteps(), steps)?;
    let points: Vec<usize> = grid.descending().collect();
    let batch = z.nrows();
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = z.to_owned();
    for (i, &t) in points.iter().enumerate() {
        let eps = model.predict_eps(x.view(), &vec![t; batch], cond, omega)?;
        let Some(&t_next) = points.get(i + 1) else {
            let last = psi_step(x.view(), eps.view(), &vec![t; batch], &vec![0; batch], schedule)?.next;
            path.push(x);
            path.push(last);
            return Ok(path);
        };
        let s = ((1.0 - gamma) * t_next as f64).floor() as usize;
        let jumped = psi_step(x.view(), eps.view(), &vec![t; batch], &vec![s; batch], schedule)?.next;
        let ratio = schedule.alpha(t_next) / schedule.alpha(s);
        let noise_std = (schedule.sigma(t_next).powi(2) - (ratio * schedule.sigma(s)).powi(2))
            .max(0.0)
            .sqrt();
        let mut next = jumped.mapv(|v| ratio * v);
        next.mapv_inplace(|v| v + noise_std * standard_normal(rng));
        path.push(std::mem::replace(&mut x, next));
    }
    unreachable!("loop returns on the last grid point")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{AnalyticTeacher, GmmSpec};
    use crate::rng::{normal_matrix, seeded};
    use crate::schedule::ScheduleKind;
    use ndarray::arr2;
    use std::sync::Mutex;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap()
    }

    /// ε* for data ~ N(0, I) under a VP schedule: ε*(x, t) = σ(t)·x.
    struct StandardGaussian<'a>(&'a NoiseSchedule);

    impl EpsModel for StandardGaussian<'_> {
        fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], _: &[Cond], _: &[f64]) -> Result<Array2<f64>> {
            let mut out = x.to_owned();
            for (b, mut row) in out.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| self.0.sigma(t[b]) * v);
            }
            Ok(out)
        }
    }

    #[test]
    fn zero_length_and_endpoint_steps() {
        let sch = schedule();
        let mut rng = seeded(0);
        let x = normal_matrix(&mut rng, 4, 2);
        let e = normal_matrix(&mut rng, 4, 2);
        let t = [10, 300, 700, 1000];
        let same = psi_step(x.view(), e.view(), &t, &t, &sch).unwrap();
        assert_eq!(same.next, x);
        let to_zero = psi_step(x.view(), e.view(), &t, &[0; 4], &sch).unwrap();
        assert_eq!(to_zero.next, to_zero.x0);
        assert!(psi_step(x.view(), e.view(), &t, &[11, 0, 0, 0], &sch).is_err());
    }

    #[test]
    fn reconstruction_identity() {
        let sch = schedule();
        let mut rng = seeded(1);
        for _ in 0..50 {
            let x = normal_matrix(&mut rng, 8, 2);
            let e = normal_matrix(&mut rng, 8, 2);
            let t: Vec<usize> = (0..8).map(|_| rng.random_range(1..=1000)).collect();
            let t_to: Vec<usize> = t.iter().map(|&v| rng.random_range(0..=v)).collect();
            let out = psi_step(x.view(), e.view(), &t, &t_to, &sch).unwrap();
            for b in 0..8 {
                if t_to[b] == t[b] {
                    continue;
                }
                for d in 0..2 {
                    let rebuilt = sch.alpha(t_to[b]) * out.x0[[b, d]] + sch.sigma(t_to[b]) * e[[b, d]];
                    assert!((rebuilt - out.next[[b, d]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_gaussian_step_matches_closed_form() {
        // With ε* = σ(t)x: x̂_0 = (1 − σ²(t)) x / α(t) = α(t) x, and the DDIM
        // step to t' is x' = (α(t)α(t') + σ(t)σ(t')) x.
        let sch = schedule();
        let model = StandardGaussian(&sch);
        let x = arr2(&[[0.7, -1.3]]);
        for (t, t_to) in [(1000, 0), (1000, 500), (600, 580), (20, 0)] {
            let eps = model.predict_eps(x.view(), &[t], &[None], &[1.0]).unwrap();
            let out = psi_step(x.view(), eps.view(), &[t], &[t_to], &sch).unwrap();
            let gain = sch.alpha(t) * sch.alpha(t_to) + sch.sigma(t) * sch.sigma(t_to);
            for d in 0..2 {
                assert!((out.next[[0, d]] - gain * x[[0, d]]).abs() < 1e-12);
                assert!((out.x0[[0, d]] - (1.0 - sch.sigma(t).powi(2)) * x[[0, d]] / sch.alpha(t)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cfg_formula() {
        struct Fixed;
        impl EpsModel for Fixed {
            fn predict_eps(&self, x: ArrayView2<f64>, _: &[usize], c: &[Cond], _: &[f64]) -> Result<Array2<f64>> {
                let mut out = Array2::zeros(x.raw_dim());
                for b in 0..x.nrows() {
                    let v = if c[b].is_some() { [1.0, 2.0] } else { [0.5, -1.0] };
                    out[[b, 0]] = v[0];
                    out[[b, 1]] = v[1];
                }
                Ok(out)
            }
        }
        let x = Array2::zeros((3, 2));
        let out = cfg_eval(&Fixed, x.view(), &[5, 5, 5], &[Some(0), Some(1), None], &[1.0, 3.0, 1.0]).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0, 2.0]);
        // 0.5 + 3 (1 - 0.5) = 2.0; -1 + 3 (2 + 1) = 8.0
        assert_eq!(out.row(1).to_vec(), vec![2.0, 8.0]);
        assert_eq!(out.row(2).to_vec(), vec![0.5, -1.0]);
        assert!(cfg_eval(&Fixed, x.view(), &[5, 5, 5], &[Some(0), None, None], &[1.0, 2.0, 1.0]).is_err());

        let same = cfg_combine(arr2(&[[0.3, 0.4]]).view(), arr2(&[[0.3, 0.4]]).view(), &[7.5]);
        assert_eq!(same, arr2(&[[0.3, 0.4]]));
    }

    #[test]
    fn ode_sampling_reductions() {
        let sch = schedule();
        let model = StandardGaussian(&sch);
        let mut rng = seeded(2);
        let z = normal_matrix(&mut rng, 5, 2);
        let cond = vec![None; 5];
        let ones = vec![1.0; 5];
        let one = TimestepGrid::inference(1000, 1).unwrap();
        let traj = ode_sample(&model, &one, z.view(), &cond, &ones, &sch).unwrap();
        assert_eq!(traj.len(), 2);
        let eps = model.predict_eps(z.view(), &[1000; 5], &cond, &ones).unwrap();
        let jump = psi_step(z.view(), eps.view(), &[1000; 5], &[0; 5], &sch).unwrap();
        assert_eq!(traj[1], jump.next);
        let grid = TimestepGrid::new(1000, 50).unwrap();
        let a = ode_sample(&model, &grid, z.view(), &cond, &ones, &sch).unwrap();
        let b = ode_sample(&model, &grid, z.view(), &cond, &ones, &sch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 51);
    }

    #[test]
    fn refinement_converges_on_single_gaussian() {
        // For N(0, I) data the VP probability-flow drift vanishes, so the exact
        // trajectory is constant and x_0 = x_T. Each DDIM step multiplies by
        // cos(Δθ) with α = cos θ, so the error must shrink as N doubles.
        let sch = schedule();
        let model = StandardGaussian(&sch);
        let z = arr2(&[[1.1, -0.4]]);
        let endpoint = |n: usize| {
            let grid = TimestepGrid::inference(1000, n).unwrap();
            ode_endpoint(&model, &grid, z.view(), &[None], &[1.0], &sch).unwrap()
        };
        let errors: Vec<f64> = [25, 50, 100, 200]
            .iter()
            .map(|&n| (&endpoint(n) - &z).iter().map(|v| v.abs()).sum())
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < 0.6 * w[0]), "{errors:?}");
    }

    struct Recording<'a, M> {
        inner: M,
        seen: &'a Mutex<Vec<usize>>,
    }

    impl<M: EpsModel> EpsModel for Recording<'_, M> {
        fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], c: &[Cond], w: &[f64]) -> Result<Array2<f64>> {
            self.seen.lock().unwrap().extend_from_slice(t);
            self.inner.predict_eps(x, t, c, w)
        }
    }

    #[test]
    fn consistency_sampling_contracts() {
        let sch = schedule();
        let mut rng = seeded(3);
        let z = normal_matrix(&mut rng, 6, 2);
        let cond = vec![None; 6];
        let ones = vec![1.0; 6];
        let model = StandardGaussian(&sch);
        let one = consistency_sample(&model, 1, z.view(), &cond, &ones, &sch, 1.0, &mut seeded(1)).unwrap();
        let eps = model.predict_eps(z.view(), &[1000; 6], &cond, &ones).unwrap();
        assert_eq!(one, psi_step(z.view(), eps.view(), &[1000; 6], &[0; 6], &sch).unwrap().next);
        let a = consistency_sample(&model, 4, z.view(), &cond, &ones, &sch, 1.0, &mut seeded(9)).unwrap();
        let b = consistency_sample(&model, 4, z.view(), &cond, &ones, &sch, 1.0, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(consistency_sample(&model, 0, z.view(), &cond, &ones, &sch, 1.0, &mut rng).is_err());

        for steps in [2, 4, 8] {
            let seen = Mutex::new(Vec::new());
            let rec = Recording { inner: StandardGaussian(&sch), seen: &seen };
            consistency_sample(&rec, steps, z.view(), &cond, &ones, &sch, 0.6, &mut rng).unwrap();
            let grid = TimestepGrid::inference(1000, steps).unwrap();
            assert!(seen.into_inner().unwrap().iter().all(|t| grid.points().contains(t)));
        }
    }

    #[test]
    fn analytic_teacher_posterior_mean_at_t1() {
        let sch = schedule();
        let spec = GmmSpec::ring(8, 4.0, 0.2);
        let teacher = AnalyticTeacher::new(&spec, &sch);
        let mut rng = seeded(5);
        let x = normal_matrix(&mut rng, 16, 2).mapv(|v| 3.0 * v);
        let cond = vec![None; 16];
        let eps = teacher.predict_eps(x.view(), &[1; 16], &cond, &[1.0; 16]).unwrap();
        let out = psi_step(x.view(), eps.view(), &[1; 16], &[0; 16], &sch).unwrap();
        let (a, s) = (sch.alpha(1), sch.sigma(1));
        for b in 0..16 {
            // Independent posterior mean E[x_0 | x_t] for the mixture.
            let mut logw = Vec::new();
            let mut means = Vec::new();
            for i in 0..spec.num_components() {
                let mu = spec.mean(i);
                let v = a * a * 0.04 + s * s;
                let d2: f64 = (0..2).map(|d| (x[[b, d]] - a * mu[d]).powi(2)).sum();
                logw.push(-d2 / (2.0 * v));
                let gain = a * 0.04 / v;
                means.push([mu[0] + gain * (x[[b, 0]] - a * mu[0]), mu[1] + gain * (x[[b, 1]] - a * mu[1])]);
            }
            let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = w.iter().sum();
            for d in 0..2 {
                let expected: f64 = w.iter().zip(&means).map(|(wi, mi)| wi * mi[d]).sum::<f64>() / total;
                assert!((out.x0[[b, d]] - expected).abs() < 1e-8, "{} vs {expected}", out.x0[[b, d]]);
            }
        }
    }
}
