use ndarray::{arr2, Array2};
use proptest::prelude::*;

use segcd::checkpoint::{student_checkpoint, student_from_checkpoint, Checkpoint};
use segcd::denoiser::{lora_merge, Role};
use segcd::eval::{mode_coverage, sliced_w2};
use segcd::oracle::gmm_score;
use segcd::rng::{normal_matrix, seeded};
use segcd::schedule::segment_boundary;
use segcd::solver::{cfg_combine, consistency_sample, psi_step};
use segcd::{
    AnalyticTeacher, DenoiserConfig, DenoiserParams, EpsModel, GmmSpec, LoraAdapter, NoiseSchedule, ScheduleKind,
    Student,
};

fn linear() -> NoiseSchedule {
    NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap()
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #[test]
    fn boundary_is_the_lower_segment_edge(total in 1usize..2000, k_frac in 0.0f64..1.0, t_frac in 0.0f64..=1.0) {
        let k = 1 + ((total - 1) as f64 * k_frac) as usize;
        let t_ref = (total as f64 * t_frac) as usize;
        let width = total / k;
        let b = segment_boundary(t_ref, total, k).unwrap();
        prop_assert!(b <= t_ref);
        prop_assert_eq!(b % width, 0);
        prop_assert!(t_ref - b < width);
    }

    #[test]
    fn ddim_step_with_true_noise_lands_on_the_forward_marginal(
        t in 1usize..=1000, frac in 0.0f64..=1.0, x0 in (-5.0f64..5.0, -5.0f64..5.0), e in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let sch = linear();
        let to = (t as f64 * frac) as usize;
        let x_t = arr2(&[[sch.alpha(t) * x0.0 + sch.sigma(t) * e.0, sch.alpha(t) * x0.1 + sch.sigma(t) * e.1]]);
        let eps = arr2(&[[e.0, e.1]]);
        let out = psi_step(x_t.view(), eps.view(), &[t], &[to], &sch).unwrap();
        let want = arr2(&[[sch.alpha(to) * x0.0 + sch.sigma(to) * e.0, sch.alpha(to) * x0.1 + sch.sigma(to) * e.1]]);
        prop_assert!(max_abs(&out.next, &want) < 1e-9 * (1.0 / sch.alpha(t)));
        prop_assert!(max_abs(&out.x0, &arr2(&[[x0.0, x0.1]])) < 1e-9 / sch.alpha(t));
    }

    #[test]
    fn guidance_endpoints(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let c = normal_matrix(&mut rng, 5, 2);
        let u = normal_matrix(&mut rng, 5, 2);
        prop_assert_eq!(cfg_combine(c.view(), u.view(), &[0.0; 5]), u.clone());
        prop_assert!(max_abs(&cfg_combine(c.view(), u.view(), &[1.0; 5]), &c) < 1e-12);
        let twice = cfg_combine(c.view(), u.view(), &[2.0; 5]);
        prop_assert!(max_abs(&twice, &(&c * 2.0 - &u)) < 1e-12);
    }

    #[test]
    fn single_component_score_is_linear(x in (-6.0f64..6.0, -6.0f64..6.0), t in 0usize..=1000, std in 0.05f64..2.0) {
        let sch = linear();
        let spec = GmmSpec { weights: vec![1.0], means: vec![vec![1.5, -0.5]], stds: vec![std], conditions: vec![vec![0]] };
        let var = sch.alpha(t).powi(2) * std * std + sch.sigma(t).powi(2);
        let s = gmm_score(&spec, &sch, arr2(&[[x.0, x.1]]).view(), &[t], &[None]).unwrap();
        let want = [-(x.0 - sch.alpha(t) * 1.5) / var, -(x.1 + sch.alpha(t) * 0.5) / var];
        prop_assert!((s[[0, 0]] - want[0]).abs() <= 1e-9 * want[0].abs().max(1.0));
        prop_assert!((s[[0, 1]] - want[1]).abs() <= 1e-9 * want[1].abs().max(1.0));
    }

    #[test]
    fn translated_sets_are_at_the_projected_offset(seed in 0u64..500, v in (-3.0f64..3.0, -3.0f64..3.0)) {
        let a = normal_matrix(&mut seeded(seed), 64, 2);
        let mut b = a.clone();
        b.column_mut(0).mapv_inplace(|x| x + v.0);
        b.column_mut(1).mapv_inplace(|x| x + v.1);
        let got = sliced_w2(a.view(), b.view(), 32, &mut seeded(7)).unwrap();
        // Same directions as the metric draws.
        let mut rng = seeded(7);
        let mut want = 0.0;
        for _ in 0..32 {
            let u = normal_matrix(&mut rng, 1, 2);
            let n = (u[[0, 0]].powi(2) + u[[0, 1]].powi(2)).sqrt();
            want += ((v.0 * u[[0, 0]] + v.1 * u[[0, 1]]) / n).abs();
        }
        want /= 32.0;
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        let back = sliced_w2(b.view(), a.view(), 32, &mut seeded(7)).unwrap();
        prop_assert!((got - back).abs() < 1e-12);
    }

    #[test]
    fn merged_adapter_is_forward_equivalent(seed in 0u64..200, rank in 1usize..6) {
        let mut rng = seeded(seed);
        let config = DenoiserConfig { hidden: vec![16, 16], ..DenoiserConfig::default() };
        let base = DenoiserParams::<f64>::init(config, Role::Student, &mut rng).unwrap();
        let mut adapter = LoraAdapter::new(&base.net, rank, 2.0, &mut rng).unwrap();
        for f in &mut adapter.factors {
            let noise = normal_matrix(&mut rng, f.b.nrows(), f.b.ncols()) * 0.1;
            f.b.assign(&noise);
        }
        let merged = lora_merge(&base, &adapter).unwrap();
        let x = normal_matrix(&mut rng, 32, 2);
        let t: Vec<usize> = (0..32).map(|i| i * 31).collect();
        let c: Vec<_> = (0..32).map(|i| if i % 5 == 0 { None } else { Some(i % 8) }).collect();
        let w = vec![1.0; 32];
        let a = Student::with_adapter(base, adapter).unwrap().predict_eps(x.view(), &t, &c, &w).unwrap();
        let b = merged.predict_eps(x.view(), &t, &c, &w).unwrap();
        prop_assert!(max_abs(&a, &b) < 1e-10);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..200, with_adapter in any::<bool>()) {
        let mut rng = seeded(seed);
        let config = DenoiserConfig { hidden: vec![8], ..DenoiserConfig::default() };
        let base = DenoiserParams::<f32>::init(config, Role::Student, &mut rng).unwrap();
        let s = if with_adapter {
            let a = LoraAdapter::new(&base.net, 2, 1.0, &mut rng).unwrap();
            Student::with_adapter(base, a).unwrap()
        } else {
            Student::full(base)
        };
        let bytes = student_checkpoint(&s, &["p"]).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(student_from_checkpoint(&back).unwrap(), s);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn coverage_counts_visited_modes() {
    let spec = GmmSpec::default();
    for k in 0..=8 {
        let pts: Vec<f64> = (0..k).flat_map(|i| spec.mean(i).to_vec()).collect();
        let x = Array2::from_shape_vec((k, 2), pts).unwrap();
        let cov = if k == 0 { mode_coverage(arr2(&[[100.0, 100.0]]).view(), &spec, 3.0) } else { mode_coverage(x.view(), &spec, 3.0) };
        assert_eq!(cov, k as f64 / 8.0);
    }
}

#[test]
fn one_step_consistency_sample_is_the_jump_from_t() {
    let sch = linear();
    let spec = GmmSpec::default();
    let teacher = AnalyticTeacher::new(&spec, &sch);
    let z = normal_matrix(&mut seeded(3), 16, 2);
    let c: Vec<_> = (0..16).map(|i| Some(i % 8)).collect();
    let w = vec![1.0; 16];
    let got = consistency_sample(&teacher, 1, z.view(), &c, &w, &sch, 1.0, &mut seeded(4)).unwrap();
    let eps = teacher.predict_eps(z.view(), &[1000; 16], &c, &w).unwrap();
    let want = (&z - &(eps * sch.sigma(1000))) / sch.alpha(1000);
    assert!(max_abs(&got, &want) < 1e-9);
}
