//! Pipeline steps shared by the subcommands and the acceptance harness. Each
//! step reads its section of the run config and writes its artifacts under
//! the output directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use segcd::checkpoint::{
    denoiser_checkpoint, file_sha256, reward_checkpoint, sha256_hex, student_checkpoint, student_from_checkpoint,
    Checkpoint,
};
use segcd::config::RunConfig;
use segcd::denoiser::Role;
use segcd::distill::{init_student, run_full_tscd, write_loss_csv, StageReport};
use segcd::enhance::{run_dmd_enhance, EnhanceReport, RealScore};
use segcd::eval::{balanced_conditions, evaluate, write_csv, ConsistencyGenerator, Generator, MetricsReport, OdeGenerator};
use segcd::feedback::{
    calibrate_alpha, gen_preference_pairs, noisy_gmm_sampler, run_feedback_finetune, train_reward_model, write_pairs,
    FeedbackReport, RewardKind, RewardModel, RewardTrainReport,
};
use segcd::rng::{derive_seed, normal_matrix, seeded};
use segcd::solver::{consistency_path, ode_sample, Guided};
use segcd::{AnalyticTeacher, Cond, DenoiserParams, EpsModel, GmmSpec, NoiseSchedule, Student, TimestepGrid};

use crate::plot;

/// Seed streams, one per pipeline step.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Teacher = 1,
    Distill = 2,
    Enhance = 3,
    Feedback = 4,
    Reward = 5,
    Eval = 6,
    Plot = 7,
}

/// A resolved run: config, mixture, schedule and output directory.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: RunConfig,
    pub spec: GmmSpec,
    pub schedule: NoiseSchedule,
    pub out: PathBuf,
    config_hash: String,
}

impl Lab {
    /// Output goes to the config's directory (or the override variable).
    pub fn new(config: RunConfig) -> Result<Self> {
        let out = config.output_dir();
        Self::with_output(config, out)
    }

    pub fn with_output(config: RunConfig, out: PathBuf) -> Result<Self> {
        let spec = config.resolve_spec()?;
        let schedule = config.noise_schedule()?;
        let config_hash = sha256_hex(config.to_toml_string()?.as_bytes());
        Ok(Self { config, spec, schedule, out, config_hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// `out/rel`, creating its parent directory.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    /// Seed of a step: derived from the root seed, offset by the section's own.
    pub fn seed(&self, stream: Stream, local: u64) -> u64 {
        derive_seed(self.config.seed, stream as u64).wrapping_add(local)
    }

    fn stamp(&self, ck: &mut Checkpoint, provenance: &[String], stage: Option<usize>) {
        ck.meta.provenance = provenance.to_vec();
        ck.meta.extra = serde_json::json!({
            "config_sha256": self.config_hash,
            "schedule": self.config.schedule,
            "total_timesteps": self.config.total_timesteps,
            "stage": stage,
        });
    }

    fn save(&self, ck: &Checkpoint, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        ck.save(&p).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<fs::File>> {
        let p = self.path(rel)?;
        Ok(BufWriter::new(fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?))
    }
}

/// Where distillation targets come from.
#[derive(Debug, Clone)]
pub enum Teacher {
    Trained(DenoiserParams<f32>),
    /// The exact mixture ε*; no weights.
    Analytic,
}

impl Teacher {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading teacher {}", path.display()))?;
        Ok(Self::Trained(student_from_checkpoint(&ck)?.merged()?))
    }

    pub fn model<'a>(&'a self, lab: &'a Lab) -> TeacherModel<'a> {
        match self {
            Self::Trained(p) => TeacherModel::Trained(p),
            Self::Analytic => TeacherModel::Analytic(AnalyticTeacher::new(&lab.spec, &lab.schedule)),
        }
    }

    fn provenance(&self) -> String {
        match self {
            Self::Trained(_) => "train-teacher".into(),
            Self::Analytic => "analytic-teacher".into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TeacherModel<'a> {
    Trained(&'a DenoiserParams<f32>),
    Analytic(AnalyticTeacher<'a>),
}

impl EpsModel for TeacherModel<'_> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> segcd::Result<Array2<f64>> {
        match self {
            Self::Trained(p) => p.predict_eps(x, t, cond, omega),
            Self::Analytic(a) => a.predict_eps(x, t, cond, omega),
        }
    }
}

pub fn load_student(path: &Path) -> Result<Student<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(student_from_checkpoint(&ck)?)
}

// --- teacher ------------------------------------------------------------------

pub fn train_teacher(lab: &Lab) -> Result<DenoiserParams<f32>> {
    let mut cfg = lab.config.teacher.clone();
    cfg.seed = lab.seed(Stream::Teacher, cfg.seed);
    let (params, losses) = segcd::distill::train_teacher(&cfg, &lab.spec, &lab.schedule)?;
    let mut ck = denoiser_checkpoint(&params, &[]);
    lab.stamp(&mut ck, &["train-teacher".into()], None);
    lab.save(&ck, "teacher/teacher.ckpt")?;
    let mut w = lab.create("teacher/loss.csv")?;
    use std::io::Write;
    writeln!(w, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l:.8}")?;
    }
    Ok(params)
}

// --- distillation -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: Student<f32>,
    pub stage_paths: Vec<PathBuf>,
    pub final_path: PathBuf,
    pub reports: Vec<StageReport>,
}

/// Runs the configured method; every stage is checkpointed, the last one
/// also as `final.ckpt`.
pub fn distill(lab: &Lab, teacher: &Teacher) -> Result<DistillRun> {
    let mut dc = lab.config.distill.clone();
    dc.seed = lab.seed(Stream::Distill, dc.seed);
    let init = match teacher {
        Teacher::Trained(p) => init_student(p, &dc)?,
        Teacher::Analytic => {
            let mut rng = seeded(derive_seed(dc.seed, 11));
            let p = DenoiserParams::init(lab.config.teacher.denoiser.clone(), Role::Teacher, &mut rng)?;
            init_student(&p, &dc)?
        }
    };
    let model = teacher.model(lab);
    let (state, outcomes) = run_full_tscd(&dc, &model, init, &lab.spec, &lab.schedule)?;
    let dir = format!("distill/{}", dc.method);
    let mut stage_paths = Vec::with_capacity(outcomes.len());
    for (i, o) in outcomes.iter().enumerate() {
        let mut ck = student_checkpoint(&o.student, &[]);
        let step = format!("distill:{}:stage{i}:k{}", dc.method, o.report.k);
        lab.stamp(&mut ck, &[teacher.provenance(), step], Some(i));
        stage_paths.push(lab.save(&ck, &format!("{dir}/stage{i}_k{}.ckpt", o.report.k))?);
    }
    let mut ck = student_checkpoint(&state.student, &[]);
    lab.stamp(&mut ck, &[teacher.provenance(), format!("distill:{}", dc.method)], Some(outcomes.len() - 1));
    let final_path = lab.save(&ck, &format!("{dir}/final.ckpt"))?;
    let reports: Vec<StageReport> = outcomes.into_iter().map(|o| o.report).collect();
    write_loss_csv(lab.create(&format!("{dir}/loss.csv"))?, &reports)?;
    Ok(DistillRun { student: state.student, stage_paths, final_path, reports })
}

// --- enhancement --------------------------------------------------------------------

/// Distribution-matching enhancement of `student`; saved as `enhance/{name}.ckpt`.
pub fn enhance(lab: &Lab, student: Student<f32>, teacher: &Teacher, name: &str) -> Result<(Student<f32>, EnhanceReport)> {
    let mut ec = lab.config.enhance.clone();
    ec.seed = lab.seed(Stream::Enhance, ec.seed);
    let fake_init = match teacher {
        Teacher::Trained(p) => p.clone(),
        Teacher::Analytic => student.merged()?,
    };
    let target = teacher.model(lab);
    let real = match ec.real {
        RealScore::Oracle => TeacherModel::Analytic(AnalyticTeacher::new(&lab.spec, &lab.schedule)),
        RealScore::Teacher => target,
    };
    let (tuned, report) = run_dmd_enhance(&ec, student, &fake_init, &real, &target, &lab.spec, &lab.schedule)?;
    let mut ck = student_checkpoint(&tuned, &[]);
    lab.stamp(&mut ck, &[teacher.provenance(), format!("enhance:{name}")], None);
    lab.save(&ck, &format!("enhance/{name}.ckpt"))?;
    let mut w = lab.create(&format!("enhance/{name}_loss.csv"))?;
    use std::io::Write;
    writeln!(w, "iteration,fake_loss,dmd_norm,reg,heldout_mse")?;
    for r in &report.records {
        writeln!(w, "{},{:.8},{:.8},{:.8},{:.8}", r.iteration, r.fake_loss, r.dmd_norm, r.reg, r.heldout_mse)?;
    }
    Ok((tuned, report))
}

// --- feedback -----------------------------------------------------------------------

/// Synthetic preference pairs and a reward model fitted to them.
pub fn train_reward(lab: &Lab) -> Result<(RewardModel, RewardTrainReport)> {
    let mut rc = lab.config.reward.clone();
    rc.seed = lab.seed(Stream::Reward, rc.seed);
    if rc.oracle == RewardKind::Learned {
        bail!("reward.oracle must be an analytic reward");
    }
    let mut rng = seeded(derive_seed(rc.seed, 1));
    let pairs = gen_preference_pairs(&lab.spec, rc.oracle, noisy_gmm_sampler(&lab.spec, rc.candidate_noise), rc.pairs, &mut rng)?;
    write_pairs(lab.create("reward/pairs.txt")?, &pairs)?;
    let (model, report) = train_reward_model(&pairs, lab.spec.num_conditions(), &rc)?;
    let mut ck = reward_checkpoint(&model);
    let extra = ck.meta.extra.clone();
    lab.stamp(&mut ck, &["train-reward".into()], None);
    if let (Some(dst), Some(src)) = (ck.meta.extra.as_object_mut(), extra.as_object()) {
        dst.extend(src.clone());
    }
    lab.save(&ck, "reward/reward.ckpt")?;
    let mut w = lab.create("reward/loss.csv")?;
    use std::io::Write;
    writeln!(w, "iteration,loss")?;
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(w, "{i},{l:.8}")?;
    }
    Ok((model, report))
}

/// Reward-feedback fine-tuning; saved as `feedback/{name}.ckpt`.
pub fn feedback(lab: &Lab, student: &Student<f32>, teacher: &Teacher, name: &str) -> Result<(Student<f32>, FeedbackReport)> {
    let mut fc = lab.config.feedback.clone();
    fc.seed = lab.seed(Stream::Feedback, fc.seed);
    let learned = if fc.heads.contains(&RewardKind::Learned) { Some(train_reward(lab)?.0) } else { None };
    let alpha = calibrate_alpha(&fc, &teacher.model(lab), &lab.spec, &lab.schedule, learned.as_ref())?;
    let (tuned, report) = run_feedback_finetune(&fc, student, &alpha, &lab.spec, &lab.schedule, learned.as_ref())?;
    let mut ck = student_checkpoint(&tuned, &[]);
    lab.stamp(&mut ck, &[teacher.provenance(), format!("feedback:{name}")], None);
    lab.save(&ck, &format!("feedback/{name}.ckpt"))?;
    let mut w = lab.create(&format!("feedback/{name}_loss.csv"))?;
    use std::io::Write;
    writeln!(w, "iteration,loss,aes,percep")?;
    for r in &report.records {
        writeln!(w, "{},{:.8},{:.8},{:.8}", r.iteration, r.loss, r.aes, r.percep)?;
    }
    Ok((tuned, report))
}

// --- evaluation and plots ---------------------------------------------------------

/// How samples are drawn from a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Guided PF-ODE integration (teachers).
    Ode,
    /// Multistep consistency sampling (distilled students).
    Consistency,
}

fn generator<'a, M: EpsModel + 'a>(lab: &'a Lab, name: &str, model: M, sampler: Sampler) -> Box<dyn Generator + 'a> {
    let ev = &lab.config.eval;
    match sampler {
        Sampler::Ode => Box::new(OdeGenerator { name: name.into(), model, schedule: &lab.schedule, omega: ev.omega }),
        Sampler::Consistency => Box::new(ConsistencyGenerator {
            name: name.into(),
            model,
            schedule: &lab.schedule,
            omega: ev.omega,
            gamma: ev.gamma,
        }),
    }
}

/// Metrics at each step count. All generators of a run share noise and
/// reference samples.
pub fn evaluate_model<M: EpsModel>(lab: &Lab, name: &str, model: M, sampler: Sampler, steps: &[usize]) -> Result<Vec<MetricsReport>> {
    let g = generator(lab, name, model, sampler);
    Ok(evaluate(g.as_ref(), steps, &lab.spec, &lab.config.eval.to_eval(), lab.seed(Stream::Eval, 0))?)
}

pub fn write_report(lab: &Lab, rel: &str, reports: &[MetricsReport]) -> Result<PathBuf> {
    write_csv(lab.create(rel)?, reports)?;
    Ok(lab.out.join(rel))
}

pub const UNIFIED_HEADER: &str = "arch,steps,w2,mmd,coverage,mean_reward";

/// One adapter at several step counts, one row per count from most to fewest
/// steps, labelled with the mixture it was trained on.
pub fn write_unified_table(lab: &Lab, rel: &str, reports: &[MetricsReport]) -> Result<PathBuf> {
    use std::io::Write;
    let arch = format!("ring{}-{}d", lab.spec.num_components(), lab.spec.dim());
    let mut rows: Vec<&MetricsReport> = reports.iter().collect();
    rows.sort_by(|a, b| b.steps.cmp(&a.steps));
    let mut w = lab.create(rel)?;
    writeln!(w, "{UNIFIED_HEADER}")?;
    for r in rows {
        writeln!(w, "{arch},{},{:.8},{:.8},{:.6},{:.8}", r.steps, r.w2, r.mmd, r.coverage, r.mean_reward)?;
    }
    Ok(lab.out.join(rel))
}

/// Scatter and path plots at each step count: `plots/{name}_{steps}.svg` and
/// `plots/{name}_{steps}_paths.svg`.
pub fn plot_model<M: EpsModel>(lab: &Lab, name: &str, model: M, sampler: Sampler, steps: &[usize], n: usize) -> Result<Vec<PathBuf>> {
    let cond = balanced_conditions(&lab.spec, n);
    let z = normal_matrix(&mut seeded(lab.seed(Stream::Plot, 0)), n, lab.spec.dim());
    let omega = vec![lab.config.eval.omega; n];
    let mut written = Vec::new();
    for &k in steps {
        let states = match sampler {
            Sampler::Ode => {
                let grid = TimestepGrid::inference(lab.schedule.total_timesteps(), k)?;
                ode_sample(&Guided(&model), &grid, z.view(), &cond, &omega, &lab.schedule)?
            }
            Sampler::Consistency => {
                let mut rng = seeded(lab.seed(Stream::Plot, 1 + k as u64));
                consistency_path(&model, k, z.view(), &cond, &omega, &lab.schedule, lab.config.eval.gamma, &mut rng)?
            }
        };
        let last = states.last().expect("non-empty path");
        let title = format!("{name}, {k} step{}", if k == 1 { "" } else { "s" });
        let p = lab.path(&format!("plots/{name}_{k}.svg"))?;
        fs::write(&p, plot::scatter_svg(&title, &lab.spec, &lab.schedule, last.view(), &cond))?;
        written.push(p);
        let p = lab.path(&format!("plots/{name}_{k}_paths.svg"))?;
        fs::write(&p, plot::trajectory_svg(&format!("{title}: paths"), &lab.spec, &lab.schedule, &states, &cond, 64))?;
        written.push(p);
    }
    Ok(written)
}

// --- sweep ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda_kl: f64,
    pub lambda_reg: f64,
    pub w2: f64,
    pub mmd: f64,
    pub coverage: f64,
    pub mean_reward: f64,
}

/// Enhancement over a grid of `(λ_kl, λ_reg)`; 1-step metrics per cell,
/// written to `sweep/sweep.csv`.
pub fn lambda_sweep(lab: &Lab, student: &Student<f32>, teacher: &Teacher, kls: &[f64], regs: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda_kl in kls {
        for &lambda_reg in regs {
            let mut cell = lab.clone();
            cell.config.enhance.lambda_kl = lambda_kl;
            cell.config.enhance.lambda_reg = lambda_reg;
            cell.out = lab.out.join("sweep");
            let name = format!("kl{lambda_kl}_reg{lambda_reg}");
            let (tuned, _) = enhance(&cell, student.clone(), teacher, &name)?;
            let r = evaluate_model(lab, &name, &tuned, Sampler::Consistency, &[1])?.remove(0);
            rows.push(SweepRow { lambda_kl, lambda_reg, w2: r.w2, mmd: r.mmd, coverage: r.coverage, mean_reward: r.mean_reward });
        }
    }
    let mut w = lab.create("sweep/sweep.csv")?;
    use std::io::Write;
    writeln!(w, "lambda_kl,lambda_reg,w2,mmd,coverage,mean_reward")?;
    for r in &rows {
        writeln!(w, "{},{},{:.8},{:.8},{:.6},{:.8}", r.lambda_kl, r.lambda_reg, r.w2, r.mmd, r.coverage, r.mean_reward)?;
    }
    Ok(rows)
}

// --- full pipeline ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Every metrics row, also written to `report.csv`.
    pub reports: Vec<MetricsReport>,
    /// `(relative path, sha256)` of every deterministic artifact.
    pub artifacts: Vec<(String, String)>,
    /// Hash over `artifacts`.
    pub digest: String,
    /// Wall seconds per step.
    pub timings: Vec<(String, f64)>,
}

/// Files whose content depends on wall-clock time.
fn timing_dependent(rel: &str) -> bool {
    rel.ends_with("loss.csv") || rel == "timings.csv" || rel == "hashes.txt"
}

/// `(relative path, sha256)` of every file under `root` except timing logs,
/// sorted by path.
pub fn artifact_hashes(root: &Path) -> Result<Vec<(String, String)>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut hashes = Vec::new();
    for f in files {
        let rel = f.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
        if !timing_dependent(&rel) {
            hashes.push((rel, file_sha256(&f)?));
        }
    }
    hashes.sort();
    Ok(hashes)
}

pub fn digest(hashes: &[(String, String)]) -> String {
    let text: String = hashes.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
    sha256_hex(text.as_bytes())
}

/// Teacher, segmented distillation, one-step enhancement, feedback
/// fine-tuning, evaluation and plots, in that order.
pub fn run_pipeline(lab: &Lab) -> Result<PipelineOutcome> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let steps = lab.config.eval.steps.clone();

    let teacher = Teacher::Trained(train_teacher(lab)?);
    lap("teacher", &mut timings);
    let run = distill(lab, &teacher)?;
    lap("distill", &mut timings);
    let (enhanced, _) = enhance(lab, run.student.clone(), &teacher, "unified")?;
    lap("enhance", &mut timings);
    let (tuned, _) = feedback(lab, &enhanced, &teacher, "tuned")?;
    lap("feedback", &mut timings);

    let method = lab.config.distill.method.to_string();
    let names = [method.clone(), format!("{method}+dmd"), format!("{method}+dmd+hf")];
    let Teacher::Trained(params) = &teacher else { unreachable!() };
    let mut reports = evaluate_model(lab, "teacher", params, Sampler::Ode, &[50])?;
    for (i, (name, model)) in names.iter().zip([&run.student, &enhanced, &tuned]).enumerate() {
        let rows = evaluate_model(lab, name, model, Sampler::Consistency, &steps)?;
        if i == 1 {
            write_unified_table(lab, "unified.csv", &rows)?;
        }
        reports.extend(rows);
    }
    write_report(lab, "report.csv", &reports)?;
    lap("eval", &mut timings);

    let n = 1024;
    plot_model(lab, "teacher", params, Sampler::Ode, &[50], n)?;
    for (name, model) in names.iter().zip([&run.student, &enhanced, &tuned]) {
        plot_model(lab, &name.replace('+', "_"), model, Sampler::Consistency, &steps, n)?;
    }
    lap("plots", &mut timings);

    let artifacts = artifact_hashes(&lab.out)?;
    let digest = digest(&artifacts);
    {
        use std::io::Write;
        let mut w = lab.create("hashes.txt")?;
        for (p, h) in &artifacts {
            writeln!(w, "{h}  {p}")?;
        }
        writeln!(w, "{digest}  *")?;
        let mut w = lab.create("timings.csv")?;
        writeln!(w, "step,seconds")?;
        for (s, t) in &timings {
            writeln!(w, "{s},{t:.3}")?;
        }
    }
    Ok(PipelineOutcome { reports, artifacts, digest, timings })
}
