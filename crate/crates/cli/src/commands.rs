//! Argument parsing and dispatch for the `segcd` binary.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use segcd::config::{RunConfig, OUTPUT_DIR_ENV};
use segcd::distill::Method;

use crate::pipeline::{self, load_student, Lab, Sampler, Teacher};

#[derive(Debug, Parser)]
#[command(name = "segcd", version, about = "Segmented consistency distillation lab on a 2-D Gaussian mixture")]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct TeacherArg {
    /// Teacher checkpoint; defaults to `<output>/teacher/teacher.ckpt`.
    #[arg(long, conflicts_with = "analytic_teacher")]
    pub teacher: Option<PathBuf>,
    /// Use the exact mixture ε* instead of a trained teacher.
    #[arg(long)]
    pub analytic_teacher: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy teacher by denoising score matching.
    TrainTeacher,
    /// Distill a few-step student (one checkpoint per stage).
    Distill {
        #[arg(long)]
        method: Option<Method>,
        /// Segment counts per stage, e.g. `8,4,2,1`.
        #[arg(long, value_delimiter = ',')]
        segments: Option<Vec<usize>>,
        /// Always end consistency jumps at t = 0.
        #[arg(long)]
        pin_t_end_zero: bool,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// One-step enhancement of a distilled student.
    Enhance {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        t_gen: Option<usize>,
        #[arg(long, default_value = "enhanced")]
        name: String,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Reward-feedback fine-tuning of a student.
    Feedback {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value = "tuned")]
        name: String,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Fit a reward model on synthetic preference pairs.
    TrainReward,
    /// Metrics CSV for a checkpoint (or the analytic teacher).
    Eval {
        #[arg(long, required_unless_present = "analytic")]
        checkpoint: Option<PathBuf>,
        /// Sample the exact mixture ε* with the ODE solver.
        #[arg(long)]
        analytic: bool,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        /// Integrate the guided PF-ODE instead of consistency sampling.
        #[arg(long)]
        ode: bool,
        #[arg(long)]
        name: Option<String>,
    },
    /// SVG scatter and path plots for a checkpoint (or the analytic teacher).
    Plot {
        #[arg(long, required_unless_present = "analytic")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        analytic: bool,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long)]
        ode: bool,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
    },
    /// Enhancement over a grid of loss weights.
    Sweep {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0])]
        lambda_kl: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 1.0])]
        lambda_reg: Vec<f64>,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Teacher, distillation, enhancement, feedback, evaluation and plots.
    Pipeline,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn make_lab(cli: &Cli, config: RunConfig) -> Result<Lab> {
    let out = match &cli.output {
        Some(o) => o.clone(),
        None => config.output_dir(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {} (or set {OUTPUT_DIR_ENV})", out.display()))?;
    Lab::with_output(config, out)
}

fn resolve_teacher(lab: &Lab, arg: &TeacherArg) -> Result<Teacher> {
    if arg.analytic_teacher {
        return Ok(Teacher::Analytic);
    }
    let path = arg.teacher.clone().unwrap_or_else(|| lab.out.join("teacher/teacher.ckpt"));
    if !path.exists() {
        bail!("teacher checkpoint {} not found; run train-teacher or pass --analytic-teacher", path.display());
    }
    Teacher::load(&path)
}

/// Replaces the stage list. A different stage count keeps the leading
/// per-stage weights (padded with the last one) and splits the total
/// iteration budget evenly.
pub fn apply_segments(config: &mut segcd::distill::DistillConfig, segments: &[usize]) {
    let stages = segments.len();
    if stages != config.k_list.len() {
        let total: usize = config.iterations.iter().sum();
        let take = |v: &[f64]| -> Vec<f64> { (0..stages).map(|i| v[i.min(v.len() - 1)]).collect() };
        config.lambda_mse = take(&config.lambda_mse);
        config.lambda_adv = take(&config.lambda_adv);
        config.n_list = (0..stages).map(|i| config.n_list[i.min(config.n_list.len() - 1)]).collect();
        config.iterations = (0..stages).map(|i| total / stages + usize::from(i < total % stages)).collect();
    }
    config.k_list = segments.to_vec();
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::ShowConfig => {
            print!("{}", config.to_toml_string()?);
            Ok(())
        }
        Command::TrainTeacher => {
            let lab = make_lab(cli, config)?;
            pipeline::train_teacher(&lab)?;
            println!("{}", lab.out.join("teacher/teacher.ckpt").display());
            Ok(())
        }
        Command::Distill { method, segments, pin_t_end_zero, teacher } => {
            if let Some(m) = method {
                config.distill.method = *m;
            }
            if let Some(s) = segments {
                apply_segments(&mut config.distill, s);
            }
            config.distill.pin_t_end_zero |= *pin_t_end_zero;
            config.distill.validate()?;
            let lab = make_lab(cli, config)?;
            let teacher = resolve_teacher(&lab, teacher)?;
            let run = pipeline::distill(&lab, &teacher)?;
            for p in &run.stage_paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Enhance { student, t_gen, name, teacher } => {
            if let Some(t) = t_gen {
                config.enhance.t_gen = *t;
            }
            config.enhance.validate(config.total_timesteps)?;
            let lab = make_lab(cli, config)?;
            let teacher = resolve_teacher(&lab, teacher)?;
            pipeline::enhance(&lab, load_student(student)?, &teacher, name)?;
            println!("{}", lab.out.join(format!("enhance/{name}.ckpt")).display());
            Ok(())
        }
        Command::Feedback { student, name, teacher } => {
            let lab = make_lab(cli, config)?;
            let teacher = resolve_teacher(&lab, teacher)?;
            pipeline::feedback(&lab, &load_student(student)?, &teacher, name)?;
            println!("{}", lab.out.join(format!("feedback/{name}.ckpt")).display());
            Ok(())
        }
        Command::TrainReward => {
            let lab = make_lab(cli, config)?;
            let (_, report) = pipeline::train_reward(&lab)?;
            println!("held-out pair accuracy {:.4}", report.holdout_accuracy);
            Ok(())
        }
        Command::Eval { checkpoint, analytic, steps, ode, name } => {
            let lab = make_lab(cli, config)?;
            let steps = steps.clone().unwrap_or_else(|| lab.config.eval.steps.clone());
            let sampler = if *ode || *analytic { Sampler::Ode } else { Sampler::Consistency };
            let name = generator_name(name, checkpoint.as_ref(), *analytic);
            let reports = if *analytic {
                let teacher = Teacher::Analytic;
                pipeline::evaluate_model(&lab, &name, teacher.model(&lab), sampler, &steps)?
            } else {
                let model = load_student(checkpoint.as_ref().expect("clap enforces a checkpoint"))?;
                pipeline::evaluate_model(&lab, &name, &model, sampler, &steps)?
            };
            let path = pipeline::write_report(&lab, &format!("eval/{name}.csv"), &reports)?;
            print!("{}", fs::read_to_string(&path)?);
            Ok(())
        }
        Command::Plot { checkpoint, analytic, steps, ode, name, samples } => {
            let lab = make_lab(cli, config)?;
            let steps = steps.clone().unwrap_or_else(|| lab.config.eval.steps.clone());
            let sampler = if *ode || *analytic { Sampler::Ode } else { Sampler::Consistency };
            let name = generator_name(name, checkpoint.as_ref(), *analytic);
            let written = if *analytic {
                let teacher = Teacher::Analytic;
                pipeline::plot_model(&lab, &name, teacher.model(&lab), sampler, &steps, *samples)?
            } else {
                let model = load_student(checkpoint.as_ref().expect("clap enforces a checkpoint"))?;
                pipeline::plot_model(&lab, &name, &model, sampler, &steps, *samples)?
            };
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Sweep { student, lambda_kl, lambda_reg, teacher } => {
            let lab = make_lab(cli, config)?;
            let teacher = resolve_teacher(&lab, teacher)?;
            let rows = pipeline::lambda_sweep(&lab, &load_student(student)?, &teacher, lambda_kl, lambda_reg)?;
            println!("lambda_kl,lambda_reg,w2");
            for r in rows {
                println!("{},{},{:.6}", r.lambda_kl, r.lambda_reg, r.w2);
            }
            Ok(())
        }
        Command::Pipeline => {
            let lab = make_lab(cli, config)?;
            let outcome = pipeline::run_pipeline(&lab)?;
            print!("{}", fs::read_to_string(lab.out.join("report.csv"))?);
            println!("digest {}", outcome.digest);
            Ok(())
        }
    }
}

fn generator_name(name: &Option<String>, checkpoint: Option<&PathBuf>, analytic: bool) -> String {
    if let Some(n) = name {
        return n.clone();
    }
    if analytic {
        return "analytic".into();
    }
    checkpoint
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use segcd::distill::DistillConfig;

    #[test]
    fn single_segment_keeps_first_stage_weights_and_total_budget() {
        let mut c = DistillConfig::default();
        apply_segments(&mut c, &[1]);
        assert_eq!(c.k_list, vec![1]);
        assert_eq!(c.iterations, vec![10_000]);
        assert_eq!(c.lambda_adv, vec![0.0]);
        assert_eq!(c.lambda_mse, vec![1.0]);
        c.validate().unwrap();
    }

    #[test]
    fn same_length_only_replaces_k() {
        let mut c = DistillConfig::default();
        apply_segments(&mut c, &[16, 8, 4, 1]);
        assert_eq!(c.k_list, vec![16, 8, 4, 1]);
        assert_eq!(c.iterations, DistillConfig::default().iterations);
    }

    #[test]
    fn cli_parses_lists_and_conflicts() {
        let cli = Cli::try_parse_from(["segcd", "distill", "--method", "tscd", "--segments", "8,4,2,1", "--analytic-teacher"]).unwrap();
        match cli.command {
            Command::Distill { segments, teacher, .. } => {
                assert_eq!(segments.unwrap(), vec![8, 4, 2, 1]);
                assert!(teacher.analytic_teacher);
            }
            _ => panic!("wrong command"),
        }
        assert!(Cli::try_parse_from(["segcd", "distill", "--method", "xyz"]).is_err());
        assert!(Cli::try_parse_from(["segcd", "distill", "--teacher", "a", "--analytic-teacher"]).is_err());
        assert!(Cli::try_parse_from(["segcd", "eval"]).is_err());
    }
}
