//! Command-line interface.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::dataio::{self, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, CrossValidationOptions, EvalReport, FoldReport, CLAMP_NOTE};
use crate::losses::HyperParams;
use crate::pipeline::{self, StudentArtifact, StudentInit, TeacherArtifact, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const VARIANT_HELP: &str = "Training variant: full | baseline (teacher on edge MAE only, student \
without teacher-decoder reuse) | baseline-discriminator (baseline plus a discriminator on \
predicted vs real HR features) | no-local-topology (no node-strength term) | \
no-td-regularization (student without teacher-decoder reuse)";

#[derive(Debug, Parser)]
#[command(
    name = "l2skd",
    version,
    about = "Predict high-resolution brain graphs from low-resolution ones with an adversarially \
             aligned teacher and a distilled student",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired LR/HR dataset directory.
    Generate(GenerateArgs),
    /// Train the teacher on a dataset and write its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a trained teacher.
    TrainStudent(TrainStudentArgs),
    /// Evaluate a student on a dataset.
    Evaluate(EvaluateArgs),
    /// k-fold cross-validation of teacher + student training.
    CrossValidate(CrossValidateArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Run seed; falls back to $L2SKD_SEED.
    #[arg(long, env = "L2SKD_SEED", default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long = "lr-nodes")]
    lr_nodes: Option<usize>,
    #[arg(long = "hr-nodes")]
    hr_nodes: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    /// 60 subjects, 10 -> 20 nodes (explicit sizes still win).
    #[arg(long)]
    small: bool,
}

#[derive(Debug, Default, Args, Serialize)]
struct HyperArgs {
    /// Training iterations (full-batch).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "n-z")]
    n_z: Option<usize>,
}

impl HyperArgs {
    fn apply(&self, mut hp: HyperParams) -> Result<HyperParams> {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { hp.$target = v; })*
            };
        }
        set!(iters => iterations, learning_rate => learning_rate, sigma => sigma,
             lambda => lambda, lambda1 => lambda1, lambda2 => lambda2, lambda3 => lambda3,
             dropout => dropout, beta1 => beta1, beta2 => beta2, hidden => hidden, n_z => n_z);
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full", help = VARIANT_HELP)]
    variant: Variant,
    /// Training log CSV (default: checkpoint path with .log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct TrainStudentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the teacher's variant.
    #[arg(long, help = VARIANT_HELP)]
    variant: Option<Variant>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    /// Hyperparameters default to the teacher's.
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Subjects whose residual matrices to write next to the report.
    #[arg(long = "residual-subjects", value_delimiter = ',', default_value = "0")]
    residual_subjects: Vec<usize>,
}

#[derive(Debug, Args)]
struct CrossValidateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "full", help = VARIANT_HELP)]
    variant: Variant,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long)]
    report: PathBuf,
    /// Train folds concurrently; results are identical to a sequential run.
    #[arg(long = "parallel-folds")]
    parallel_folds: bool,
    #[arg(long = "residual-subjects", value_delimiter = ',', default_value = "0")]
    residual_subjects: Vec<usize>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    hyper: HyperArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::TrainStudent(a) => train_student(a),
        Command::Evaluate(a) => evaluate(a),
        Command::CrossValidate(a) => cross_validate(a),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn sibling_log(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("log.csv"))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let base = if a.small { SyntheticConfig::small() } else { SyntheticConfig::default() };
    let config = SyntheticConfig {
        n_subjects: a.subjects.unwrap_or(base.n_subjects),
        n_l: a.lr_nodes.unwrap_or(base.n_l),
        n_h: a.hr_nodes.unwrap_or(base.n_h),
    };
    let dataset = dataio::generate_synthetic(config, a.seed.seed)?;
    dataio::write_dataset(&a.out, &dataset)?;
    eprintln!(
        "wrote {} subjects ({} -> {} nodes) to {}",
        config.n_subjects,
        config.n_l,
        config.n_h,
        a.out.display()
    );
    Ok(())
}

fn train_teacher(a: TrainTeacherArgs) -> Result<()> {
    let hp = a.hyper.apply(HyperParams::default())?;
    let data = dataio::load_dataset(&a.data)?;
    let log_path = sibling_log(&a.out, a.log);
    let config = json!({
        "command": "train-teacher",
        "data": path_str(&a.data),
        "out": path_str(&a.out),
        "log": path_str(&log_path),
        "variant": a.variant,
        "seed": a.seed.seed,
        "hyperparams": hp,
    });
    let (mut teacher, log) = pipeline::train_teacher(&data.lr, &data.hr, &hp, a.variant, a.seed.seed)?;
    teacher.manifest.run_config = config.clone();
    teacher.save(&a.out)?;
    log.write_csv(&log_path, Some(&config.to_string()))?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        eprintln!(
            "teacher: edge MAE {:.6} -> {:.6} over {} iterations",
            first.loss_topo_global,
            last.loss_topo_global,
            log.records.len()
        );
    }
    Ok(())
}

fn train_student(a: TrainStudentArgs) -> Result<()> {
    let teacher = TeacherArtifact::load(&a.teacher)?;
    let hp = a.hyper.apply(teacher.manifest.hyperparams.clone())?;
    let variant = a.variant.unwrap_or(teacher.manifest.variant);
    let data = dataio::load_dataset(&a.data)?;
    let log_path = sibling_log(&a.out, a.log);
    let config = json!({
        "command": "train-student",
        "data": path_str(&a.data),
        "teacher": path_str(&a.teacher),
        "out": path_str(&a.out),
        "log": path_str(&log_path),
        "variant": variant,
        "seed": a.seed.seed,
        "hyperparams": hp,
    });
    let (mut student, log) =
        pipeline::train_student(&data.lr, &teacher, &hp, variant, a.seed.seed, StudentInit::Fresh)?;
    student.manifest.run_config = config.clone();
    student.save(&a.out)?;
    log.write_csv(&log_path, Some(&config.to_string()))?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        eprintln!(
            "student: loss {:.6} -> {:.6} over {} iterations",
            first.loss_g,
            last.loss_g,
            log.records.len()
        );
    }
    Ok(())
}

fn report_dir(report: &Path) -> PathBuf {
    report
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn check_subjects(subjects: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = subjects.iter().find(|&&s| s >= n) {
        return Err(Error::Validation(format!(
            "residual subject {bad} is out of range for {n} subjects"
        )));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let student = StudentArtifact::load(&a.student)?;
    let data = dataio::load_dataset(&a.data)?;
    check_subjects(&a.residual_subjects, data.n_subjects())?;
    let n_h = data.manifest.n_h;
    let predicted = pipeline::predict(&student, &data.lr)?;
    let metrics = evaluation::evaluate_predictions(&predicted, &data.hr, n_h, student.manifest.hyperparams.damping)?;
    let report = EvalReport {
        variant: student.manifest.variant,
        seed: student.manifest.seed,
        centrality_preprocessing: CLAMP_NOTE.to_string(),
        hyperparams: student.manifest.hyperparams.clone(),
        folds: vec![FoldReport {
            fold: 0,
            n_train: 0,
            n_test: data.n_subjects(),
            metrics,
        }],
        mean: metrics,
        run_config: json!({
            "command": "evaluate",
            "data": path_str(&a.data),
            "student": path_str(&a.student),
            "report": path_str(&a.report),
            "residual_subjects": a.residual_subjects,
        }),
        runtime_secs: 0.0,
    };
    report.write(&a.report)?;
    let dir = report_dir(&a.report);
    for &s in &a.residual_subjects {
        let r = evaluation::residual_from_prediction(predicted.row(s), data.hr.row(s), n_h)?;
        evaluation::write_residual(dir.join(format!("residual_subject{s}.csv")), &r)?;
    }
    eprintln!("edge MAE {:.6}; report written to {}", metrics.edge_mae, a.report.display());
    Ok(())
}

fn cross_validate(a: CrossValidateArgs) -> Result<()> {
    let hp = a.hyper.apply(HyperParams::default())?;
    let data = dataio::load_dataset(&a.data)?;
    check_subjects(&a.residual_subjects, data.n_subjects())?;
    let options = CrossValidationOptions {
        folds: a.folds,
        parallel: a.parallel_folds,
        residual_subjects: a.residual_subjects.clone(),
    };
    let mut cv = evaluation::cross_validate(&data, a.variant, &hp, a.seed.seed, &options)?;
    // parallel_folds is left out: it does not change any result.
    cv.report.run_config = json!({
        "command": "cross-validate",
        "data": path_str(&a.data),
        "variant": a.variant,
        "folds": a.folds,
        "report": path_str(&a.report),
        "seed": a.seed.seed,
        "residual_subjects": a.residual_subjects,
        "hyperparams": hp,
    });
    cv.report.write(&a.report)?;
    let dir = report_dir(&a.report);
    for (s, r) in &cv.residuals {
        evaluation::write_residual(dir.join(format!("residual_subject{s}.csv")), r)?;
    }
    eprintln!(
        "{}-fold cross-validation ({}) finished in {:.1} s: mean edge MAE {:.6}",
        a.folds,
        a.variant,
        cv.report.runtime_secs,
        cv.report.mean.edge_mae
    );
    Ok(())
}
