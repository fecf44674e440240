//! Command-line front end. Exit codes: 0 on success, 1 for bad input (flags,
//! files, formats, configuration), 2 for internal failures.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::CloudSequence;
use crate::gradsuite::gradcheck_suite;
use crate::io::cost::{cost_report, unit_report};
use crate::io::{pcseq, RunConfig};
use crate::kinet_unit::{Ablation, KinetUnit};
use crate::network::{evaluate, train_stage, Prepared, Stage, TwoStreamModel};
use crate::stsolver::{normal_field_with, FieldConfig, RefineConfig, StNormal};
use crate::synth::{gen_motion_dataset, gen_sequence, BaseShape, DatasetConfig, MotionKind, MotionSpec};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint.knt";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(name = "stsurf", version, about = "Space-time surface fitting for dynamic point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Fit one tangent plane per point and print its space-time normal.
    FitNormals(NormalArgs),
    /// Like fit-normals, with iteratively reweighted fits.
    Refine(RefineArgs),
    /// Train the two-stream classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Report parameter and FLOP counts.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// The labeled motion-classification benchmark, as train.pcseq and test.pcseq.
    Dataset(DatasetArgs),
    /// One sequence with a chosen motion.
    Sequence(SequenceArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DatasetConfig::default().n_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = DatasetConfig::default().per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = DatasetConfig::default().n_points)]
    pub points: usize,
    #[arg(long, default_value_t = DatasetConfig::default().frames)]
    pub frames: usize,
    #[arg(long, default_value_t = DatasetConfig::default().speed)]
    pub speed: f64,
    #[arg(long, default_value_t = DatasetConfig::default().noise_sigma)]
    pub noise: f64,
    #[arg(long, default_value_t = DatasetConfig::default().outlier_frac)]
    pub outliers: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MotionArg {
    Static,
    Translation,
    Rotation,
    Shuffle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaseArg {
    Sphere,
    Cube,
    Plane,
}

#[derive(Debug, Args)]
pub struct SequenceArgs {
    /// Output PCSEQ file.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub motion: MotionArg,
    /// Per-frame displacement `x,y,z` for translation and shuffle.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.0, 0.0])]
    pub velocity: Vec<f64>,
    /// Radians per frame about the z axis, for rotation.
    #[arg(long, default_value_t = 0.1)]
    pub omega: f64,
    #[arg(long, value_enum, default_value = "sphere")]
    pub base: BaseArg,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
}

#[derive(Debug, Args)]
pub struct NormalArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub dr: f64,
    #[arg(long, default_value_t = 1)]
    pub dt: usize,
    /// Print the raw normal `(A, -1)` instead of the unit normal.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub normals: NormalArgs,
    #[arg(long, default_value_t = RefineConfig::default().max_iters)]
    pub max_iters: usize,
    #[arg(long, default_value_t = RefineConfig::default().tol)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    Static,
    #[value(name = "2")]
    Temporal,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Full,
    NoNormal,
    NoWeight,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoNormal => Ablation::NoNormal,
            AblationArg::NoWeight => Ablation::NoWeight,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's ablation.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
}

impl ModelArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = self.ablation {
            cfg.model.ablation = a.into();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled training sequences.
    #[arg(long)]
    pub input: PathBuf,
    /// Labeled evaluation sequences; the training set when absent.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Directory receiving the checkpoint and the metrics.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: StageArg,
    /// Initial parameters; required when training stage 2 alone.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = DatasetConfig::default().frames)]
    pub frames: usize,
    /// Points per frame.
    #[arg(long, default_value_t = DatasetConfig::default().n_points)]
    pub points: usize,
    /// Report a single kinematic unit over this static feature width
    /// instead of the whole model; `--points` then counts all points.
    #[arg(long)]
    pub unit_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    /// Random shapes per op.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        1
    } else {
        2
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(SynthCommand::Dataset(a)) => synth_dataset(&a),
        Command::Synth(SynthCommand::Sequence(a)) => synth_sequence(&a),
        Command::FitNormals(a) => fit_normals(&a, None),
        Command::Refine(a) => {
            let cfg = RefineConfig {
                max_iters: a.max_iters,
                tol: a.tol,
            };
            if cfg.max_iters == 0 || !(cfg.tol >= 0.0) {
                return Err(invalid("max-iters must be positive and tol non-negative"));
            }
            fit_normals(&a.normals, Some(cfg))
        }
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn synth_dataset(a: &DatasetArgs) -> Result<()> {
    let cfg = DatasetConfig {
        n_classes: a.classes,
        per_class: a.per_class,
        n_points: a.points,
        frames: a.frames,
        speed: a.speed,
        noise_sigma: a.noise,
        outlier_frac: a.outliers,
        ..DatasetConfig::default()
    };
    let ds = gen_motion_dataset(&cfg, a.seed)?;
    std::fs::create_dir_all(&a.output)?;
    pcseq::write_file(&a.output.join("train.pcseq"), &ds.train)?;
    pcseq::write_file(&a.output.join("test.pcseq"), &ds.test)?;
    println!("train={},test={}", ds.train.len(), ds.test.len());
    Ok(())
}

fn synth_sequence(a: &SequenceArgs) -> Result<()> {
    let v: [f64; 3] = a
        .velocity
        .as_slice()
        .try_into()
        .map_err(|_| invalid("velocity needs three components"))?;
    let kind = match a.motion {
        MotionArg::Static => MotionKind::Static,
        MotionArg::Translation => MotionKind::Translation(v),
        MotionArg::Rotation => MotionKind::Rotation(a.omega),
        MotionArg::Shuffle => MotionKind::Shuffle(v),
    };
    let base = match a.base {
        BaseArg::Sphere => BaseShape::Sphere,
        BaseArg::Cube => BaseShape::Cube,
        BaseArg::Plane => BaseShape::Plane,
    };
    let spec = MotionSpec::new(kind)
        .with_base(base)
        .with_noise(a.noise)
        .with_outliers(a.outliers);
    let (seq, _) = gen_sequence(&spec, a.points, a.frames, a.seed)?;
    pcseq::write_file(&a.output, &[seq])
}

/// Fixed six decimals with trailing zeros removed; negative zero prints as 0.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    match s {
        "-0" | "" => "0".to_string(),
        other => other.to_string(),
    }
}

fn fit_normals(a: &NormalArgs, refine: Option<RefineConfig>) -> Result<()> {
    let seqs = pcseq::read_file(&a.input)?;
    let cfg = FieldConfig {
        refine,
        ..FieldConfig::new(a.dr, a.dt, false)
    };
    let mut out = String::new();
    for (s, seq) in seqs.iter().enumerate() {
        if seqs.len() > 1 {
            let _ = writeln!(out, "# sequence {}", s + 1);
        }
        let field = normal_field_with(seq, &cfg)?;
        write_field(&mut out, seq, &field, !a.no_normalize);
    }
    emit(a.output.as_deref(), &out)
}

fn write_field(out: &mut String, seq: &CloudSequence, field: &[Vec<StNormal>], normalize: bool) {
    for (f, normals) in seq.frames().iter().zip(field) {
        for (p, n) in f.coords().iter().zip(normals) {
            let n = n.as_slice();
            // the raw normal (A, -1) is the unit normal scaled by 1 / |n_t|
            let scale = if normalize { 1.0 } else { -1.0 / n[3] };
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                format_value(p[0]),
                format_value(p[1]),
                format_value(p[2]),
                f.timestamp(),
                format_value(n[0] * scale),
                format_value(n[1] * scale),
                format_value(n[2] * scale),
                format_value(n[3] * scale),
            );
        }
    }
}

fn labeled(path: &Path, n_classes: usize) -> Result<Vec<CloudSequence>> {
    let seqs = pcseq::read_file(path)?;
    if seqs.is_empty() {
        return Err(invalid(format!("{} holds no sequences", path.display())));
    }
    if let Some(s) = seqs.iter().find(|s| s.label().is_none_or(|y| y >= n_classes)) {
        return Err(invalid(format!(
            "{}: every sequence needs a label below {n_classes}, found {:?}",
            path.display(),
            s.label()
        )));
    }
    Ok(seqs)
}

fn load_into(model: &mut TwoStreamModel, path: &Path) -> Result<()> {
    let (b, t) = (&mut model.backbone.store, &mut model.temporal.store);
    load_checkpoint(path, &mut [b, t])
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.model.load()?;
    cfg.train.seed = a.seed;
    let n = cfg.model.n_classes;
    let train_set = Prepared::new(&labeled(&a.input, n)?, &cfg.model)?;
    let eval_set = match &a.eval {
        Some(p) => Prepared::new(&labeled(p, n)?, &cfg.model)?,
        None => train_set.clone(),
    };
    let mut model = TwoStreamModel::new(cfg.model.clone(), a.seed)?;
    match (&a.checkpoint, a.stage) {
        (Some(p), _) => load_into(&mut model, p)?,
        (None, StageArg::Temporal) => {
            return Err(invalid("training stage 2 alone needs --checkpoint with a trained backbone"))
        }
        _ => {}
    }
    let mut metrics = Vec::new();
    if a.stage != StageArg::Temporal {
        metrics.extend(train_stage(
            &mut model,
            &train_set,
            &eval_set,
            Stage::Static,
            cfg.train.epochs_static,
            1,
            &cfg.train,
        )?);
    }
    if a.stage != StageArg::Static {
        let first = metrics.len() + 1;
        metrics.extend(train_stage(
            &mut model,
            &train_set,
            &eval_set,
            Stage::Temporal,
            cfg.train.epochs_temporal,
            first,
            &cfg.train,
        )?);
    }
    std::fs::create_dir_all(&a.output)?;
    save_checkpoint(
        &a.output.join(CHECKPOINT_FILE),
        &[&model.backbone.store, &model.temporal.store],
    )?;
    let mut text = String::new();
    for m in &metrics {
        text.push_str(&m.to_line());
        text.push('\n');
    }
    std::fs::write(a.output.join(METRICS_FILE), &text)?;
    if let Some(last) = metrics.last() {
        println!("{}", last.to_line());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.model.load()?;
    let data = Prepared::new(&labeled(&a.input, cfg.model.n_classes)?, &cfg.model)?;
    // every parameter is overwritten by the checkpoint, so the init seed is moot
    let mut model = TwoStreamModel::new(cfg.model, 0)?;
    load_into(&mut model, &a.checkpoint)?;
    let acc = evaluate(&model, &data)?;
    println!(
        "acc_static={:.6},acc_temporal={:.6},acc_fused={:.6}",
        acc.static_acc, acc.temporal_acc, acc.fused_acc
    );
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.model.load()?;
    if a.frames == 0 || a.points == 0 {
        return Err(invalid("frames and points must be positive"));
    }
    let report = match a.unit_dim {
        Some(dim) => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let unit = KinetUnit::new(&mut store, "unit", cfg.model.kinet, cfg.model.ablation, dim, None, &mut rng)?;
            unit_report(&unit, &store, a.points)
        }
        None => {
            let model = TwoStreamModel::new(cfg.model, 0)?;
            cost_report(&model, a.frames, a.points)
        }
    };
    println!("{report}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let entries = gradcheck_suite(a.seed, a.trials)?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.passed() { "pass" } else { "FAIL" };
        failed += usize::from(!e.passed());
        println!(
            "{verdict} {} max_rel_err={:.3e} tol={:.0e} entries={}",
            e.name, e.report.max_rel_err, e.tol, e.report.entries
        );
    }
    if failed > 0 {
        return Err(Error::Internal(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-0.0), "0");
        assert_eq!(format_value(-1e-9), "0");
        assert_eq!(format_value(-1.0), "-1");
        assert_eq!(format_value(0.447214), "0.447214");
        assert_eq!(format_value(0.5), "0.5");
        assert_eq!(format_value(12.0), "12");
        assert_eq!(format_value(-0.8944271909999159), "-0.894427");
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&Error::Parse { line: 3, msg: "x".into() }), 1);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
        assert_eq!(exit_code(&Error::SingularMatrix), 2);
        assert_eq!(exit_code(&Error::Shape("x".into())), 2);
        assert_eq!(exit_code(&Error::Internal("x".into())), 2);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
