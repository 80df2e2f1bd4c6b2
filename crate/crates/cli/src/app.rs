use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use linattn_bench::{
    build_report, emit_report, fit_scaling_exponent, to_csv, Mechanism, ProfileOptions, CONVENTION,
};
use linattn_core::metrics::ConfusionMatrix;
use linattn_core::network::data::generate_synthetic_dataset;
use linattn_core::network::train::{train_demo, AdamConfig, TrainOptions};
use linattn_core::network::{self, checkpoint, ManetConfig};
use linattn_core::{parallel, DType, Error, Result, Scalar};

use crate::checks::{self, DemoSettings, GradTarget, SuiteOptions, Tolerances};
use crate::image;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "linattn", version, about = "Kernel attention benchmarks, oracle checks and a toy segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for tensor kernels; 1 keeps runs bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BenchMode {
    Analytic,
    Measured,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TargetArg {
    All,
    Kernel,
    Cam,
    Block,
    Resnext,
    Manet,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic and measured cost of dot vs kernel attention.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dk: usize,
        #[arg(long, default_value_t = 64)]
        dv: usize,
        #[arg(long, value_enum, default_value_t = BenchMode::Analytic)]
        mode: BenchMode,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Measured runs whose modelled footprint exceeds this are skipped.
        #[arg(long, default_value_t = 512)]
        memory_budget_mib: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Linear vs quadratic kernel attention on random instances.
    Equiv {
        #[command(flatten)]
        common: Common,
        /// Fixed sizes; each is drawn per trial when omitted.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dk: Option<usize>,
        #[arg(long)]
        dv: Option<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Reverse-mode gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = TargetArg::All)]
        target: TargetArg,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Trains the toy network on synthetic shapes.
    TrainDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        /// Checkpoint destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segments a PPM image with a checkpoint and writes a PGM label map.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a predicted PGM label map against a reference.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Runs the invariant suite and prints a pass/fail table.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Also run the timing-based scaling check.
        #[arg(long)]
        with_scaling: bool,
        #[arg(long)]
        skip_training: bool,
        #[arg(long, hide = true)]
        corrupt_tolerance: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Bench { common, .. }
            | Command::Equiv { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::TrainDemo { common, .. }
            | Command::Segment { common, .. }
            | Command::Metrics { common, .. }
            | Command::Selftest { common, .. } => common,
        }
    }
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    CheckFailed,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
pub fn dispatch<I, A>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    parallel::set_threads(cli.command.common().threads);
    match run(&cli.command, out) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::CheckFailed) => EXIT_FAIL,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::Data(_) | Error::Io(_) => {
                    let _ = writeln!(err, "usage: linattn <bench|equiv|gradcheck|train-demo|segment|metrics|selftest> [flags]; see --help");
                    EXIT_USAGE
                }
                _ => EXIT_FAIL,
            }
        }
    }
}

fn print_config(out: &mut dyn Write, name: &str, common: &Common, dtype: DType, extra: &[(&str, String)]) -> Result<()> {
    write!(out, "config: command={name} seed={} threads={} dtype={dtype}", common.seed, common.threads)?;
    for (k, v) in extra {
        write!(out, " {k}={v}")?;
    }
    writeln!(out)?;
    Ok(())
}

fn run(cmd: &Command, out: &mut dyn Write) -> Result<Status> {
    match cmd {
        Command::Bench {
            common,
            n_list,
            dk,
            dv,
            mode,
            repeats,
            memory_budget_mib,
            out: csv,
            svg,
        } => {
            if common.dtype == Some(DtypeArg::F64) {
                return Err(usage("bench measures f32 buffers only; use --dtype f32"));
            }
            print_config(
                out,
                "bench",
                common,
                DType::F32,
                &[
                    ("n_list", format!("{n_list:?}")),
                    ("dk", dk.to_string()),
                    ("dv", dv.to_string()),
                    ("mode", format!("{mode:?}").to_lowercase()),
                    ("repeats", repeats.to_string()),
                    ("memory_budget_mib", memory_budget_mib.to_string()),
                ],
            )?;
            writeln!(out, "convention: {CONVENTION}")?;
            if common.threads > 1 && *mode == BenchMode::Measured {
                writeln!(out, "note: multi-threaded timings are not comparable with the single-thread reference")?;
            }
            let opts = ProfileOptions {
                repeats: *repeats,
                memory_budget: memory_budget_mib << 20,
                seed: common.seed,
                ..ProfileOptions::default()
            };
            let measured = (*mode == BenchMode::Measured).then_some(&opts);
            let report = build_report(n_list, *dk, *dv, measured)?;
            match csv {
                Some(path) => {
                    emit_report(&report, path, svg.as_deref())?;
                    writeln!(out, "wrote {} rows to {}", report.rows.len(), path.display())?;
                }
                None => {
                    if svg.is_some() {
                        return Err(usage("--svg needs --out"));
                    }
                    out.write_all(to_csv(&report).as_bytes())?;
                }
            }
            if measured.is_some() {
                for m in Mechanism::ALL {
                    let points = report.runtime_points(m);
                    if points.len() >= 3 {
                        writeln!(out, "{m} runtime slope {:.3} over {} sizes", fit_scaling_exponent(&points)?, points.len())?;
                    }
                }
            }
            Ok(Status::Ok)
        }
        Command::Equiv {
            common,
            n,
            dk,
            dv,
            trials,
            tol,
        } => {
            require_f64(common, "equiv")?;
            let fixed = match (n, dk, dv) {
                (Some(n), Some(dk), Some(dv)) if *n > 0 && *dk > 0 && *dv > 0 => Some((*n, *dk, *dv)),
                (None, None, None) => None,
                _ => return Err(usage("--n, --dk and --dv must be given together and be positive")),
            };
            print_config(
                out,
                "equiv",
                common,
                DType::F64,
                &[
                    ("sizes", fixed.map_or("random".into(), |s| format!("{s:?}"))),
                    ("trials", trials.to_string()),
                    ("tol", format!("{tol:e}")),
                ],
            )?;
            let worst = checks::max_equivalence_error(*trials, common.seed, fixed)?;
            let ok = worst <= *tol;
            writeln!(out, "max relative error {worst:.3e} ({})", if ok { "pass" } else { "FAIL" })?;
            Ok(if ok { Status::Ok } else { Status::CheckFailed })
        }
        Command::Gradcheck {
            common,
            seeds,
            target,
            tol,
        } => {
            require_f64(common, "gradcheck")?;
            print_config(
                out,
                "gradcheck",
                common,
                DType::F64,
                &[("seeds", seeds.to_string()), ("target", format!("{target:?}").to_lowercase()), ("tol", format!("{tol:e}"))],
            )?;
            let targets: Vec<GradTarget> = match target {
                TargetArg::All => GradTarget::ALL.to_vec(),
                TargetArg::Kernel => vec![GradTarget::KernelAttention],
                TargetArg::Cam => vec![GradTarget::Cam],
                TargetArg::Block => vec![GradTarget::AttentionBlock],
                TargetArg::Resnext => vec![GradTarget::ResNeXtBlock],
                TargetArg::Manet => vec![GradTarget::Manet],
            };
            let mut ok = true;
            for (t, worst) in checks::gradcheck_worst(&targets, *seeds)? {
                let pass = worst <= *tol;
                ok &= pass;
                writeln!(out, "{:<26} worst rel err {worst:.3e} {}", t.name(), if pass { "pass" } else { "FAIL" })?;
            }
            Ok(if ok { Status::Ok } else { Status::CheckFailed })
        }
        Command::TrainDemo {
            common,
            steps,
            classes,
            size,
            samples,
            batch,
            lr,
            out: ckpt,
        } => {
            let dtype = common.dtype.map_or(DType::F32, DType::from);
            print_config(
                out,
                "train-demo",
                common,
                dtype,
                &[
                    ("steps", steps.to_string()),
                    ("classes", classes.to_string()),
                    ("size", size.to_string()),
                    ("samples", samples.to_string()),
                    ("batch", batch.to_string()),
                    ("lr", format!("{lr:e}")),
                ],
            )?;
            let settings = DemoSettings {
                samples: *samples,
                size: *size,
                classes: *classes,
                seed: common.seed,
                train: TrainOptions {
                    steps: *steps,
                    batch_size: *batch,
                    adam: AdamConfig {
                        lr: *lr,
                        ..AdamConfig::default()
                    },
                    seed: common.seed,
                    ..TrainOptions::default()
                },
                smoothing: 20,
            };
            match dtype {
                DType::F32 => train_cmd::<f32>(&settings, ckpt.as_ref(), out),
                DType::F64 => train_cmd::<f64>(&settings, ckpt.as_ref(), out),
            }
        }
        Command::Segment {
            common,
            model,
            input,
            out: dest,
        } => {
            let stored = checkpoint::peek_dtype(&std::fs::read(model)?)?;
            let dtype = common.dtype.map_or(stored, DType::from);
            print_config(
                out,
                "segment",
                common,
                dtype,
                &[("model", model.display().to_string()), ("input", input.display().to_string()), ("out", dest.display().to_string())],
            )?;
            match (stored, dtype) {
                (DType::F32, DType::F32) => segment_cmd::<f32, f32>(model, input, dest, out),
                (DType::F32, DType::F64) => segment_cmd::<f32, f64>(model, input, dest, out),
                (DType::F64, DType::F32) => segment_cmd::<f64, f32>(model, input, dest, out),
                (DType::F64, DType::F64) => segment_cmd::<f64, f64>(model, input, dest, out),
            }
        }
        Command::Metrics {
            common,
            pred,
            reference,
            classes,
        } => {
            print_config(
                out,
                "metrics",
                common,
                common.dtype.map_or(DType::F64, DType::from),
                &[("pred", pred.display().to_string()), ("ref", reference.display().to_string()), ("classes", classes.to_string())],
            )?;
            let (ph, pw, p) = image::load_labels(pred)?;
            let (rh, rw, r) = image::load_labels(reference)?;
            if (ph, pw) != (rh, rw) {
                return Err(Error::Data(format!("prediction is {ph}×{pw}, reference {rh}×{rw}")));
            }
            let mut cm = ConfusionMatrix::new(*classes)?;
            cm.accumulate(&p, &r)?;
            let report = cm.report()?;
            for (name, v) in report.headline() {
                writeln!(out, "{name:<6} {v:.6}")?;
            }
            if !report.empty_classes.is_empty() {
                writeln!(out, "empty classes (excluded from means): {:?}", report.empty_classes)?;
            }
            if report.kappa_undefined {
                writeln!(out, "kappa undefined: one class covers every pixel")?;
            }
            Ok(Status::Ok)
        }
        Command::Selftest {
            common,
            with_scaling,
            skip_training,
            corrupt_tolerance,
        } => {
            require_f64(common, "selftest")?;
            print_config(
                out,
                "selftest",
                common,
                DType::F64,
                &[("with_scaling", with_scaling.to_string()), ("skip_training", skip_training.to_string())],
            )?;
            writeln!(out, "convention: {CONVENTION}")?;
            let opts = SuiteOptions {
                tolerances: if *corrupt_tolerance { Tolerances::corrupted() } else { Tolerances::default() },
                scaling: with_scaling.then(ProfileOptions::default),
                training: (!skip_training).then(DemoSettings::default),
            };
            let results = checks::run_suite(&opts, |c| {
                let _ = writeln!(out, "{c}");
            });
            let failed: Vec<String> = results.iter().filter(|c| !c.passed).map(|c| format!("{} {}", c.id, c.name)).collect();
            if failed.is_empty() {
                writeln!(out, "selftest: all {} checks passed", results.len())?;
                Ok(Status::Ok)
            } else {
                writeln!(out, "selftest: FAILED {}", failed.join(", "))?;
                Ok(Status::CheckFailed)
            }
        }
    }
}

fn require_f64(common: &Common, name: &str) -> Result<()> {
    if common.dtype == Some(DtypeArg::F32) {
        return Err(usage(format!("{name} runs in f64 only")));
    }
    Ok(())
}

fn train_cmd<T: Scalar>(s: &DemoSettings, ckpt: Option<&PathBuf>, out: &mut dyn Write) -> Result<Status> {
    let cfg = ManetConfig::tiny(s.classes);
    let data = generate_synthetic_dataset::<T>(s.samples, s.size, s.classes, s.seed)?;
    let result = train_demo(&cfg, &data, &s.train)?;
    let smooth = linattn_core::network::train::smoothed(&result.losses, s.smoothing);
    let every = (result.losses.len() / 10).max(1);
    for (i, (raw, sm)) in result.losses.iter().zip(&smooth).enumerate() {
        if i % every == 0 || i + 1 == result.losses.len() {
            writeln!(out, "step {i:>4} loss {raw:.4} smoothed {sm:.4}")?;
        }
    }
    let sum = checks::summarize(&result.losses, s.smoothing, result.report.miou, result.report.pa);
    writeln!(
        out,
        "train {} / held-out {} samples; initial loss {:.4}, final smoothed {:.4}",
        result.train_samples, result.eval_samples, sum.initial_loss, sum.final_smoothed
    )?;
    for (name, v) in result.report.headline() {
        writeln!(out, "held-out {name:<6} {v:.4}")?;
    }
    writeln!(out, "demo thresholds {}", if sum.passes() { "met" } else { "not met" })?;
    if let Some(path) = ckpt {
        checkpoint::save(path, &cfg, &result.params)?;
        writeln!(out, "saved checkpoint to {}", path.display())?;
    }
    Ok(Status::Ok)
}

fn segment_cmd<S: Scalar, T: Scalar>(
    model: &PathBuf,
    input: &PathBuf,
    dest: &PathBuf,
    out: &mut dyn Write,
) -> Result<Status> {
    let (cfg, stored) = checkpoint::load::<S>(model)?;
    let params = stored.cast::<T>();
    let img = image::load_image::<T>(input)?;
    let labels = network::segment(&img, &cfg, &params)?;
    image::save_labels(dest, img.dim(1), img.dim(2), &labels)?;
    let mut counts = vec![0usize; cfg.num_classes];
    for &l in &labels {
        counts[l] += 1;
    }
    writeln!(out, "wrote {}×{} label map to {}; pixels per class {counts:?}", img.dim(1), img.dim(2), dest.display())?;
    Ok(Status::Ok)
}
