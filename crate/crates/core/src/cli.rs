//! Command-line front end of the `hcd` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::harness::{
    self, Axis, Dataset, DatasetKind, ExperimentConfig, GenOptions, GradSuiteOptions, HarnessError,
    Method,
};
use crate::hcd::FusionMode;
use crate::teacher::{self, SynthTeacherOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "hcd",
    version,
    about = "Heterogeneous complementary distillation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic HCDX dataset.
    GenData(GenDataArgs),
    /// Synthesize an HCDT teacher dump aligned with a dataset.
    GenTeacher(GenTeacherArgs),
    /// Train one model and write metrics.csv and checkpoint.hcdp.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sweep one HCD axis over values and seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the full HCD loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value = "bars")]
    kind: DatasetKind,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Pixel noise standard deviation (defaults depend on the kind).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    quality: f64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = teacher::DEFAULT_MARGIN)]
    margin: f64,
    /// Logit noise standard deviation before the (1 - quality) factor.
    #[arg(long, default_value_t = teacher::DEFAULT_MARGIN)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Selected stages, e.g. 1+2+3.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Write 0 instead of wall time to the sec column.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only the last N samples (the test split); all samples otherwise.
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    axis: Axis,
    /// Comma-separated axis values; the standard sweep when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    seed: u64,
    /// Comma-separated seeds; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 600)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ExperimentArgs {
    fn build(&self, seed: u64, out: PathBuf) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(p) = &self.data {
            cfg.dataset = p.clone();
        }
        if let Some(p) = &self.teacher {
            cfg.teacher = Some(p.clone());
        }
        let s = &mut cfg.sgd;
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.test_count {
            cfg.test_count = v;
        }
        let h = &mut cfg.hcd;
        if let Some(v) = self.n {
            h.n = v;
        }
        if let Some(v) = self.tau {
            h.tau = v;
        }
        if let Some(v) = self.lambda {
            h.lambda = v;
        }
        if let Some(v) = self.beta {
            h.beta = v;
        }
        if let Some(v) = self.omega {
            h.omega = v;
        }
        if let Some(v) = self.alpha {
            h.alpha = v;
        }
        if let Some(v) = &self.stages {
            cfg.hcd.stages = v
                .split('+')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| HarnessError::Config(format!("invalid stage list {v:?}")))?;
        }
        if let Some(f) = self.fusion {
            cfg.hcd.fusion = f;
        }
        if self.no_timing {
            cfg.record_timing = false;
        }
        cfg.seed = seed;
        cfg.out_dir = out;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_command(cmd: Command, out: &mut dyn Write) -> Result<(), HarnessError> {
    match cmd {
        Command::GenData(a) => {
            let mut opts = GenOptions {
                n: a.n,
                k: a.k,
                c: a.channels,
                h: a.height,
                w: a.width,
                ..GenOptions::desk(a.kind, a.seed)
            };
            if let Some(noise) = a.noise {
                opts.noise = noise;
            }
            let data = harness::gen_dataset(&opts).map_err(|e| match e {
                harness::DataError::Invalid(m) => HarnessError::Config(m),
                e => e.into(),
            })?;
            data.save(&a.out)?;
            writeln!(
                out,
                "wrote {} {} samples to {}",
                data.n,
                a.kind,
                a.out.display()
            )?;
        }
        Command::GenTeacher(a) => {
            let data = Dataset::load(&a.data)?;
            let opts = SynthTeacherOptions {
                quality: a.quality,
                d: a.d,
                margin: a.margin,
                noise: a.noise,
                seed: a.seed,
            };
            let dump =
                teacher::synth_teacher(&data.images, data.shape(), &data.labels, data.k, &opts)
                    .map_err(|e| match e {
                        teacher::TeacherError::Invalid(m) => HarnessError::Config(m),
                        e => e.into(),
                    })?;
            teacher::write_dump(&a.out, &dump)?;
            writeln!(
                out,
                "wrote teacher dump to {} (top-1 on all samples {:.2}%)",
                a.out.display(),
                dump.accuracy(&data.labels, 0..data.n)
            )?;
        }
        Command::Train(a) => {
            let cfg = a.exp.build(a.seed, a.out)?;
            let mut stderr = std::io::stderr();
            let log: Option<&mut dyn Write> = if a.quiet { None } else { Some(&mut stderr) };
            let outcome = harness::train(&cfg, log)?;
            writeln!(
                out,
                "final test accuracy {:.2}% ({} epochs), outputs in {}",
                outcome.final_test_acc(),
                outcome.rows.len(),
                cfg.out_dir.display()
            )?;
        }
        Command::Eval(a) => {
            let data = Dataset::load(&a.data)?;
            let range = match a.test_count {
                Some(t) if t > data.n => {
                    return Err(HarnessError::Config(format!(
                        "test count {t} exceeds {} samples",
                        data.n
                    )))
                }
                Some(t) => data.n - t..data.n,
                None => 0..data.n,
            };
            let acc = harness::evaluate(&a.checkpoint, &data, range)?;
            writeln!(out, "top-1 accuracy {acc:.2}%")?;
        }
        Command::Ablate(a) => {
            let mut exp = a.exp;
            exp.method = Some(Method::Hcd);
            let cfg = exp.build(a.seed, a.out)?;
            let values = if a.values.is_empty() {
                a.axis.default_values()
            } else {
                a.values
            };
            let seeds = if a.seeds.is_empty() {
                vec![a.seed]
            } else {
                a.seeds
            };
            let rows = harness::ablate(&cfg, a.axis, &values, &seeds)?;
            for r in &rows {
                writeln!(
                    out,
                    "{}={} seed {}: {:.2}% ({:.2} s/epoch)",
                    r.axis, r.value, r.seed, r.final_test_acc, r.s_per_epoch
                )?;
            }
            writeln!(
                out,
                "wrote {}",
                cfg.out_dir.join(harness::ABLATION_FILE).display()
            )?;
        }
        Command::Gradcheck(a) => {
            let opts = GradSuiteOptions {
                batch: a.batch,
                coords: a.coords,
                seed: a.seed,
                ..Default::default()
            };
            let start = Instant::now();
            let r = harness::run_grad_suite(&opts)?;
            let rep = &r.report;
            writeln!(
                out,
                "checked {} of {} coordinates over {} tensors ({} skipped at kinks) in {:.1}s",
                rep.checked,
                r.coordinates_total,
                r.parameters,
                rep.skipped_kinks,
                start.elapsed().as_secs_f64()
            )?;
            writeln!(
                out,
                "max rel err {:.3e} (tolerance {:.0e})",
                rep.max_rel_err, rep.tol
            )?;
            if !rep.passed() {
                return Err(HarnessError::Config(format!(
                    "{} coordinates exceed the tolerance; worst {:?}",
                    rep.failures, rep.worst
                )));
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let text = e.render();
            let _ = if e.use_stderr() {
                write!(err, "{}", text.ansi())
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match run_command(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
