use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svreg::diffeo::Integrator;
use svreg::grid::{FieldKind, LabelMap, Volume};
use svreg::io::{
    read_field, read_labels, read_volume, write_field, write_labels_vraw, write_metrics_json, write_sweep_csv,
    write_trace_csv, write_volume, MetricsFile,
};
use svreg::metrics::MetricsReport;
use svreg::optim::{eta_grid, register_instance, sweep_eta, RegistrationConfig, DEFAULT_ETA_STEP};
use svreg::synth::Preset;
use svreg::{Error, Result};

#[derive(Parser)]
#[command(name = "svreg", version, about = "Deformable 3D registration with a learned spatially-varying regularizer")]
struct Cli {
    /// Worker threads (default: all cores). Use 1 for bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register one moving image onto a fixed image.
    Register(RegisterArgs),
    /// Register one pair for every η on a grid and pick the best by Dice.
    Sweep(SweepArgs),
    /// Evaluate a displacement field, optionally against a label pair.
    Metrics(MetricsArgs),
    /// Write a synthetic phantom pair with its ground-truth displacement.
    Synth(SynthArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IntegratorArg {
    Direct,
    Tvf,
    Ss,
    TvfSs,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long, requires = "fixed_labels")]
    moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    fixed_labels: Option<PathBuf>,
}

#[derive(Args)]
struct OptArgs {
    #[arg(long, default_value_t = 5.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, value_enum, default_value = "ss")]
    integrator: IntegratorArg,
    #[arg(long, default_value_t = 7)]
    time_steps: usize,
    #[arg(long, default_value_t = 7)]
    ss_steps: usize,
    #[arg(long, default_value_t = 9)]
    ncc_window: usize,
    /// Add a soft Dice term on the label maps.
    #[arg(long)]
    use_dice: bool,
    /// Keep ω ≡ 1 (plain diffusion regularization).
    #[arg(long)]
    fixed_weights: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    opt: OptArgs,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 2.0)]
    eta_max: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    opt: OptArgs,
    #[arg(long, default_value_t = 0.0)]
    eta_min: f64,
    #[arg(long, default_value_t = 2.0)]
    eta_max: f64,
    #[arg(long, default_value_t = DEFAULT_ETA_STEP)]
    eta_step: f64,
    /// Sweep points registered concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    disp: PathBuf,
    #[arg(long, requires = "labels_b")]
    labels_a: Option<PathBuf>,
    #[arg(long, requires = "labels_a")]
    labels_b: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// two-structure, ventricle or sphere-ellipsoid.
    #[arg(long)]
    preset: Preset,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptArgs {
    fn config(&self, eta: f64, eta_max: f64) -> Result<RegistrationConfig> {
        let integrator = match self.integrator {
            IntegratorArg::Direct => Integrator::Direct,
            IntegratorArg::Tvf => Integrator::TimeStepped { steps: self.time_steps },
            IntegratorArg::Ss => Integrator::ScalingSquaring { steps: self.ss_steps },
            IntegratorArg::TvfSs => Integrator::TimeSteppedSs {
                time_steps: self.time_steps,
                ss_steps: self.ss_steps,
            },
        };
        let cfg = RegistrationConfig {
            lambda: self.lambda,
            eta,
            epsilon: self.epsilon,
            eta_max,
            integrator,
            ncc_window: self.ncc_window,
            iters: self.iters,
            lr: self.lr,
            seed: self.seed,
            use_dice: self.use_dice,
            learn_weights: !self.fixed_weights,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Inputs {
    moving: Volume,
    fixed: Volume,
    labels: Option<(LabelMap, LabelMap)>,
}

impl InputArgs {
    fn load(&self) -> Result<Inputs> {
        let labels = match (&self.moving_labels, &self.fixed_labels) {
            (Some(a), Some(b)) => Some((read_labels(a)?, read_labels(b)?)),
            _ => None,
        };
        Ok(Inputs {
            moving: read_volume(&self.moving)?,
            fixed: read_volume(&self.fixed)?,
            labels,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn register(args: &RegisterArgs) -> Result<()> {
    let cfg = args.opt.config(args.eta, args.eta_max)?;
    let inp = args.input.load()?;
    let labels = inp.labels.as_ref().map(|(a, b)| (a, b));
    let r = register_instance(&inp.moving, &inp.fixed, labels, &cfg)?;

    let dir = &args.out_dir;
    create_dir(dir)?;
    write_volume(&r.warped, dir.join("warped.vraw"))?;
    write_field(&r.displacement, dir.join("disp.vraw"))?;
    write_volume(r.omega.volume(), dir.join("omega.vraw"))?;
    if let Some(wl) = &r.warped_labels {
        write_labels_vraw(wl, dir.join("warped_labels.vraw"))?;
    }
    write_trace_csv(dir.join("trace.csv"), &r.trace)?;
    write_metrics_json(dir.join("metrics.json"), &MetricsFile::from_run(&cfg, r.omega.mean(), r.metrics.clone()))?;

    let last = r.trace.last().copied().unwrap_or_default();
    println!(
        "final loss {:.6} (sim {:.6}, reg {:.6}, log {:.6})",
        last.total, last.sim, last.reg, last.log
    );
    if let Some(d) = r.metrics.dice_mean {
        println!("dice {d:.4}");
    }
    println!(
        "sdlogj {:.4}  %|J|<=0 {:.4}  %NDV {:.4}  mean omega {:.4}",
        r.metrics.sdlogj,
        r.metrics.pct_nonpos_jac,
        r.metrics.pct_ndv,
        r.omega.mean()
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.opt.config(args.eta_min, args.eta_max)?;
    let grid = eta_grid(args.eta_min, args.eta_max, args.eta_step)?;
    let inp = args.input.load()?;
    let (lm, lf) = inp
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("sweep needs --moving-labels and --fixed-labels".into()))?;
    let table = sweep_eta(&inp.moving, &inp.fixed, (lm, lf), &cfg, &grid, args.parallel.max(1))?;
    create_dir(&args.out_dir)?;
    write_sweep_csv(args.out_dir.join("sweep.csv"), &table.rows)?;
    let best = table.best_row();
    println!("best eta {} (dice {:.4})", best.eta, best.dice);
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let u = read_field(&args.disp, FieldKind::Displacement)?;
    let labels = match (&args.labels_a, &args.labels_b) {
        (Some(a), Some(b)) => Some((read_labels(a)?, read_labels(b)?)),
        _ => None,
    };
    let report = MetricsReport::evaluate(&u, labels.as_ref().map(|(a, b)| (a, b)))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_metrics_json(&args.out, &MetricsFile::metrics_only(report))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let pair = args.preset.generate(args.size, args.seed)?;
    let dir = &args.out_dir;
    create_dir(dir)?;
    write_volume(&pair.moving.image, dir.join("moving.vraw"))?;
    write_volume(&pair.fixed.image, dir.join("fixed.vraw"))?;
    write_labels_vraw(&pair.moving.labels, dir.join("moving_labels.vraw"))?;
    write_labels_vraw(&pair.fixed.labels, dir.join("fixed_labels.vraw"))?;
    write_field(&pair.true_u, dir.join("true_disp.vraw"))?;
    let desc = serde_json::json!({
        "preset": args.preset,
        "size": args.size,
        "seed": args.seed,
        "phantom": pair.moving.descriptor,
        "deformation": args.preset.deformation(args.size),
    });
    let path = dir.join("phantom.json");
    fs::write(&path, serde_json::to_string_pretty(&desc)? + "\n").map_err(|e| Error::Io { path, source: e })?;
    let m = MetricsReport::evaluate(&pair.true_u, Some((&pair.moving.labels, &pair.fixed.labels)))?;
    println!(
        "wrote {} ({}^3, initial dice {:.4})",
        dir.display(),
        args.size,
        m.dice_mean.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let rows = svreg::gradcheck::run_suite(args.size, args.seed)?;
    println!("{:<20} {:>8} {:>12} {:>10}  result", "operation", "probes", "rel_err", "tol");
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passed();
        println!(
            "{:<20} {:>8} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.checked,
            r.rel_err,
            r.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheck(failed.join(", ")))
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Register(a) => register(a),
        Command::Sweep(a) => sweep(a),
        Command::Metrics(a) => metrics(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
