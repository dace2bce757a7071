use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use syz_cli::config::{RunConfig, Stage};
use syz_cli::pipeline::{self, FiberAction, PipelineError};
use syz_core::mirror::BranchSpec;

/// Semi-flat gauge theory experiments: geometry, flow, adiabatic family and mirror checks.
/// Set SYZ_THREADS to fix the worker thread count.
#[derive(Parser)]
#[command(name = "syz", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage listed in the config.
    Run(Common),
    #[command(subcommand)]
    Geometry(GeometryCmd),
    #[command(subcommand)]
    Fiber(FiberCmd),
    /// Flow solve at a single ε.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Checkpoint to start from.
        #[arg(long)]
        seed_file: Option<PathBuf>,
    },
    /// Geometry, solve and family stages.
    Family(Common),
    #[command(subcommand)]
    Mirror(MirrorCmd),
    /// Brute-force oracle checks and calibrated constants of the fiber estimates.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum GeometryCmd {
    /// Metric, Calabi-Yau test and summary report.
    Check(Common),
}

#[derive(Args)]
struct FiberArgs {
    #[command(flatten)]
    common: Common,
    /// Fiber connection file.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum FiberCmd {
    Flatten(FiberArgs),
    Normalize(FiberArgs),
    Classify(FiberArgs),
}

#[derive(Subcommand)]
enum MirrorCmd {
    /// Solve the limit equations for the given windings.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        c0: f64,
        /// Branch windings `a_s,a_t,b_s,b_t`; repeat for each branch.
        #[arg(long, required = true, allow_hyphen_values = true)]
        winding: Vec<String>,
        /// Branch means `a,b`; repeat for each branch (zero when omitted).
        #[arg(long, allow_hyphen_values = true)]
        mean: Vec<String>,
        /// Limit solver tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Multisection of a checkpointed connection.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Branch separation tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Lagrangian, special and (with a checkpoint) flat-bundle residuals of a multisection file.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        multisection: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn load(common: &Common) -> Result<RunConfig, PipelineError> {
    Ok(match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    })
}

fn parse_list<const N: usize, T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; N], String> {
    let v: Vec<T> = s.split(',').map(|x| x.trim().parse::<T>()).collect::<Result<_, _>>().map_err(|_| format!("bad {what} `{s}`"))?;
    v.try_into().map_err(|_| format!("{what} `{s}` needs {N} comma-separated values"))
}

fn branch_specs(winding: &[String], mean: &[String]) -> Result<Vec<BranchSpec<f64>>, String> {
    if !mean.is_empty() && mean.len() != winding.len() {
        return Err(format!("{} windings but {} means", winding.len(), mean.len()));
    }
    winding
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let [as_, at, bs, bt] = parse_list::<4, i64>(w, "winding")?;
            let mean = match mean.get(k) {
                Some(m) => parse_list::<2, f64>(m, "mean")?,
                None => [0.0, 0.0],
            };
            Ok(BranchSpec { winding: [[as_, at], [bs, bt]], mean })
        })
        .collect()
}

fn staged(common: &Common, stages: &[Stage]) -> Result<(RunConfig, PathBuf), PipelineError> {
    let mut cfg = load(common)?;
    cfg.stages = stages.to_vec();
    let out = pipeline::resolve_out(common.out.as_deref(), &cfg);
    Ok((cfg, out))
}

fn report_run(r: Result<pipeline::RunOutcome, PipelineError>) -> Result<bool, PipelineError> {
    let o = r?;
    println!("{}: {}", if o.pass { "pass" } else { "fail" }, o.out.join(syz_cli::artifacts::MANIFEST).display());
    Ok(o.pass)
}

fn out_of(common: &Common, cfg: &RunConfig) -> PathBuf {
    pipeline::resolve_out(common.out.as_deref(), cfg)
}

fn execute(cmd: Command) -> Result<bool, PipelineError> {
    match cmd {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let out = out_of(&common, &cfg);
            report_run(pipeline::run(&cfg, &out))
        }
        Command::Geometry(GeometryCmd::Check(common)) => {
            let (cfg, out) = staged(&common, &[Stage::Geometry])?;
            let r = pipeline::run(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("geometry/report.toml"))?);
            Ok(r.pass)
        }
        Command::Fiber(f) => {
            let (action, a) = match f {
                FiberCmd::Flatten(a) => (FiberAction::Flatten, a),
                FiberCmd::Normalize(a) => (FiberAction::Normalize, a),
                FiberCmd::Classify(a) => (FiberAction::Classify, a),
            };
            let cfg = load(&a.common)?;
            let text = pipeline::fiber_command(action, &a.input, &cfg, &out_of(&a.common, &cfg))?;
            print!("{text}");
            Ok(true)
        }
        Command::Solve { common, epsilon, tol, max_iters, seed_file } => {
            let (mut cfg, out) = staged(&common, &[Stage::Geometry, Stage::Solve])?;
            if let Some(e) = epsilon {
                cfg.family.epsilons = vec![e];
            } else {
                cfg.family.epsilons.truncate(1);
            }
            cfg.grid.nf.truncate(1);
            if let Some(t) = tol {
                cfg.flow.tol = t;
            }
            if let Some(n) = max_iters {
                cfg.flow.max_iters = n;
            }
            if seed_file.is_some() {
                cfg.connection.file = seed_file;
            }
            report_run(pipeline::run(&cfg, &out))
        }
        Command::Family(common) => {
            let (cfg, out) = staged(&common, &[Stage::Geometry, Stage::Solve, Stage::Family])?;
            report_run(pipeline::run(&cfg, &out))
        }
        Command::Mirror(MirrorCmd::Solve { common, c0, winding, mean, tol }) => {
            let mut cfg = load(&common)?;
            if let Some(t) = tol {
                cfg.mirror.limit_tol = t;
            }
            cfg.validate()?;
            let specs = branch_specs(&winding, &mean).map_err(|m| PipelineError::Stage { stage: "mirror", message: m })?;
            let (pass, text) = pipeline::mirror_solve(&cfg, c0, &specs, &out_of(&common, &cfg))?;
            print!("{text}");
            Ok(pass)
        }
        Command::Mirror(MirrorCmd::Extract { common, checkpoint, tol }) => {
            let mut cfg = load(&common)?;
            if let Some(t) = tol {
                cfg.mirror.branch_tol = t;
            }
            cfg.validate()?;
            let m = pipeline::mirror_extract(&cfg, &checkpoint, &out_of(&common, &cfg))?;
            for (k, b) in m.branches.iter().enumerate() {
                println!("branch {k}: winding {:?}", b.winding);
            }
            Ok(true)
        }
        Command::Mirror(MirrorCmd::Verify { common, multisection, checkpoint, tol }) => {
            let cfg = load(&common)?;
            let tol = tol.unwrap_or(cfg.mirror.verify_tol);
            let (pass, text) = pipeline::mirror_verify(&cfg, &multisection, checkpoint.as_deref(), tol, &out_of(&common, &cfg))?;
            print!("{text}");
            Ok(pass)
        }
        Command::Calibrate { common, seed } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let c = pipeline::calibrate(&cfg, &out_of(&common, &cfg))?;
            print!("{}", c.report);
            Ok(c.pass)
        }
    }
}

fn main() -> ExitCode {
    pipeline::init_threads();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let PipelineError::Stage { .. } = e {
                eprintln!("partial artifacts kept; see the FAILED marker in the output directory");
            }
            ExitCode::from(2)
        }
    }
}
