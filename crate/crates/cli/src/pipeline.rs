//! Stage orchestration: geometry → solve → family → mirror, plus the stand-alone tools behind
//! the `fiber`, `mirror` and `calibrate` subcommands.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use syz_core::adiabatic::{assemble_report, diagnose, lump_connection, restage, AdiabaticReport, FamilyStage, Lump};
use syz_core::calibration::{calibrate_bound, calibrate_lower_bound, lemma_suite};
use syz_core::fiber::{fiber_lattice, flatten_to_t, semistability_classify, unitary_gauge_apply, FiberConnection, SemistableKind};
use syz_core::geometry::{metric_from_potential, ClosedFormPotential, CosineMode, HessianGeometry, Potential, SampledPotential};
use syz_core::hym::{flow_solve, Connection4D, FlowResult, WindingBackground};
use syz_core::io::{read_checkpoint, read_fiber, write_checkpoint, write_fiber};
use syz_core::mirror::{flat_bundle_residual, from_connection, limit_solve, multisection_distance, verify, BranchSpec, Multisection};
use syz_core::sampling::{random_smooth_field, AlgebraKind};

use crate::artifacts::Output;
use crate::config::{ConfigError, PotentialKind, RunConfig, SeedKind, Stage};
use crate::formats::{self, LimitMatch};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: e.to_string() }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub pass: bool,
    pub out: PathBuf,
    pub manifest: String,
    pub stages: Vec<Stage>,
}

/// Applies `SYZ_THREADS` to the global thread pool. Later calls are no-ops.
pub fn init_threads() {
    if let Some(n) = std::env::var("SYZ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn build_geometry(cfg: &RunConfig) -> Result<HessianGeometry<f64>, PipelineError> {
    let g = &cfg.geometry;
    let n = cfg.grid.nb;
    let potential = match g.potential {
        PotentialKind::Flat => Potential::ClosedForm(ClosedFormPotential::flat()),
        PotentialKind::Quadratic => Potential::ClosedForm(ClosedFormPotential { quadratic: g.quadratic, linear: g.linear, modes: vec![] }),
        PotentialKind::Cosine => Potential::ClosedForm(ClosedFormPotential {
            quadratic: g.quadratic,
            linear: g.linear,
            modes: g.modes.iter().map(|m| CosineMode { amplitude: m.amplitude, ks: m.ks, kt: m.kt, phase_s: m.phase_s, phase_t: m.phase_t }).collect(),
        }),
        PotentialKind::Sampled => {
            let path = g.sample_file.as_ref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| stage_err("geometry", format!("{}: {e}", path.display())))?;
            let values = formats::parse_sampled_potential(&text, n, g.periods).map_err(|e| stage_err("geometry", format!("{}: {e}", path.display())))?;
            Potential::Sampled(SampledPotential { n, values, quadratic: g.quadratic, linear: g.linear })
        }
    };
    metric_from_potential(&potential, n, g.periods, &g.options()).map_err(|e| stage_err("geometry", e))
}

fn add_perturbation(x: &mut Connection4D<f64>, rng: &mut ChaCha8Rng, amp: f64, kmax: i64, kind: AlgebraKind) {
    if amp == 0.0 {
        return;
    }
    let (nb, nf) = (x.nb(), x.nf());
    for a in 0..4 {
        let p = random_smooth_field(rng, &[nb, nb, nf, nf], &[0, 1, 2, 3], kmax, amp, kind);
        for (u, v) in x.fields[a].iter_mut().zip(p) {
            *u += v;
        }
    }
}

/// Seed connection at the first ε of the family.
pub fn seed_connection(cfg: &RunConfig, geom: &HessianGeometry<f64>) -> Result<Connection4D<f64>, PipelineError> {
    let err = |e: &dyn std::fmt::Display| stage_err("solve", e);
    let f = geom.conformal_factor.clone().ok_or_else(|| stage_err("solve", "the flow needs a conformal base metric; this potential is not isothermal"))?;
    let c = &cfg.connection;
    let (nb, nf, eps) = (cfg.grid.nb, cfg.nf_at(0), cfg.family.epsilons[0]);
    let [ls, lt] = geom.periods;
    let stage = FamilyStage { epsilon: eps, nf };
    if let Some(path) = &c.file {
        let file = File::open(path).map_err(|e| err(&format!("{}: {e}", path.display())))?;
        let x: Connection4D<f64> = read_checkpoint(&mut BufReader::new(file)).map_err(|e| err(&format!("{}: {e}", path.display())))?;
        if x.nb() != nb {
            return Err(err(&format!("seed file has N_B = {}, config has {nb}", x.nb())));
        }
        let x = restage(&x, &stage).map_err(|e| err(&e))?;
        return x.with_metric(f).map_err(|e| err(&e));
    }
    let beta = Complex::new(c.beta[0], c.beta[1]);
    let mut rng = rng(cfg.seed);
    let x = match c.kind {
        SeedKind::Flat => Connection4D::from_fiber(nb, ls, lt, eps, &FiberConnection::diagonal(fiber_lattice(nf, 1.0), beta)).with_metric(f).map_err(|e| err(&e))?,
        SeedKind::Perturbed => {
            let mut x = Connection4D::from_fiber(nb, ls, lt, eps, &FiberConnection::diagonal(fiber_lattice(nf, 1.0), beta)).with_metric(f).map_err(|e| err(&e))?;
            add_perturbation(&mut x, &mut rng, c.amplitude, c.kmax, AlgebraKind::Su2);
            x
        }
        SeedKind::AbelianWinding => {
            let mut x = Connection4D::zero(nb, nf, ls, lt, eps).with_metric(f).map_err(|e| err(&e))?;
            add_perturbation(&mut x, &mut rng, c.amplitude, c.kmax, AlgebraKind::Diagonal);
            x.with_background(WindingBackground::from_windings(c.windings, ls, lt)).map_err(|e| err(&e))?
        }
        SeedKind::AbelianLump => {
            let lumps: Vec<Lump<f64>> = c.lumps.iter().map(|l| Lump { center: (l.center[0], l.center[1]), width: l.width, amplitude: l.amplitude, scaling: l.scaling.into() }).collect();
            let mut x = lump_connection(nb, nf, geom.periods, eps, beta, &lumps).with_metric(f).map_err(|e| err(&e))?;
            add_perturbation(&mut x, &mut rng, c.amplitude, c.kmax, AlgebraKind::Diagonal);
            x
        }
    };
    Ok(x)
}

fn checkpoint_bytes(x: &Connection4D<f64>) -> Vec<u8> {
    let mut buf = vec![];
    write_checkpoint(&mut buf, x).expect("writing to memory");
    buf
}

#[derive(Default)]
struct State {
    geometry: Option<HessianGeometry<f64>>,
    solved: Vec<FlowResult<f64>>,
    report: Option<AdiabaticReport<f64>>,
    pass: bool,
}

fn run_geometry(cfg: &RunConfig, out: &mut Output, st: &mut State) -> Result<(), PipelineError> {
    let geom = build_geometry(cfg)?;
    out.write_str("geometry/report.toml", &geom.report())?;
    st.geometry = Some(geom);
    Ok(())
}

fn run_solve(cfg: &RunConfig, out: &mut Output, st: &mut State) -> Result<(), PipelineError> {
    let geom = st.geometry.as_ref().expect("stage order is validated");
    let flow = cfg.flow.options();
    let mut current = seed_connection(cfg, geom)?;
    for (k, &eps) in cfg.family.epsilons.iter().enumerate() {
        let start = restage(&current, &FamilyStage { epsilon: eps, nf: cfg.nf_at(k) }).map_err(|e| stage_err("solve", e))?;
        let res = flow_solve(&start, &flow).map_err(|e| stage_err("solve", e))?;
        st.pass &= res.converged();
        out.write(&format!("solve/eps_{k}.ckpt"), &checkpoint_bytes(&res.connection))?;
        out.write_str(&format!("solve/eps_{k}.flow.tsv"), &formats::flow_trace(&res))?;
        current = res.connection.clone();
        st.solved.push(res);
    }
    Ok(())
}

fn run_family_stage(cfg: &RunConfig, out: &mut Output, st: &mut State) -> Result<(), PipelineError> {
    let opts = cfg.adiabatic_options();
    let mut members = vec![];
    for res in std::mem::take(&mut st.solved) {
        let residual = res.final_residual();
        members.push(diagnose(res.connection, Some(res.status), res.iterations, residual, &opts).map_err(|e| stage_err("family", e))?);
    }
    for (k, m) in members.iter().enumerate() {
        out.write_str(&format!("family/eps_{k}.tsv"), &formats::member_columns(m, opts.cell))?;
    }
    let report = assemble_report(members, &opts);
    out.write_str("family/report.toml", &formats::family_report(&report))?;
    st.report = Some(report);
    Ok(())
}

fn run_mirror(cfg: &RunConfig, out: &mut Output, st: &mut State) -> Result<(), PipelineError> {
    let geom = st.geometry.as_ref().expect("stage order is validated");
    let x = &st.report.as_ref().expect("stage order is validated").members.last().expect("nonempty family").connection;
    let (m, _) = from_connection(x, &cfg.fiber.options(), &cfg.mirror.extract_options()).map_err(|e| stage_err("mirror", e))?;
    let solved = limit_solve(geom, m.c0, &m.branch_specs(), None, &cfg.mirror.limit_options()).map_err(|e| stage_err("mirror", e))?;
    let matched = LimitMatch { distance: multisection_distance(&m, &solved), tol: cfg.mirror.match_tol };
    let flat_tol = cfg.mirror.flat_tol_factor * cfg.flow.tol;
    let flat = flat_bundle_residual(x, Some(&m.mask));
    let v = verify(&m, geom, Some(flat), cfg.mirror.verify_tol, flat_tol).map_err(|e| stage_err("mirror", e))?;
    st.pass &= formats::verification_pass(&v, Some(matched));
    out.write_str("mirror/multisection.tsv", &formats::write_multisection(&m))?;
    out.write_str("mirror/limit.tsv", &formats::write_multisection(&solved))?;
    out.write_str("mirror/verification.toml", &formats::verification_report(&v, Some(flat_tol), Some(matched)))?;
    Ok(())
}

/// Runs the stages named in the config and writes the manifest. A failing stage leaves its
/// predecessors' artifacts, a `FAILED` marker and a manifest with status `failed`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let mut out = Output::create(out_dir)?;
    let mut st = State { pass: true, ..Default::default() };
    let mut done: Vec<&str> = vec![];
    for &stage in &cfg.stages {
        let r = match stage {
            Stage::Geometry => run_geometry(cfg, &mut out, &mut st),
            Stage::Solve => run_solve(cfg, &mut out, &mut st),
            Stage::Family => run_family_stage(cfg, &mut out, &mut st),
            Stage::Mirror => run_mirror(cfg, &mut out, &mut st),
        };
        if let Err(e) = r {
            let e = match e {
                PipelineError::Io(io) => stage_err(stage.name(), io),
                other => other,
            };
            out.mark_failed(stage.name(), &e.to_string())?;
            out.finish("failed", &done, Some(stage.name()), Some(cfg))?;
            return Err(e);
        }
        done.push(stage.name());
    }
    let manifest = out.finish(if st.pass { "pass" } else { "fail" }, &done, None, Some(cfg))?;
    Ok(RunOutcome { pass: st.pass, out: out_dir.to_path_buf(), manifest, stages: cfg.stages.clone() })
}

/// Output directory: command line first, then the config, then `./syz-out`.
pub fn resolve_out(cli: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    cli.map(Path::to_path_buf).or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("syz-out"))
}

fn read_fiber_file(path: &Path) -> Result<FiberConnection<f64>, PipelineError> {
    let file = File::open(path).map_err(|e| stage_err("fiber", format!("{}: {e}", path.display())))?;
    read_fiber(&mut BufReader::new(file)).map_err(|e| stage_err("fiber", format!("{}: {e}", path.display())))
}

fn fiber_bytes(a: &FiberConnection<f64>) -> Vec<u8> {
    let mut buf = vec![];
    write_fiber(&mut buf, a).expect("writing to memory");
    buf
}

#[derive(Serialize)]
struct FlattenOut {
    a_re: f64,
    a_im: f64,
    lambda_re: f64,
    lambda_im: f64,
    weyl_flipped: bool,
    singular: bool,
    newton_residual: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct NormalizeOut {
    flatten: FlattenOut,
    deviation: f64,
    curvature_sup: f64,
    bound_ratio: f64,
}

#[derive(Serialize)]
struct ClassifyOut {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_re: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_im: Option<f64>,
    confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FiberAction {
    Flatten,
    Normalize,
    Classify,
}

/// `fiber flatten|normalize|classify`: report plus, for the first two, the transformed connection.
pub fn fiber_command(action: FiberAction, input: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<String, PipelineError> {
    let a = read_fiber_file(input)?;
    let opts = cfg.fiber.options();
    let mut out = Output::create(out_dir)?;
    let flatten_out = |f: &syz_core::fiber::Flattening<f64>| FlattenOut {
        a_re: f.point.a.re,
        a_im: f.point.a.im,
        lambda_re: f.lambda.re,
        lambda_im: f.lambda.im,
        weyl_flipped: f.point.weyl_flipped,
        singular: f.point.singular,
        newton_residual: f.residual,
        iterations: f.iterations,
    };
    let text = match action {
        FiberAction::Flatten => {
            let fl = flatten_to_t(&a, None, &opts).map_err(|e| stage_err("fiber", e))?;
            out.write("fiber/flattened.bin", &fiber_bytes(&FiberConnection::diagonal(a.lattice().clone(), fl.lambda)))?;
            toml::to_string(&flatten_out(&fl)).expect("serializable")
        }
        FiberAction::Normalize => {
            let fl = flatten_to_t(&a, None, &opts).map_err(|e| stage_err("fiber", e))?;
            let nz = syz_core::fiber::unitary_normalize(&a, &fl, &opts).map_err(|e| stage_err("fiber", e))?;
            let moved = unitary_gauge_apply(&nz.h, &a, opts.det_tol).map_err(|e| stage_err("fiber", e))?;
            out.write("fiber/normalized.bin", &fiber_bytes(&moved))?;
            toml::to_string(&NormalizeOut { flatten: flatten_out(&fl), deviation: nz.deviation, curvature_sup: nz.curvature_sup, bound_ratio: nz.bound_ratio }).expect("serializable")
        }
        FiberAction::Classify => {
            let c = semistability_classify(&a, &opts);
            let (kind, p) = match c.kind {
                SemistableKind::Case1(p) => ("direct-sum", Some(p)),
                SemistableKind::Case2 { torsion } => ("nonsplit-extension", Some(torsion)),
                SemistableKind::Unstable => ("unstable", None),
            };
            toml::to_string(&ClassifyOut { kind, a_re: p.map(|p| p.a.re), a_im: p.map(|p| p.a.im), confidence: c.confidence }).expect("serializable")
        }
    };
    let name = match action {
        FiberAction::Flatten => "fiber/flatten.toml",
        FiberAction::Normalize => "fiber/normalize.toml",
        FiberAction::Classify => "fiber/classify.toml",
    };
    out.write_str(name, &text)?;
    out.finish("pass", &["fiber"], None, Some(cfg))?;
    Ok(text)
}

/// `mirror solve`: limit multisection for given windings on the configured geometry.
pub fn mirror_solve(cfg: &RunConfig, c0: f64, specs: &[BranchSpec<f64>], out_dir: &Path) -> Result<(bool, String), PipelineError> {
    let geom = build_geometry(cfg)?;
    let mut out = Output::create(out_dir)?;
    let m = limit_solve(&geom, c0, specs, None, &cfg.mirror.limit_options()).map_err(|e| stage_err("mirror", e))?;
    let v = verify(&m, &geom, None, cfg.mirror.limit_tol, cfg.mirror.flat_tol_factor * cfg.flow.tol).map_err(|e| stage_err("mirror", e))?;
    let pass = formats::verification_pass(&v, None);
    let text = formats::verification_report(&v, None, None);
    out.write_str("mirror/multisection.tsv", &formats::write_multisection(&m))?;
    out.write_str("mirror/verification.toml", &text)?;
    out.finish(if pass { "pass" } else { "fail" }, &["mirror"], None, Some(cfg))?;
    Ok((pass, text))
}

/// `mirror extract`: multisection from a checkpoint.
pub fn mirror_extract(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Multisection<f64>, PipelineError> {
    let file = File::open(checkpoint).map_err(|e| stage_err("mirror", format!("{}: {e}", checkpoint.display())))?;
    let x: Connection4D<f64> = read_checkpoint(&mut BufReader::new(file)).map_err(|e| stage_err("mirror", format!("{}: {e}", checkpoint.display())))?;
    let (m, _) = from_connection(&x, &cfg.fiber.options(), &cfg.mirror.extract_options()).map_err(|e| stage_err("mirror", e))?;
    let mut out = Output::create(out_dir)?;
    out.write_str("mirror/multisection.tsv", &formats::write_multisection(&m))?;
    out.finish("pass", &["mirror"], None, Some(cfg))?;
    Ok(m)
}

/// `mirror verify`: residuals of a multisection file on the configured geometry, with the
/// flat-bundle check when a checkpoint is supplied.
pub fn mirror_verify(cfg: &RunConfig, multisection: &Path, checkpoint: Option<&Path>, tol: f64, out_dir: &Path) -> Result<(bool, String), PipelineError> {
    let text = std::fs::read_to_string(multisection).map_err(|e| stage_err("mirror", format!("{}: {e}", multisection.display())))?;
    let m = formats::read_multisection(&text).map_err(|e| stage_err("mirror", format!("{}: {e}", multisection.display())))?;
    let geom = build_geometry(cfg)?;
    let flat = match checkpoint {
        Some(p) => {
            let file = File::open(p).map_err(|e| stage_err("mirror", format!("{}: {e}", p.display())))?;
            let x: Connection4D<f64> = read_checkpoint(&mut BufReader::new(file)).map_err(|e| stage_err("mirror", format!("{}: {e}", p.display())))?;
            Some(flat_bundle_residual(&x, Some(&m.mask)))
        }
        None => None,
    };
    let flat_tol = cfg.mirror.flat_tol_factor * cfg.flow.tol;
    let v = verify(&m, &geom, flat, tol, flat_tol).map_err(|e| stage_err("mirror", e))?;
    let pass = formats::verification_pass(&v, None);
    let report = formats::verification_report(&v, checkpoint.map(|_| flat_tol), None);
    let mut out = Output::create(out_dir)?;
    out.write_str("mirror/verification.toml", &report)?;
    out.finish(if pass { "pass" } else { "fail" }, &["mirror"], None, Some(cfg))?;
    Ok((pass, report))
}

#[derive(Serialize)]
struct LemmaOut {
    delta: f64,
    threshold: f64,
    drawn: usize,
    accepted: usize,
    violations: usize,
    branch_samples: usize,
    branch_violations: usize,
    worst_diagonal: f64,
    worst_offdiagonal: f64,
}

#[derive(Serialize)]
struct BoundOut {
    nf: usize,
    samples: usize,
    skipped: usize,
    max_ratio: f64,
    safety: f64,
    constant: f64,
}

#[derive(Serialize)]
struct LowerOut {
    samples: usize,
    constant: f64,
    check_samples: usize,
    violations: usize,
    min_check_ratio: f64,
}

#[derive(Serialize)]
struct CalibrationOut {
    pass: bool,
    lemma: Vec<LemmaOut>,
    normalize_bound: BoundOut,
    lower_bound: LowerOut,
}

/// Calibrated constants and the oracle checks behind them.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub pass: bool,
    pub normalize_constant: f64,
    pub lower_constant: f64,
    pub lemma_violations: usize,
    pub report: String,
}

/// `calibrate`: brute-force lemma checks and the empirical constants of the fiber estimates.
pub fn calibrate(cfg: &RunConfig, out_dir: &Path) -> Result<Calibration, PipelineError> {
    let c = &cfg.calibration;
    let mut rng = rng(cfg.seed);
    let lemma: Vec<LemmaOut> = c
        .lemma_deltas
        .iter()
        .map(|&d| {
            let r = lemma_suite(&mut rng, d, d * d, c.lemma_samples, c.lemma_max_draws);
            LemmaOut {
                delta: d,
                threshold: r.threshold,
                drawn: r.drawn,
                accepted: r.accepted,
                violations: r.violations,
                branch_samples: r.branch_samples,
                branch_violations: r.branch_violations,
                worst_diagonal: r.worst_diagonal,
                worst_offdiagonal: r.worst_offdiagonal,
            }
        })
        .collect();
    let b = calibrate_bound(&mut rng, c.bound_samples, c.nf, c.wave_amp, c.safety, &cfg.fiber.options());
    let l = calibrate_lower_bound(&mut rng, c.lower_samples, c.lower_check, c.nf, c.lower_size);
    let lemma_violations: usize = lemma.iter().map(|r| r.violations + r.branch_violations).sum();
    let pass = lemma_violations == 0 && lemma.iter().all(|r| r.accepted >= c.lemma_samples) && b.samples == c.bound_samples && l.violations == 0;
    let file = CalibrationOut {
        pass,
        lemma,
        normalize_bound: BoundOut { nf: c.nf, samples: b.samples, skipped: b.skipped, max_ratio: b.max_ratio, safety: b.safety, constant: b.constant },
        lower_bound: LowerOut { samples: l.samples, constant: l.constant, check_samples: l.check_samples, violations: l.violations, min_check_ratio: l.min_check_ratio },
    };
    let report = toml::to_string(&file).expect("serializable");
    let mut out = Output::create(out_dir)?;
    out.write_str("calibration.toml", &report)?;
    out.finish(if pass { "pass" } else { "fail" }, &["calibrate"], None, Some(cfg))?;
    Ok(Calibration { pass, normalize_constant: b.constant, lower_constant: l.constant, lemma_violations, report })
}

/// Writes a fiber connection file; used to prepare inputs for the `fiber` subcommands.
pub fn save_fiber(path: &Path, a: &FiberConnection<f64>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fiber(&mut w, a)
}
