//! Acceptance criteria, one PASS/FAIL line each with its runtime against the budget.
//! Exits nonzero on a failure only when `SYZ_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syz_cli::config::RunConfig;
use syz_cli::pipeline;
use syz_core::adiabatic::*;
use syz_core::calibration::{calibrate_bound, lemma_suite, near_flat_sample, normalize_ratio};
use syz_core::fiber::*;
use syz_core::geometry::*;
use syz_core::hym::*;
use syz_core::mat2::Mat2;
use syz_core::mirror::*;
use syz_core::sampling::{exp_field, random_smooth_field, AlgebraKind};

type R = ChaCha8Rng;
const TAU: f64 = std::f64::consts::TAU;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn geometry(p: ClosedFormPotential<f64>, n: usize) -> HessianGeometry<f64> {
    metric_from_potential(&Potential::ClosedForm(p), n, [1.0, 1.0], &GeometryOptions::default()).unwrap()
}

fn calabi_yau_criterion() -> Outcome {
    let n = 64;
    let flat = geometry(ClosedFormPotential::flat(), n);
    let flat_dev = flat.det_g.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
    let pot = ClosedFormPotential::flat().with_mode(0.004, 1, 2).with_mode(-0.002, 3, 1);
    let geom = geometry(pot.clone(), n);
    let mut worst: f64 = 0.0;
    for i in 0..n * n {
        let (s, t) = geom.site(i);
        let [a, b, c] = pot.hessian_exact(s, t, [1.0, 1.0]);
        worst = worst.max(((geom.det_g[i] - 1.0) - (a * c - b * b - 1.0)).abs());
    }
    outcome(flat_dev == 0.0 && flat.calabi_yau && worst <= 1e-8 && !geom.calabi_yau, format!("flat |det-1| = {flat_dev:e}, perturbed det mismatch = {worst:.2e}"))
}

fn legendre_round_trip() -> Outcome {
    let n = 128;
    let b = 0.3;
    let pot = ClosedFormPotential::quadratic([1.2, b, (1.0 + b * b) / 1.2]).with_mode(0.003, 1, 1).with_mode(0.002, 2, -1);
    let geom = geometry(pot, n);
    let mut rng = R::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..2000 {
        let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        match legendre_forward(&geom, p).and_then(|d| legendre_inverse(&geom, d, None)) {
            Ok(q) => worst = worst.max((q[0] - p[0]).abs().max((q[1] - p[1]).abs())),
            Err(_) => failures += 1,
        }
    }
    let min_det = geom.det_g.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(failures == 0 && worst <= 1e-8 && min_det > 0.0, format!("2000 points, worst error {worst:.2e}, {failures} failures"))
}

fn lemma_suite_criterion() -> Outcome {
    let mut rng = R::seed_from_u64(3);
    let mut pass = true;
    let mut detail = vec![];
    for delta in [1e-2, 1e-3] {
        let r = lemma_suite(&mut rng, delta, delta * delta, 10_000, 50_000_000);
        pass &= r.accepted >= 10_000 && r.violations == 0 && r.branch_violations == 0;
        detail.push(format!("δ={delta:e}: {} samples, {} violations", r.accepted, r.violations + r.branch_violations));
    }
    outcome(pass, detail.join("; "))
}

fn normalization_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new();
    cfg.seed = 4;
    cfg.calibration.lemma_samples = 100;
    let cal = pipeline::calibrate(&cfg, dir.path()).unwrap();
    let c_cal = cal.normalize_constant;
    let opts = cfg.fiber.options();
    let mut rng = R::seed_from_u64(40);
    let (mut trials, mut ok, mut worst) = (0, 0, 0.0f64);
    while trials < 500 {
        let s = near_flat_sample(&mut rng, 32, cfg.calibration.wave_amp);
        // precondition of the estimate: within the flattening basin and below δ₀
        if s.curvature_sup >= opts.delta0 || curvature_l2(&s.connection) > opts.flatten_energy_max {
            continue;
        }
        trials += 1;
        if let Ok(r) = normalize_ratio(&s.connection, &opts) {
            worst = worst.max(r);
            if r <= c_cal {
                ok += 1;
            }
        }
    }
    // the same bound with an independently calibrated constant, to show it is not seed luck
    let other = calibrate_bound(&mut R::seed_from_u64(41), 200, 32, cfg.calibration.wave_amp, cfg.calibration.safety, &opts);
    outcome(ok == trials && cal.pass, format!("C_cal = {c_cal:.3} (independent {:.3}), {ok}/{trials} within bound, worst ratio {worst:.3}", other.constant))
}

fn random_4d(rng: &mut R, n: usize, amp: f64) -> Connection4D<f64> {
    let mut x = Connection4D::zero(n, n, 1.0, 1.0, 0.5);
    for a in 0..4 {
        x.fields[a] = random_smooth_field(rng, &[n, n, n, n], &[0, 1, 2, 3], 1, amp, AlgebraKind::Su2);
    }
    x
}

fn gauge_invariances() -> Outcome {
    let mut rng = R::seed_from_u64(5);
    // the gauged fields are not band-limited; 16 points per direction resolve them to 1e-9
    let n16 = 16;
    let mut worst_curv: f64 = 0.0;
    for _ in 0..50 {
        let x = random_4d(&mut rng, n16, 0.4);
        let g = exp_field(&random_smooth_field(&mut rng, &[n16, n16, n16, n16], &[0, 1, 2, 3], 1, 0.2, AlgebraKind::Su2));
        let y = x.gauge_apply(&g).unwrap();
        let (fx, fy) = (curvature_components(&x), curvature_components(&y));
        for (a, b) in fx.components.iter().zip(&fy.components) {
            let na = a.iter().map(Mat2::norm_sqr).sum::<f64>().sqrt();
            let nb = b.iter().map(Mat2::norm_sqr).sum::<f64>().sqrt();
            worst_curv = worst_curv.max((na - nb).abs() / na.max(1.0));
        }
        let (ea, eb) = (ym_energy_from(&x, &fx).total, ym_energy_from(&y, &fy).total);
        worst_curv = worst_curv.max((ea - eb).abs() / ea.max(1.0));
    }
    let n = 8;
    let mut worst_shift: f64 = 0.0;
    let lat8 = fiber_lattice::<f64>(n, 1.0);
    for _ in 0..50 {
        let mut x = Connection4D::<f64>::zero(n, n, 1.0, 1.0, 0.5).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
        for a in 0..4 {
            x.fields[a] = random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, 0.3, AlgebraKind::Diagonal);
        }
        let shift = lattice_gauge(&lat8, rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        let g: Vec<Mat2<f64>> = (0..x.len()).map(|p| shift.g[p % (n * n)]).collect();
        let y = x.gauge_apply(&g).unwrap();
        let (ea, eb) = (ym_energy(&x).total, ym_energy(&y).total);
        worst_shift = worst_shift.max((ea - eb).abs() / ea.max(1.0));
    }
    let nf = 16;
    let lat = fiber_lattice::<f64>(nf, 1.0);
    let opts = FiberOptions::default();
    let (mut worst_unitary, mut worst_lattice): (f64, f64) = (0.0, 0.0);
    let mut errors = 0;
    for _ in 0..50 {
        let beta = Complex::new(rng.gen_range(0.2..1.3), rng.gen_range(0.2..1.3));
        let a = FiberConnection::diagonal(lat.clone(), beta);
        let p0 = flatten_to_t(&a, None, &opts).unwrap().point;
        let g = GaugeTransform { kind: GaugeKind::Unitary, g: exp_field(&random_smooth_field(&mut rng, &[nf, nf], &[0, 1], 1, 0.3, AlgebraKind::Su2)) };
        let b = unitary_gauge_apply(&g, &a, 1e-9).unwrap();
        match flatten_to_t(&b, None, &opts) {
            Ok(f) => worst_unitary = worst_unitary.max(ModuliPoint::class_distance(p0.a, f.point.a)),
            Err(_) => errors += 1,
        }
        let c = lattice_gauge_shift(&a, rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        match flatten_to_t(&c, None, &opts) {
            Ok(f) => worst_lattice = worst_lattice.max(ModuliPoint::class_distance(p0.a, f.point.a)),
            Err(_) => errors += 1,
        }
    }
    let mut worst_multi: f64 = 0.0;
    let x = Connection4D::<f64>::zero(n, n, 1.0, 1.0, 0.5).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
    let (m0, _) = from_connection(&x, &opts, &ExtractOptions::default()).unwrap();
    for _ in 0..50 {
        let shift = lattice_gauge(&lat8, rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        let (u, v) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let g: Vec<Mat2<f64>> = (0..x.len())
            .map(|p| {
                let (s, t) = x.base_point(x.base_index(p));
                Mat2::i_sigma3(u * (TAU * s).sin() + v * (TAU * t).cos()).exp() * shift.g[p % (n * n)]
            })
            .collect();
        let y = x.gauge_apply(&g).unwrap();
        match from_connection(&y, &opts, &ExtractOptions::default()) {
            Ok((m1, _)) => worst_multi = worst_multi.max(multisection_distance(&m0, &m1)),
            Err(_) => errors += 1,
        }
    }
    let pass = errors == 0 && worst_curv <= 1e-9 && worst_shift <= 1e-10 && worst_unitary <= 1e-9 && worst_lattice <= 1e-11 && worst_multi <= 1e-9;
    outcome(
        pass,
        format!("curvature/energy {worst_curv:.1e}, lattice-shift energy {worst_shift:.1e}, moduli {worst_unitary:.1e}/{worst_lattice:.1e}, multisection {worst_multi:.1e}, {errors} errors"),
    )
}

fn flow_correctness() -> Outcome {
    let mut rng = R::seed_from_u64(6);
    let x = random_4d(&mut rng, 8, 0.5);
    let (_, g) = flow_gradient(&x);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut v: [Vec<Mat2<f64>>; 4] = Default::default();
        for a in 0..4 {
            v[a] = random_smooth_field(&mut rng, &[8, 8, 8, 8], &[0, 1, 2, 3], 1, 1.0, AlgebraKind::Su2);
        }
        let fd = (flow_functional(&x.axpy(h, &v)) - flow_functional(&x.axpy(-h, &v))) / (2.0 * h);
        let an = field_inner(&g, &v);
        worst = worst.max((fd - an).abs() / an.abs());
    }
    let mut monotone = true;
    let mut runs = 0;
    for seed in 0..3 {
        let x = random_4d(&mut R::seed_from_u64(60 + seed), 8, 0.3);
        let r = flow_solve(&x, &FlowOptions { max_iters: 60, ..Default::default() }).unwrap();
        monotone &= r.is_monotone();
        runs += 1;
    }
    outcome(worst <= 1e-6 && monotone, format!("worst relative FD error {worst:.1e}; {runs} flows monotone: {monotone}"))
}

/// Output of the bundled winding pipeline, shared by the family, mirror and flat-bundle criteria.
struct WindingRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    pass: bool,
    flow_tol: f64,
    elapsed: Duration,
}

fn winding_run() -> Result<WindingRun, String> {
    let t = Instant::now();
    let cfg = RunConfig::load(&configs().join("abelian-winding.toml")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().to_path_buf();
    let o = pipeline::run(&cfg, &out).map_err(|e| e.to_string())?;
    Ok(WindingRun { _dir: dir, out, pass: o.pass, flow_tol: cfg.flow.tol, elapsed: t.elapsed() })
}

fn read_toml(path: &Path) -> toml::Value {
    std::fs::read_to_string(path).unwrap().parse().unwrap()
}

fn num(v: &toml::Value, keys: &[&str]) -> f64 {
    let mut v = v;
    for k in keys {
        v = &v[*k];
    }
    v.as_float().unwrap()
}

fn adiabatic_trend(run: &WindingRun) -> Outcome {
    let rep = read_toml(&run.out.join("family/report.toml"));
    let members = rep["member"].as_array().unwrap();
    let sups: Vec<f64> = members.iter().map(|m| num(m, &["fiber_curvature_sup"])).collect();
    let ratios: Vec<f64> = sups.windows(2).map(|w| w[0] / w[1]).collect();
    let ratios_ok = ratios.iter().all(|r| (2.0..=8.0).contains(r));
    let hol = num(members.last().unwrap(), &["holomorphy_sup"]);
    // monotone functional along every logged flow
    let mut monotone = true;
    for k in 0..members.len() {
        let trace = std::fs::read_to_string(run.out.join(format!("solve/eps_{k}.flow.tsv"))).unwrap();
        let vals: Vec<f64> = trace.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
        monotone &= vals.windows(2).all(|w| w[1] <= w[0]);
    }
    let sup_list: Vec<String> = sups.iter().map(|s| format!("{s:.2e}")).collect();
    let ratio_list: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        ratios_ok && hol <= 1e-3 && monotone && run.pass,
        format!("sup fiber |F| = [{}], per-halving ratios [{}] (want [2, 8]); holomorphy {hol:.1e}; flows monotone: {monotone}", sup_list.join(", "), ratio_list.join(", ")),
    )
}

fn mirror_consistency(run: &WindingRun) -> Outcome {
    let v = read_toml(&run.out.join("mirror/verification.toml"));
    let d = num(&v, &["limit_distance"]);
    let lag = num(&v, &["lagrangian", "sup"]);
    let sp = num(&v, &["special", "sup"]);
    outcome(d <= 1e-3 && lag <= 1e-3 && sp <= 1e-3, format!("distance to limit solution {d:.1e}, Lagrangian {lag:.1e}, special {sp:.1e}"))
}

fn lagrangian_identity() -> Outcome {
    let mut rng = R::seed_from_u64(9);
    let opts = LimitOptions::default();
    let (mut worst_lag, mut worst_gap, mut worst_sp): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut errors = 0;
    let mut tracks = [0, 0];
    for trial in 0..20 {
        let b: f64 = rng.gen_range(-0.4..0.4);
        let k = rng.gen_range(1..=2) as i64 * if rng.gen_bool(0.5) { 1 } else { -1 };
        let mean = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (geom, c0, specs) = if trial % 2 == 0 {
            let a: f64 = rng.gen_range(0.5..2.0);
            tracks[0] += 1;
            (geometry(ClosedFormPotential::quadratic([a, b, (1.0 + b * b) / a]), 16), 2.0 * TAU * k as f64, vec![BranchSpec { winding: [[k, 0], [0, k]], mean }])
        } else {
            let a = (1.0 + b * b).sqrt();
            tracks[1] += 1;
            (
                geometry(ClosedFormPotential::quadratic([a, b, a]), 16),
                0.0,
                vec![BranchSpec { winding: [[0, k], [k, 0]], mean }, BranchSpec { winding: [[0, -k], [-k, 0]], mean: [-mean[0], -mean[1]] }],
            )
        };
        let Ok(m) = limit_solve(&geom, c0, &specs, None, &opts) else {
            errors += 1;
            continue;
        };
        let Ok(lag) = lagrangian_residual(&m, &geom) else {
            errors += 1;
            continue;
        };
        worst_lag = worst_lag.max(lag.norms.sup);
        worst_gap = worst_gap.max(lag.path_gap);
        if c0 == 0.0 {
            match special_residual(&m, &geom) {
                Ok(sp) => worst_sp = worst_sp.max(sp.raw_norms.sup),
                Err(_) => errors += 1,
            }
        }
    }
    outcome(
        errors == 0 && worst_lag <= opts.tol && worst_gap <= 1e-12 && worst_sp <= opts.tol,
        format!("{} c0≠0 and {} c0=0 configs: Lagrangian {worst_lag:.1e}, two-path gap {worst_gap:.1e}, special {worst_sp:.1e} (tol {:e})", tracks[0], tracks[1], opts.tol),
    )
}

fn bubble_detection() -> Outcome {
    const NB: usize = 32;
    const NF: usize = 8;
    const CELL: usize = 8;
    const EPS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];
    let bg = Complex::new(0.8, 0.7);
    let lump = |scaling| Lump { center: (0.375, 0.625), width: 0.1, amplitude: 1.0, scaling };
    // the lump centre (0.375, 0.625) lies in cell row 1, column 2 of the 4 × 4 cell grid
    let want_cell = 4 + 2;
    let mut pass = true;
    let mut detail = vec![];
    // each scaling is its own corpus, with δ_η calibrated from its lump at the smallest ε
    let threshold = |scaling| corpus_threshold(&[lump_energy(NB, NF, [1.0, 1.0], EPS[3], bg, &lump(scaling))]);
    for (scaling, want) in [(LumpScaling::InverseEpsilon, BubbleType::Type1), (LumpScaling::Constant, BubbleType::Type2), (LumpScaling::SqrtEpsilon, BubbleType::Type3)] {
        let opts = AdiabaticOptions { cell: CELL, delta_eta: threshold(scaling), ..Default::default() };
        let members = EPS.iter().map(|&e| diagnose(lump_connection(NB, NF, [1.0, 1.0], e, bg, &[lump(scaling)]), None, 0, 0.0, &opts).unwrap()).collect();
        let rep = assemble_report(members, &opts);
        let flagged = &rep.members.last().unwrap().flagged;
        let tags: Vec<BubbleType> = rep.tags.iter().map(|t| t.1).collect();
        pass &= *flagged == vec![want_cell] && tags == vec![want];
        detail.push(format!("{:?}: cells {flagged:?} tags {:?}", scaling, tags.iter().map(|t| t.label()).collect::<Vec<_>>()));
    }
    let opts = AdiabaticOptions { cell: CELL, delta_eta: threshold(LumpScaling::SqrtEpsilon), ..Default::default() };
    let empty = diagnose(lump_connection(NB, NF, [1.0, 1.0], EPS[3], bg, &[]), None, 0, 0.0, &opts).unwrap();
    pass &= empty.flagged.is_empty();
    detail.push(format!("empty corpus: {} cells", empty.flagged.len()));
    outcome(pass, detail.join("; "))
}

fn flat_bundle(run: &WindingRun) -> Outcome {
    let v = read_toml(&run.out.join("mirror/verification.toml"));
    let sup = num(&v, &["flat_bundle", "sup"]);
    let bound = 10.0 * run.flow_tol;
    outcome(sup <= bound, format!("flat-bundle residual {sup:.1e} (bound {bound:.0e})"))
}

fn report(id: usize, name: &str, budget: Duration, elapsed: Duration, o: Outcome, failures: &mut usize) {
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    if !pass {
        *failures += 1;
    }
    let timing = format!("{:.2} s / {} s", elapsed.as_secs_f64(), budget.as_secs());
    let late = if in_time { "" } else { " over budget;" };
    println!("{} {id:>2} {name} [{timing}]{late} {}", if pass { "PASS" } else { "FAIL" }, o.detail);
}

fn timed(f: impl FnOnce() -> Outcome) -> (Duration, Outcome) {
    let t = Instant::now();
    let o = f();
    (t.elapsed(), o)
}

fn main() {
    pipeline::init_threads();
    let mut failures = 0;
    let secs = Duration::from_secs;
    let simple: [(usize, &str, u64, fn() -> Outcome); 6] = [
        (1, "calabi-yau criterion", 1, calabi_yau_criterion),
        (2, "legendre round trip", 5, legendre_round_trip),
        (3, "lemma bound chain", 10, lemma_suite_criterion),
        (4, "normalization bound end-to-end", 120, normalization_end_to_end),
        (5, "gauge invariances", 60, gauge_invariances),
        (6, "flow correctness", 60, flow_correctness),
    ];
    for (id, name, budget, f) in simple {
        let (t, o) = timed(f);
        report(id, name, secs(budget), t, o, &mut failures);
    }
    match winding_run() {
        Ok(run) => {
            let (t, o) = timed(|| adiabatic_trend(&run));
            report(7, "adiabatic flatness trend", secs(600), run.elapsed + t, o, &mut failures);
            let (t, o) = timed(|| mirror_consistency(&run));
            report(8, "mirror consistency", secs(60), t, o, &mut failures);
            let (t, o) = timed(lagrangian_identity);
            report(9, "lagrangian identity", secs(30), t, o, &mut failures);
            let (t, o) = timed(bubble_detection);
            report(10, "bubble detection", secs(120), t, o, &mut failures);
            let (t, o) = timed(|| flat_bundle(&run));
            report(11, "flat bundle on the mirror", secs(10), t, o, &mut failures);
        }
        Err(e) => {
            for (id, name) in [(7, "adiabatic flatness trend"), (8, "mirror consistency"), (11, "flat bundle on the mirror")] {
                report(id, name, secs(1), Duration::ZERO, outcome(false, format!("pipeline error: {e}")), &mut failures);
            }
            let (t, o) = timed(lagrangian_identity);
            report(9, "lagrangian identity", secs(30), t, o, &mut failures);
            let (t, o) = timed(bubble_detection);
            report(10, "bubble detection", secs(120), t, o, &mut failures);
        }
    }
    println!("{} of 11 criteria passed", 11 - failures);
    if failures > 0 && std::env::var("SYZ_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
