use rand::{Rng, SeedableRng};
use syz_core::fiber::{lattice_gauge, FiberOptions};
use syz_core::geometry::{metric_from_potential, ClosedFormPotential, GeometryOptions, HessianGeometry, Potential};
use syz_core::hym::{Connection4D, WindingBackground, AXIS_S, AXIS_T};
use syz_core::mat2::Mat2;
use syz_core::mirror::*;

type R = rand::rngs::StdRng;
const TAU: f64 = std::f64::consts::TAU;

fn geometry(p: ClosedFormPotential<f64>, n: usize) -> HessianGeometry<f64> {
    metric_from_potential(&Potential::ClosedForm(p), n, [1.0, 1.0], &GeometryOptions::default()).unwrap()
}

#[test]
fn random_calabi_yau_configs_are_lagrangian() {
    let mut rng = R::seed_from_u64(17);
    let opts = LimitOptions::default();
    for trial in 0..20 {
        let b: f64 = rng.gen_range(-0.4..0.4);
        let k = rng.gen_range(1..=2) as i64 * if rng.gen_bool(0.5) { 1 } else { -1 };
        let mean = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (geom, c0, specs) = if trial % 2 == 0 {
            // c₀ ≠ 0: a_s = b_t, c₀ = 2 a_s
            let a: f64 = rng.gen_range(0.5..2.0);
            let g = geometry(ClosedFormPotential::quadratic([a, b, (1.0 + b * b) / a]), 16);
            (g, 2.0 * TAU * k as f64, vec![BranchSpec { winding: [[k, 0], [0, k]], mean }])
        } else {
            // c₀ = 0 with equal diagonal metric entries
            let a = (1.0 + b * b).sqrt();
            let g = geometry(ClosedFormPotential::quadratic([a, b, a]), 16);
            let w = [[0, k], [k, 0]];
            let neg = [[0, -k], [-k, 0]];
            (g, 0.0, vec![BranchSpec { winding: w, mean }, BranchSpec { winding: neg, mean: [-mean[0], -mean[1]] }])
        };
        assert!(geom.calabi_yau);
        let m = limit_solve(&geom, c0, &specs, None, &opts).unwrap();
        let lag = lagrangian_residual(&m, &geom).unwrap();
        assert!(lag.norms.sup <= opts.tol, "trial {trial}: {}", lag.norms.sup);
        assert!(lag.path_gap <= 1e-12, "{}", lag.path_gap);
        let sp = special_residual(&m, &geom).unwrap();
        assert!(sp.shifted_norms.sup <= opts.tol);
        if c0 == 0.0 {
            assert!(sp.raw_norms.sup <= opts.tol);
        } else {
            assert!((sp.raw_norms.sup - c0.abs()).abs() < 1e-9);
        }
    }
}

#[test]
fn variable_metric_manufactured_solution() {
    let n = 32;
    let geom = geometry(ClosedFormPotential::flat().with_mode(0.004, 1, 1), n);
    assert!(!geom.calabi_yau);
    let lat = geom.lattice().clone();
    let pa: Vec<f64> = (0..n * n).map(|i| {
        let (s, t) = geom.site(i);
        0.3 * (TAU * s).sin() + 0.1 * (TAU * (s + 2.0 * t)).cos()
    }).collect();
    let pb: Vec<f64> = (0..n * n).map(|i| {
        let (s, t) = geom.site(i);
        -0.2 * (TAU * t).cos() + 0.05 * (TAU * (2.0 * s - t)).sin()
    }).collect();
    let _ = lat;
    let exact = Multisection {
        n,
        periods: [1.0, 1.0],
        c0: 0.0,
        branches: vec![Branch { winding: [[0, 0], [0, 0]], periodic_a: pa.clone(), periodic_b: pb.clone() }],
        mask: vec![false; n * n],
        non_reduced: false,
        provenance: Provenance::SolvedLimitEquation,
    };
    let (f1, f2) = limit_residuals(&exact, &exact.branches[0], &geom);
    let opts = LimitOptions { tol: 1e-11, max_iters: 200 };
    let m = limit_solve(&geom, 0.0, &[BranchSpec { winding: [[0, 0], [0, 0]], mean: [0.0, 0.0] }], Some((&f1, &f2)), &opts).unwrap();
    assert!(multisection_distance(&m, &exact) < 1e-9);
    // the Lagrangian expression is E1·g^{st} − E2 identically
    let lag = lagrangian_residual(&m, &geom).unwrap();
    for i in 0..n * n {
        let want = f1[i] * geom.g_inv[i][1] - f2[i];
        assert!((lag.formula[0][i] - want).abs() < 1e-9);
    }
    assert!(matches!(special_residual(&m, &geom), Err(MirrorError::NotCalabiYau(_))));
}

fn winding_connection(n: usize, eps: f64) -> Connection4D<f64> {
    Connection4D::zero(n, n, 1.0, 1.0, eps).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap()
}

#[test]
fn extraction_matches_limit_solution() {
    let n = 8;
    let x = winding_connection(n, 0.5);
    let (m, sec) = from_connection(&x, &FiberOptions::default(), &ExtractOptions::default()).unwrap();
    assert_eq!(sec.masked(), 0);
    assert_eq!(m.branches[0].winding, [[1, 0], [0, -1]]);
    assert_eq!(m.branches[1].winding, [[-1, 0], [0, 1]]);
    let geom = geometry(ClosedFormPotential::flat(), n);
    let solved = limit_solve(&geom, 0.0, &m.branch_specs(), None, &LimitOptions::default()).unwrap();
    assert!(multisection_distance(&m, &solved) < 1e-9);
    assert!(lagrangian_residual(&m, &geom).unwrap().norms.sup < 1e-9);
    assert!(special_residual(&m, &geom).unwrap().raw_norms.sup < 1e-9);
}

#[test]
fn extraction_is_gauge_invariant() {
    let n = 8;
    let x = winding_connection(n, 0.5);
    let per = n * n;
    let lat = syz_core::fiber::fiber_lattice::<f64>(n, 1.0);
    let shift = lattice_gauge(&lat, 1, 1);
    let mut rng = R::seed_from_u64(5);
    let phase: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    // smooth base-dependent diagonal gauge times a fiber lattice shift
    let g: Vec<Mat2<f64>> = (0..x.len())
        .map(|p| {
            let (s, t) = x.base_point(x.base_index(p));
            Mat2::i_sigma3(0.2 * (TAU * s).sin() + 0.1 * (TAU * t).cos()).exp() * shift.g[p % per]
        })
        .collect();
    let _ = phase;
    let y = x.gauge_apply(&g).unwrap();
    let (m0, _) = from_connection(&x, &FiberOptions::default(), &ExtractOptions::default()).unwrap();
    let (m1, _) = from_connection(&y, &FiberOptions::default(), &ExtractOptions::default()).unwrap();
    assert!(multisection_distance(&m0, &m1) < 1e-9, "{}", multisection_distance(&m0, &m1));
}

#[test]
fn flat_bundle_residual_of_compatible_higgs_fields() {
    let n = 8;
    let mut x = winding_connection(n, 0.5);
    assert!(flat_bundle_residual(&x, None).sup == 0.0);
    // Φ = ∂_s u, Ψ = ∂_t u for u = cos(2πs)sin(2πt) iσ3
    for p in 0..x.len() {
        let (s, t) = x.base_point(x.base_index(p));
        x.fields[AXIS_S][p] = Mat2::i_sigma3(-TAU * (TAU * s).sin() * (TAU * t).sin());
        x.fields[AXIS_T][p] = Mat2::i_sigma3(TAU * (TAU * s).cos() * (TAU * t).cos());
    }
    let r = flat_bundle_residual(&x, None);
    assert!(r.sup < 1e-10 && r.fiber_variation < 1e-13 && r.offdiagonal == 0.0, "{r:?}");
    x.fields[AXIS_T][0] = Mat2::i_sigma3(0.5);
    assert!(flat_bundle_residual(&x, None).sup > 1e-3);
}
