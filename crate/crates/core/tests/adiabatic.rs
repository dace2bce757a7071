use num_complex::Complex;
use rand::SeedableRng;
use syz_core::adiabatic::*;
use syz_core::fiber::FiberOptions;
use syz_core::hym::*;
use syz_core::sampling::{random_smooth_field, AlgebraKind};

type R = rand::rngs::StdRng;

const BG: Complex<f64> = Complex { re: 0.8, im: 0.7 };
const NB: usize = 32;
const NF: usize = 8;
const CELL: usize = 8;
const EPS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];

fn lump(scaling: LumpScaling) -> Lump<f64> {
    Lump { center: (0.375, 0.625), width: 0.1, amplitude: 1.0, scaling }
}

fn random_connection(n: usize, amp: f64, seed: u64) -> Connection4D<f64> {
    let mut rng = R::seed_from_u64(seed);
    let mut x = Connection4D::zero(n, n, 1.0, 1.0, 0.5);
    for a in 0..4 {
        x.fields[a] = random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, amp, AlgebraKind::Su2);
    }
    x
}

#[test]
fn measure_is_additive_and_sums_to_energy() {
    let x = random_connection(8, 0.5, 1);
    let e = ym_energy(&x).total;
    let coarse = base_measure(&x, 4).unwrap();
    let fine = base_measure(&x, 2).unwrap();
    let sc: f64 = coarse.iter().sum();
    let sf: f64 = fine.iter().sum();
    assert!((sc - e).abs() < 1e-12 * e && (sf - e).abs() < 1e-12 * e);
    // each coarse cell is the sum of its four refined cells
    for (c, v) in coarse.iter().enumerate() {
        let (ci, cj) = (c / 2, c % 2);
        let sub: f64 = (0..4).map(|k| fine[(2 * ci + k / 2) * 4 + 2 * cj + k % 2]).sum();
        assert!((sub - v).abs() < 1e-12 * e);
    }
    assert!(matches!(base_measure(&x, 3), Err(AdiabaticError::BadPartition { .. })));
}

#[test]
fn measure_translates_with_the_connection() {
    let x = random_connection(8, 0.5, 2);
    let mut y = x.clone();
    let per = 8 * 8 * 8;
    // shift by one 2×2 cell (two sites) in s
    for a in 0..4 {
        for p in 0..x.len() {
            let q = (p + 2 * per) % x.len();
            y.fields[a][q] = x.fields[a][p];
        }
    }
    let mx = base_measure(&x, 2).unwrap();
    let my = base_measure(&y, 2).unwrap();
    for c in 0..16 {
        let (i, j) = (c / 4, c % 4);
        assert!((my[((i + 1) % 4) * 4 + j] - mx[c]).abs() < 1e-13 * mx[c].max(1.0));
    }
}

#[test]
fn flat_connection_has_zero_measure_and_empty_singular_set() {
    let x = Connection4D::from_fiber(8, 1.0, 1.0, 0.5, &syz_core::fiber::FiberConnection::diagonal(syz_core::fiber::fiber_lattice(8, 1.0), BG));
    let opts = AdiabaticOptions { cell: 2, ..Default::default() };
    let mu = base_measure(&x, 2).unwrap();
    assert!(mu.iter().all(|m| *m == 0.0));
    let sec = phi_extract(&x, &opts.fiber);
    assert!(sec.residual_sup < 1e-12);
    assert!(singular_set(&mu, Some(&sec), 2, &opts).is_empty());
}

#[test]
fn section_at_singular_class_flags_everything() {
    let x = Connection4D::<f64>::zero(8, 8, 1.0, 1.0, 0.5);
    let opts = AdiabaticOptions { cell: 2, ..Default::default() };
    let mu = base_measure(&x, 2).unwrap();
    let sec = phi_extract(&x, &opts.fiber);
    assert_eq!(singular_set(&mu, Some(&sec), 2, &opts).len(), 16);
    assert!(!assumption_b_holds(&sec, &opts));
}

#[test]
fn winding_section_is_holomorphic() {
    let x = Connection4D::<f64>::zero(16, 8, 1.0, 1.0, 0.5).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
    let sec = phi_extract(&x, &FiberOptions::default());
    assert_eq!(sec.masked(), 0);
    assert!(sec.residual_sup < 1e-10, "{}", sec.residual_sup);
}

#[test]
fn section_is_unitary_gauge_invariant() {
    let n = 16;
    let x = Connection4D::<f64>::zero(8, n, 1.0, 1.0, 0.5).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
    let mut rng = R::seed_from_u64(3);
    let xi = random_smooth_field(&mut rng, &[8, 8, n, n], &[2, 3], 1, 0.2, AlgebraKind::Diagonal);
    let g: Vec<_> = xi.iter().map(|m| m.exp()).collect();
    let y = x.gauge_apply(&g).unwrap();
    let (a, b) = (phi_extract(&x, &FiberOptions::default()), phi_extract(&y, &FiberOptions::default()));
    for (u, v) in a.samples.iter().zip(&b.samples) {
        let (u, v) = (u.as_ref().unwrap(), v.as_ref().unwrap());
        assert!((u.point.a - v.point.a).norm() < 1e-9, "{:?} {:?}", u.point.a, v.point.a);
    }
}

fn lump_family(scaling: LumpScaling) -> (Vec<EpsilonReport<f64>>, AdiabaticOptions<f64>) {
    let l = lump(scaling);
    let last = *EPS.last().unwrap();
    let delta = corpus_threshold(&[lump_energy(NB, NF, [1.0, 1.0], last, BG, &l)]);
    let opts = AdiabaticOptions { cell: CELL, delta_eta: delta, ..Default::default() };
    let members = EPS
        .iter()
        .map(|&e| diagnose(lump_connection(NB, NF, [1.0, 1.0], e, BG, &[l]), None, 0, 0.0, &opts).unwrap())
        .collect();
    (members, opts)
}

fn lump_cell() -> usize {
    // center (0.375, 0.625) on a 32-site base with 8-site cells
    1 * 4 + 2
}

#[test]
fn lump_mass_concentrates_near_center() {
    let l = lump(LumpScaling::Constant);
    let x = lump_connection(NB, NF, [1.0, 1.0], 0.25, BG, &[l]);
    let mu = base_measure(&x, CELL).unwrap();
    let total: f64 = mu.iter().sum();
    let c = lump_cell();
    let (ci, cj) = ((c / 4) as i64, (c % 4) as i64);
    let mut near = 0.0;
    for di in -1..=1 {
        for dj in -1..=1 {
            near += mu[(((ci + di).rem_euclid(4)) * 4 + (cj + dj).rem_euclid(4)) as usize];
        }
    }
    assert!(near >= 0.95 * total, "{near} {total}");
}

#[test]
fn lump_corpus_tags() {
    for (scaling, want) in [
        (LumpScaling::InverseEpsilon, BubbleType::Type1),
        (LumpScaling::Constant, BubbleType::Type2),
        (LumpScaling::SqrtEpsilon, BubbleType::Type3),
    ] {
        let (members, opts) = lump_family(scaling);
        let report = assemble_report(members, &opts);
        let last = report.members.last().unwrap();
        assert_eq!(last.flagged, vec![lump_cell()], "{scaling:?}: {:?}", last.mu);
        assert_eq!(report.tags.len(), 1);
        assert_eq!(report.tags[0].1, want, "{scaling:?}: exponent {}", report.tags[0].2);
    }
}

#[test]
fn empty_corpus_has_empty_singular_set() {
    let l = lump(LumpScaling::Constant);
    let delta = corpus_threshold(&[lump_energy(NB, NF, [1.0, 1.0], 0.0625, BG, &l)]);
    let opts = AdiabaticOptions { cell: CELL, delta_eta: delta, ..Default::default() };
    let x = lump_connection(NB, NF, [1.0, 1.0], 0.0625, BG, &[]);
    let r = diagnose(x, None, 0, 0.0, &opts).unwrap();
    assert!(r.flagged.is_empty());
}

#[test]
fn decay_diagnostic_exact_and_positive_rate() {
    let flat = Connection4D::<f64>::zero(16, 8, 1.0, 1.0, 0.5).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
    let fit = decay_diagnostic(&flat, (0.5, 0.5), 0.4).unwrap();
    assert!(fit.exact);
    // fiber-mode profile of the linearized problem: decays like exp(−m d) away from the boundary
    let nb = 32;
    for (m, expect_larger_than) in [(6.0, 0.0), (12.0, 6.0)] {
        let dev: Vec<f64> = (0..nb * nb)
            .map(|b| {
                let (s, t) = ((b / nb) as f64 / nb as f64, (b % nb) as f64 / nb as f64);
                let r = ((s - 0.5).powi(2) + (t - 0.5).powi(2)).sqrt();
                1e-3 * (-m * (0.4 - r).max(0.0)).exp()
            })
            .collect();
        let fit = decay_fit(&dev, nb, [1.0, 1.0], (0.5, 0.5), 0.4).unwrap();
        assert!(fit.rate > expect_larger_than && (fit.rate - m).abs() < 1e-6 * m, "{fit:?}");
    }
}

#[test]
fn family_is_deterministic_and_validates_epsilons() {
    let n = 8;
    let mut rng = R::seed_from_u64(12);
    let mut seed = Connection4D::<f64>::zero(n, n, 1.0, 1.0, 1.0).with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0)).unwrap();
    for a in 0..4 {
        seed.fields[a] = random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, 0.1, AlgebraKind::Diagonal);
    }
    let stages = [FamilyStage { epsilon: 1.0, nf: n }, FamilyStage { epsilon: 0.5, nf: n }];
    let opts = AdiabaticOptions { cell: 2, ..Default::default() };
    let flow = FlowOptions::default();
    let a = run_family(&seed, &stages, &flow, &opts).unwrap();
    let b = run_family(&seed, &stages, &flow, &opts).unwrap();
    for (u, v) in a.members.iter().zip(&b.members) {
        assert_eq!(u.connection.fields, v.connection.fields);
        assert_eq!(u.mu, v.mu);
        assert!(u.flow_residual <= flow.tol);
    }
    let bad = [FamilyStage { epsilon: 0.5, nf: n }, FamilyStage { epsilon: 0.5, nf: n }];
    assert!(matches!(run_family(&seed, &bad, &flow, &opts), Err(AdiabaticError::InvalidEpsilons)));
}
