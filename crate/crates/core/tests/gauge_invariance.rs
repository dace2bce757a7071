use num_complex::Complex;
use rand::{Rng, SeedableRng};
use syz_core::fiber::*;
use syz_core::hym::*;
use syz_core::mat2::Mat2;
use syz_core::sampling::{exp_field, random_smooth_field, AlgebraKind};

type R = rand::rngs::StdRng;

fn random_4d(rng: &mut R, n: usize, amp: f64) -> Connection4D<f64> {
    let mut x = Connection4D::zero(n, n, 1.0, 1.0, 0.5);
    for a in 0..4 {
        x.fields[a] = random_smooth_field(rng, &[n, n, n, n], &[0, 1, 2, 3], 1, amp, AlgebraKind::Su2);
    }
    x
}

fn norms(x: &Connection4D<f64>) -> (Vec<f64>, f64) {
    let f = curvature_components(x);
    let l2: Vec<f64> = f.components.iter().map(|c| c.iter().map(Mat2::norm_sqr).sum::<f64>().sqrt()).collect();
    (l2, ym_energy_from(x, &f).total)
}

#[test]
fn curvature_norms_and_energy_are_unitary_invariant() {
    let n = 16;
    let mut rng = R::seed_from_u64(21);
    for _ in 0..3 {
        let x = random_4d(&mut rng, n, 0.4);
        let g = exp_field(&random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, 0.2, AlgebraKind::Su2));
        let y = x.gauge_apply(&g).unwrap();
        let (a, ea) = norms(&x);
        let (b, eb) = norms(&y);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-9 * u.max(1.0), "{u} {v}");
        }
        assert!((ea - eb).abs() <= 1e-9 * ea, "{ea} {eb}");
    }
}

#[test]
fn energy_is_invariant_under_lattice_shift_on_winding_background() {
    let n = 8;
    let mut x = Connection4D::<f64>::zero(n, n, 1.0, 1.0, 0.5)
        .with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0))
        .unwrap();
    let mut rng = R::seed_from_u64(4);
    for a in 0..4 {
        x.fields[a] = random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, 0.3, AlgebraKind::Diagonal);
    }
    let lat = syz_core::fiber::fiber_lattice::<f64>(n, 1.0);
    let shift = lattice_gauge(&lat, 1, -2);
    let g: Vec<Mat2<f64>> = (0..x.len()).map(|p| shift.g[p % (n * n)]).collect();
    let y = x.gauge_apply(&g).unwrap();
    let (ea, eb) = (ym_energy(&x).total, ym_energy(&y).total);
    assert!((ea - eb).abs() <= 1e-10 * ea.max(1.0), "{ea} {eb}");
}

#[test]
fn moduli_point_is_invariant_under_unitary_gauge_and_lattice_shift() {
    let n = 16;
    let lat = fiber_lattice::<f64>(n, 1.0);
    let mut rng = R::seed_from_u64(8);
    let opts = FiberOptions::default();
    for _ in 0..10 {
        let beta = Complex::new(rng.gen_range(0.2..1.3), rng.gen_range(0.2..1.3));
        let a = FiberConnection::diagonal(lat.clone(), beta);
        let p0 = flatten_to_t(&a, None, &opts).unwrap().point;
        let g = GaugeTransform { kind: GaugeKind::Unitary, g: exp_field(&random_smooth_field(&mut rng, &[n, n], &[0, 1], 1, 0.3, AlgebraKind::Su2)) };
        let b = unitary_gauge_apply(&g, &a, 1e-9).unwrap();
        let p1 = match flatten_to_t(&b, None, &opts) { Ok(f) => f.point, Err(e) => panic!("{e:?} {beta}") };
        assert!(ModuliPoint::class_distance(p0.a, p1.a) < 1e-9, "{:?} {:?}", p0.a, p1.a);
        let c = lattice_gauge_shift(&a, rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        let p2 = flatten_to_t(&c, None, &opts).unwrap().point;
        assert!(ModuliPoint::class_distance(p0.a, p2.a) < 1e-11);
    }
}

#[test]
fn fiber_curvature_l2_is_unitary_invariant() {
    let n = 32;
    let lat = fiber_lattice::<f64>(n, 1.0);
    let mut rng = R::seed_from_u64(2);
    for _ in 0..5 {
        let ax = random_smooth_field(&mut rng, &[n, n], &[0, 1], 1, 0.5, AlgebraKind::Su2);
        let ay = random_smooth_field(&mut rng, &[n, n], &[0, 1], 1, 0.5, AlgebraKind::Su2);
        let a = FiberConnection::from_full(lat.clone(), &ax, &ay);
        let g = GaugeTransform { kind: GaugeKind::Unitary, g: exp_field(&random_smooth_field(&mut rng, &[n, n], &[0, 1], 1, 0.5, AlgebraKind::Su2)) };
        let b = unitary_gauge_apply(&g, &a, 1e-9).unwrap();
        let (u, v) = (curvature_l2(&a), curvature_l2(&b));
        assert!((u - v).abs() <= 1e-10 * u, "{u} {v}");
    }
}
