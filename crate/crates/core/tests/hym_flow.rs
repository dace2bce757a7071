use rand::SeedableRng;
use syz_core::hym::*;
use syz_core::mat2::Mat2;
use syz_core::sampling::{random_smooth_field, AlgebraKind};

type Rng = rand::rngs::StdRng;

#[test]
fn abelian_perturbation_converges() {
    let n = 16;
    let mut rng = Rng::seed_from_u64(11);
    let mut x = Connection4D::<f64>::zero(n, n, 1.0, 1.0, 0.5);
    for a in 0..4 {
        x.fields[a] = random_smooth_field(&mut rng, &[n, n, n, n], &[0, 1, 2, 3], 1, 0.3, AlgebraKind::Diagonal);
    }
    let t = std::time::Instant::now();
    let r = flow_solve(&x, &FlowOptions { max_iters: 200, ..Default::default() }).unwrap();
    eprintln!("{:?} iters {} time {:?} trace {:?}", r.status, r.iterations, t.elapsed(), &r.trace);
    assert!(r.converged());
    assert!(r.is_monotone());
    let f = curvature_components(&r.connection);
    let fxy = f.xy().iter().map(Mat2::norm).fold(0.0, f64::max);
    assert!(fxy < 1e-7, "{fxy}");
}
