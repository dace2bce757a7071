//! Brute-force calibration of the fiber-gauge constants and the constant-matrix inequality
//! suite for hermitian gauges of diagonal connections.

use num_complex::Complex;
use rand::Rng;

use crate::fiber::{complex_gauge_apply, fiber_curvature, fiber_lattice, flatten_to_t, unitary_normalize, FiberConnection, FiberError, FiberOptions, GaugeKind, GaugeTransform};
use crate::mat2::{sup_norm, Mat2};
use crate::sampling::{random_smooth_field, random_traceless_hermitian, uniform_in, AlgebraKind};
use crate::scalar::{lit, Scalar};

/// `B = P⁻¹ diag(a, −a) P` for hermitian `P = [[p, q], [q̄, r]]` of determinant one.
pub fn hermitian_gauge_of_diagonal<T: Scalar>(p: &Mat2<T>, a: T) -> Mat2<T> {
    let d = Mat2::diag(Complex::new(a, T::zero()), Complex::new(-a, T::zero()));
    p.inverse_unimodular() * d * *p
}

/// One sample of the inequality suite.
#[derive(Clone, Copy, Debug)]
pub struct LemmaSample<T> {
    pub p: T,
    pub q: Complex<T>,
    pub r: T,
    pub a: T,
    /// Largest entry of `BB† − B†B`.
    pub commutator_max: T,
}

impl<T: Scalar> LemmaSample<T> {
    pub fn from_gauge(pm: &Mat2<T>, a: T) -> Self {
        let b = hermitian_gauge_of_diagonal(pm, a);
        let c = b * b.dagger() - b.dagger() * b;
        let commutator_max = c.e.iter().map(|z| z.norm()).fold(T::zero(), T::max);
        Self { p: pm.e[0].re, q: pm.e[1], r: pm.e[3].re, a, commutator_max }
    }

    /// `|a(pr + |q|² − 1)|`.
    pub fn diagonal_defect(&self) -> T {
        (self.a * (self.p * self.r + self.q.norm_sqr() - T::one())).abs()
    }

    /// `(|aqr|, |aqp|)`.
    pub fn offdiagonal(&self) -> (T, T) {
        let aq = self.a.abs() * self.q.norm();
        (aq * self.r.abs(), aq * self.p.abs())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LemmaReport<T> {
    pub threshold: T,
    pub delta: T,
    pub drawn: usize,
    pub accepted: usize,
    pub violations: usize,
    /// Samples in the `√2 r < p` (or mirrored) branch among the accepted ones.
    pub branch_samples: usize,
    pub branch_violations: usize,
    /// Largest observed ratios of each bound to its limit.
    pub worst_diagonal: T,
    pub worst_offdiagonal: T,
}

/// Draws hermitian `P = exp(ηH)` with `η` log-uniform in `[1e-10, 1]` and `a ∈ [0.2, 1.3]`,
/// keeps those with every entry of `BB† − B†B` at most `threshold`, and checks
/// `|a(pr+|q|²−1)| < √δ`, `|aqr|, |aqp| < √(2δ)` and the branch bound `a²|q|²max(p,r)² < δ`.
pub fn lemma_suite<T: Scalar, R: Rng + ?Sized>(rng: &mut R, delta: T, threshold: T, accepted_target: usize, max_draws: usize) -> LemmaReport<T> {
    let mut rep = LemmaReport { threshold, delta, ..Default::default() };
    let sd = delta.sqrt();
    let s2d = (delta * lit(2.0)).sqrt();
    let two_sqrt = lit::<T>(2.0).sqrt();
    while rep.accepted < accepted_target && rep.drawn < max_draws {
        rep.drawn += 1;
        let eta: T = lit::<T>(10.0).powf(uniform_in(rng, -10.0, 0.0));
        let h: Mat2<T> = random_traceless_hermitian(rng);
        let pm = h.scale_re(eta / h.norm()).exp();
        let a: T = uniform_in(rng, 0.2, 1.3);
        let s = LemmaSample::from_gauge(&pm, a);
        if s.commutator_max > threshold {
            continue;
        }
        rep.accepted += 1;
        let dd = s.diagonal_defect();
        let (qr, qp) = s.offdiagonal();
        rep.worst_diagonal = rep.worst_diagonal.max(dd / sd);
        rep.worst_offdiagonal = rep.worst_offdiagonal.max(qr.max(qp) / s2d);
        if !(dd < sd && qr < s2d && qp < s2d) {
            rep.violations += 1;
        }
        if two_sqrt * s.r < s.p || two_sqrt * s.p < s.r {
            rep.branch_samples += 1;
            let aq2 = s.a * s.a * s.q.norm_sqr();
            if !(aq2 * s.r * s.r < delta && aq2 * s.p * s.p < delta) {
                rep.branch_violations += 1;
            }
        }
    }
    rep
}

/// One synthetic near-flat fiber connection: a complex gauge of a diagonal class.
#[derive(Clone, Debug)]
pub struct NearFlatSample<T: Scalar> {
    pub beta: Complex<T>,
    pub connection: FiberConnection<T>,
    pub curvature_sup: T,
}

/// Generator shared by calibration and the end-to-end check: `g = exp(ηH)·exp(w)` with
/// hermitian constant part (`η ∈ [1e-4, 0.1]` log-uniform) and a small smooth traceless `w`, applied to
/// `diag(β, −β)` with `|β| ∈ [0.2, 1.3]`.
pub fn near_flat_sample<T: Scalar, R: Rng + ?Sized>(rng: &mut R, nf: usize, wave_amp: T) -> NearFlatSample<T> {
    let lat = fiber_lattice(nf, T::one());
    let mag: T = uniform_in(rng, 0.2, 1.3);
    let ang: T = uniform_in(rng, 0.0, std::f64::consts::FRAC_PI_2);
    let beta = Complex::new(mag * ang.cos(), mag * ang.sin());
    let a0 = FiberConnection::diagonal(lat.clone(), beta);
    // log-uniform sizes so that the curvature spans several decades below the basin radius
    let eta: T = lit::<T>(10.0).powf(uniform_in(rng, -4.0, -1.0));
    let h: Mat2<T> = random_traceless_hermitian(rng);
    let pconst = h.scale_re(eta / h.norm()).exp();
    let amp: T = wave_amp * lit::<T>(10.0).powf(uniform_in(rng, -3.0, 0.0));
    let w = random_smooth_field(rng, &[nf, nf], &[0, 1], 1, amp, AlgebraKind::Sl2);
    let g = GaugeTransform { kind: GaugeKind::Complex, g: w.iter().map(|m| pconst * m.exp()).collect() };
    let connection = complex_gauge_apply(&g, &a0, lit(1e-8)).expect("unimodular by construction");
    let curvature_sup = sup_norm(&fiber_curvature(&connection));
    NearFlatSample { beta, connection, curvature_sup }
}

#[derive(Clone, Debug)]
pub struct BoundCalibration<T> {
    pub samples: usize,
    pub skipped: usize,
    pub max_ratio: T,
    pub safety: T,
    /// `safety × max_ratio`.
    pub constant: T,
}

/// Sweeps near-flat samples and records the largest `‖h*A − A₀‖_sup / ‖F_A‖_sup^{1/2}`.
/// Samples outside the flattening basin or the curvature precondition are skipped.
pub fn calibrate_bound<T: Scalar, R: Rng + ?Sized>(rng: &mut R, samples: usize, nf: usize, wave_amp: T, safety: T, opts: &FiberOptions<T>) -> BoundCalibration<T> {
    let mut max_ratio = T::zero();
    let mut done = 0;
    let mut skipped = 0;
    while done < samples {
        let s = near_flat_sample(rng, nf, wave_amp);
        match normalize_ratio(&s.connection, opts) {
            Ok(r) => {
                max_ratio = max_ratio.max(r);
                done += 1;
            }
            Err(_) => skipped += 1,
        }
        if skipped > samples * 10 {
            break;
        }
    }
    BoundCalibration { samples: done, skipped, max_ratio, safety, constant: max_ratio * safety }
}

/// Runs flattening and unitary normalization, returning the bound ratio.
pub fn normalize_ratio<T: Scalar>(a: &FiberConnection<T>, opts: &FiberOptions<T>) -> Result<T, FiberError> {
    let flat = flatten_to_t(a, None, opts)?;
    Ok(unitary_normalize(a, &flat, opts)?.bound_ratio)
}

#[derive(Clone, Debug)]
pub struct LowerBoundCalibration<T> {
    pub samples: usize,
    pub constant: T,
    pub check_samples: usize,
    /// Fresh samples with ratio below `constant / 2`.
    pub violations: usize,
    pub min_check_ratio: T,
}

/// Ratio `‖(exp v)*A' − A'‖_sup / ‖v‖_sup` for small `v` transverse to the stabilizer of a
/// generic diagonal `A'`: zero-mean smooth part plus a constant off-diagonal part.
fn infinitesimal_ratio<T: Scalar, R: Rng + ?Sized>(rng: &mut R, nf: usize, size: T) -> T {
    let lat = fiber_lattice(nf, T::one());
    let mag: T = uniform_in(rng, 0.2, 1.3);
    let ang: T = uniform_in(rng, 0.0, std::f64::consts::FRAC_PI_2);
    let beta = Complex::new(mag * ang.cos(), mag * ang.sin());
    let a0 = FiberConnection::diagonal(lat, beta);
    let mut v = random_smooth_field(rng, &[nf, nf], &[0, 1], 2, T::one(), AlgebraKind::Sl2);
    let off = Mat2::new(Complex::new(T::zero(), T::zero()), Complex::new(uniform_in(rng, -1.0, 1.0), uniform_in(rng, -1.0, 1.0)), Complex::new(uniform_in(rng, -1.0, 1.0), uniform_in(rng, -1.0, 1.0)), Complex::new(T::zero(), T::zero()));
    for m in v.iter_mut() {
        *m += off;
    }
    let s = size / sup_norm(&v);
    let g = GaugeTransform { kind: GaugeKind::Complex, g: v.iter().map(|m| m.scale_re(s).exp()).collect() };
    let moved = complex_gauge_apply(&g, &a0, lit(1e-6)).expect("unimodular by construction");
    let b0 = a0.b_field();
    let b1 = moved.b_field();
    let diff: Vec<Mat2<T>> = b1.iter().zip(&b0).map(|(x, y)| *x - *y).collect();
    sup_norm(&diff) / size
}

/// Calibrates the lower bound constant by randomized minimization, then checks fresh samples
/// against half of it.
pub fn calibrate_lower_bound<T: Scalar, R: Rng + ?Sized>(rng: &mut R, samples: usize, check: usize, nf: usize, size: T) -> LowerBoundCalibration<T> {
    let mut c = T::infinity();
    for _ in 0..samples {
        c = c.min(infinitesimal_ratio(rng, nf, size));
    }
    let half = c * lit(0.5);
    let mut violations = 0;
    let mut min_check = T::infinity();
    for _ in 0..check {
        let r = infinitesimal_ratio(rng, nf, size);
        min_check = min_check.min(r);
        if r < half {
            violations += 1;
        }
    }
    LowerBoundCalibration { samples, constant: c, check_samples: check, violations, min_check_ratio: min_check }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn explicit_component_matrix() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let h: Mat2<f64> = random_traceless_hermitian(&mut rng);
        let pm = h.scale_re(0.3).exp();
        let a = 0.7;
        let b = hermitian_gauge_of_diagonal(&pm, a);
        let (p, q, r) = (pm.e[0].re, pm.e[1], pm.e[3].re);
        let d = a * (p * r + q.norm_sqr());
        assert!((b.e[0] - Complex::new(d, 0.0)).norm() < 1e-13);
        assert!((b.e[1] - q * (2.0 * a * r)).norm() < 1e-13);
        assert!((b.e[2] + q.conj() * (2.0 * a * p)).norm() < 1e-13);
        // direct expansion gives 4a²|q|²(r² − p²) on the diagonal; only |p² − r²| is used
        let c = b * b.dagger() - b.dagger() * b;
        let q2 = q.norm_sqr();
        assert!((c.e[0].re - a * a * (4.0 * r * r * q2 - 4.0 * p * p * q2)).abs() < 1e-12);
        assert!((c.e[1] + q * (4.0 * a * a * (p * r + q2) * (p + r))).norm() < 1e-12);
    }

    #[test]
    fn suite_small_run_has_no_violations() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let rep = lemma_suite::<f64, _>(&mut rng, 1e-2, 1e-2, 500, 1_000_000);
        assert_eq!(rep.accepted, 500);
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.branch_violations, 0);
    }
}
