//! Random test fields: smooth gauge transformations, hermitian matrices, band-limited connections.

use num_complex::Complex;
use rand::Rng;

use crate::mat2::Mat2;
use crate::scalar::{lit, Scalar};

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    lit(rng.gen_range(lo..hi))
}

/// Random traceless hermitian matrix with coefficients uniform in `[-1, 1]`.
pub fn random_traceless_hermitian<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Mat2<T> {
    let c = [uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)];
    // i·(anti-hermitian) is hermitian
    Mat2::from_u2(T::zero(), c).scale(Complex::new(T::zero(), -T::one()))
}

/// Random su(2) element with coefficients uniform in `[-1, 1]`.
pub fn random_su2<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Mat2<T> {
    Mat2::from_u2(T::zero(), [uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)])
}

/// Random traceless complex matrix with entries uniform in the unit square.
pub fn random_sl2<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Mat2<T> {
    let mut z = || Complex::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
    let a = z();
    Mat2::new(a, z(), z(), -a)
}

/// Kind of Lie-algebra values used for a random smooth field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgebraKind {
    /// su(2): anti-hermitian traceless.
    Su2,
    /// sl(2, C): traceless.
    Sl2,
    /// Diagonal `i σ3` multiples.
    Diagonal,
}

/// Smooth zero-mean field on a periodic grid with Fourier modes `1 ≤ |k|_∞ ≤ kmax` in every
/// listed axis. `dims` and `axes` describe the full grid and the axes the field varies along.
/// The result has sup norm approximately `amplitude`.
pub fn random_smooth_field<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    dims: &[usize],
    axes: &[usize],
    kmax: i64,
    amplitude: T,
    kind: AlgebraKind,
) -> Vec<Mat2<T>> {
    let total: usize = dims.iter().product();
    let mut modes: Vec<(Vec<i64>, Mat2<T>, Mat2<T>)> = Vec::new();
    let mut ks = vec![vec![]];
    for _ in axes {
        let mut next = vec![];
        for k in &ks {
            for v in -kmax..=kmax {
                let mut kk: Vec<i64> = k.clone();
                kk.push(v);
                next.push(kk);
            }
        }
        ks = next;
    }
    for k in ks {
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        let draw = |rng: &mut R| match kind {
            AlgebraKind::Su2 => random_su2::<T, R>(rng),
            AlgebraKind::Sl2 => random_sl2::<T, R>(rng),
            AlgebraKind::Diagonal => Mat2::i_sigma3(uniform(rng, -1.0, 1.0)),
        };
        let c = draw(rng);
        let s = draw(rng);
        modes.push((k, c, s));
    }
    let weight = T::one() / T::from(modes.len().max(1)).unwrap().sqrt();
    // per-axis tables of exp(2πi k x / n); a mode's phase factor is their product
    let tables: Vec<Vec<Vec<Complex<T>>>> = axes
        .iter()
        .map(|&ax| {
            (-kmax..=kmax)
                .map(|k| {
                    (0..dims[ax])
                        .map(|x| {
                            let th = T::TAU() * T::from(k * x as i64).unwrap() / T::from(dims[ax]).unwrap();
                            Complex::new(th.cos(), th.sin())
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut out = vec![Mat2::zero(); total];
    let mut coords = vec![0usize; dims.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        for a in (0..dims.len()).rev() {
            coords[a] = rem % dims[a];
            rem /= dims[a];
        }
        let mut acc = Mat2::zero();
        for (k, c, s) in &modes {
            let mut z = Complex::new(T::one(), T::zero());
            for (j, &ax) in axes.iter().enumerate() {
                z = z * tables[j][(k[j] + kmax) as usize][coords[ax]];
            }
            acc += c.scale_re(z.re) + s.scale_re(z.im);
        }
        *o = acc.scale_re(weight);
    }
    let sup = out.iter().map(|m| m.norm()).fold(T::zero(), T::max);
    if sup > T::zero() {
        let f = amplitude / sup;
        for m in out.iter_mut() {
            *m = m.scale_re(f);
        }
    }
    out
}

/// Pointwise exponential of a field.
pub fn exp_field<T: Scalar>(field: &[Mat2<T>]) -> Vec<Mat2<T>> {
    field.iter().map(|m| m.exp()).collect()
}

/// Uniform real sample in `[lo, hi)`.
pub fn uniform_in<T: Scalar, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> T {
    uniform(rng, lo, hi)
}
