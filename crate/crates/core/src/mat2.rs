//! Complex 2×2 matrices: the values of u(2)/sl(2,C) fields and of gauge transformations.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::scalar::{lit, Scalar};

pub type C<T> = Complex<T>;

/// Row-major complex 2×2 matrix `[[e0, e1], [e2, e3]]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat2<T> {
    pub e: [Complex<T>; 4],
}

impl<T: Scalar> Mat2<T> {
    #[inline]
    pub fn new(a: C<T>, b: C<T>, c: C<T>, d: C<T>) -> Self {
        Self { e: [a, b, c, d] }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(C::<T>::zero(), C::<T>::zero(), C::<T>::zero(), C::<T>::zero())
    }

    #[inline]
    pub fn identity() -> Self {
        Self::new(C::<T>::one(), C::<T>::zero(), C::<T>::zero(), C::<T>::one())
    }

    #[inline]
    pub fn diag(a: C<T>, d: C<T>) -> Self {
        Self::new(a, C::<T>::zero(), C::<T>::zero(), d)
    }

    #[inline]
    pub fn scalar(z: C<T>) -> Self {
        Self::diag(z, z)
    }

    /// `i·c·I`, the trace (iR) part of u(2) with real coefficient `c`.
    #[inline]
    pub fn i_identity(c: T) -> Self {
        Self::scalar(C::new(T::zero(), c))
    }

    /// `i σ3 · c`.
    #[inline]
    pub fn i_sigma3(c: T) -> Self {
        Self::diag(C::new(T::zero(), c), C::new(T::zero(), -c))
    }

    /// Anti-hermitian `i (c0 I + c·σ)`.
    pub fn from_u2(c0: T, c: [T; 3]) -> Self {
        let i = C::new(T::zero(), T::one());
        let s1 = Self::new(C::<T>::zero(), C::<T>::one(), C::<T>::one(), C::<T>::zero());
        let s2 = Self::new(C::<T>::zero(), -i, i, C::<T>::zero());
        let s3 = Self::diag(C::<T>::one(), -C::<T>::one());
        (Self::identity().scale_re(c0) + s1.scale_re(c[0]) + s2.scale_re(c[1]) + s3.scale_re(c[2]))
            .scale(i)
    }

    /// Coefficients `(c0, c)` of an anti-hermitian matrix in the basis `i I, i σ_k`.
    pub fn u2_coeffs(&self) -> (T, [T; 3]) {
        let h = lit::<T>(0.5);
        let [a, b, c, d] = self.e;
        // X = i(c0 + c3, c1 - i c2; c1 + i c2, c0 - c3)
        let c0 = (a.im + d.im) * h;
        let c3 = (a.im - d.im) * h;
        let c1 = (b.im + c.im) * h;
        let c2 = (b.re - c.re) * h;
        (c0, [c1, c2, c3])
    }

    #[inline]
    pub fn a(&self) -> C<T> {
        self.e[0]
    }
    #[inline]
    pub fn b(&self) -> C<T> {
        self.e[1]
    }
    #[inline]
    pub fn c(&self) -> C<T> {
        self.e[2]
    }
    #[inline]
    pub fn d(&self) -> C<T> {
        self.e[3]
    }

    #[inline]
    pub fn dagger(&self) -> Self {
        let [a, b, c, d] = self.e;
        Self::new(a.conj(), c.conj(), b.conj(), d.conj())
    }

    #[inline]
    pub fn conj(&self) -> Self {
        let [a, b, c, d] = self.e;
        Self::new(a.conj(), b.conj(), c.conj(), d.conj())
    }

    #[inline]
    pub fn trace(&self) -> C<T> {
        self.e[0] + self.e[3]
    }

    #[inline]
    pub fn det(&self) -> C<T> {
        self.e[0] * self.e[3] - self.e[1] * self.e[2]
    }

    #[inline]
    pub fn scale(&self, z: C<T>) -> Self {
        let [a, b, c, d] = self.e;
        Self::new(a * z, b * z, c * z, d * z)
    }

    #[inline]
    pub fn scale_re(&self, x: T) -> Self {
        let [a, b, c, d] = self.e;
        Self::new(a * x, b * x, c * x, d * x)
    }

    /// Inverse; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.norm() == T::zero() || !det.re.is_finite() || !det.im.is_finite() {
            return None;
        }
        let [a, b, c, d] = self.e;
        let inv = C::<T>::one() / det;
        Some(Self::new(d * inv, -b * inv, -c * inv, a * inv))
    }

    /// Inverse of a matrix known to have determinant one.
    #[inline]
    pub fn inverse_unimodular(&self) -> Self {
        let [a, b, c, d] = self.e;
        Self::new(d, -b, -c, a)
    }

    #[inline]
    pub fn commutator(&self, other: &Self) -> Self {
        *self * *other - *other * *self
    }

    /// Squared Frobenius norm.
    #[inline]
    pub fn norm_sqr(&self) -> T {
        self.e.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b)
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    /// Real inner product `Re tr(X† Y)`.
    #[inline]
    pub fn inner(&self, other: &Self) -> T {
        let mut acc = T::zero();
        for k in 0..4 {
            acc = acc + (self.e[k].conj() * other.e[k]).re;
        }
        acc
    }

    #[inline]
    pub fn anti_hermitian_part(&self) -> Self {
        (*self - self.dagger()).scale_re(lit(0.5))
    }

    #[inline]
    pub fn hermitian_part(&self) -> Self {
        (*self + self.dagger()).scale_re(lit(0.5))
    }

    #[inline]
    pub fn traceless_part(&self) -> Self {
        let t = self.trace() * lit::<T>(0.5);
        *self - Self::scalar(t)
    }

    /// Real coefficient `c` of the trace part `i c I` of an anti-hermitian matrix.
    #[inline]
    pub fn trace_coeff(&self) -> T {
        self.trace().im * lit::<T>(0.5)
    }

    /// Distance from anti-hermiticity, `‖X + X†‖`.
    #[inline]
    pub fn anti_hermitian_defect(&self) -> T {
        (*self + self.dagger()).norm()
    }

    /// `‖X†X − I‖`.
    #[inline]
    pub fn unitarity_defect(&self) -> T {
        (self.dagger() * *self - Self::identity()).norm()
    }

    /// Matrix exponential by the closed form for 2×2 matrices.
    pub fn exp(&self) -> Self {
        let half_tr = self.trace() * lit::<T>(0.5);
        let y = *self - Self::scalar(half_tr);
        // y² = μ² I with μ² = −det y
        let mu2 = -y.det();
        let mu = mu2.sqrt();
        let (ch, sh_over) = if mu.norm() < lit(1e-4) {
            // series: cosh μ = 1 + μ²/2 + μ⁴/24, sinh μ/μ = 1 + μ²/6 + μ⁴/120
            let m4 = mu2 * mu2;
            (
                C::<T>::one() + mu2 * lit::<T>(0.5) + m4 * lit::<T>(1.0 / 24.0),
                C::<T>::one() + mu2 * lit::<T>(1.0 / 6.0) + m4 * lit::<T>(1.0 / 120.0),
            )
        } else {
            (mu.cosh(), mu.sinh() / mu)
        };
        (Self::scalar(ch) + y.scale(sh_over)).scale(half_tr.exp())
    }

    /// Eigenvalues `(t/2 + λ, t/2 − λ)` with `λ` the principal root of `(t/2)² − det`.
    pub fn eigenvalues(&self) -> (C<T>, C<T>) {
        let half = self.trace() * lit::<T>(0.5);
        let disc = (half * half - self.det()).sqrt();
        (half + disc, half - disc)
    }

    /// Polar decomposition `g = U H` for `det g = 1`: `U` unitary, `H` positive hermitian.
    pub fn polar_unimodular(&self) -> (Self, Self) {
        let gg = self.dagger() * *self;
        // sqrt of a positive hermitian det-one 2×2 matrix M is (M + I)/sqrt(tr M + 2)
        let denom = (gg.trace().re + lit(2.0)).sqrt();
        let h = (gg + Self::identity()).scale_re(T::one() / denom);
        let u = *self * h.inverse_unimodular_hermitian();
        (u, h)
    }

    /// Inverse of a det-one matrix, written for hermitian arguments.
    #[inline]
    fn inverse_unimodular_hermitian(&self) -> Self {
        let det = self.det();
        self.inverse_unimodular().scale(C::<T>::one() / det)
    }

    /// Unitary Schur frame: a det-one unitary `U` with first column a unit eigenvector for `λ`,
    /// so that `U† M U` is upper triangular with diagonal `(λ, tr M − λ)`.
    pub fn schur_frame(&self, lambda: C<T>) -> Self {
        let [a, b, c, d] = self.e;
        // (M − λ) v = 0: rows (a − λ, b), (c, d − λ)
        let r1 = (b, lambda - a);
        let r2 = (lambda - d, c);
        let n1 = r1.0.norm_sqr() + r1.1.norm_sqr();
        let n2 = r2.0.norm_sqr() + r2.1.norm_sqr();
        let (v0, v1) = if n1 >= n2 && n1 > T::zero() {
            r1
        } else if n2 > T::zero() {
            r2
        } else {
            (C::<T>::one(), C::<T>::zero())
        };
        let n = (v0.norm_sqr() + v1.norm_sqr()).sqrt();
        // fix the phase so that the dominant component is real and positive
        let dom = if v0.norm() >= v1.norm() { v0 } else { v1 };
        let phase = dom.conj() / dom.norm();
        let (v0, v1) = (v0 * phase / n, v1 * phase / n);
        Self::new(v0, -v1.conj(), v1, v0.conj())
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Lossy conversion between scalar types.
    pub fn cast<U: Scalar>(&self) -> Mat2<U> {
        let f = |z: C<T>| C::new(U::from(z.re).unwrap(), U::from(z.im).unwrap());
        Mat2 { e: [f(self.e[0]), f(self.e[1]), f(self.e[2]), f(self.e[3])] }
    }
}

impl<T: Scalar> Add for Mat2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.e[0] + o.e[0], self.e[1] + o.e[1], self.e[2] + o.e[2], self.e[3] + o.e[3])
    }
}

impl<T: Scalar> AddAssign for Mat2<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> Sub for Mat2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.e[0] - o.e[0], self.e[1] - o.e[1], self.e[2] - o.e[2], self.e[3] - o.e[3])
    }
}

impl<T: Scalar> SubAssign for Mat2<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Scalar> Neg for Mat2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.e[0], -self.e[1], -self.e[2], -self.e[3])
    }
}

impl<T: Scalar> Mul for Mat2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let [a, b, c, d] = self.e;
        let [p, q, r, s] = o.e;
        Self::new(a * p + b * r, a * q + b * s, c * p + d * r, c * q + d * s)
    }
}

/// Sup over a field of the Frobenius norm.
pub fn sup_norm<T: Scalar>(field: &[Mat2<T>]) -> T {
    field.iter().map(|m| m.norm()).fold(T::zero(), T::max)
}

/// Root mean square of the Frobenius norm over a field.
pub fn rms_norm<T: Scalar>(field: &[Mat2<T>]) -> T {
    if field.is_empty() {
        return T::zero();
    }
    let s: T = field.iter().map(|m| m.norm_sqr()).sum();
    (s / T::from(field.len()).unwrap()).sqrt()
}
