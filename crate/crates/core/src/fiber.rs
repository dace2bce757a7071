//! Connections on the trivial rank-2 bundle over one fiber torus: curvature, gauge actions,
//! flat moduli, holonomy, complex-gauge flattening and unitary normalization.
//!
//! Conventions: fiber coordinates `(x, y)` with period `period`, `z = x + iy`. A connection is
//! written `A = B dz̄ − B† dz` with `B = ½(A_x + i A_y)`. The diagonal class `B = diag(β, −β)`
//! has `A_x = diag(2i Im β, −2i Im β)`, `A_y = diag(−2i Re β, 2i Re β)`.

use num_complex::Complex;
use num_traits::Zero;
use thiserror::Error;

use crate::mat2::{sup_norm, Mat2};
use crate::scalar::{lit, rem_euclid, to_f64, Scalar};
use crate::spectral::{merge_channels, split_channels, Lattice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiberError {
    #[error("gauge determinant drifted by {0:e}")]
    DeterminantDrift(f64),
    #[error("grids differ: connection {0}, gauge {1}")]
    GridMismatch(usize, usize),
    #[error("Newton iteration diverged (residual {residual:e} after {iterations} iterations)")]
    NewtonDiverged { residual: f64, iterations: usize },
    #[error("constant part is nilpotent within eig_tol (nilpotent part {0:e})")]
    NearNilpotent(f64),
    #[error("curvature L2 norm {0:e} above the flattening threshold")]
    AboveBasin(f64),
    #[error("curvature sup norm {0:e} not below delta0")]
    PreconditionCurvature(f64),
}

/// Thresholds used across the fiber operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberOptions<T> {
    pub flatten_energy_max: T,
    pub newton_tol: T,
    pub newton_max_iters: usize,
    /// A Newton run that stops improving is still accepted below this residual.
    pub newton_stall_tol: T,
    pub eig_tol: T,
    pub moduli_tol: T,
    pub delta0: T,
    pub hol_warn_tol: T,
    pub det_tol: T,
    pub holonomy_substeps: usize,
}

impl<T: Scalar> Default for FiberOptions<T> {
    fn default() -> Self {
        Self {
            flatten_energy_max: lit(0.05),
            newton_tol: lit(1e-12),
            newton_max_iters: 50,
            newton_stall_tol: lit(1e-8),
            eig_tol: lit(1e-9),
            moduli_tol: lit(1e-6),
            delta0: lit(0.1),
            hol_warn_tol: lit(1e-6),
            det_tol: lit(1e-9),
            holonomy_substeps: 16,
        }
    }
}

/// Connection on the trivial rank-2 bundle over `T²_F`. The su(2) and trace (`i c I`) parts of
/// each component are stored separately.
#[derive(Clone, Debug)]
pub struct FiberConnection<T: Scalar> {
    lattice: Lattice<T>,
    pub su_x: Vec<Mat2<T>>,
    pub su_y: Vec<Mat2<T>>,
    pub tr_x: Vec<T>,
    pub tr_y: Vec<T>,
}

/// Builds the square fiber lattice of a given resolution and period.
pub fn fiber_lattice<T: Scalar>(n: usize, period: T) -> Lattice<T> {
    Lattice::new(&[n, n], &[period, period])
}

/// `(A_x, A_y)` of the constant diagonal class with parameter `β`.
pub fn diagonal_components<T: Scalar>(beta: Complex<T>) -> (Mat2<T>, Mat2<T>) {
    let two = lit::<T>(2.0);
    (Mat2::i_sigma3(two * beta.im), Mat2::i_sigma3(-two * beta.re))
}

/// Splits `B = ½(A_x + i A_y)` back into anti-hermitian components.
pub fn components_from_b<T: Scalar>(b: &Mat2<T>) -> (Mat2<T>, Mat2<T>) {
    let i = Complex::new(T::zero(), T::one());
    let bd = b.dagger();
    (*b - bd, (*b + bd).scale(-i))
}

#[inline]
fn b_from_components<T: Scalar>(ax: &Mat2<T>, ay: &Mat2<T>) -> Mat2<T> {
    let i = Complex::new(T::zero(), T::one());
    (*ax + ay.scale(i)).scale_re(lit(0.5))
}

impl<T: Scalar> FiberConnection<T> {
    pub fn zero(lattice: Lattice<T>) -> Self {
        let len = lattice.len();
        Self { lattice, su_x: vec![Mat2::zero(); len], su_y: vec![Mat2::zero(); len], tr_x: vec![T::zero(); len], tr_y: vec![T::zero(); len] }
    }

    /// Splits full u(2) component fields into trace and su(2) parts.
    pub fn from_full(lattice: Lattice<T>, ax: &[Mat2<T>], ay: &[Mat2<T>]) -> Self {
        let split = |f: &[Mat2<T>]| -> (Vec<Mat2<T>>, Vec<T>) {
            f.iter().map(|m| {
                let m = m.anti_hermitian_part();
                (m.traceless_part(), m.trace_coeff())
            }).unzip()
        };
        let (su_x, tr_x) = split(ax);
        let (su_y, tr_y) = split(ay);
        Self { lattice, su_x, su_y, tr_x, tr_y }
    }

    /// Connection with su(2) part `B dz̄ − B† dz` for a traceless `B` field and zero trace part.
    pub fn from_b_field(lattice: Lattice<T>, b: &[Mat2<T>]) -> Self {
        let (su_x, su_y): (Vec<_>, Vec<_>) = b.iter().map(components_from_b).unzip();
        let len = lattice.len();
        Self { lattice, su_x, su_y, tr_x: vec![T::zero(); len], tr_y: vec![T::zero(); len] }
    }

    /// Constant diagonal connection in the class with parameter `β`.
    pub fn diagonal(lattice: Lattice<T>, beta: Complex<T>) -> Self {
        let len = lattice.len();
        let b = Mat2::diag(beta, -beta);
        Self::from_b_field(lattice, &vec![b; len])
    }

    pub fn lattice(&self) -> &Lattice<T> {
        &self.lattice
    }

    pub fn n(&self) -> usize {
        self.lattice.dims()[0]
    }

    pub fn period(&self) -> T {
        self.lattice.periods()[0]
    }

    pub fn len(&self) -> usize {
        self.su_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.su_x.is_empty()
    }

    pub fn full_x(&self) -> Vec<Mat2<T>> {
        self.su_x.iter().zip(&self.tr_x).map(|(m, &c)| *m + Mat2::i_identity(c)).collect()
    }

    pub fn full_y(&self) -> Vec<Mat2<T>> {
        self.su_y.iter().zip(&self.tr_y).map(|(m, &c)| *m + Mat2::i_identity(c)).collect()
    }

    /// `B = ½(A_x + i A_y)` of the su(2) part.
    pub fn b_field(&self) -> Vec<Mat2<T>> {
        self.su_x.iter().zip(&self.su_y).map(|(x, y)| b_from_components(x, y)).collect()
    }

    /// Largest `‖A + A†‖` over both components.
    pub fn anti_hermitian_defect(&self) -> T {
        self.full_x().iter().chain(self.full_y().iter()).map(|m| m.anti_hermitian_defect()).fold(T::zero(), T::max)
    }

    fn with_su(&self, su_x: Vec<Mat2<T>>, su_y: Vec<Mat2<T>>) -> Self {
        Self { lattice: self.lattice.clone(), su_x, su_y, tr_x: self.tr_x.clone(), tr_y: self.tr_y.clone() }
    }
}

/// `F = ∂_x A_y − ∂_y A_x + [A_x, A_y]`, the `dx∧dy` coefficient, spectrally.
pub fn fiber_curvature<T: Scalar>(a: &FiberConnection<T>) -> Vec<Mat2<T>> {
    let ax = a.full_x();
    let ay = a.full_y();
    let lat = a.lattice();
    let dxay = lat.deriv_mat(&ay, 0);
    let dyax = lat.deriv_mat(&ax, 1);
    (0..ax.len()).map(|i| dxay[i] - dyax[i] + ax[i].commutator(&ay[i])).collect()
}

/// Same as [`fiber_curvature`] with fourth-order central differences.
pub fn fiber_curvature_fd4<T: Scalar>(a: &FiberConnection<T>) -> Vec<Mat2<T>> {
    let ax = a.full_x();
    let ay = a.full_y();
    let lat = a.lattice();
    let dxay = lat.deriv_fd4_mat(&ay, 0);
    let dyax = lat.deriv_fd4_mat(&ax, 1);
    (0..ax.len()).map(|i| dxay[i] - dyax[i] + ax[i].commutator(&ay[i])).collect()
}

/// `L²` norm of the curvature over the fiber.
pub fn curvature_l2<T: Scalar>(a: &FiberConnection<T>) -> T {
    let f = fiber_curvature(a);
    let cell = a.lattice().cell_volume();
    (f.iter().map(|m| m.norm_sqr()).sum::<T>() * cell).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaugeKind {
    Unitary,
    Complex,
}

/// Field of `SU(2)` or `SL(2, C)` matrices on the fiber grid.
#[derive(Clone, Debug)]
pub struct GaugeTransform<T: Scalar> {
    pub kind: GaugeKind,
    pub g: Vec<Mat2<T>>,
}

impl<T: Scalar> GaugeTransform<T> {
    pub fn identity(kind: GaugeKind, len: usize) -> Self {
        Self { kind, g: vec![Mat2::identity(); len] }
    }

    pub fn max_det_drift(&self) -> T {
        self.g.iter().map(|m| (m.det() - Complex::new(T::one(), T::zero())).norm()).fold(T::zero(), T::max)
    }

    pub fn max_unitarity_defect(&self) -> T {
        self.g.iter().map(|m| m.unitarity_defect()).fold(T::zero(), T::max)
    }

    /// Pointwise product `self · other` (apply `self` first, then `other`).
    pub fn compose(&self, other: &Self) -> Self {
        let kind = if self.kind == GaugeKind::Unitary && other.kind == GaugeKind::Unitary { GaugeKind::Unitary } else { GaugeKind::Complex };
        Self { kind, g: self.g.iter().zip(&other.g).map(|(a, b)| *a * *b).collect() }
    }

    /// Unitary and hermitian polar factors `g = g₁ g₂` pointwise.
    pub fn polar(&self) -> (Self, Vec<Mat2<T>>) {
        let (u, h): (Vec<_>, Vec<_>) = self.g.iter().map(|m| m.polar_unimodular()).unzip();
        (Self { kind: GaugeKind::Unitary, g: u }, h)
    }
}

fn check_gauge<T: Scalar>(g: &GaugeTransform<T>, a: &FiberConnection<T>, det_tol: T) -> Result<(), FiberError> {
    if g.g.len() != a.len() {
        return Err(FiberError::GridMismatch(a.len(), g.g.len()));
    }
    let drift = g.max_det_drift();
    if !(drift <= det_tol) {
        return Err(FiberError::DeterminantDrift(to_f64(drift)));
    }
    Ok(())
}

/// `g*A` for a complex gauge: `B' = g⁻¹∂̄g + g⁻¹Bg` on the su(2) part; the trace part is
/// unchanged since `det g = 1`. For unitary `g` this equals `g⁻¹dg + g⁻¹Ag`.
pub fn complex_gauge_apply<T: Scalar>(g: &GaugeTransform<T>, a: &FiberConnection<T>, det_tol: T) -> Result<FiberConnection<T>, FiberError> {
    check_gauge(g, a, det_tol)?;
    if g.kind == GaugeKind::Unitary {
        return Ok(unitary_apply_unchecked(&g.g, a));
    }
    let dbar = a.lattice().dbar_mat(&g.g);
    let b = a.b_field();
    let (su_x, su_y): (Vec<_>, Vec<_>) = (0..a.len())
        .map(|i| {
            let gi = g.g[i].inverse_unimodular();
            let bp = (gi * dbar[i] + gi * b[i] * g.g[i]).traceless_part();
            components_from_b(&bp)
        })
        .unzip();
    Ok(a.with_su(su_x, su_y))
}

fn unitary_apply_unchecked<T: Scalar>(g: &[Mat2<T>], a: &FiberConnection<T>) -> FiberConnection<T> {
    let lat = a.lattice();
    let dx = lat.deriv_mat(g, 0);
    let dy = lat.deriv_mat(g, 1);
    let ax = a.full_x();
    let ay = a.full_y();
    let mut nx = Vec::with_capacity(a.len());
    let mut ny = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let gi = g[i].dagger();
        nx.push((gi * dx[i] + gi * ax[i] * g[i]).anti_hermitian_part());
        ny.push((gi * dy[i] + gi * ay[i] * g[i]).anti_hermitian_part());
    }
    FiberConnection::from_full(lat.clone(), &nx, &ny)
}

/// Unitary gauge action `g⁻¹dg + g⁻¹Ag`.
pub fn unitary_gauge_apply<T: Scalar>(g: &GaugeTransform<T>, a: &FiberConnection<T>, det_tol: T) -> Result<FiberConnection<T>, FiberError> {
    check_gauge(g, a, det_tol)?;
    Ok(unitary_apply_unchecked(&g.g, a))
}

/// Lattice gauge `diag(e^{2πi(nx − my)}, e^{−2πi(nx − my)})`.
pub fn lattice_gauge<T: Scalar>(lattice: &Lattice<T>, n: i64, m: i64) -> GaugeTransform<T> {
    let nf = lattice.dims()[0];
    let tau = T::TAU();
    let g = (0..lattice.len())
        .map(|i| {
            let x = T::from(i / nf).unwrap() / T::from(nf).unwrap();
            let y = T::from(i % nf).unwrap() / T::from(nf).unwrap();
            let ph = tau * (T::from(n).unwrap() * x - T::from(m).unwrap() * y);
            let z = Complex::new(ph.cos(), ph.sin());
            Mat2::diag(z, z.conj())
        })
        .collect();
    GaugeTransform { kind: GaugeKind::Unitary, g }
}

/// Applies the lattice gauge with integers `(n, m)`; the class parameter shifts by `π(m + in)`.
pub fn lattice_gauge_shift<T: Scalar>(a: &FiberConnection<T>, n: i64, m: i64) -> FiberConnection<T> {
    if n == 0 && m == 0 {
        return a.clone();
    }
    let g = lattice_gauge(a.lattice(), n, m);
    unitary_apply_unchecked(&g.g, a)
}

/// Point of the flat SU(2) moduli: the class of `β` modulo `πZ + iπZ` and `β ~ −β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModuliPoint<T> {
    /// Canonical representative: `Re ∈ [0, π/2]`, `Im ∈ [0, π)`, and `Im ≤ π/2` when `Re` is
    /// `0` or `π/2`.
    pub a: Complex<T>,
    /// Whether canonicalization used the Weyl reflection `β ↦ −β`.
    pub weyl_flipped: bool,
    /// Within `moduli_tol` of one of the four fixed points of the reflection.
    pub singular: bool,
}

#[inline]
fn wrap_pi<T: Scalar>(x: T) -> T {
    let pi = T::PI();
    let r = rem_euclid(x, pi);
    // roundoff below π is snapped to 0 so that the canonical representative is stable
    if r >= pi - pi * T::epsilon() * lit(64.0) || r < T::zero() {
        T::zero()
    } else {
        r
    }
}

#[inline]
fn neg_mod_pi<T: Scalar>(x: T) -> T {
    wrap_pi(T::PI() - x)
}

/// Distance from `x` to the nearest point of `πZ`.
#[inline]
fn dist_to_lattice_1d<T: Scalar>(x: T) -> T {
    let r = wrap_pi(x);
    r.min(T::PI() - r)
}

impl<T: Scalar> ModuliPoint<T> {
    /// Reduces any `β` to the canonical representative.
    pub fn reduce(beta: Complex<T>, moduli_tol: T) -> Self {
        let half = T::FRAC_PI_2();
        let mut re = wrap_pi(beta.re);
        let mut im = wrap_pi(beta.im);
        // roundoff-level offsets from the reflection lines count as on them
        let snap = T::epsilon() * lit(1e4);
        if re < snap {
            re = T::zero();
        } else if (re - half).abs() < snap {
            re = half;
        }
        let mut flipped = false;
        if re > half || ((re == T::zero() || re == half) && im > half) {
            re = neg_mod_pi(re);
            im = neg_mod_pi(im);
            flipped = true;
        }
        let a = Complex::new(re, im);
        let singular = Self::distance_to_singular(a) <= moduli_tol;
        Self { a, weyl_flipped: flipped, singular }
    }

    /// Torus distance to the fixed points `{0, π/2, iπ/2, (1+i)π/2}`.
    pub fn distance_to_singular(beta: Complex<T>) -> T {
        let half = T::FRAC_PI_2();
        let d = |x: T| {
            // distance to (π/2)Z
            let r = rem_euclid(x, half);
            r.min(half - r)
        };
        let (dr, di) = (d(beta.re), d(beta.im));
        (dr * dr + di * di).sqrt()
    }

    /// Torus distance between the classes of two parameters, minimizing over `±`.
    pub fn class_distance(a: Complex<T>, b: Complex<T>) -> T {
        let d = |u: Complex<T>| {
            let (x, y) = (dist_to_lattice_1d(u.re), dist_to_lattice_1d(u.im));
            (x * x + y * y).sqrt()
        };
        d(a - b).min(d(a + b))
    }

    /// The same class in the SO(3) normalization.
    pub fn so3_view(&self) -> Complex<T> {
        self.a * lit::<T>(0.5)
    }
}

/// Path-ordered holonomies around the two fiber cycles through the origin.
#[derive(Clone, Copy, Debug)]
pub struct Holonomy<T> {
    pub hx: Mat2<T>,
    pub hy: Mat2<T>,
    /// Set when the curvature exceeds `hol_warn_tol`, making the result base-point dependent.
    pub curvature_warning: bool,
}

/// Trigonometric upsampling of a periodic line of matrices by an integer factor.
fn upsample_line<T: Scalar>(line: &[Mat2<T>], factor: usize) -> Vec<Mat2<T>> {
    let n = line.len();
    let m = n * factor;
    let one = T::one();
    let src = Lattice::new(&[n], &[one]);
    let dst = Lattice::new(&[m], &[one]);
    let mut out = Vec::with_capacity(4);
    for mut ch in split_channels(line) {
        src.fft_forward(&mut ch);
        let mut big = vec![Complex::<T>::zero(); m];
        for j in 0..n {
            let f = Lattice::<T>::frequency(n, j);
            if n % 2 == 0 && j == n / 2 {
                // split Nyquist symmetrically
                let half = ch[j] * lit::<T>(0.5);
                big[n / 2] = big[n / 2] + half;
                big[m - n / 2] = big[m - n / 2] + half;
                continue;
            }
            big[f.rem_euclid(m as i64) as usize] = ch[j];
        }
        let scale = T::from(factor).unwrap();
        for v in big.iter_mut() {
            *v = *v * scale;
        }
        dst.fft_inverse(&mut big);
        out.push(big);
    }
    merge_channels(&out)
}

/// Solves `dU/ds = −A(s) U` around one cycle by RK4 on the upsampled line.
fn path_ordered<T: Scalar>(line: &[Mat2<T>], period: T, substeps: usize) -> Mat2<T> {
    let n = line.len();
    let fine = upsample_line(line, 2 * substeps);
    let steps = n * substeps;
    let h = period / T::from(steps).unwrap();
    let half = lit::<T>(0.5);
    let sixth = T::one() / lit::<T>(6.0);
    let mut u = Mat2::identity();
    for k in 0..steps {
        let a0 = fine[2 * k];
        let am = fine[2 * k + 1];
        let a1 = fine[(2 * k + 2) % fine.len()];
        let k1 = -(a0 * u);
        let k2 = -(am * (u + k1.scale_re(half * h)));
        let k3 = -(am * (u + k2.scale_re(half * h)));
        let k4 = -(a1 * (u + k3.scale_re(h)));
        u += (k1 + k2.scale_re(lit(2.0)) + k3.scale_re(lit(2.0)) + k4).scale_re(h * sixth);
    }
    u
}

pub fn holonomy_extract<T: Scalar>(a: &FiberConnection<T>, opts: &FiberOptions<T>) -> Holonomy<T> {
    let n = a.n();
    let ax = a.full_x();
    let ay = a.full_y();
    let line_x: Vec<Mat2<T>> = (0..n).map(|i| ax[i * n]).collect();
    let line_y: Vec<Mat2<T>> = (0..n).map(|j| ay[j]).collect();
    let curvature = sup_norm(&fiber_curvature(a));
    Holonomy {
        hx: path_ordered(&line_x, a.period(), opts.holonomy_substeps),
        hy: path_ordered(&line_y, a.period(), opts.holonomy_substeps),
        curvature_warning: curvature > opts.hol_warn_tol,
    }
}

/// Eigenphases of a unitary 2×2 matrix, sorted ascending.
pub fn eigenphases<T: Scalar>(u: &Mat2<T>) -> [T; 2] {
    let (l0, l1) = u.eigenvalues();
    let mut p = [l0.arg(), l1.arg()];
    if p[0] > p[1] {
        p.swap(0, 1);
    }
    p
}

/// Result of the complex-gauge flattening.
#[derive(Clone, Debug)]
pub struct Flattening<T: Scalar> {
    pub point: ModuliPoint<T>,
    /// Eigenvalue `λ` of the constant matrix, with the sign choice applied (not reduced).
    pub lambda: Complex<T>,
    /// Composed complex gauge with `g*A = diag(λ, −λ) dz̄ − (·)† dz` on the su(2) part.
    pub gauge: GaugeTransform<T>,
    /// Constant sl(2, C) matrix reached by the Newton stage.
    pub constant_b: Mat2<T>,
    /// Sup norm of the non-constant part left after the Newton stage.
    pub residual: T,
    pub iterations: usize,
    /// Class distance from the seed, when one is supplied.
    pub seed_distance: Option<T>,
}

/// Coordinates `(x00, x01, x10)` of a traceless matrix.
#[inline]
fn sl2_coords<T: Scalar>(m: &Mat2<T>) -> [Complex<T>; 3] {
    [m.e[0], m.e[1], m.e[2]]
}

/// Solves `M v = r` for a 3×3 complex system with partial pivoting; directions with a pivot
/// below `sing` are left at zero.
fn solve3<T: Scalar>(mut m: [[Complex<T>; 3]; 3], mut r: [Complex<T>; 3], sing: T) -> [Complex<T>; 3] {
    let mut perm = [0usize, 1, 2];
    let mut dead = [false; 3];
    for col in 0..3 {
        let mut best = col;
        for row in col + 1..3 {
            if m[row][col].norm() > m[best][col].norm() {
                best = row;
            }
        }
        m.swap(col, best);
        r.swap(col, best);
        perm.swap(col, best);
        let p = m[col][col];
        if p.norm() <= sing {
            dead[col] = true;
            continue;
        }
        for row in col + 1..3 {
            let f = m[row][col] / p;
            for k in col..3 {
                let v = m[col][k];
                m[row][k] = m[row][k] - f * v;
            }
            let v = r[col];
            r[row] = r[row] - f * v;
        }
    }
    let mut x = [Complex::<T>::zero(); 3];
    for col in (0..3).rev() {
        if dead[col] {
            continue;
        }
        let mut acc = r[col];
        for k in col + 1..3 {
            acc = acc - m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    x
}

/// One Newton-type step: the zero-mean traceless `v` with `∂̄v + [B̄, v] = −(B − B̄)` mode by mode.
fn newton_update<T: Scalar>(lattice: &Lattice<T>, b: &[Mat2<T>], bbar: &Mat2<T>) -> Vec<Mat2<T>> {
    let n = lattice.dims()[0];
    let mut ch = split_channels(b);
    for c in ch.iter_mut() {
        lattice.fft_forward(c);
    }
    // ad_B̄ in the (x00, x01, x10) basis
    let basis = [
        Mat2::diag(Complex::new(T::one(), T::zero()), Complex::new(-T::one(), T::zero())),
        Mat2::new(Complex::zero(), Complex::new(T::one(), T::zero()), Complex::zero(), Complex::zero()),
        Mat2::new(Complex::zero(), Complex::zero(), Complex::new(T::one(), T::zero()), Complex::zero()),
    ];
    let mut ad = [[Complex::<T>::zero(); 3]; 3];
    for (j, e) in basis.iter().enumerate() {
        let c = sl2_coords(&bbar.commutator(e));
        for i in 0..3 {
            ad[i][j] = c[i];
        }
    }
    let scale = T::one() + bbar.norm();
    let sing = lit::<T>(1e-10) * scale;
    let half = lit::<T>(0.5);
    let mut out: Vec<Vec<Complex<T>>> = vec![vec![Complex::zero(); n * n]; 4];
    for idx in 0..n * n {
        if idx == 0 {
            continue;
        }
        let (jx, jy) = (idx / n, idx % n);
        let nyq = |j: usize| n % 2 == 0 && j == n / 2;
        let kx = if nyq(jx) { T::zero() } else { lattice.wavenumber(0, jx) };
        let ky = if nyq(jy) { T::zero() } else { lattice.wavenumber(1, jy) };
        // ∂̄ e^{i(kx x + ky y)} = ½(i kx − ky) e^{…}
        let ck = Complex::new(-ky * half, kx * half);
        let mut m = ad;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = row[i] + ck;
        }
        let r = [-ch[0][idx], -ch[1][idx], -ch[2][idx]];
        let v = solve3(m, r, sing);
        out[0][idx] = v[0];
        out[1][idx] = v[1];
        out[2][idx] = v[2];
        out[3][idx] = -v[0];
    }
    for c in out.iter_mut() {
        lattice.fft_inverse(c);
    }
    let mut v = merge_channels(&out);
    for m in v.iter_mut() {
        *m = m.traceless_part();
    }
    v
}

fn nonconstant_sup<T: Scalar>(b: &[Mat2<T>], bbar: &Mat2<T>) -> T {
    b.iter().map(|m| (*m - *bbar).norm()).fold(T::zero(), T::max)
}

/// Newton stage alone: complex gauge making the su(2) part constant.
fn newton_flatten<T: Scalar>(a: &FiberConnection<T>, opts: &FiberOptions<T>) -> Result<(GaugeTransform<T>, FiberConnection<T>, Mat2<T>, T, usize), FiberError> {
    let lattice = a.lattice().clone();
    let mut g = GaugeTransform::identity(GaugeKind::Complex, a.len());
    let mut cur = a.clone();
    let mut b = cur.b_field();
    let mut bbar = lattice.mean_mat(&b);
    let mut res = nonconstant_sup(&b, &bbar);
    let initial = res;
    let mut best = res;
    let mut stalls = 0usize;
    for it in 0..=opts.newton_max_iters {
        let tol = opts.newton_tol * (T::one() + bbar.norm());
        if res <= tol {
            return Ok((g, cur, bbar, res, it));
        }
        if it == opts.newton_max_iters || !res.is_finite() || res > lit::<T>(1e3) * (T::one() + initial) {
            break;
        }
        let v = newton_update(&lattice, &b, &bbar);
        let step = GaugeTransform { kind: GaugeKind::Complex, g: v.iter().map(|m| m.exp()).collect() };
        cur = complex_gauge_apply(&step, &cur, lit(1e-6))?;
        g = g.compose(&step);
        b = cur.b_field();
        bbar = lattice.mean_mat(&b);
        res = nonconstant_sup(&b, &bbar);
        if res < best * lit(0.9) {
            best = res;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= 4 {
                // stagnation at the aliasing floor of the grid
                if best <= opts.newton_stall_tol * (T::one() + bbar.norm()) {
                    return Ok((g, cur, bbar, res, it + 1));
                }
                break;
            }
        }
    }
    Err(FiberError::NewtonDiverged { residual: to_f64(res), iterations: opts.newton_max_iters.min(50) })
}

/// Diagonalizes a constant traceless matrix: returns `(λ, D)` with `D⁻¹ B D = diag(λ, −λ)`,
/// `det D = 1`, `D = U R` with `U` a unitary Schur frame and `R` unipotent upper triangular.
fn diagonalize<T: Scalar>(bbar: &Mat2<T>, seed: Option<&ModuliPoint<T>>, opts: &FiberOptions<T>) -> Result<(Complex<T>, Mat2<T>), FiberError> {
    let lam2 = bbar.e[0] * bbar.e[0] + bbar.e[1] * bbar.e[2];
    let mut lam = lam2.sqrt();
    let prefer = match seed {
        Some(p) => p.a,
        None => bbar.e[0],
    };
    let pick_minus = match seed {
        Some(_) => dist_signed(-lam, prefer) < dist_signed(lam, prefer),
        None => (-lam - prefer).norm() < (lam - prefer).norm(),
    };
    if pick_minus {
        lam = -lam;
    }
    let u = bbar.schur_frame(lam);
    let tri = u.dagger() * *bbar * u;
    let t = tri.e[1];
    let scale = T::one() + bbar.norm_sqr();
    if lam2.norm() <= opts.eig_tol * scale {
        if t.norm() > opts.moduli_tol {
            return Err(FiberError::NearNilpotent(to_f64(t.norm())));
        }
        return Ok((lam, u));
    }
    let r = Mat2::new(Complex::new(T::one(), T::zero()), -t / (lam * lit::<T>(2.0)), Complex::zero(), Complex::new(T::one(), T::zero()));
    Ok((lam, u * r))
}

/// Torus distance between representatives without the `±` identification.
fn dist_signed<T: Scalar>(a: Complex<T>, b: Complex<T>) -> T {
    let d = a - b;
    let (x, y) = (dist_to_lattice_1d(d.re), dist_to_lattice_1d(d.im));
    (x * x + y * y).sqrt()
}

/// Complex-gauge flattening: Newton stage to a constant matrix, then diagonalization.
pub fn flatten_to_t<T: Scalar>(a: &FiberConnection<T>, seed: Option<&ModuliPoint<T>>, opts: &FiberOptions<T>) -> Result<Flattening<T>, FiberError> {
    let l2 = curvature_l2(a);
    if l2 > opts.flatten_energy_max {
        return Err(FiberError::AboveBasin(to_f64(l2)));
    }
    let (g, _cur, bbar, residual, iterations) = newton_flatten(a, opts)?;
    let (lambda, d) = diagonalize(&bbar, seed, opts)?;
    let gauge = GaugeTransform { kind: GaugeKind::Complex, g: g.g.iter().map(|m| *m * d).collect() };
    let point = ModuliPoint::reduce(lambda, opts.moduli_tol);
    let seed_distance = seed.map(|s| ModuliPoint::class_distance(point.a, s.a));
    Ok(Flattening { point, lambda, gauge, constant_b: bbar, residual, iterations, seed_distance })
}

/// Outcome of the unitary normalization.
#[derive(Clone, Debug)]
pub struct Normalization<T: Scalar> {
    pub h: GaugeTransform<T>,
    /// `‖h*A − A₀‖_sup` on the su(2) part.
    pub deviation: T,
    pub curvature_sup: T,
    /// `deviation / curvature_sup^{1/2}`.
    pub bound_ratio: T,
}

/// Unitary gauge bringing `A` close to its flat class: the unitary polar factor of the
/// flattening gauge.
pub fn unitary_normalize<T: Scalar>(a: &FiberConnection<T>, flat: &Flattening<T>, opts: &FiberOptions<T>) -> Result<Normalization<T>, FiberError> {
    let curvature_sup = sup_norm(&fiber_curvature(a));
    if !(curvature_sup < opts.delta0) {
        return Err(FiberError::PreconditionCurvature(to_f64(curvature_sup)));
    }
    let (h, _) = flat.gauge.polar();
    let ha = unitary_gauge_apply(&h, a, lit(1e-6))?;
    let (x0, y0) = diagonal_components(flat.lambda);
    let deviation = ha
        .su_x
        .iter()
        .zip(&ha.su_y)
        .map(|(x, y)| (*x - x0).norm().max((*y - y0).norm()))
        .fold(T::zero(), T::max);
    let bound_ratio = if curvature_sup > T::zero() {
        deviation / curvature_sup.sqrt()
    } else if deviation <= lit::<T>(1e-12) {
        T::zero()
    } else {
        T::infinity()
    };
    Ok(Normalization { h, deviation, curvature_sup, bound_ratio })
}

/// Classification of the holomorphic structure.
#[derive(Clone, Debug, PartialEq)]
pub enum SemistableKind<T> {
    /// Direct sum of line bundles: a flat class.
    Case1(ModuliPoint<T>),
    /// Non-split extension over a four-torsion point; S-equivalent to that flat class.
    Case2 { torsion: ModuliPoint<T> },
    Unstable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification<T> {
    pub kind: SemistableKind<T>,
    /// In `[0, 1]`: how far the deciding statistic sits from its threshold (log scale).
    pub confidence: T,
}

fn log_confidence<T: Scalar>(stat: T, threshold: T) -> T {
    if stat <= T::zero() || threshold <= T::zero() {
        return T::one();
    }
    ((stat / threshold).log10().abs() / lit(3.0)).min(T::one())
}

pub fn semistability_classify<T: Scalar>(a: &FiberConnection<T>, opts: &FiberOptions<T>) -> Classification<T> {
    let l2 = curvature_l2(a);
    if l2 > opts.flatten_energy_max {
        return Classification { kind: SemistableKind::Unstable, confidence: log_confidence(l2, opts.flatten_energy_max) };
    }
    match newton_flatten(a, opts) {
        Ok((_, _, bbar, _, _)) => match diagonalize(&bbar, None, opts) {
            Ok((lambda, _)) => {
                let point = ModuliPoint::reduce(lambda, opts.moduli_tol);
                let lam2 = (bbar.e[0] * bbar.e[0] + bbar.e[1] * bbar.e[2]).norm();
                Classification { kind: SemistableKind::Case1(point), confidence: log_confidence(lam2.max(opts.eig_tol * lit(1e3)), opts.eig_tol) }
            }
            Err(FiberError::NearNilpotent(nil)) => Classification {
                kind: SemistableKind::Case2 { torsion: ModuliPoint::reduce(Complex::zero(), opts.moduli_tol) },
                confidence: log_confidence(lit::<T>(nil), opts.moduli_tol),
            },
            Err(_) => Classification { kind: SemistableKind::Unstable, confidence: T::zero() },
        },
        Err(FiberError::NewtonDiverged { residual, .. }) => {
            // A stall with the constant part at a nonzero fixed point is a non-split extension
            // there: the obstruction sits in the modes resonant with 2λ.
            let b = a.b_field();
            let bbar = a.lattice().mean_mat(&b);
            let lam = (bbar.e[0] * bbar.e[0] + bbar.e[1] * bbar.e[2]).sqrt();
            let d = ModuliPoint::distance_to_singular(lam);
            if d <= lit(1e-3) {
                Classification { kind: SemistableKind::Case2 { torsion: ModuliPoint::reduce(lam, lit(1e-3)) }, confidence: log_confidence(lit::<T>(residual), opts.newton_tol) }
            } else {
                Classification { kind: SemistableKind::Unstable, confidence: log_confidence(lit::<T>(residual), opts.newton_tol) }
            }
        }
        Err(_) => Classification { kind: SemistableKind::Unstable, confidence: T::zero() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{random_smooth_field, AlgebraKind};
    use rand::SeedableRng;

    type Rng = rand::rngs::StdRng;

    fn lat(n: usize) -> Lattice<f64> {
        fiber_lattice(n, 1.0)
    }

    #[test]
    fn constant_diagonal_is_flat() {
        let a = FiberConnection::diagonal(lat(16), Complex::new(0.3, 0.4));
        assert!(sup_norm(&fiber_curvature(&a)) < 1e-14);
    }

    #[test]
    fn constant_matrix_curvature_formula() {
        let b = Mat2::new(Complex::new(0.3, 0.1), Complex::new(0.2, -0.4), Complex::new(-0.1, 0.25), Complex::new(-0.3, -0.1));
        let a = FiberConnection::from_b_field(lat(8), &vec![b; 64]);
        let f = fiber_curvature(&a);
        let expect = (b * b.dagger() - b.dagger() * b).scale(Complex::new(0.0, -2.0));
        assert!((f[5] - expect).norm() < 1e-14);
    }

    #[test]
    fn reduction_is_idempotent_and_in_domain() {
        for &(re, im) in &[(0.3, 0.4), (-0.3, 5.0), (2.0, -1.0), (std::f64::consts::FRAC_PI_2, 2.5), (0.0, 3.0), (-1e-18, 0.2)] {
            let p = ModuliPoint::reduce(Complex::new(re, im), 1e-6);
            let q = ModuliPoint::reduce(p.a, 1e-6);
            assert_eq!(p.a, q.a);
            assert!(p.a.re >= 0.0 && p.a.re <= std::f64::consts::FRAC_PI_2);
            assert!(p.a.im >= 0.0 && p.a.im < std::f64::consts::PI);
        }
    }

    #[test]
    fn lattice_shift_moves_class_parameter() {
        let beta = Complex::new(0.3, 0.4);
        let a = FiberConnection::diagonal(lat(16), beta);
        let s = lattice_gauge_shift(&a, 1, 0);
        let b = s.b_field()[7];
        assert!((b.e[0] - (beta + Complex::new(0.0, std::f64::consts::PI))).norm() < 1e-12);
        let opts = FiberOptions::default();
        let p0 = flatten_to_t(&a, None, &opts).unwrap().point;
        let p1 = flatten_to_t(&s, None, &opts).unwrap().point;
        assert!((p0.a - p1.a).norm() < 1e-12);
    }

    #[test]
    fn holonomy_of_half_pi_class() {
        let a = FiberConnection::diagonal(lat(32), Complex::new(std::f64::consts::FRAC_PI_2, 0.0));
        let h = holonomy_extract(&a, &FiberOptions::default());
        assert!((h.hy + Mat2::identity()).norm() < 1e-10);
        assert!((h.hx - Mat2::identity()).norm() < 1e-10);
    }

    #[test]
    fn holonomy_eigenphases_match_class() {
        let beta = Complex::new(0.4, 0.7);
        let a = FiberConnection::diagonal(lat(16), beta);
        let h = holonomy_extract(&a, &FiberOptions::default());
        let px = eigenphases(&h.hx);
        let py = eigenphases(&h.hy);
        assert!((px[1] - 2.0 * beta.im).abs() < 1e-10 && (px[0] + 2.0 * beta.im).abs() < 1e-10);
        assert!((py[1] - 2.0 * beta.re).abs() < 1e-10 && (py[0] + 2.0 * beta.re).abs() < 1e-10);
    }

    #[test]
    fn flatten_recovers_generator() {
        let mut rng = Rng::seed_from_u64(7);
        let beta = Complex::new(0.4, 0.2);
        let l = lat(32);
        let a0 = FiberConnection::diagonal(l.clone(), beta);
        let v = random_smooth_field::<f64, _>(&mut rng, &[32, 32], &[0, 1], 2, 0.1, AlgebraKind::Sl2);
        let g = GaugeTransform { kind: GaugeKind::Complex, g: v.iter().map(|m| m.exp()).collect() };
        let a = complex_gauge_apply(&g, &a0, 1e-9).unwrap();
        // complex gauges do not preserve curvature; lift the basin check
        let opts = FiberOptions { flatten_energy_max: f64::INFINITY, ..Default::default() };
        let f = flatten_to_t(&a, None, &opts).unwrap();
        assert!(ModuliPoint::class_distance(f.point.a, beta) < 1e-8, "{:?}", f.point);
        let back = complex_gauge_apply(&f.gauge, &a, 1e-8).unwrap();
        let b = back.b_field();
        let target = Mat2::diag(f.lambda, -f.lambda);
        let dev = b.iter().map(|m| (*m - target).norm()).fold(0.0, f64::max);
        // the composed gauge is not band-limited, so one-shot application carries aliasing error
        assert!(dev < 1e-6, "{dev:e} {}", f.iterations);
    }

    #[test]
    fn flatten_in_t_is_trivial() {
        let a = FiberConnection::diagonal(lat(16), Complex::new(0.5, 1.0));
        let f = flatten_to_t(&a, None, &FiberOptions::default()).unwrap();
        assert_eq!(f.iterations, 0);
        assert_eq!(f.residual, 0.0);
        assert!(f.gauge.g.iter().all(|m| (*m - Mat2::identity()).norm() < 1e-15));
        let n = unitary_normalize(&a, &f, &FiberOptions::default()).unwrap();
        assert_eq!(n.bound_ratio, 0.0);
    }

    #[test]
    fn nilpotent_is_case_two() {
        let nil = Mat2::new(Complex::zero(), Complex::new(1.0, 0.0), Complex::zero(), Complex::zero());
        let a = FiberConnection::from_b_field(lat(16), &vec![nil; 256]);
        let opts = FiberOptions { flatten_energy_max: 10.0, ..Default::default() };
        let c = semistability_classify(&a, &opts);
        assert!(matches!(c.kind, SemistableKind::Case2 { torsion } if torsion.a == Complex::new(0.0, 0.0)));
    }

    #[test]
    fn zero_is_case_one_singular() {
        let a = FiberConnection::zero(lat(8));
        let c = semistability_classify(&a, &FiberOptions::default());
        match c.kind {
            SemistableKind::Case1(p) => assert!(p.singular && p.a == Complex::new(0.0, 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn curvature_schemes_agree_at_fourth_order() {
        let mut errs = vec![];
        for n in [16usize, 32] {
            let mut rng = Rng::seed_from_u64(3);
            let ax = random_smooth_field::<f64, _>(&mut rng, &[n, n], &[0, 1], 2, 0.5, AlgebraKind::Su2);
            let ay = random_smooth_field::<f64, _>(&mut rng, &[n, n], &[0, 1], 2, 0.5, AlgebraKind::Su2);
            let a = FiberConnection::from_full(lat(n), &ax, &ay);
            let d: Vec<Mat2<f64>> = fiber_curvature(&a).iter().zip(fiber_curvature_fd4(&a)).map(|(x, y)| *x - y).collect();
            errs.push(sup_norm(&d));
        }
        assert!((errs[0] / errs[1]).log2() > 3.5, "{errs:?}");
    }
}
