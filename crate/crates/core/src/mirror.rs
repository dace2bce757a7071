//! Multisections of the dual torus fibration: the limit system on the base, the Lagrangian and
//! special conditions, extraction from a solved connection and the flat-bundle check.
//!
//! Normalization: `a_i`, `b_i` are the imaginary parts of the diagonal entries of `A_x`, `A_y`,
//! defined modulo `2π`. A branch is stored as a linear winding part `2π(w_s s/L_s + w_t t/L_t)`
//! plus a periodic remainder.

use num_complex::Complex;
use thiserror::Error;

use crate::adiabatic::{phi_extract, Section};
use crate::fiber::FiberOptions;
use crate::geometry::{mirror_frame, HessianGeometry, MirrorFrame};
use crate::hym::{Connection4D, AXIS_S, AXIS_T, AXIS_X, AXIS_Y};
use crate::mat2::Mat2;
use crate::scalar::{lit, rem_euclid, to_f64, Scalar};
use crate::spectral::Lattice;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MirrorError {
    #[error("incompatible data: {0}")]
    IncompatibleData(String),
    #[error("limit solver stalled (residual {0:e})")]
    SolverStall(f64),
    #[error("geometry is not Calabi-Yau (max |det g − 1| = {0:e})")]
    NotCalabiYau(f64),
    #[error("multisection grid {got} does not match geometry grid {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("too many masked samples ({masked} of {total})")]
    TooManyMasked { masked: usize, total: usize },
    #[error("branch tracking ambiguous at {0} sites")]
    BranchTrackingAmbiguous(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    SolvedLimitEquation,
    ExtractedFromConnection,
}

/// One branch `(a_i, b_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    /// `[a|b][s|t]` windings.
    pub winding: [[i64; 2]; 2],
    pub periodic_a: Vec<T>,
    pub periodic_b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Multisection<T> {
    pub n: usize,
    pub periods: [T; 2],
    pub c0: T,
    pub branches: Vec<Branch<T>>,
    /// Sites excluded from residuals (ramification or failed extraction).
    pub mask: Vec<bool>,
    /// Set when both branches are the same (non-reduced, multiplicity 2).
    pub non_reduced: bool,
    pub provenance: Provenance,
}

/// Reduces to `(−π, π]`.
#[inline]
pub fn wrap_2pi<T: Scalar>(x: T) -> T {
    let tau = T::TAU();
    let r = rem_euclid(x + T::PI(), tau) - T::PI();
    if r <= -T::PI() {
        r + tau
    } else {
        r
    }
}

impl<T: Scalar> Multisection<T> {
    fn lattice(&self) -> Lattice<T> {
        Lattice::new(&[self.n, self.n], &self.periods)
    }

    /// Constant slopes `(∂_s, ∂_t)` of the winding part of component `c` (0 = a, 1 = b).
    pub fn slopes(&self, br: &Branch<T>, c: usize) -> [T; 2] {
        [
            T::TAU() * T::from(br.winding[c][0]).unwrap() / self.periods[0],
            T::TAU() * T::from(br.winding[c][1]).unwrap() / self.periods[1],
        ]
    }

    fn site(&self, i: usize) -> (T, T) {
        let h = [self.periods[0] / T::from(self.n).unwrap(), self.periods[1] / T::from(self.n).unwrap()];
        (T::from(i / self.n).unwrap() * h[0], T::from(i % self.n).unwrap() * h[1])
    }

    /// Windings and periodic-part means of every branch, as input for [`limit_solve`].
    pub fn branch_specs(&self) -> Vec<BranchSpec<T>> {
        self.branches.iter().map(|b| BranchSpec { winding: b.winding, mean: [mean(&b.periodic_a), mean(&b.periodic_b)] }).collect()
    }

    /// Full (unwrapped) values of component `c` of a branch.
    pub fn values(&self, br: &Branch<T>, c: usize) -> Vec<T> {
        let k = self.slopes(br, c);
        let p = if c == 0 { &br.periodic_a } else { &br.periodic_b };
        (0..self.n * self.n)
            .map(|i| {
                let (s, t) = self.site(i);
                k[0] * s + k[1] * t + p[i]
            })
            .collect()
    }

    /// `[∂_s a, ∂_t a, ∂_s b, ∂_t b]` fields of a branch.
    pub fn gradients(&self, br: &Branch<T>) -> [Vec<T>; 4] {
        let lat = self.lattice();
        let ka = self.slopes(br, 0);
        let kb = self.slopes(br, 1);
        let add = |v: Vec<T>, k: T| v.into_iter().map(|x| x + k).collect::<Vec<T>>();
        [
            add(lat.deriv_real(&br.periodic_a, 0, 1), ka[0]),
            add(lat.deriv_real(&br.periodic_a, 1, 1), ka[1]),
            add(lat.deriv_real(&br.periodic_b, 0, 1), kb[0]),
            add(lat.deriv_real(&br.periodic_b, 1, 1), kb[1]),
        ]
    }
}

/// Winding and mean values `(a₀, b₀)` of one branch of the limit system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchSpec<T> {
    pub winding: [[i64; 2]; 2],
    pub mean: [T; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitOptions<T> {
    pub tol: T,
    pub max_iters: usize,
}

impl<T: Scalar> Default for LimitOptions<T> {
    fn default() -> Self {
        Self { tol: lit(1e-10), max_iters: 500 }
    }
}

/// Residuals of the limit system `E1 = ∂_s a + ∂_t b − c₀`,
/// `E2 = g^{ss}∂_s b + 2g^{st}∂_t b − g^{tt}∂_t a − c₀ g^{st}`.
pub fn limit_residuals<T: Scalar>(m: &Multisection<T>, br: &Branch<T>, geom: &HessianGeometry<T>) -> (Vec<T>, Vec<T>) {
    let [a_s, a_t, b_s, b_t] = m.gradients(br);
    let e1 = (0..a_s.len()).map(|i| a_s[i] + b_t[i] - m.c0).collect();
    let e2 = (0..a_s.len())
        .map(|i| {
            let [gss, gst, gtt] = geom.g_inv[i];
            gss * b_s[i] + lit::<T>(2.0) * gst * b_t[i] - gtt * a_t[i] - m.c0 * gst
        })
        .collect();
    (e1, e2)
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from(v.len()).unwrap()
}

fn sup<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).fold(T::zero(), T::max)
}

/// Solves the limit system branch by branch. The winding parts are fixed by the data; the
/// periodic parts are solved spectrally (per-mode 2×2 solve with the mean inverse metric) and,
/// for a variable metric, refined by Richardson iteration with that solve as preconditioner.
/// `forcing` adds right-hand sides to `(E1, E2)`.
pub fn limit_solve<T: Scalar>(
    geom: &HessianGeometry<T>,
    c0: T,
    specs: &[BranchSpec<T>],
    forcing: Option<(&[T], &[T])>,
    opts: &LimitOptions<T>,
) -> Result<Multisection<T>, MirrorError> {
    let n = geom.n;
    let len = n * n;
    if let Some((f1, f2)) = forcing {
        if f1.len() != len || f2.len() != len {
            return Err(MirrorError::GridMismatch { expected: len, got: f1.len().min(f2.len()) });
        }
    }
    let lat = geom.lattice().clone();
    let gbar = {
        let mut acc = [T::zero(); 3];
        for g in &geom.g_inv {
            for k in 0..3 {
                acc[k] = acc[k] + g[k];
            }
        }
        acc.map(|v| v / T::from(len).unwrap())
    };
    let zero = vec![T::zero(); len];
    let (f1, f2) = forcing.unwrap_or((&zero, &zero));
    let mut ms = Multisection { n, periods: geom.periods, c0, branches: vec![], mask: vec![false; len], non_reduced: false, provenance: Provenance::SolvedLimitEquation };
    for spec in specs {
        let mut br = Branch { winding: spec.winding, periodic_a: vec![spec.mean[0]; len], periodic_b: vec![spec.mean[1]; len] };
        let ka = ms.slopes(&br, 0);
        let kb = ms.slopes(&br, 1);
        // flux constraints from integrating both equations over the base
        let flux1 = ka[0] + kb[1] - c0 - mean(f1);
        let flux2 = gbar[0] * kb[0] + lit::<T>(2.0) * gbar[1] * kb[1] - gbar[2] * ka[1] - c0 * gbar[1] - mean(f2);
        let scale = T::one() + c0.abs() + ka[0].abs() + kb[1].abs() + kb[0].abs() + ka[1].abs();
        if flux1.abs() > opts.tol * scale {
            return Err(MirrorError::IncompatibleData(format!("winding flux {} differs from c0 {}", to_f64(ka[0] + kb[1]), to_f64(c0))));
        }
        // exact only when the columns of g⁻¹ are divergence-free, i.e. det g constant
        if geom.calabi_yau && flux2.abs() > opts.tol * scale {
            return Err(MirrorError::IncompatibleData(format!("second equation has nonzero mean {:e}", to_f64(flux2))));
        }
        let mut last = T::infinity();
        let mut converged = false;
        for _ in 0..opts.max_iters.max(1) {
            ms.branches.push(br.clone());
            let (e1, e2) = limit_residuals(&ms, &br, geom);
            ms.branches.pop();
            let r1: Vec<T> = (0..len).map(|i| f1[i] - e1[i]).collect();
            let r2: Vec<T> = (0..len).map(|i| f2[i] - e2[i]).collect();
            let res = sup(&r1).max(sup(&r2));
            if res <= opts.tol {
                converged = true;
                last = res;
                break;
            }
            if !(res < last * lit(2.0)) && last.is_finite() {
                return Err(MirrorError::SolverStall(to_f64(res)));
            }
            last = res;
            let (da, db) = constant_coefficient_solve(&lat, gbar, &r1, &r2);
            for i in 0..len {
                br.periodic_a[i] = br.periodic_a[i] + da[i];
                br.periodic_b[i] = br.periodic_b[i] + db[i];
            }
        }
        if !converged {
            return Err(MirrorError::SolverStall(to_f64(last)));
        }
        ms.branches.push(br);
    }
    if ms.branches.len() == 2 && ms.branches[0] == ms.branches[1] {
        ms.non_reduced = true;
    }
    Ok(ms)
}

/// Zero-mean `(a, b)` with `∂_s a + ∂_t b = r1` and `ḡ^{ss}∂_s b + 2ḡ^{st}∂_t b − ḡ^{tt}∂_t a = r2`
/// mode by mode; the mean and Nyquist parts of the data are ignored.
fn constant_coefficient_solve<T: Scalar>(lat: &Lattice<T>, g: [T; 3], r1: &[T], r2: &[T]) -> (Vec<T>, Vec<T>) {
    let n = lat.dims()[0];
    let mut c1: Vec<Complex<T>> = r1.iter().map(|&x| Complex::new(x, T::zero())).collect();
    let mut c2: Vec<Complex<T>> = r2.iter().map(|&x| Complex::new(x, T::zero())).collect();
    lat.fft_forward(&mut c1);
    lat.fft_forward(&mut c2);
    let mut a = vec![Complex::new(T::zero(), T::zero()); n * n];
    let mut b = a.clone();
    let two = lit::<T>(2.0);
    for idx in 1..n * n {
        if lat.touches_nyquist(idx) {
            continue;
        }
        let k = lat.wavevector(idx);
        let (ks, kt) = (k[0], k[1]);
        // [[i ks, i kt], [−i g_tt kt, i (g_ss ks + 2 g_st kt)]] (a, b)ᵀ = (r1, r2)ᵀ
        let m11 = ks;
        let m12 = kt;
        let m21 = -g[2] * kt;
        let m22 = g[0] * ks + two * g[1] * kt;
        let det = m11 * m22 - m12 * m21;
        if det.abs() <= T::epsilon() {
            continue;
        }
        let i = Complex::new(T::zero(), T::one());
        // solve M x = −i r
        let (x1, x2) = (c1[idx] * (-i), c2[idx] * (-i));
        a[idx] = (x1 * m22 - x2 * m12) / det;
        b[idx] = (x2 * m11 - x1 * m21) / det;
    }
    lat.fft_inverse(&mut a);
    lat.fft_inverse(&mut b);
    (a.into_iter().map(|z| z.re).collect(), b.into_iter().map(|z| z.re).collect())
}

fn check_grid<T: Scalar>(m: &Multisection<T>, geom: &HessianGeometry<T>) -> Result<(), MirrorError> {
    if m.n != geom.n {
        return Err(MirrorError::GridMismatch { expected: geom.n, got: m.n });
    }
    Ok(())
}

/// Field norms over unmasked sites.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldNorms<T> {
    pub sup: T,
    pub l2: T,
}

fn norms<T: Scalar>(fields: &[Vec<T>], mask: &[bool], cell: T) -> FieldNorms<T> {
    let mut s = T::zero();
    let mut q = T::zero();
    for f in fields {
        for (v, &m) in f.iter().zip(mask) {
            if !m {
                s = s.max(v.abs());
                q = q + *v * *v;
            }
        }
    }
    FieldNorms { sup: s, l2: (q * cell).sqrt() }
}

#[derive(Clone, Debug)]
pub struct LagrangianResidual<T> {
    /// `g^{st}∂_s a + g^{tt}∂_t a − g^{ss}∂_s b − g^{st}∂_t b` per branch.
    pub formula: Vec<Vec<T>>,
    /// `ω̌(ℓ₁, ℓ₂)` per branch from the mirror frame.
    pub contraction: Vec<Vec<T>>,
    pub norms: FieldNorms<T>,
    /// Largest difference between the two evaluations.
    pub path_gap: T,
}

/// Lagrangian residual, evaluated by formula and by contracting `ω̌` with the tangent vectors
/// `ℓ₁ = ∂_š + (∂_š a)∂_{x*} + (∂_š b)∂_{y*}`, `ℓ₂ = ∂_ť + …` with `∂_š = g^{ss}∂_s + g^{st}∂_t`.
pub fn lagrangian_residual<T: Scalar>(m: &Multisection<T>, geom: &HessianGeometry<T>) -> Result<LagrangianResidual<T>, MirrorError> {
    check_grid(m, geom)?;
    let frame: MirrorFrame<T> = mirror_frame(geom);
    let mut formula = vec![];
    let mut contraction = vec![];
    let mut gap = T::zero();
    for br in &m.branches {
        let [a_s, a_t, b_s, b_t] = m.gradients(br);
        let mut f = Vec::with_capacity(a_s.len());
        let mut c = Vec::with_capacity(a_s.len());
        for i in 0..a_s.len() {
            let [gss, gst, gtt] = geom.g_inv[i];
            let v = gst * a_s[i] + gtt * a_t[i] - gss * b_s[i] - gst * b_t[i];
            let da_dual = [gss * a_s[i] + gst * a_t[i], gst * a_s[i] + gtt * a_t[i]];
            let db_dual = [gss * b_s[i] + gst * b_t[i], gst * b_s[i] + gtt * b_t[i]];
            let l1 = [T::one(), T::zero(), da_dual[0], db_dual[0]];
            let l2 = [T::zero(), T::one(), da_dual[1], db_dual[1]];
            let w = MirrorFrame::contract(&frame.omega_check, &l1, &l2);
            gap = gap.max((v - w).abs());
            f.push(v);
            c.push(w);
        }
        formula.push(f);
        contraction.push(c);
    }
    let cell = geom.lattice().cell_volume();
    let norms = norms(&formula, &m.mask, cell);
    Ok(LagrangianResidual { formula, contraction, norms, path_gap: gap })
}

#[derive(Clone, Debug)]
pub struct SpecialResidual<T> {
    /// `∂_s a + ∂_t b` per branch.
    pub raw: Vec<Vec<T>>,
    /// `∂_s a + ∂_t b − c₀` per branch.
    pub shifted: Vec<Vec<T>>,
    pub raw_norms: FieldNorms<T>,
    pub shifted_norms: FieldNorms<T>,
}

/// Special-Lagrangian residual; the simplification to `∂_s a + ∂_t b` needs `det g = 1`.
pub fn special_residual<T: Scalar>(m: &Multisection<T>, geom: &HessianGeometry<T>) -> Result<SpecialResidual<T>, MirrorError> {
    check_grid(m, geom)?;
    if !geom.calabi_yau {
        return Err(MirrorError::NotCalabiYau(to_f64(geom.max_det_deviation)));
    }
    let mut raw = vec![];
    let mut shifted = vec![];
    for br in &m.branches {
        let [a_s, _, _, b_t] = m.gradients(br);
        let r: Vec<T> = a_s.iter().zip(&b_t).map(|(x, y)| *x + *y).collect();
        shifted.push(r.iter().map(|v| *v - m.c0).collect());
        raw.push(r);
    }
    let cell = geom.lattice().cell_volume();
    let raw_norms = norms(&raw, &m.mask, cell);
    let shifted_norms = norms(&shifted, &m.mask, cell);
    Ok(SpecialResidual { raw, shifted, raw_norms, shifted_norms })
}

/// Combined pass/fail summary.
#[derive(Clone, Debug)]
pub struct VerificationReport<T> {
    pub lagrangian: FieldNorms<T>,
    pub lagrangian_path_gap: T,
    pub special: Option<FieldNorms<T>>,
    pub special_shifted: Option<FieldNorms<T>>,
    pub flat_bundle: Option<FlatBundleResidual<T>>,
    pub tol: T,
    pub lagrangian_pass: bool,
    /// `None` when the geometry is not Calabi-Yau.
    pub special_pass: Option<bool>,
    pub flat_bundle_pass: Option<bool>,
}

pub fn verify<T: Scalar>(m: &Multisection<T>, geom: &HessianGeometry<T>, flat: Option<FlatBundleResidual<T>>, tol: T, flat_tol: T) -> Result<VerificationReport<T>, MirrorError> {
    let lag = lagrangian_residual(m, geom)?;
    let sp = match special_residual(m, geom) {
        Ok(s) => Some(s),
        Err(MirrorError::NotCalabiYau(_)) => None,
        Err(e) => return Err(e),
    };
    let special_pass = sp.as_ref().map(|s| s.raw_norms.sup <= tol);
    let flat_bundle_pass = flat.as_ref().map(|f| f.sup <= flat_tol);
    Ok(VerificationReport {
        lagrangian_pass: lag.norms.sup <= tol,
        lagrangian: lag.norms,
        lagrangian_path_gap: lag.path_gap,
        special: sp.as_ref().map(|s| s.raw_norms.clone()),
        special_shifted: sp.map(|s| s.shifted_norms),
        flat_bundle: flat,
        tol,
        special_pass,
        flat_bundle_pass,
    })
}

/// Per-site data needed to assemble a multisection from a connection: the branch-tracked class
/// parameter (continuous on the universal cover) and the fiber-averaged trace coefficients.
#[derive(Clone, Debug)]
pub struct ExtractedSection<T> {
    pub n: usize,
    pub periods: [T; 2],
    pub beta: Vec<Option<Complex<T>>>,
    pub trace_x: Vec<T>,
    pub trace_y: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractOptions<T> {
    pub max_masked_fraction: T,
    /// Branches closer than this (mod 2π, both components) mark a ramification site.
    pub branch_tol: T,
}

impl<T: Scalar> Default for ExtractOptions<T> {
    fn default() -> Self {
        Self { max_masked_fraction: lit(0.01), branch_tol: lit(1e-3) }
    }
}

/// Winding of an unwrapped periodic sample sequence: sum of increments around the cycle with the
/// closing step reduced to `(−π, π]`.
fn cycle_winding<T: Scalar>(vals: &[T]) -> i64 {
    let n = vals.len();
    let mut total = T::zero();
    for i in 0..n {
        let d = vals[(i + 1) % n] - vals[i];
        total = total + if i + 1 == n { wrap_2pi(d) } else { d };
    }
    to_f64(total / T::TAU()).round() as i64
}

/// Assembles the two branches `a = ±2 Im β + c_x`, `b = ∓2 Re β + c_y`.
pub fn from_section<T: Scalar>(sec: &ExtractedSection<T>, opts: &ExtractOptions<T>) -> Result<Multisection<T>, MirrorError> {
    let n = sec.n;
    let len = n * n;
    let masked = sec.beta.iter().filter(|b| b.is_none()).count();
    if T::from(masked).unwrap() > opts.max_masked_fraction * T::from(len).unwrap() {
        return Err(MirrorError::TooManyMasked { masked, total: len });
    }
    // fill masked sites from the nearest unmasked site in the same row for winding purposes
    let beta: Vec<Complex<T>> = (0..len)
        .map(|i| {
            sec.beta[i].unwrap_or_else(|| {
                let row = i / n;
                (1..n).find_map(|d| sec.beta[row * n + (i % n + d) % n]).unwrap_or(Complex::new(T::zero(), T::zero()))
            })
        })
        .collect();
    let two = lit::<T>(2.0);
    let mut ms = Multisection { n, periods: sec.periods, c0: T::zero(), branches: vec![], mask: sec.beta.iter().map(|b| b.is_none()).collect(), non_reduced: false, provenance: Provenance::ExtractedFromConnection };
    let h = [sec.periods[0] / T::from(n).unwrap(), sec.periods[1] / T::from(n).unwrap()];
    for sign in [T::one(), -T::one()] {
        let a: Vec<T> = (0..len).map(|i| sign * two * beta[i].im + sec.trace_x[i]).collect();
        let b: Vec<T> = (0..len).map(|i| -sign * two * beta[i].re + sec.trace_y[i]).collect();
        let col = |v: &[T]| -> Vec<T> { (0..n).map(|j| v[j * n]).collect() };
        let row = |v: &[T]| -> Vec<T> { v[..n].to_vec() };
        let winding = [[cycle_winding(&col(&a)), cycle_winding(&row(&a))], [cycle_winding(&col(&b)), cycle_winding(&row(&b))]];
        let mut br = Branch { winding, periodic_a: vec![], periodic_b: vec![] };
        let ka = ms.slopes(&br, 0);
        let kb = ms.slopes(&br, 1);
        br.periodic_a = (0..len)
            .map(|i| {
                let (s, t) = (T::from(i / n).unwrap() * h[0], T::from(i % n).unwrap() * h[1]);
                a[i] - ka[0] * s - ka[1] * t
            })
            .collect();
        br.periodic_b = (0..len)
            .map(|i| {
                let (s, t) = (T::from(i / n).unwrap() * h[0], T::from(i % n).unwrap() * h[1]);
                b[i] - kb[0] * s - kb[1] * t
            })
            .collect();
        ms.branches.push(br);
    }
    // ramification: the two branches collide
    let a1 = ms.values(&ms.branches[0], 0);
    let a2 = ms.values(&ms.branches[1], 0);
    let b1 = ms.values(&ms.branches[0], 1);
    let b2 = ms.values(&ms.branches[1], 1);
    let mut collisions = 0;
    for i in 0..len {
        if wrap_2pi(a1[i] - a2[i]).abs() < opts.branch_tol && wrap_2pi(b1[i] - b2[i]).abs() < opts.branch_tol {
            ms.mask[i] = true;
            collisions += 1;
        }
    }
    if collisions == len {
        ms.non_reduced = true;
    }
    Ok(ms)
}

/// Fiberwise flattening of a solved connection assembled into a multisection with the
/// connection's `c₀`.
pub fn from_connection<T: Scalar>(x: &Connection4D<T>, fiber: &FiberOptions<T>, opts: &ExtractOptions<T>) -> Result<(Multisection<T>, Section<T>), MirrorError> {
    let sec = phi_extract(x, fiber);
    let (trace_x, trace_y) = fiber_trace_means(x);
    let ext = ExtractedSection { n: x.nb(), periods: [x.ls(), x.lt()], beta: sec.tracked(), trace_x, trace_y };
    let mut m = from_section(&ext, opts)?;
    m.c0 = x.c0;
    Ok((m, sec))
}

/// Builds the trace coefficients needed by [`from_section`] from a connection.
pub fn fiber_trace_means<T: Scalar>(x: &Connection4D<T>) -> (Vec<T>, Vec<T>) {
    let per = x.nf() * x.nf();
    let nb2 = x.nb() * x.nb();
    let avg = |axis: usize| -> Vec<T> {
        (0..nb2)
            .map(|b| x.fields[axis][b * per..(b + 1) * per].iter().map(|m| m.trace_coeff()).sum::<T>() / T::from(per).unwrap())
            .collect()
    };
    (avg(AXIS_X), avg(AXIS_Y))
}

/// Smallest sup-distance (mod 2π, over branch permutations) between two multisections on the same
/// grid, over sites unmasked in both.
pub fn multisection_distance<T: Scalar>(m1: &Multisection<T>, m2: &Multisection<T>) -> T {
    let mask: Vec<bool> = m1.mask.iter().zip(&m2.mask).map(|(a, b)| *a || *b).collect();
    let dist = |b1: &Branch<T>, b2: &Branch<T>| -> T {
        let mut d = T::zero();
        for c in 0..2 {
            let v1 = m1.values(b1, c);
            let v2 = m2.values(b2, c);
            for i in 0..v1.len() {
                if !mask[i] {
                    d = d.max(wrap_2pi(v1[i] - v2[i]).abs());
                }
            }
        }
        d
    };
    let k = m1.branches.len().min(m2.branches.len());
    if k == 0 {
        return T::zero();
    }
    if k == 1 {
        return m2.branches.iter().map(|b| dist(&m1.branches[0], b)).fold(T::infinity(), T::min);
    }
    let direct = dist(&m1.branches[0], &m2.branches[0]).max(dist(&m1.branches[1], &m2.branches[1]));
    let swapped = dist(&m1.branches[0], &m2.branches[1]).max(dist(&m1.branches[1], &m2.branches[0]));
    direct.min(swapped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatBundleResidual<T> {
    /// `L²` norm over the base of `∂_tΦ̄ − ∂_sΨ̄ − [Φ̄, Ψ̄]` for the fiber-averaged diagonal parts.
    pub l2: T,
    pub sup: T,
    /// `sup ‖Φ − Φ̄‖, ‖Ψ − Ψ̄‖`: how far `Φ, Ψ` are from fiber-constant.
    pub fiber_variation: T,
    /// Largest off-diagonal entry of `Φ̄, Ψ̄`.
    pub offdiagonal: T,
}

pub fn flat_bundle_residual<T: Scalar>(x: &Connection4D<T>, mask: Option<&[bool]>) -> FlatBundleResidual<T> {
    let per = x.nf() * x.nf();
    let nb = x.nb();
    let avg = |axis: usize| -> Vec<Mat2<T>> {
        (0..nb * nb)
            .map(|b| {
                let mut acc = Mat2::zero();
                for m in &x.fields[axis][b * per..(b + 1) * per] {
                    acc += *m;
                }
                acc.scale_re(T::one() / T::from(per).unwrap())
            })
            .collect()
    };
    let phi = avg(AXIS_S);
    let psi = avg(AXIS_T);
    let mut variation = T::zero();
    for (axis, bar) in [(AXIS_S, &phi), (AXIS_T, &psi)] {
        for (i, m) in x.fields[axis].iter().enumerate() {
            variation = variation.max((*m - bar[i / per]).norm());
        }
    }
    let offdiagonal = phi.iter().chain(psi.iter()).map(|m| m.e[1].norm().max(m.e[2].norm())).fold(T::zero(), T::max);
    let diag = |v: &[Mat2<T>]| -> Vec<Mat2<T>> { v.iter().map(|m| Mat2::diag(m.e[0], m.e[3])).collect() };
    let (phi, psi) = (diag(&phi), diag(&psi));
    let lat = Lattice::new(&[nb, nb], &[x.ls(), x.lt()]);
    let dt_phi = lat.deriv_mat(&phi, 1);
    let ds_psi = lat.deriv_mat(&psi, 0);
    let mut s = T::zero();
    let mut q = T::zero();
    for i in 0..nb * nb {
        if mask.map(|m| m[i]).unwrap_or(false) {
            continue;
        }
        let r = dt_phi[i] - ds_psi[i] - phi[i].commutator(&psi[i]);
        s = s.max(r.norm());
        q = q + r.norm_sqr();
    }
    FlatBundleResidual { l2: (q * lat.cell_volume()).sqrt(), sup: s, fiber_variation: variation, offdiagonal }
}
