//! Semi-flat base geometry from a Hessian potential: metric, Calabi-Yau check, Legendre maps,
//! ε-rescaled Kähler data and the mirror Darboux frame.

use thiserror::Error;

use crate::scalar::{lit, to_f64, Scalar};
use crate::spectral::{Lattice, TrigInterp2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("metric not positive definite at grid site ({0}, {1})")]
    NonPositiveDefinite(usize, usize),
    #[error("base resolution {0} below the minimum of 8")]
    ResolutionTooLow(usize),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("point ({0}, {1}) outside the base domain")]
    OutOfDomain(f64, f64),
    #[error("sampled potential has {got} values, expected {expected}")]
    SampleShape { got: usize, expected: usize },
    #[error("inverse Legendre map did not converge (residual {0:e})")]
    InverseNoConvergence(f64),
}

/// `amplitude · cos(2π ks s/L_s + phase_s) · cos(2π kt t/L_t + phase_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineMode<T> {
    pub amplitude: T,
    pub ks: i32,
    pub kt: i32,
    pub phase_s: T,
    pub phase_t: T,
}

/// `½ pᵀQp + l·p + Σ cosine modes`, with `Q = [[q_ss, q_st], [q_st, q_tt]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormPotential<T> {
    pub quadratic: [T; 3],
    pub linear: [T; 2],
    pub modes: Vec<CosineMode<T>>,
}

/// Potential sampled on the periodic grid. The declared quadratic and linear parts are removed
/// before spectral differentiation; what remains must be periodic.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPotential<T> {
    pub n: usize,
    /// Row-major, `s` outer.
    pub values: Vec<T>,
    pub quadratic: [T; 3],
    pub linear: [T; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Potential<T> {
    ClosedForm(ClosedFormPotential<T>),
    Sampled(SampledPotential<T>),
}

impl<T: Scalar> ClosedFormPotential<T> {
    pub fn flat() -> Self {
        Self { quadratic: [T::one(), T::zero(), T::one()], linear: [T::zero(); 2], modes: vec![] }
    }

    /// Constant metric `Q`.
    pub fn quadratic(q: [T; 3]) -> Self {
        Self { quadratic: q, linear: [T::zero(); 2], modes: vec![] }
    }

    pub fn with_mode(mut self, amplitude: T, ks: i32, kt: i32) -> Self {
        self.modes.push(CosineMode { amplitude, ks, kt, phase_s: T::zero(), phase_t: T::zero() });
        self
    }

    fn quad_value(&self, s: T, t: T) -> T {
        let [a, b, c] = self.quadratic;
        lit::<T>(0.5) * (a * s * s + lit::<T>(2.0) * b * s * t + c * t * t)
            + self.linear[0] * s
            + self.linear[1] * t
    }

    fn periodic_value(&self, s: T, t: T, periods: [T; 2]) -> T {
        let tau = T::TAU();
        self.modes
            .iter()
            .map(|m| {
                let ws = tau * T::from(m.ks).unwrap() / periods[0];
                let wt = tau * T::from(m.kt).unwrap() / periods[1];
                m.amplitude * (ws * s + m.phase_s).cos() * (wt * t + m.phase_t).cos()
            })
            .sum()
    }

    /// Value at a point.
    pub fn value(&self, s: T, t: T, periods: [T; 2]) -> T {
        self.quad_value(s, t) + self.periodic_value(s, t, periods)
    }

    /// Analytic Hessian `(h_ss, h_st, h_tt)` at a point.
    pub fn hessian_exact(&self, s: T, t: T, periods: [T; 2]) -> [T; 3] {
        let tau = T::TAU();
        let [mut hss, mut hst, mut htt] = self.quadratic;
        for m in &self.modes {
            let ws = tau * T::from(m.ks).unwrap() / periods[0];
            let wt = tau * T::from(m.kt).unwrap() / periods[1];
            let (cs, ss) = ((ws * s + m.phase_s).cos(), (ws * s + m.phase_s).sin());
            let (ct, st) = ((wt * t + m.phase_t).cos(), (wt * t + m.phase_t).sin());
            hss = hss - m.amplitude * ws * ws * cs * ct;
            hst = hst + m.amplitude * ws * wt * ss * st;
            htt = htt - m.amplitude * wt * wt * cs * ct;
        }
        [hss, hst, htt]
    }

    /// Analytic gradient at a point.
    pub fn gradient_exact(&self, s: T, t: T, periods: [T; 2]) -> [T; 2] {
        let tau = T::TAU();
        let [a, b, c] = self.quadratic;
        let mut gs = a * s + b * t + self.linear[0];
        let mut gt = b * s + c * t + self.linear[1];
        for m in &self.modes {
            let ws = tau * T::from(m.ks).unwrap() / periods[0];
            let wt = tau * T::from(m.kt).unwrap() / periods[1];
            let (cs, ss) = ((ws * s + m.phase_s).cos(), (ws * s + m.phase_s).sin());
            let (ct, st) = ((wt * t + m.phase_t).cos(), (wt * t + m.phase_t).sin());
            gs = gs - m.amplitude * ws * ss * ct;
            gt = gt - m.amplitude * wt * cs * st;
        }
        [gs, gt]
    }
}

impl<T: Scalar> Potential<T> {
    fn quadratic(&self) -> ([T; 3], [T; 2]) {
        match self {
            Potential::ClosedForm(c) => (c.quadratic, c.linear),
            Potential::Sampled(p) => (p.quadratic, p.linear),
        }
    }
}

/// Differentiation scheme for the metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Spectral,
    FiniteDifference4,
}

#[derive(Clone, Copy, Debug)]
pub struct GeometryOptions<T> {
    pub cy_tol: T,
    pub scheme: Scheme,
    /// Relative tolerance for declaring the metric pointwise conformal.
    pub conformal_tol: T,
}

impl<T: Scalar> Default for GeometryOptions<T> {
    fn default() -> Self {
        Self { cy_tol: lit(1e-8), scheme: Scheme::Spectral, conformal_tol: lit(1e-12) }
    }
}

/// Base metric data derived from a Hessian potential on a periodic `N_B × N_B` grid.
#[derive(Clone, Debug)]
pub struct HessianGeometry<T: Scalar> {
    pub potential: Potential<T>,
    pub n: usize,
    pub periods: [T; 2],
    /// `(g_ss, g_st, g_tt)` per site, `s` outer.
    pub g: Vec<[T; 3]>,
    /// `(g^ss, g^st, g^tt)` per site.
    pub g_inv: Vec<[T; 3]>,
    pub det_g: Vec<T>,
    /// Isothermal weight `f` when the metric is pointwise `f (ds² + dt²)`.
    pub conformal_factor: Option<Vec<T>>,
    pub calabi_yau: bool,
    pub cy_tol: T,
    pub max_det_deviation: T,
    /// Largest `|g_st − g_ts|` before symmetrization.
    pub max_asymmetry: T,
    lattice: Lattice<T>,
    periodic_part: Vec<T>,
    interp: TrigInterp2<T>,
}

/// Builds the metric `g_pq = ∂²h/∂p∂q` from a potential.
pub fn metric_from_potential<T: Scalar>(
    potential: &Potential<T>,
    n: usize,
    periods: [T; 2],
    opts: &GeometryOptions<T>,
) -> Result<HessianGeometry<T>, GeometryError> {
    if n < 8 {
        return Err(GeometryError::ResolutionTooLow(n));
    }
    let lattice = Lattice::new(&[n, n], &periods);
    let (q, lin) = potential.quadratic();
    let site = |i: usize| {
        let s = T::from(i / n).unwrap() * lattice.spacing(0);
        let t = T::from(i % n).unwrap() * lattice.spacing(1);
        (s, t)
    };
    let periodic_part: Vec<T> = match potential {
        Potential::ClosedForm(c) => (0..n * n)
            .map(|i| {
                let (s, t) = site(i);
                c.periodic_value(s, t, periods)
            })
            .collect(),
        Potential::Sampled(p) => {
            if p.values.len() != n * n || p.n != n {
                return Err(GeometryError::SampleShape { got: p.values.len(), expected: n * n });
            }
            let quad = ClosedFormPotential { quadratic: q, linear: lin, modes: vec![] };
            (0..n * n)
                .map(|i| {
                    let (s, t) = site(i);
                    p.values[i] - quad.quad_value(s, t)
                })
                .collect()
        }
    };
    let (hss, hst, hts, htt) = match opts.scheme {
        Scheme::Spectral => {
            let ds = lattice.deriv_real(&periodic_part, 0, 1);
            let dt = lattice.deriv_real(&periodic_part, 1, 1);
            (
                lattice.deriv_real(&periodic_part, 0, 2),
                lattice.deriv_real(&dt, 0, 1),
                lattice.deriv_real(&ds, 1, 1),
                lattice.deriv_real(&periodic_part, 1, 2),
            )
        }
        Scheme::FiniteDifference4 => {
            let ds = lattice.deriv_fd4_real(&periodic_part, 0);
            let dt = lattice.deriv_fd4_real(&periodic_part, 1);
            (
                second_fd4(&lattice, &periodic_part, 0),
                lattice.deriv_fd4_real(&dt, 0),
                lattice.deriv_fd4_real(&ds, 1),
                second_fd4(&lattice, &periodic_part, 1),
            )
        }
    };
    let mut g = Vec::with_capacity(n * n);
    let mut g_inv = Vec::with_capacity(n * n);
    let mut det_g = Vec::with_capacity(n * n);
    let mut max_asymmetry = T::zero();
    for i in 0..n * n {
        max_asymmetry = max_asymmetry.max((hst[i] - hts[i]).abs());
        let gss = q[0] + hss[i];
        let gst = q[1] + lit::<T>(0.5) * (hst[i] + hts[i]);
        let gtt = q[2] + htt[i];
        let det = gss * gtt - gst * gst;
        if !(gss > T::zero() && det > T::zero()) {
            return Err(GeometryError::NonPositiveDefinite(i / n, i % n));
        }
        g.push([gss, gst, gtt]);
        g_inv.push([gtt / det, -gst / det, gss / det]);
        det_g.push(det);
    }
    let max_det_deviation = det_g.iter().map(|&d| (d - T::one()).abs()).fold(T::zero(), T::max);
    let calabi_yau = max_det_deviation <= opts.cy_tol;
    let conformal = g.iter().all(|m| {
        let scale = m[0].abs().max(m[2].abs());
        m[1].abs() <= opts.conformal_tol * scale && (m[0] - m[2]).abs() <= opts.conformal_tol * scale
    });
    let conformal_factor = conformal.then(|| g.iter().map(|m| lit::<T>(0.5) * (m[0] + m[2])).collect());
    let interp = TrigInterp2::new(&lattice, &periodic_part);
    Ok(HessianGeometry {
        potential: potential.clone(),
        n,
        periods,
        g,
        g_inv,
        det_g,
        conformal_factor,
        calabi_yau,
        cy_tol: opts.cy_tol,
        max_det_deviation,
        max_asymmetry,
        lattice,
        periodic_part,
        interp,
    })
}

fn second_fd4<T: Scalar>(lattice: &Lattice<T>, f: &[T], axis: usize) -> Vec<T> {
    let n = lattice.dims()[axis];
    let stride = lattice.stride(axis);
    let h = lattice.spacing(axis);
    let inv = T::one() / (lit::<T>(12.0) * h * h);
    (0..f.len())
        .map(|idx| {
            let j = (idx / stride) % n;
            let base = idx - j * stride;
            let at = |off: isize| f[base + (j as isize + off).rem_euclid(n as isize) as usize * stride];
            (-at(2) + lit::<T>(16.0) * at(1) - lit::<T>(30.0) * at(0) + lit::<T>(16.0) * at(-1) - at(-2)) * inv
        })
        .collect()
}

impl<T: Scalar> HessianGeometry<T> {
    pub fn lattice(&self) -> &Lattice<T> {
        &self.lattice
    }

    /// Grid coordinates of a site.
    pub fn site(&self, i: usize) -> (T, T) {
        (
            T::from(i / self.n).unwrap() * self.lattice.spacing(0),
            T::from(i % self.n).unwrap() * self.lattice.spacing(1),
        )
    }

    pub fn base_area(&self) -> T {
        let cell = self.lattice.cell_volume();
        self.det_g.iter().map(|d| d.sqrt() * cell).sum()
    }

    /// Whether every metric entry is the same at all sites (to `tol`).
    pub fn is_constant(&self, tol: T) -> bool {
        let g0 = self.g[0];
        self.g.iter().all(|m| (0..3).all(|k| (m[k] - g0[k]).abs() <= tol))
    }

    fn in_domain(&self, s: T, t: T) -> bool {
        let slack = lit::<T>(1e-12);
        s >= -slack && t >= -slack && s <= self.periods[0] + slack && t <= self.periods[1] + slack
    }

    /// Potential value at an arbitrary point (periodic part by spectral interpolation).
    pub fn potential_at(&self, s: T, t: T) -> T {
        let (q, lin) = self.potential.quadratic();
        let quad = ClosedFormPotential { quadratic: q, linear: lin, modes: vec![] };
        quad.quad_value(s, t) + self.interp.eval(s, t, 0, 0)
    }

    fn gradient_at(&self, s: T, t: T) -> [T; 2] {
        let (q, lin) = self.potential.quadratic();
        [
            q[0] * s + q[1] * t + lin[0] + self.interp.eval(s, t, 1, 0),
            q[1] * s + q[2] * t + lin[1] + self.interp.eval(s, t, 0, 1),
        ]
    }

    /// Metric at an arbitrary point by spectral interpolation.
    pub fn metric_at(&self, s: T, t: T) -> [T; 3] {
        let (q, _) = self.potential.quadratic();
        [
            q[0] + self.interp.eval(s, t, 2, 0),
            q[1] + self.interp.eval(s, t, 1, 1),
            q[2] + self.interp.eval(s, t, 0, 2),
        ]
    }

    /// Periodic part of the potential on the grid.
    pub fn periodic_part(&self) -> &[T] {
        &self.periodic_part
    }

    /// Structured text summary.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str("[geometry]\n");
        out.push_str(&format!("resolution = {}\n", self.n));
        out.push_str(&format!("periods = [{}, {}]\n", to_f64(self.periods[0]), to_f64(self.periods[1])));
        out.push_str(&format!("calabi_yau = {}\n", self.calabi_yau));
        out.push_str(&format!("cy_tol = {:e}\n", to_f64(self.cy_tol)));
        out.push_str(&format!("max_det_deviation = {:e}\n", to_f64(self.max_det_deviation)));
        out.push_str(&format!("max_asymmetry = {:e}\n", to_f64(self.max_asymmetry)));
        out.push_str(&format!("conformal = {}\n", self.conformal_factor.is_some()));
        out.push_str(&format!("base_area = {}\n", to_f64(self.base_area())));
        let min_eig = self
            .g
            .iter()
            .map(|m| {
                let tr = m[0] + m[2];
                let det = m[0] * m[2] - m[1] * m[1];
                lit::<T>(0.5) * (tr - (tr * tr - lit::<T>(4.0) * det).max(T::zero()).sqrt())
            })
            .fold(T::infinity(), T::min);
        out.push_str(&format!("min_eigenvalue = {}\n", to_f64(min_eig)));
        out
    }
}

/// `(s, t) ↦ (∂h/∂s, ∂h/∂t)`.
pub fn legendre_forward<T: Scalar>(geom: &HessianGeometry<T>, p: [T; 2]) -> Result<[T; 2], GeometryError> {
    if !geom.in_domain(p[0], p[1]) {
        return Err(GeometryError::OutOfDomain(to_f64(p[0]), to_f64(p[1])));
    }
    Ok(geom.gradient_at(p[0], p[1]))
}

/// Inverts [`legendre_forward`] by Newton's method with the metric as Jacobian.
pub fn legendre_inverse<T: Scalar>(
    geom: &HessianGeometry<T>,
    dual: [T; 2],
    guess: Option<[T; 2]>,
) -> Result<[T; 2], GeometryError> {
    let mut p = guess.unwrap_or_else(|| {
        // initial guess from the quadratic part alone
        let (q, lin) = geom.potential.quadratic();
        let det = q[0] * q[2] - q[1] * q[1];
        let r = [dual[0] - lin[0], dual[1] - lin[1]];
        [(q[2] * r[0] - q[1] * r[1]) / det, (q[0] * r[1] - q[1] * r[0]) / det]
    });
    let tol = lit::<T>(64.0) * T::epsilon() * (T::one() + dual[0].abs() + dual[1].abs());
    let mut last = T::infinity();
    for _ in 0..60 {
        let f = geom.gradient_at(p[0], p[1]);
        let r = [f[0] - dual[0], f[1] - dual[1]];
        let rn = r[0].abs().max(r[1].abs());
        last = rn;
        if rn <= tol {
            return Ok(p);
        }
        let [a, b, c] = geom.metric_at(p[0], p[1]);
        let det = a * c - b * b;
        p = [p[0] - (c * r[0] - b * r[1]) / det, p[1] - (a * r[1] - b * r[0]) / det];
    }
    if last <= lit::<T>(1e3) * tol {
        Ok(p)
    } else {
        Err(GeometryError::InverseNoConvergence(to_f64(last)))
    }
}

/// Transformed potential `h̃(š, ť) = h(s, t) − (s š + t ť)` at a dual point.
pub fn legendre_dual_potential<T: Scalar>(geom: &HessianGeometry<T>, dual: [T; 2]) -> Result<T, GeometryError> {
    let p = legendre_inverse(geom, dual, None)?;
    Ok(geom.potential_at(p[0], p[1]) - (p[0] * dual[0] + p[1] * dual[1]))
}

/// Kähler data of the ε-rescaled structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonStructure<T> {
    pub epsilon: T,
    pub omega_scale: T,
    pub fiber_j_scale: T,
    pub fiber_volume: T,
    pub total_volume: T,
}

/// Fiber period; the flat fiber coordinates are normalized to unit period.
pub const FIBER_PERIOD: f64 = 1.0;

pub fn epsilon_structure<T: Scalar>(geom: &HessianGeometry<T>, epsilon: T) -> Result<EpsilonStructure<T>, GeometryError> {
    if !(epsilon > T::zero()) {
        return Err(GeometryError::InvalidEpsilon(to_f64(epsilon)));
    }
    let fiber_area = lit::<T>(FIBER_PERIOD * FIBER_PERIOD);
    let fiber_volume = epsilon * epsilon * fiber_area;
    Ok(EpsilonStructure {
        epsilon,
        omega_scale: epsilon,
        fiber_j_scale: T::one() / epsilon,
        fiber_volume,
        total_volume: geom.base_area() * fiber_volume,
    })
}

impl<T: Scalar> EpsilonStructure<T> {
    /// Degree of a bundle whose degree against the unit Kähler form is `deg_unit`.
    pub fn degree(&self, deg_unit: T) -> T {
        deg_unit * self.omega_scale
    }

    /// `c_ε` for a bundle of the given unit-scale degree and rank.
    pub fn c_epsilon(&self, deg_unit: T, rank: usize) -> T {
        crate::hym::c_epsilon(self.degree(deg_unit), self.total_volume, rank)
    }

    /// `c₀` defined by `c₀ ω = c_ε ω_ε`.
    pub fn c0(&self, deg_unit: T, rank: usize) -> T {
        self.c_epsilon(deg_unit, rank) * self.omega_scale
    }
}

/// Constant-coefficient forms of the mirror.
///
/// `omega_check` is the symplectic form `dš∧dx* + dť∧dy*` in the Darboux chart `(š, ť, x*, y*)`;
/// `im_omega` is `ds∧dy* − dt∧dx*` in the chart `(s, t, x*, y*)`. Both are antisymmetric 4×4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MirrorFrame<T> {
    pub omega_check: [[T; 4]; 4],
    pub im_omega: [[T; 4]; 4],
}

pub fn mirror_frame<T: Scalar>(_geom: &HessianGeometry<T>) -> MirrorFrame<T> {
    let z = T::zero();
    let o = T::one();
    let mut w = [[z; 4]; 4];
    w[0][2] = o;
    w[2][0] = -o;
    w[1][3] = o;
    w[3][1] = -o;
    let mut im = [[z; 4]; 4];
    im[0][3] = o;
    im[3][0] = -o;
    im[1][2] = -o;
    im[2][1] = o;
    MirrorFrame { omega_check: w, im_omega: im }
}

impl<T: Scalar> MirrorFrame<T> {
    /// `Σ_ij M_ij u_i v_j`.
    pub fn contract(form: &[[T; 4]; 4], u: &[T; 4], v: &[T; 4]) -> T {
        let mut acc = T::zero();
        for i in 0..4 {
            for j in 0..4 {
                acc = acc + form[i][j] * u[i] * v[j];
            }
        }
        acc
    }
}
