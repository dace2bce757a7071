//! Connections `Ξ = A + Φ ds + Ψ dt` on the product of the base and fiber tori: curvature
//! blocks, HYM/ASD residuals, Yang-Mills energy and a preconditioned gradient flow on the
//! self-dual part.
//!
//! Storage is row-major over `[s][t][x][y]` (axes 0..4). The fields are the periodic parts;
//! an optional abelian winding background `iσ3 (k_s s + k_t t)` is added to `A_x`, `A_y`.
//! Metric: `f (ds² + dt²) + ε² (dx² + dy²)` with fiber period 1; orientation
//! `ds∧dt∧dy∧dx`.


use num_traits::Zero;
use thiserror::Error;

use crate::fiber::{fiber_lattice, FiberConnection};
use crate::mat2::Mat2;
use crate::scalar::{lit, to_f64, Scalar};
use crate::spectral::{merge_channels, split_channels, Lattice};

pub const AXIS_S: usize = 0;
pub const AXIS_T: usize = 1;
pub const AXIS_X: usize = 2;
pub const AXIS_Y: usize = 3;

/// Index pairs of the six curvature components: st, sx, sy, tx, ty, xy.
pub const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Trace-part constant `2π·deg/(vol·rank)`.
pub fn c_epsilon<T: Scalar>(deg: T, vol: T, rank: usize) -> T {
    T::TAU() * deg / (vol * T::from(rank).unwrap())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HymError {
    #[error("winding background requires diagonal periodic fields (off-diagonal {0:e})")]
    TwistedNonAbelian(f64),
    #[error("field shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("fields not anti-hermitian (defect {0:e})")]
    NotAntiHermitian(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Abelian linear background `A_x^bg = iσ3 (k_xs s + k_xt t)`, same for `A_y`, with
/// `k = 2π w / L` so that it is periodic up to lattice gauge transformations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindingBackground<T> {
    /// `[component x|y][base direction s|t]`.
    pub windings: [[i64; 2]; 2],
    pub slopes: [[T; 2]; 2],
}

impl<T: Scalar> WindingBackground<T> {
    pub fn none() -> Self {
        Self { windings: [[0; 2]; 2], slopes: [[T::zero(); 2]; 2] }
    }

    pub fn from_windings(windings: [[i64; 2]; 2], ls: T, lt: T) -> Self {
        let l = [ls, lt];
        let mut slopes = [[T::zero(); 2]; 2];
        for c in 0..2 {
            for d in 0..2 {
                slopes[c][d] = T::TAU() * T::from(windings[c][d]).unwrap() / l[d];
            }
        }
        Self { windings, slopes }
    }

    pub fn is_zero(&self) -> bool {
        self.slopes.iter().flatten().all(|k| *k == T::zero())
    }

    /// Coefficient of `iσ3` in component `c` (0 = x, 1 = y) at base point `(s, t)`.
    pub fn coefficient(&self, c: usize, s: T, t: T) -> T {
        self.slopes[c][0] * s + self.slopes[c][1] * t
    }
}

/// Derivative scheme for curvature evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DerivScheme {
    #[default]
    Spectral,
    FiniteDifference4,
}

#[derive(Clone, Debug)]
pub struct Connection4D<T: Scalar> {
    lattice: Lattice<T>,
    nb: usize,
    nf: usize,
    pub epsilon: T,
    /// Trace-part constant; the grid solver keeps it at 0.
    pub c0: T,
    /// Isothermal conformal factor on the base, `N_B²` values (`s` outer).
    pub f: Vec<T>,
    /// Periodic parts of `Φ, Ψ, A_x, A_y` (indexed by axis).
    pub fields: [Vec<Mat2<T>>; 4],
    pub background: WindingBackground<T>,
}

impl<T: Scalar> Connection4D<T> {
    /// Zero connection on a flat base (`f ≡ 1`).
    pub fn zero(nb: usize, nf: usize, ls: T, lt: T, epsilon: T) -> Self {
        let lattice = Lattice::new(&[nb, nb, nf, nf], &[ls, lt, T::one(), T::one()]);
        let len = lattice.len();
        Self {
            lattice,
            nb,
            nf,
            epsilon,
            c0: T::zero(),
            f: vec![T::one(); nb * nb],
            fields: [vec![Mat2::zero(); len], vec![Mat2::zero(); len], vec![Mat2::zero(); len], vec![Mat2::zero(); len]],
            background: WindingBackground::none(),
        }
    }

    /// Replaces the conformal factor.
    pub fn with_metric(mut self, f: Vec<T>) -> Result<Self, HymError> {
        if f.len() != self.nb * self.nb {
            return Err(HymError::Shape { expected: self.nb * self.nb, got: f.len() });
        }
        if f.iter().any(|v| !(*v > T::zero())) {
            return Err(HymError::InvalidParameter("conformal factor must be positive"));
        }
        self.f = f;
        Ok(self)
    }

    pub fn with_background(mut self, background: WindingBackground<T>) -> Result<Self, HymError> {
        self.background = background;
        self.validate()?;
        Ok(self)
    }

    /// Constant-in-base connection built from one fiber connection.
    pub fn from_fiber(nb: usize, ls: T, lt: T, epsilon: T, fiber: &FiberConnection<T>) -> Self {
        let nf = fiber.n();
        let mut c = Self::zero(nb, nf, ls, lt, epsilon);
        let fx = fiber.full_x();
        let fy = fiber.full_y();
        let per = nf * nf;
        for i in 0..c.len() {
            c.fields[AXIS_X][i] = fx[i % per];
            c.fields[AXIS_Y][i] = fy[i % per];
        }
        c
    }

    pub fn lattice(&self) -> &Lattice<T> {
        &self.lattice
    }

    pub fn nb(&self) -> usize {
        self.nb
    }

    pub fn nf(&self) -> usize {
        self.nf
    }

    pub fn ls(&self) -> T {
        self.lattice.periods()[0]
    }

    pub fn lt(&self) -> T {
        self.lattice.periods()[1]
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    /// Base index (`s` outer) of a flat grid index.
    #[inline]
    pub fn base_index(&self, idx: usize) -> usize {
        idx / (self.nf * self.nf)
    }

    /// Base coordinates of base index `b`.
    pub fn base_point(&self, b: usize) -> (T, T) {
        let hs = self.lattice.spacing(0);
        let ht = self.lattice.spacing(1);
        (T::from(b / self.nb).unwrap() * hs, T::from(b % self.nb).unwrap() * ht)
    }

    pub fn phi(&self) -> &[Mat2<T>] {
        &self.fields[AXIS_S]
    }

    pub fn psi(&self) -> &[Mat2<T>] {
        &self.fields[AXIS_T]
    }

    /// Largest off-diagonal entry over all fields.
    pub fn max_offdiag(&self) -> T {
        self.fields.iter().flatten().map(|m| m.e[1].norm().max(m.e[2].norm())).fold(T::zero(), T::max)
    }

    pub fn anti_hermitian_defect(&self) -> T {
        self.fields.iter().flatten().map(|m| m.anti_hermitian_defect()).fold(T::zero(), T::max)
    }

    pub fn validate(&self) -> Result<(), HymError> {
        for f in &self.fields {
            if f.len() != self.len() {
                return Err(HymError::Shape { expected: self.len(), got: f.len() });
            }
        }
        if !self.background.is_zero() {
            let off = self.max_offdiag();
            if off != T::zero() {
                return Err(HymError::TwistedNonAbelian(to_f64(off)));
            }
        }
        let d = self.anti_hermitian_defect();
        if d > lit(1e-10) {
            return Err(HymError::NotAntiHermitian(to_f64(d)));
        }
        Ok(())
    }

    /// Fiber connection over base index `b`, including the winding background.
    pub fn fiber_at(&self, b: usize) -> FiberConnection<T> {
        let per = self.nf * self.nf;
        let (s, t) = self.base_point(b);
        let bx = Mat2::i_sigma3(self.background.coefficient(0, s, t));
        let by = Mat2::i_sigma3(self.background.coefficient(1, s, t));
        let ax: Vec<Mat2<T>> = self.fields[AXIS_X][b * per..(b + 1) * per].iter().map(|m| *m + bx).collect();
        let ay: Vec<Mat2<T>> = self.fields[AXIS_Y][b * per..(b + 1) * per].iter().map(|m| *m + by).collect();
        FiberConnection::from_full(fiber_lattice(self.nf, T::one()), &ax, &ay)
    }

    /// `Ξ + α V` on the periodic parts.
    pub fn axpy(&self, alpha: T, dir: &[Vec<Mat2<T>>; 4]) -> Self {
        let mut out = self.clone();
        for (f, d) in out.fields.iter_mut().zip(dir) {
            for (m, v) in f.iter_mut().zip(d) {
                *m += v.scale_re(alpha);
            }
        }
        out
    }

    /// Unitary gauge `Ξ_i ↦ g⁻¹∂_i g + g⁻¹ Ξ_i g` on the periodic parts. With a winding
    /// background the gauge must be diagonal.
    pub fn gauge_apply(&self, g: &[Mat2<T>]) -> Result<Self, HymError> {
        if g.len() != self.len() {
            return Err(HymError::Shape { expected: self.len(), got: g.len() });
        }
        if !self.background.is_zero() {
            let off = g.iter().map(|m| m.e[1].norm().max(m.e[2].norm())).fold(T::zero(), T::max);
            if off != T::zero() {
                return Err(HymError::TwistedNonAbelian(to_f64(off)));
            }
        }
        let mut out = self.clone();
        for axis in 0..4 {
            let dg = self.lattice.deriv_mat(g, axis);
            out.fields[axis] = (0..self.len())
                .map(|i| {
                    let gi = g[i].dagger();
                    (gi * dg[i] + gi * self.fields[axis][i] * g[i]).anti_hermitian_part()
                })
                .collect();
        }
        Ok(out)
    }

    fn weight_f(&self, idx: usize) -> T {
        self.f[self.base_index(idx)]
    }
}

fn derivative<T: Scalar>(lat: &Lattice<T>, field: &[Mat2<T>], axis: usize, scheme: DerivScheme) -> Vec<Mat2<T>> {
    match scheme {
        DerivScheme::Spectral => lat.deriv_mat(field, axis),
        DerivScheme::FiniteDifference4 => lat.deriv_fd4_mat(field, axis),
    }
}

/// The six curvature components `F_ij = ∂_iΞ_j − ∂_jΞ_i + [Ξ_i, Ξ_j]` in the order of
/// [`PAIRS`]. The mixed blocks are `F_s· = ∂_sA − d_AΦ` and `F_t· = ∂_tA − d_AΨ`; the base
/// block is `F_st = ∂_sΨ − ∂_tΦ + [Φ, Ψ]`.
#[derive(Clone, Debug)]
pub struct CurvatureBundle<T> {
    pub components: [Vec<Mat2<T>>; 6],
}

impl<T: Scalar> CurvatureBundle<T> {
    pub fn st(&self) -> &[Mat2<T>] {
        &self.components[0]
    }
    pub fn sx(&self) -> &[Mat2<T>] {
        &self.components[1]
    }
    pub fn sy(&self) -> &[Mat2<T>] {
        &self.components[2]
    }
    pub fn tx(&self) -> &[Mat2<T>] {
        &self.components[3]
    }
    pub fn ty(&self) -> &[Mat2<T>] {
        &self.components[4]
    }
    pub fn xy(&self) -> &[Mat2<T>] {
        &self.components[5]
    }

    /// Largest pointwise norm over all components.
    pub fn sup(&self) -> T {
        self.components.iter().flatten().map(|m| m.norm()).fold(T::zero(), T::max)
    }
}

pub fn curvature_components<T: Scalar>(x: &Connection4D<T>) -> CurvatureBundle<T> {
    curvature_with(x, DerivScheme::Spectral)
}

pub fn curvature_with<T: Scalar>(x: &Connection4D<T>, scheme: DerivScheme) -> CurvatureBundle<T> {
    let lat = &x.lattice;
    let n = x.len();
    let comps: Vec<Vec<Mat2<T>>> = PAIRS
        .iter()
        .map(|&(i, j)| {
            let dij = derivative(lat, &x.fields[j], i, scheme);
            let dji = derivative(lat, &x.fields[i], j, scheme);
            // the background is abelian and only enters through its constant base slopes
            let bg = match (i, j) {
                (0 | 1, 2 | 3) => Mat2::i_sigma3(x.background.slopes[j - 2][i]),
                _ => Mat2::zero(),
            };
            (0..n).map(|p| dij[p] - dji[p] + x.fields[i][p].commutator(&x.fields[j][p]) + bg).collect()
        })
        .collect();
    let components: [Vec<Mat2<T>>; 6] = comps.try_into().unwrap_or_else(|_| unreachable!());
    CurvatureBundle { components }
}

/// Pointwise norms of a residual split into trace and traceless parts.
#[derive(Clone, Debug)]
pub struct SplitResidual<T> {
    pub field: Vec<Mat2<T>>,
    pub trace: Vec<Mat2<T>>,
    pub traceless: Vec<Mat2<T>>,
    pub sup: T,
    pub l2: T,
    pub trace_sup: T,
    pub traceless_sup: T,
}

impl<T: Scalar> SplitResidual<T> {
    fn new(field: Vec<Mat2<T>>, cell: T) -> Self {
        let trace: Vec<Mat2<T>> = field.iter().map(|m| *m - m.traceless_part()).collect();
        let traceless: Vec<Mat2<T>> = field.iter().map(|m| m.traceless_part()).collect();
        let sup = field.iter().map(|m| m.norm()).fold(T::zero(), T::max);
        let l2 = (field.iter().map(|m| m.norm_sqr()).sum::<T>() * cell).sqrt();
        let trace_sup = trace.iter().map(|m| m.norm()).fold(T::zero(), T::max);
        let traceless_sup = traceless.iter().map(|m| m.norm()).fold(T::zero(), T::max);
        Self { field, trace, traceless, sup, l2, trace_sup, traceless_sup }
    }
}

/// Residuals of the split HYM system.
#[derive(Clone, Debug)]
pub struct HymResidual<T> {
    /// `∂_tΦ − ∂_sΨ − [Φ,Ψ] − w ε⁻² ⋆F_A` with `⋆F_A = −F_xy` (fiber orientation `dy∧dx`).
    pub fiber_balance: SplitResidual<T>,
    /// `dx` and `dy` coefficients of `(∂_tA − d_AΨ) + ⋆(∂_sA − d_AΦ) − i c₀ dy`.
    pub mix: [SplitResidual<T>; 2],
}

fn balance_and_mix<T: Scalar>(x: &Connection4D<T>, weight: &dyn Fn(usize) -> T) -> HymResidual<T> {
    let f = curvature_components(x);
    let cell = x.lattice.cell_volume();
    let inv_e2 = T::one() / (x.epsilon * x.epsilon);
    let ic0 = Mat2::i_identity(x.c0);
    let n = x.len();
    let balance: Vec<Mat2<T>> = (0..n).map(|p| -f.st()[p] + f.xy()[p].scale_re(weight(p) * inv_e2)).collect();
    let mx: Vec<Mat2<T>> = (0..n).map(|p| f.tx()[p] - f.sy()[p]).collect();
    let my: Vec<Mat2<T>> = (0..n).map(|p| f.ty()[p] + f.sx()[p] - ic0).collect();
    HymResidual { fiber_balance: SplitResidual::new(balance, cell), mix: [SplitResidual::new(mx, cell), SplitResidual::new(my, cell)] }
}

/// HYM residuals in the base coordinates of the Hessian metric. `det_g` (per base site)
/// supplies the `(det g)^{-1/2}` factor; `None` means Calabi-Yau.
pub fn hym_residual<T: Scalar>(x: &Connection4D<T>, det_g: Option<&[T]>) -> HymResidual<T> {
    match det_g {
        None => balance_and_mix(x, &|_| T::one()),
        Some(d) => balance_and_mix(x, &|p| T::one() / d[x.base_index(p)].sqrt()),
    }
}

/// `(H1, H2)` in isothermal base coordinates with conformal factor `x.f`: `H1` as `dx`, `dy`
/// coefficients and `H2 = ∂_tΦ − ∂_sΨ − [Φ,Ψ] − f ε⁻² ⋆F_A`.
pub fn asd_residual_isothermal<T: Scalar>(x: &Connection4D<T>) -> ([Vec<Mat2<T>>; 2], Vec<Mat2<T>>) {
    let r = balance_and_mix(x, &|p| x.weight_f(p));
    let [mx, my] = r.mix;
    ([mx.field, my.field], r.fiber_balance.field)
}

/// Yang-Mills energy `‖F‖²` in the ε-metric, split by block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YmEnergy<T> {
    pub total: T,
    /// Mixed blocks, weight 1.
    pub mixed_term: T,
    /// `F_xy` block, weight `f ε⁻²`.
    pub fiber_term: T,
    /// `F_st` block, weight `ε² f⁻¹`.
    pub base_term: T,
}

pub fn ym_energy<T: Scalar>(x: &Connection4D<T>) -> YmEnergy<T> {
    let f = curvature_components(x);
    ym_energy_from(x, &f)
}

pub fn ym_energy_from<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>) -> YmEnergy<T> {
    let cell = x.lattice.cell_volume();
    let e2 = x.epsilon * x.epsilon;
    let mut mixed = T::zero();
    let mut fiber = T::zero();
    let mut base = T::zero();
    for p in 0..x.len() {
        let w = x.weight_f(p);
        base = base + f.st()[p].norm_sqr() * e2 / w;
        fiber = fiber + f.xy()[p].norm_sqr() * w / e2;
        mixed = mixed + f.sx()[p].norm_sqr() + f.sy()[p].norm_sqr() + f.tx()[p].norm_sqr() + f.ty()[p].norm_sqr();
    }
    let (mixed, fiber, base) = (mixed * cell, fiber * cell, base * cell);
    YmEnergy { total: mixed + fiber + base, mixed_term: mixed, fiber_term: fiber, base_term: base }
}

/// Energy density per site (same weights as [`ym_energy`], without the cell volume).
pub fn energy_density<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>) -> Vec<T> {
    let e2 = x.epsilon * x.epsilon;
    (0..x.len())
        .map(|p| {
            let w = x.weight_f(p);
            f.st()[p].norm_sqr() * e2 / w
                + f.xy()[p].norm_sqr() * w / e2
                + f.sx()[p].norm_sqr()
                + f.sy()[p].norm_sqr()
                + f.tx()[p].norm_sqr()
                + f.ty()[p].norm_sqr()
        })
        .collect()
}

/// Rescaling to unit fiber size: base lengths `L/ε`, `Φ, Ψ` and the winding slopes multiplied
/// by `ε`, `ε' = 1`. The 4D energy is conformally invariant, so [`ym_energy`] is unchanged.
pub fn rescale_to_unit<T: Scalar>(x: &Connection4D<T>) -> Connection4D<T> {
    let e = x.epsilon;
    let lattice = Lattice::new(&[x.nb, x.nb, x.nf, x.nf], &[x.ls() / e, x.lt() / e, T::one(), T::one()]);
    let mut out = x.clone();
    out.lattice = lattice;
    out.epsilon = T::one();
    out.c0 = x.c0 * e;
    for axis in [AXIS_S, AXIS_T] {
        for m in out.fields[axis].iter_mut() {
            *m = m.scale_re(e);
        }
    }
    for row in out.background.slopes.iter_mut() {
        for k in row.iter_mut() {
            *k = *k * e;
        }
    }
    out
}

/// `Q1 = F_st − f ε⁻² F_xy`, `Q2 = F_sy − F_tx`, `Q3 = F_sx + F_ty − i c₀`: the self-dual part
/// up to frame factors.
fn self_dual_parts<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>) -> [Vec<Mat2<T>>; 3] {
    let inv_e2 = T::one() / (x.epsilon * x.epsilon);
    let ic0 = Mat2::i_identity(x.c0);
    let n = x.len();
    [
        (0..n).map(|p| f.st()[p] - f.xy()[p].scale_re(x.weight_f(p) * inv_e2)).collect(),
        (0..n).map(|p| f.sy()[p] - f.tx()[p]).collect(),
        (0..n).map(|p| f.sx()[p] + f.ty()[p] - ic0).collect(),
    ]
}

/// Flow functional `E = ½∫[(ε²/f)|Q1|² + |Q2|² + |Q3|²] ds dt dx dy` on the grid.
pub fn flow_functional<T: Scalar>(x: &Connection4D<T>) -> T {
    let f = curvature_components(x);
    functional_from(x, &self_dual_parts(x, &f))
}

fn functional_from<T: Scalar>(x: &Connection4D<T>, q: &[Vec<Mat2<T>>; 3]) -> T {
    let e2 = x.epsilon * x.epsilon;
    let mut acc = T::zero();
    for p in 0..x.len() {
        acc = acc + q[0][p].norm_sqr() * e2 / x.weight_f(p) + q[1][p].norm_sqr() + q[2][p].norm_sqr();
    }
    acc * x.lattice.cell_volume() * lit(0.5)
}

/// `L²` norm of the self-dual residual, `sqrt(2E)`.
pub fn self_dual_norm<T: Scalar>(x: &Connection4D<T>) -> T {
    (flow_functional(x) * lit(2.0)).sqrt()
}

/// Exact gradient of the discrete flow functional with respect to the periodic fields (in the
/// real inner product `Σ Re tr X†Y`), together with the functional value.
pub fn flow_gradient<T: Scalar>(x: &Connection4D<T>) -> (T, [Vec<Mat2<T>>; 4]) {
    let f = curvature_components(x);
    let q = self_dual_parts(x, &f);
    let energy = functional_from(x, &q);
    let e2 = x.epsilon * x.epsilon;
    let n = x.len();
    let cell = x.lattice.cell_volume();
    let [q1, q2, q3] = q;
    let g_st: Vec<Mat2<T>> = (0..n).map(|p| q1[p].scale_re(e2 / x.weight_f(p))).collect();
    let g_xy: Vec<Mat2<T>> = q1.iter().map(|m| -*m).collect();
    let g_tx: Vec<Mat2<T>> = q2.iter().map(|m| -*m).collect();
    // G_ij for i < j in PAIRS order
    let g: [&[Mat2<T>]; 6] = [&g_st, &q3, &q2, &g_tx, &q3, &g_xy];
    let mut grad: [Vec<Mat2<T>>; 4] = [vec![Mat2::zero(); n], vec![Mat2::zero(); n], vec![Mat2::zero(); n], vec![Mat2::zero(); n]];
    for (k, &(i, j)) in PAIRS.iter().enumerate() {
        let gij = g[k];
        // grad_j -= ∂_i G_ij + [Ξ_i, G_ij]; grad_i -= ∂_j G_ji + [Ξ_j, G_ji] with G_ji = −G_ij
        let di = x.lattice.deriv_mat(gij, i);
        let dj = x.lattice.deriv_mat(gij, j);
        for p in 0..n {
            grad[j][p] -= di[p] + x.fields[i][p].commutator(&gij[p]);
            grad[i][p] += dj[p] + x.fields[j][p].commutator(&gij[p]);
        }
    }
    for gf in grad.iter_mut() {
        for m in gf.iter_mut() {
            *m = m.scale_re(cell);
        }
    }
    (energy, grad)
}

/// Real inner product of two field tuples.
pub fn field_inner<T: Scalar>(a: &[Vec<Mat2<T>>; 4], b: &[Vec<Mat2<T>>; 4]) -> T {
    let mut acc = T::zero();
    for (fa, fb) in a.iter().zip(b) {
        for (x, y) in fa.iter().zip(fb) {
            acc = acc + x.inner(y);
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions<T> {
    pub tol: T,
    pub max_iters: usize,
    pub armijo_c: T,
    pub alpha_init: T,
    pub alpha_max: T,
    pub max_backtracks: usize,
    /// Stop with `BlowUp` when `sup|F|` exceeds this multiple of its initial value.
    pub blowup_factor: T,
    /// Zeroth-order shift of the preconditioner.
    pub mu: T,
}

impl<T: Scalar> Default for FlowOptions<T> {
    fn default() -> Self {
        Self {
            tol: lit(1e-8),
            max_iters: 500,
            // the preconditioner is close to the Hessian, so steps near 2 only reflect; a strict
            // sufficient-decrease constant keeps the accepted step near the minimizer
            armijo_c: lit(0.3),
            alpha_init: T::one(),
            alpha_max: lit(8.0),
            max_backtracks: 40,
            blowup_factor: lit(1e3),
            mu: T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowStatus<T> {
    Converged,
    NonConvergence { last_residual: T },
    /// Curvature concentration at finite ε; kept as a diagnostic, not a failure.
    BlowUp { sup_curvature: T },
}

#[derive(Clone, Debug)]
pub struct FlowResult<T: Scalar> {
    pub connection: Connection4D<T>,
    /// Self-dual residual norm after every accepted step, starting with the initial value.
    pub trace: Vec<T>,
    /// Flow functional values along the same steps.
    pub energies: Vec<T>,
    pub iterations: usize,
    pub status: FlowStatus<T>,
}

impl<T: Scalar> FlowResult<T> {
    pub fn converged(&self) -> bool {
        self.status == FlowStatus::Converged
    }

    pub fn final_residual(&self) -> T {
        *self.trace.last().unwrap()
    }

    /// Whether the recorded functional never increased.
    pub fn is_monotone(&self) -> bool {
        self.energies.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Applies the inverse of the ε-weighted Laplacian-type preconditioner in Fourier space.
fn precondition<T: Scalar>(x: &Connection4D<T>, grad: &[Vec<Mat2<T>>; 4], mu: T) -> [Vec<Mat2<T>>; 4] {
    let lat = &x.lattice;
    let e2 = x.epsilon * x.epsilon;
    let fbar = x.f.iter().copied().sum::<T>() / T::from(x.f.len()).unwrap();
    let n = x.len();
    let dims = lat.dims().to_vec();
    let k2: Vec<[T; 2]> = (0..n)
        .map(|idx| {
            let mut rem = idx;
            let mut c = [0usize; 4];
            for a in (0..4).rev() {
                c[a] = rem % dims[a];
                rem /= dims[a];
            }
            let k: Vec<T> = (0..4).map(|a| lat.wavenumber(a, c[a])).collect();
            [k[0] * k[0] + k[1] * k[1], k[2] * k[2] + k[3] * k[3]]
        })
        .collect();
    let cell = lat.cell_volume();
    let mut out: [Vec<Mat2<T>>; 4] = Default::default();
    for (axis, g) in grad.iter().enumerate() {
        let mut ch = split_channels(g);
        for c in ch.iter_mut() {
            if c.iter().all(|z| z.is_zero()) {
                continue;
            }
            lat.fft_forward(c);
            for (v, k) in c.iter_mut().zip(&k2) {
                let sym = if axis >= AXIS_X { k[0] + fbar / e2 * k[1] } else { e2 / fbar * k[0] + k[1] };
                *v = *v / ((sym + mu) * cell);
            }
            lat.fft_inverse(c);
        }
        out[axis] = merge_channels(&ch).into_iter().map(|m| m.anti_hermitian_part()).collect();
    }
    out
}

/// Preconditioned gradient descent with Armijo backtracking on [`flow_functional`].
pub fn flow_solve<T: Scalar>(x0: &Connection4D<T>, opts: &FlowOptions<T>) -> Result<FlowResult<T>, HymError> {
    x0.validate()?;
    if !(opts.tol > T::zero()) {
        return Err(HymError::InvalidParameter("tol must be positive"));
    }
    let mut x = x0.clone();
    let (mut energy, mut grad) = flow_gradient(&x);
    let residual = |e: T| (e * lit(2.0)).sqrt();
    let mut trace = vec![residual(energy)];
    let mut energies = vec![energy];
    let sup0 = curvature_components(&x).sup();
    let guard = opts.blowup_factor * sup0.max(lit(1e-12));
    let mut alpha = opts.alpha_init;
    let mut iterations = 0;
    let status = loop {
        if residual(energy) <= opts.tol {
            break FlowStatus::Converged;
        }
        if iterations >= opts.max_iters {
            break FlowStatus::NonConvergence { last_residual: residual(energy) };
        }
        let mut dir = precondition(&x, &grad, opts.mu);
        for f in dir.iter_mut() {
            for m in f.iter_mut() {
                *m = -*m;
            }
        }
        let slope = field_inner(&grad, &dir);
        if !(slope < T::zero()) {
            break FlowStatus::NonConvergence { last_residual: residual(energy) };
        }
        let mut trial_alpha = (alpha * lit(2.0)).min(opts.alpha_max);
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = x.axpy(trial_alpha, &dir);
            let e = flow_functional(&trial);
            if e.is_finite() && e <= energy + opts.armijo_c * trial_alpha * slope {
                accepted = Some(trial);
                break;
            }
            trial_alpha = trial_alpha * lit(0.5);
        }
        let Some(next) = accepted else {
            break FlowStatus::NonConvergence { last_residual: residual(energy) };
        };
        alpha = trial_alpha;
        x = next;
        iterations += 1;
        let (e, g) = flow_gradient(&x);
        energy = e;
        grad = g;
        trace.push(residual(energy));
        energies.push(energy);
        let sup = curvature_components(&x).sup();
        if sup > guard {
            break FlowStatus::BlowUp { sup_curvature: sup };
        }
    };
    Ok(FlowResult { connection: x, trace, energies, iterations, status })
}

/// Pointwise `sup` over the fiber of `‖F_xy‖` for every base site.
pub fn fiber_curvature_sup_by_base<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>) -> Vec<T> {
    let per = x.nf * x.nf;
    (0..x.nb * x.nb).map(|b| f.xy()[b * per..(b + 1) * per].iter().map(|m| m.norm()).fold(T::zero(), T::max)).collect()
}

/// Complex-valued trace-free check helper: the `iσ3` coefficient of a diagonal matrix.
#[inline]
pub fn sigma3_coefficient<T: Scalar>(m: &Mat2<T>) -> T {
    (m.e[0].im - m.e[3].im) * lit(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use crate::sampling::{random_smooth_field, AlgebraKind};
    use rand::SeedableRng;

    type Rng = rand::rngs::StdRng;

    fn random_connection(nb: usize, nf: usize, amp: f64, kind: AlgebraKind, seed: u64) -> Connection4D<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut x = Connection4D::zero(nb, nf, 1.0, 1.0, 0.5);
        for a in 0..4 {
            x.fields[a] = random_smooth_field(&mut rng, &[nb, nb, nf, nf], &[0, 1, 2, 3], 1, amp, kind);
        }
        x
    }

    #[test]
    fn c_epsilon_values() {
        assert_eq!(c_epsilon(0.0, 2.0, 2), 0.0);
        assert!((c_epsilon(1.0, 1.0, 2) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn constant_diagonal_has_no_curvature() {
        let fib = FiberConnection::diagonal(fiber_lattice(4, 1.0), Complex::new(0.3, 0.2));
        let x = Connection4D::from_fiber(4, 1.0, 1.0, 0.5, &fib);
        assert_eq!(curvature_components(&x).sup(), 0.0);
        let r = flow_solve(&x, &FlowOptions::default()).unwrap();
        assert!(r.converged() && r.iterations == 0);
    }

    #[test]
    fn abelian_commutators_vanish() {
        let x = random_connection(4, 4, 0.5, AlgebraKind::Diagonal, 1);
        let f = curvature_components(&x);
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            let d = x.lattice.deriv_mat(&x.fields[j], i);
            let e = x.lattice.deriv_mat(&x.fields[i], j);
            for p in 0..x.len() {
                assert_eq!(f.components[k][p], d[p] - e[p]);
            }
        }
    }

    #[test]
    fn linear_winding_is_self_dual() {
        let x = Connection4D::<f64>::zero(8, 4, 1.0, 1.0, 0.25)
            .with_background(WindingBackground::from_windings([[1, 0], [0, -1]], 1.0, 1.0))
            .unwrap();
        assert!(self_dual_norm(&x) < 1e-14);
        let e = ym_energy(&x);
        assert!((e.mixed_term - 2.0 * 2.0 * (std::f64::consts::TAU).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = random_connection(4, 4, 0.6, AlgebraKind::Su2, 2);
        let (_, g) = flow_gradient(&x);
        let mut rng = Rng::seed_from_u64(9);
        let mut v: [Vec<Mat2<f64>>; 4] = Default::default();
        for a in 0..4 {
            v[a] = random_smooth_field(&mut rng, &[4, 4, 4, 4], &[0, 1, 2, 3], 1, 1.0, AlgebraKind::Su2);
        }
        let h = 1e-5;
        let fd = (flow_functional(&x.axpy(h, &v)) - flow_functional(&x.axpy(-h, &v))) / (2.0 * h);
        let an = field_inner(&g, &v);
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-12), "{fd} {an}");
    }

    #[test]
    fn rescaling_preserves_energy() {
        let mut x = random_connection(4, 4, 0.4, AlgebraKind::Su2, 3);
        x.epsilon = 0.25;
        let y = rescale_to_unit(&x);
        let (a, b) = (ym_energy(&x).total, ym_energy(&y).total);
        assert!((a - b).abs() < 1e-10 * a, "{a} {b}");
    }

    #[test]
    fn twisted_background_is_rejected() {
        let x = random_connection(4, 4, 0.4, AlgebraKind::Su2, 4);
        assert!(matches!(x.with_background(WindingBackground::from_windings([[1, 0], [0, 0]], 1.0, 1.0)), Err(HymError::TwistedNonAbelian(_))));
    }

    #[test]
    fn splitting_recombines() {
        let x = random_connection(4, 4, 0.5, AlgebraKind::Su2, 5);
        let r = hym_residual(&x, None);
        for s in std::iter::once(&r.fiber_balance).chain(r.mix.iter()) {
            for p in 0..x.len() {
                assert!((s.trace[p] + s.traceless[p] - s.field[p]).norm() < 1e-15);
            }
        }
    }
}
