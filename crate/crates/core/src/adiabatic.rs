//! The shrinking-fiber family: per-ε solves, base measures, the singular set, bubble tags and the
//! section of fiberwise flat classes.

use num_complex::Complex;
use rayon::prelude::*;
use thiserror::Error;

use crate::fiber::{diagonal_components, fiber_curvature, flatten_to_t, FiberOptions, ModuliPoint};
use crate::hym::{
    curvature_components, energy_density, fiber_curvature_sup_by_base, flow_solve, ym_energy, Connection4D, CurvatureBundle,
    FlowOptions, FlowStatus, HymError, AXIS_S, AXIS_T, AXIS_X, AXIS_Y,
};
use crate::mat2::Mat2;
use crate::scalar::{lit, to_f64, Scalar};
use crate::spectral::resample_mat2d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdiabaticError {
    #[error("need at least two values of epsilon, got {0}")]
    InsufficientFamily(usize),
    #[error("epsilon list must be strictly decreasing in (0, 1]")]
    InvalidEpsilons,
    #[error("cell size {cell} does not divide base resolution {nb}")]
    BadPartition { nb: usize, cell: usize },
    #[error("decay fit unreliable (R² = {0:.3})")]
    FitUnreliable(f64),
    #[error("no samples inside the ball")]
    EmptyBall,
    #[error(transparent)]
    Hym(#[from] HymError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdiabaticOptions<T> {
    /// Radius of the neighborhood of singular classes.
    pub eta: T,
    /// Energy threshold for the singular set.
    pub delta_eta: T,
    /// Side of a measure cell in base sites.
    pub cell: usize,
    /// Tolerance on fitted exponents for bubble tags.
    pub exponent_tol: T,
    /// Lower bound on `ε c_ν` for a fiber-scale tag.
    pub type2_floor: T,
    /// Consecutive sections differing by more than this flag a cell as a sphere-bubble candidate.
    pub s1_threshold: T,
    pub fiber: FiberOptions<T>,
}

impl<T: Scalar> Default for AdiabaticOptions<T> {
    fn default() -> Self {
        Self {
            eta: lit(0.2),
            delta_eta: lit(1e-2),
            cell: 4,
            exponent_tol: lit(0.25),
            type2_floor: lit(1e-2),
            s1_threshold: lit(0.5),
            fiber: FiberOptions::default(),
        }
    }
}

fn check_partition(nb: usize, cell: usize) -> Result<usize, AdiabaticError> {
    if cell == 0 || nb % cell != 0 {
        return Err(AdiabaticError::BadPartition { nb, cell });
    }
    Ok(nb / cell)
}

/// Cell of a base site under a block partition with `cell` sites per side.
pub fn cell_of(nb: usize, cell: usize, b: usize) -> usize {
    let per_side = nb / cell;
    (b / nb / cell) * per_side + (b % nb) / cell
}

/// Energy of `Ξ` over each block of the base (fiber integrated), same weights as `ym_energy`.
pub fn base_measure<T: Scalar>(x: &Connection4D<T>, cell: usize) -> Result<Vec<T>, AdiabaticError> {
    let f = curvature_components(x);
    base_measure_from(x, &f, cell)
}

pub fn base_measure_from<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>, cell: usize) -> Result<Vec<T>, AdiabaticError> {
    let nb = x.nb();
    let side = check_partition(nb, cell)?;
    let dens = energy_density(x, f);
    let per = x.nf() * x.nf();
    let vol = x.lattice().cell_volume();
    let mut mu = vec![T::zero(); side * side];
    for b in 0..nb * nb {
        let s: T = dens[b * per..(b + 1) * per].iter().copied().sum();
        let c = cell_of(nb, cell, b);
        mu[c] = mu[c] + s * vol;
    }
    Ok(mu)
}

/// `c_ν` per base site: `ε⁻¹ sup_fiber ‖F_xy‖ + sup_fiber (|F_tx|² + |F_ty|²)^{1/2}`.
pub fn c_nu<T: Scalar>(x: &Connection4D<T>, f: &CurvatureBundle<T>) -> Vec<T> {
    let per = x.nf() * x.nf();
    let fib = fiber_curvature_sup_by_base(x, f);
    (0..x.nb() * x.nb())
        .map(|b| {
            let mix = (b * per..(b + 1) * per).map(|p| (f.tx()[p].norm_sqr() + f.ty()[p].norm_sqr()).sqrt()).fold(T::zero(), T::max);
            fib[b] / x.epsilon + mix
        })
        .collect()
}

/// Largest site value in each cell.
pub fn cell_max<T: Scalar>(field: &[T], nb: usize, cell: usize) -> Vec<T> {
    let side = nb / cell;
    let mut out = vec![T::zero(); side * side];
    for (b, v) in field.iter().enumerate() {
        let c = cell_of(nb, cell, b);
        out[c] = out[c].max(*v);
    }
    out
}

/// One extracted fiber class.
#[derive(Clone, Debug, PartialEq)]
pub struct SectionSample<T> {
    pub base_point: (T, T),
    pub point: ModuliPoint<T>,
    /// `+1` or `−1`: which Weyl branch the tracked parameter uses.
    pub branch: i8,
    /// Parameter continued along the base (universal-cover representative).
    pub tracked: Complex<T>,
    /// Normalized distance to the singular classes, in `[0, 1]`.
    pub confidence: T,
}

#[derive(Clone, Debug)]
pub struct Section<T> {
    pub nb: usize,
    pub periods: [T; 2],
    /// `None` where flattening failed.
    pub samples: Vec<Option<SectionSample<T>>>,
    /// `½(∂_s − i∂_t)β` by fourth-order differences; `None` where the stencil meets a masked site.
    pub residual: Vec<Option<Complex<T>>>,
    pub residual_sup: T,
    pub residual_l2: T,
    /// Tracking around a base cycle came back with the opposite Weyl sign.
    pub weyl_monodromy: [bool; 2],
}

impl<T: Scalar> Section<T> {
    pub fn masked(&self) -> usize {
        self.samples.iter().filter(|s| s.is_none()).count()
    }

    pub fn tracked(&self) -> Vec<Option<Complex<T>>> {
        self.samples.iter().map(|s| s.as_ref().map(|v| v.tracked)).collect()
    }
}

/// Representative `±a + π(m + in)` nearest to `reference`, with its sign.
pub fn nearest_representative<T: Scalar>(a: Complex<T>, reference: Complex<T>) -> (Complex<T>, i8) {
    let pi = T::PI();
    let mut best = (a, 1i8, T::infinity());
    for sign in [1i8, -1] {
        let v = if sign > 0 { a } else { -a };
        let d = reference - v;
        let shifted = v + Complex::new((d.re / pi).round() * pi, (d.im / pi).round() * pi);
        let dist = (shifted - reference).norm();
        if dist < best.2 {
            best = (shifted, sign, dist);
        }
    }
    (best.0, best.1)
}

/// Flattens every fiber (in parallel), then continues the class parameter along the base in
/// row-major order and evaluates the holomorphicity residual.
pub fn phi_extract<T: Scalar>(x: &Connection4D<T>, opts: &FiberOptions<T>) -> Section<T> {
    let nb = x.nb();
    let points: Vec<Option<ModuliPoint<T>>> =
        (0..nb * nb).into_par_iter().map(|b| flatten_to_t(&x.fiber_at(b), None, opts).ok().map(|fl| fl.point)).collect();
    let mut samples: Vec<Option<SectionSample<T>>> = vec![None; nb * nb];
    let mut last: Option<Complex<T>> = None;
    let two = lit::<T>(2.0);
    for i in 0..nb {
        for j in 0..nb {
            let b = i * nb + j;
            let Some(p) = points[b].clone() else { continue };
            let at = |ii: usize, jj: usize| samples[ii * nb + jj].as_ref().map(|s: &SectionSample<T>| s.tracked);
            // linear prediction from the two previous samples on the same line, so that paths
            // through a Weyl-fixed class continue straight instead of reflecting
            let reference = if j > 0 {
                // the first step of a row borrows the slope of the row above
                let (p2, shift) = if j > 1 {
                    (at(i, j - 2), None)
                } else if i > 0 {
                    (None, at(i - 1, 1).zip(at(i - 1, 0)).map(|(u, v)| u - v))
                } else {
                    (None, None)
                };
                match (at(i, j - 1), p2) {
                    (Some(p1), Some(p2)) => Some(p1 * two - p2),
                    (Some(p1), None) => Some(shift.map_or(p1, |d| p1 + d)),
                    _ => (0..j).rev().find_map(|k| at(i, k)),
                }
            } else {
                match (if i > 0 { at(i - 1, 0) } else { None }, if i > 1 { at(i - 2, 0) } else { None }) {
                    (Some(p1), Some(p2)) => Some(p1 * two - p2),
                    (Some(p1), None) => Some(p1),
                    _ => (0..i).rev().find_map(|k| at(k, 0)),
                }
            }
            .or(last);
            let (tracked, branch) = match reference {
                Some(r) => nearest_representative(p.a, r),
                None => (p.a, 1),
            };
            last = Some(tracked);
            let d = ModuliPoint::distance_to_singular(p.a);
            let confidence = (d / T::FRAC_PI_4()).min(T::one());
            samples[b] = Some(SectionSample { base_point: x.base_point(b), point: p, branch, tracked, confidence });
        }
    }
    let tracked: Vec<Option<Complex<T>>> = samples.iter().map(|s| s.as_ref().map(|v| v.tracked)).collect();
    let line = |axis: usize, k: usize| -> Vec<Option<Complex<T>>> {
        (0..nb).map(|m| if axis == 0 { tracked[m * nb + k] } else { tracked[k * nb + m] }).collect()
    };
    let ext_s: Vec<Option<Vec<Complex<T>>>> = (0..nb).map(|j| extend_line(&line(0, j))).collect();
    let ext_t: Vec<Option<Vec<Complex<T>>>> = (0..nb).map(|i| extend_line(&line(1, i))).collect();
    let flips = |ext: &Option<Vec<Complex<T>>>, l: &[Option<Complex<T>>]| -> bool {
        match (ext, l[0]) {
            (Some(e), Some(f)) => nearest_representative(f, e[nb + 2]).1 < 0,
            _ => false,
        }
    };
    let weyl_monodromy = [flips(&ext_s[0], &line(0, 0)), flips(&ext_t[0], &line(1, 0))];
    let hs = x.ls() / T::from(nb).unwrap();
    let ht = x.lt() / T::from(nb).unwrap();
    let mut residual = vec![None; nb * nb];
    let (mut sup, mut sq) = (T::zero(), T::zero());
    let w = [lit::<T>(1.0), lit(-8.0), lit(8.0), lit(-1.0)];
    let offs = [-2i64, -1, 1, 2];
    for i in 0..nb {
        for j in 0..nb {
            let b = i * nb + j;
            if tracked[b].is_none() {
                continue;
            }
            // extended lines are indexed with an offset of 2
            let stencil = |ext: &Option<Vec<Complex<T>>>, m: usize| -> Option<Complex<T>> {
                let e = ext.as_ref()?;
                let mut acc = Complex::new(T::zero(), T::zero());
                for (k, &o) in offs.iter().enumerate() {
                    acc = acc + e[(m as i64 + 2 + o) as usize] * w[k];
                }
                Some(acc)
            };
            let (Some(ds), Some(dt)) = (stencil(&ext_s[j], i), stencil(&ext_t[i], j)) else { continue };
            let twelve = lit::<T>(12.0);
            let ds = ds / (twelve * hs);
            let dt = dt / (twelve * ht);
            let r = (ds - dt * Complex::new(T::zero(), T::one())) * lit::<T>(0.5);
            sup = sup.max(r.norm());
            sq = sq + r.norm_sqr();
            residual[b] = Some(r);
        }
    }
    Section { nb, periods: [x.ls(), x.lt()], samples, residual, residual_sup: sup, residual_l2: (sq * hs * ht).sqrt(), weyl_monodromy }
}

/// A closed line of tracked values padded with two representatives on each side, continued
/// across the periodic wrap by linear extrapolation. `None` if any sample is masked.
fn extend_line<T: Scalar>(line: &[Option<Complex<T>>]) -> Option<Vec<Complex<T>>> {
    let v: Vec<Complex<T>> = line.iter().copied().collect::<Option<Vec<_>>>()?;
    let n = v.len();
    if n < 3 {
        return None;
    }
    let two = lit::<T>(2.0);
    let mut out = vec![Complex::new(T::zero(), T::zero()); n + 4];
    out[2..n + 2].copy_from_slice(&v);
    for k in 0..2 {
        let idx = n + 2 + k;
        let pred = out[idx - 1] * two - out[idx - 2];
        out[idx] = nearest_representative(v[k], pred).0;
    }
    for k in 0..2 {
        let idx = 1 - k;
        let pred = out[idx + 1] * two - out[idx + 2];
        out[idx] = nearest_representative(v[n - 1 - k], pred).0;
    }
    Some(out)
}

/// Cells with `μ > δ_η`, together with cells holding a sample within `η` of a singular class.
pub fn singular_set<T: Scalar>(mu: &[T], section: Option<&Section<T>>, cell: usize, opts: &AdiabaticOptions<T>) -> Vec<usize> {
    let mut flagged: Vec<bool> = mu.iter().map(|m| *m > opts.delta_eta).collect();
    if let Some(sec) = section {
        for (b, s) in sec.samples.iter().enumerate() {
            if let Some(s) = s {
                if ModuliPoint::distance_to_singular(s.point.a) < opts.eta {
                    flagged[cell_of(sec.nb, cell, b)] = true;
                }
            }
        }
    }
    flagged.iter().enumerate().filter(|(_, f)| **f).map(|(c, _)| c).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BubbleType {
    /// `ε c_ν` unbounded.
    Type1,
    /// `ε c_ν` bounded away from zero.
    Type2,
    /// `c_ν` unbounded while `ε c_ν → 0`.
    Type3,
    None,
}

impl BubbleType {
    pub fn label(self) -> &'static str {
        match self {
            Self::Type1 => "type1",
            Self::Type2 => "type2",
            Self::Type3 => "type3",
            Self::None => "none",
        }
    }
}

/// Least-squares slope and intercept of `y` against `x`, with `R²`.
pub fn linear_fit<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let n = T::from(x.len()).unwrap();
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let sxy: T = x.iter().zip(y).map(|(a, b)| (*a - mx) * (*b - my)).sum();
    let sxx: T = x.iter().map(|a| (*a - mx) * (*a - mx)).sum();
    let syy: T = y.iter().map(|b| (*b - my) * (*b - my)).sum();
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    let r2 = if syy > T::zero() && sxx > T::zero() { sxy * sxy / (sxx * syy) } else { T::one() };
    (slope, my - slope * mx, r2)
}

/// Exponent `p` in `ε c ~ ε^p` and the resulting tag.
pub fn classify_cell<T: Scalar>(epsilons: &[T], c: &[T], opts: &AdiabaticOptions<T>) -> (BubbleType, T) {
    let tiny = T::min_positive_value().sqrt();
    if c.iter().zip(epsilons).any(|(v, e)| *v * *e <= tiny) {
        return (BubbleType::None, T::zero());
    }
    let lx: Vec<T> = epsilons.iter().map(|e| e.ln()).collect();
    let ly: Vec<T> = c.iter().zip(epsilons).map(|(v, e)| (*v * *e).ln()).collect();
    let (p, _, _) = linear_fit(&lx, &ly);
    let last = *c.last().unwrap() * *epsilons.last().unwrap();
    let tag = if p < -opts.exponent_tol {
        BubbleType::Type1
    } else if p.abs() <= opts.exponent_tol && last >= opts.type2_floor {
        BubbleType::Type2
    } else if p > opts.exponent_tol && p - T::one() < -opts.exponent_tol {
        BubbleType::Type3
    } else {
        BubbleType::None
    };
    (tag, p)
}

/// Tags for the given cells from per-ε cellwise `c_ν` maxima.
pub fn bubble_classify<T: Scalar>(
    epsilons: &[T],
    c_cells: &[Vec<T>],
    flagged: &[usize],
    opts: &AdiabaticOptions<T>,
) -> Result<Vec<(usize, BubbleType, T)>, AdiabaticError> {
    if epsilons.len() < 2 || c_cells.len() != epsilons.len() {
        return Err(AdiabaticError::InsufficientFamily(epsilons.len().min(c_cells.len())));
    }
    Ok(flagged
        .iter()
        .map(|&cell| {
            let series: Vec<T> = c_cells.iter().map(|c| c[cell]).collect();
            let (tag, p) = classify_cell(epsilons, &series, opts);
            (cell, tag, p)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit<T> {
    /// `dev ~ exp(−rate · d)` with `d` the distance to the ball boundary.
    pub rate: T,
    pub r2: T,
    pub samples: usize,
    /// Deviation vanished identically.
    pub exact: bool,
}

/// Deviation of each fiber from constant diagonal form, measured gauge-invariantly as
/// `sup_fiber ‖F_xy‖`.
pub fn fiber_deviation<T: Scalar>(x: &Connection4D<T>) -> Vec<T> {
    (0..x.nb() * x.nb()).into_par_iter().map(|b| fiber_curvature(&x.fiber_at(b)).iter().map(|m| m.norm()).fold(T::zero(), T::max)).collect()
}

/// Fits `log` of the fiber deviation against the distance to the boundary of the base ball
/// `|p − center| < radius` (periodic distance).
pub fn decay_diagnostic<T: Scalar>(x: &Connection4D<T>, center: (T, T), radius: T) -> Result<DecayFit<T>, AdiabaticError> {
    decay_fit(&fiber_deviation(x), x.nb(), [x.ls(), x.lt()], center, radius)
}

pub fn decay_fit<T: Scalar>(dev: &[T], nb: usize, periods: [T; 2], center: (T, T), radius: T) -> Result<DecayFit<T>, AdiabaticError> {
    let wrap = |d: T, l: T| {
        let r = crate::scalar::rem_euclid(d, l);
        r.min(l - r)
    };
    let mut xs = vec![];
    let mut ys = vec![];
    let mut any_nonzero = false;
    let floor = T::epsilon();
    for (b, v) in dev.iter().enumerate() {
        let s = T::from(b / nb).unwrap() * periods[0] / T::from(nb).unwrap();
        let t = T::from(b % nb).unwrap() * periods[1] / T::from(nb).unwrap();
        let (ds, dt) = (wrap(s - center.0, periods[0]), wrap(t - center.1, periods[1]));
        let r = (ds * ds + dt * dt).sqrt();
        if r >= radius {
            continue;
        }
        if *v > floor {
            any_nonzero = true;
            xs.push(radius - r);
            ys.push(v.ln());
        }
    }
    if !any_nonzero {
        if dev.is_empty() {
            return Err(AdiabaticError::EmptyBall);
        }
        return Ok(DecayFit { rate: T::zero(), r2: T::one(), samples: 0, exact: true });
    }
    if xs.len() < 3 {
        return Err(AdiabaticError::FitUnreliable(0.0));
    }
    let (slope, _, r2) = linear_fit(&xs, &ys);
    if r2 < lit(0.8) {
        return Err(AdiabaticError::FitUnreliable(to_f64(r2)));
    }
    Ok(DecayFit { rate: -slope, r2, samples: xs.len(), exact: false })
}

/// Diagnostics of one solved member of the family.
#[derive(Clone, Debug)]
pub struct EpsilonReport<T: Scalar> {
    pub epsilon: T,
    pub connection: Connection4D<T>,
    pub status: Option<FlowStatus<T>>,
    pub flow_iterations: usize,
    pub flow_residual: T,
    /// `sup` over the base of `sup_fiber ‖F_xy‖`.
    pub fiber_curvature_sup: T,
    pub fiber_curvature_by_base: Vec<T>,
    pub c_nu: Vec<T>,
    pub c_nu_cells: Vec<T>,
    pub mu: Vec<T>,
    pub energy: T,
    pub section: Section<T>,
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AdiabaticReport<T: Scalar> {
    pub epsilons: Vec<T>,
    pub members: Vec<EpsilonReport<T>>,
    /// Tags of the cells flagged at the last ε (empty with fewer than two ε).
    pub tags: Vec<(usize, BubbleType, T)>,
    /// Cells where consecutive sections jump by more than the threshold.
    pub s1_cells: Vec<usize>,
    /// Section is not constant at a singular class; `false` means diagnostics only.
    pub assumption_b: bool,
}

/// Diagnostics for a connection that is already solved (or constructed).
pub fn diagnose<T: Scalar>(x: Connection4D<T>, status: Option<FlowStatus<T>>, iterations: usize, residual: T, opts: &AdiabaticOptions<T>) -> Result<EpsilonReport<T>, AdiabaticError> {
    let f = curvature_components(&x);
    let mu = base_measure_from(&x, &f, opts.cell)?;
    let by_base = fiber_curvature_sup_by_base(&x, &f);
    let cn = c_nu(&x, &f);
    let cells = cell_max(&cn, x.nb(), opts.cell);
    let section = phi_extract(&x, &opts.fiber);
    let flagged = singular_set(&mu, Some(&section), opts.cell, opts);
    let energy = crate::hym::ym_energy_from(&x, &f).total;
    Ok(EpsilonReport {
        epsilon: x.epsilon,
        fiber_curvature_sup: by_base.iter().copied().fold(T::zero(), T::max),
        fiber_curvature_by_base: by_base,
        c_nu: cn,
        c_nu_cells: cells,
        mu,
        energy,
        section,
        flagged,
        status,
        flow_iterations: iterations,
        flow_residual: residual,
        connection: x,
    })
}

/// Cross-ε part of the report.
pub fn assemble_report<T: Scalar>(members: Vec<EpsilonReport<T>>, opts: &AdiabaticOptions<T>) -> AdiabaticReport<T> {
    let epsilons: Vec<T> = members.iter().map(|m| m.epsilon).collect();
    let tags = match members.last() {
        Some(last) if members.len() >= 2 => {
            let c: Vec<Vec<T>> = members.iter().map(|m| m.c_nu_cells.clone()).collect();
            bubble_classify(&epsilons, &c, &last.flagged, opts).unwrap_or_default()
        }
        _ => vec![],
    };
    let mut s1 = vec![];
    for w in members.windows(2) {
        let (a, b) = (&w[0].section, &w[1].section);
        if a.nb != b.nb {
            continue;
        }
        for (i, (sa, sb)) in a.samples.iter().zip(&b.samples).enumerate() {
            if let (Some(sa), Some(sb)) = (sa, sb) {
                if ModuliPoint::class_distance(sa.point.a, sb.point.a) > opts.s1_threshold {
                    let c = cell_of(a.nb, opts.cell, i);
                    if !s1.contains(&c) {
                        s1.push(c);
                    }
                }
            }
        }
    }
    s1.sort_unstable();
    let assumption_b = members.last().map(|m| assumption_b_holds(&m.section, opts)).unwrap_or(true);
    AdiabaticReport { epsilons, members, tags, s1_cells: s1, assumption_b }
}

/// False when the section is constant (to `moduli_tol`) at a class within `η` of a singular one.
pub fn assumption_b_holds<T: Scalar>(sec: &Section<T>, opts: &AdiabaticOptions<T>) -> bool {
    let pts: Vec<Complex<T>> = sec.samples.iter().flatten().map(|s| s.point.a).collect();
    let Some(first) = pts.first() else { return true };
    let constant = pts.iter().all(|p| ModuliPoint::class_distance(*p, *first) <= opts.fiber.moduli_tol);
    !(constant && ModuliPoint::distance_to_singular(*first) < opts.eta)
}

/// One member of the family: ε and the fiber resolution used for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyStage<T> {
    pub epsilon: T,
    pub nf: usize,
}

/// Copy of `x` at a new ε and fiber resolution, fiber parts resampled spectrally.
pub fn restage<T: Scalar>(x: &Connection4D<T>, stage: &FamilyStage<T>) -> Result<Connection4D<T>, HymError> {
    let nb = x.nb();
    let mut y = Connection4D::zero(nb, stage.nf, x.ls(), x.lt(), stage.epsilon).with_metric(x.f.clone())?;
    y.c0 = x.c0;
    y.background = x.background;
    let (po, pn) = (x.nf() * x.nf(), stage.nf * stage.nf);
    for axis in [AXIS_S, AXIS_T, AXIS_X, AXIS_Y] {
        for b in 0..nb * nb {
            let part = resample_mat2d(&x.fields[axis][b * po..(b + 1) * po], x.nf(), stage.nf);
            y.fields[axis][b * pn..(b + 1) * pn].copy_from_slice(&part);
        }
    }
    Ok(y)
}

/// Solves each stage in order, warm-starting from the previous solution. Non-convergence is
/// recorded per member and does not stop the family.
pub fn run_family<T: Scalar>(
    seed: &Connection4D<T>,
    stages: &[FamilyStage<T>],
    flow: &FlowOptions<T>,
    opts: &AdiabaticOptions<T>,
) -> Result<AdiabaticReport<T>, AdiabaticError> {
    if stages.is_empty() || stages.iter().any(|s| !(s.epsilon > T::zero() && s.epsilon <= T::one())) || stages.windows(2).any(|w| w[1].epsilon >= w[0].epsilon) {
        return Err(AdiabaticError::InvalidEpsilons);
    }
    let mut members = Vec::with_capacity(stages.len());
    let mut current = seed.clone();
    for stage in stages {
        let start = restage(&current, stage)?;
        let res = flow_solve(&start, flow)?;
        let residual = res.final_residual();
        let it = res.iterations;
        current = res.connection.clone();
        members.push(diagnose(res.connection, Some(res.status), it, residual, opts)?);
    }
    Ok(assemble_report(members, opts))
}

/// How the amplitude of a constructed curvature lump scales with ε.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LumpScaling {
    /// `∝ ε⁻¹`: `ε c_ν` grows like `ε⁻¹`.
    InverseEpsilon,
    /// ε-independent: `ε c_ν` stays of order one.
    Constant,
    /// `∝ ε^{1/2}`: `c_ν` grows while `ε c_ν → 0`.
    SqrtEpsilon,
}

impl LumpScaling {
    pub fn amplitude<T: Scalar>(self, base: T, epsilon: T) -> T {
        match self {
            Self::InverseEpsilon => base / epsilon,
            Self::Constant => base,
            Self::SqrtEpsilon => base * epsilon.sqrt(),
        }
    }
}

/// Localized curvature lump on a constant diagonal background:
/// `A_y += amp · G(s, t) · sin(2πx)/(2π) · iσ3` with a periodic Gaussian `G` of the given width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lump<T> {
    pub center: (T, T),
    pub width: T,
    pub amplitude: T,
    pub scaling: LumpScaling,
}

pub fn lump_connection<T: Scalar>(nb: usize, nf: usize, periods: [T; 2], epsilon: T, background: Complex<T>, lumps: &[Lump<T>]) -> Connection4D<T> {
    let mut x = Connection4D::zero(nb, nf, periods[0], periods[1], epsilon);
    let (bx, by) = diagonal_components(background);
    let per = nf * nf;
    let wrap = |d: T, l: T| {
        let r = crate::scalar::rem_euclid(d + l * lit(0.5), l) - l * lit(0.5);
        r
    };
    for b in 0..nb * nb {
        let (s, t) = x.base_point(b);
        let mut g = vec![];
        for l in lumps {
            let (ds, dt) = (wrap(s - l.center.0, periods[0]), wrap(t - l.center.1, periods[1]));
            let gauss = (-(ds * ds + dt * dt) / (lit::<T>(2.0) * l.width * l.width)).exp();
            g.push(l.scaling.amplitude(l.amplitude, epsilon) * gauss);
        }
        for k in 0..per {
            let xf = T::from(k / nf).unwrap() / T::from(nf).unwrap();
            let shape = (T::TAU() * xf).sin() / T::TAU();
            let amp: T = g.iter().copied().sum::<T>() * shape;
            x.fields[AXIS_X][b * per + k] = bx;
            x.fields[AXIS_Y][b * per + k] = by + Mat2::i_sigma3(amp);
        }
    }
    x
}

/// `δ_η` for a lump corpus: a tenth of the smallest lump energy.
pub fn corpus_threshold<T: Scalar>(lump_energies: &[T]) -> T {
    lump_energies.iter().copied().filter(|e| *e > T::zero()).fold(T::infinity(), T::min) * lit(0.1)
}

/// Energy of a single lump at ε.
pub fn lump_energy<T: Scalar>(nb: usize, nf: usize, periods: [T; 2], epsilon: T, background: Complex<T>, lump: &Lump<T>) -> T {
    ym_energy(&lump_connection(nb, nf, periods, epsilon, background, std::slice::from_ref(lump))).total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_representative_uses_lattice_and_sign() {
        let a = Complex::new(0.3, 0.2);
        let (r, s) = nearest_representative(a, Complex::new(std::f64::consts::PI - 0.25, -0.2));
        assert_eq!(s, -1);
        assert!((r - Complex::new(std::f64::consts::PI - 0.3, -0.2)).norm() < 1e-14);
    }

    #[test]
    fn cell_indexing() {
        assert_eq!(cell_of(8, 4, 0), 0);
        assert_eq!(cell_of(8, 4, 4), 1);
        assert_eq!(cell_of(8, 4, 4 * 8), 2);
        assert_eq!(cell_of(8, 4, 63), 3);
    }

    #[test]
    fn fit_recovers_slope() {
        let x: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, -1.0, -3.0, -5.0];
        let (p, c, r2) = linear_fit(&x, &y);
        assert!((p + 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn classify_signatures() {
        let opts = AdiabaticOptions::<f64>::default();
        let eps = [0.5, 0.25, 0.125];
        let c1: Vec<f64> = eps.iter().map(|e| 1.0 / (e * e)).collect();
        let c2: Vec<f64> = eps.iter().map(|e| 1.0 / e).collect();
        let c3: Vec<f64> = eps.iter().map(|e| e.powf(-0.5)).collect();
        assert_eq!(classify_cell(&eps, &c1, &opts).0, BubbleType::Type1);
        assert_eq!(classify_cell(&eps, &c2, &opts).0, BubbleType::Type2);
        assert_eq!(classify_cell(&eps, &c3, &opts).0, BubbleType::Type3);
        assert_eq!(classify_cell(&eps, &[0.0, 0.0, 0.0], &opts).0, BubbleType::None);
        assert!(matches!(bubble_classify(&eps[..1], &[vec![1.0]], &[0], &opts), Err(AdiabaticError::InsufficientFamily(1))));
    }
}
