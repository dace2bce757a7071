//! Text artifacts: structured TOML reports and columnar (tab-separated) data files.

use std::fmt::Write as _;

use serde::Serialize;

use syz_core::adiabatic::{AdiabaticReport, EpsilonReport};
use syz_core::hym::{FlowResult, FlowStatus};
use syz_core::mirror::{Branch, FlatBundleResidual, FieldNorms, Multisection, Provenance, VerificationReport};

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct FormatError {
    pub line: usize,
    pub reason: String,
}

fn ferr(line: usize, reason: impl Into<String>) -> FormatError {
    FormatError { line, reason: reason.into() }
}

/// Sampled potential: whitespace-separated `s t h` rows covering the `n × n` grid once each.
/// Returns the values in row-major order (`s` outer).
pub fn parse_sampled_potential(text: &str, n: usize, periods: [f64; 2]) -> Result<Vec<f64>, FormatError> {
    let mut values = vec![f64::NAN; n * n];
    let h = [periods[0] / n as f64, periods[1] / n as f64];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| ferr(ln + 1, format!("{e}")))?;
        if cols.len() != 3 {
            return Err(ferr(ln + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let (fi, fj) = (cols[0] / h[0], cols[1] / h[1]);
        let (i, j) = (fi.round(), fj.round());
        if (fi - i).abs() > 1e-6 || (fj - j).abs() > 1e-6 || i < 0.0 || j < 0.0 || i >= n as f64 || j >= n as f64 {
            return Err(ferr(ln + 1, format!("({}, {}) is not a grid site", cols[0], cols[1])));
        }
        let k = i as usize * n + j as usize;
        if !values[k].is_nan() {
            return Err(ferr(ln + 1, "site listed twice"));
        }
        values[k] = cols[2];
    }
    if let Some(k) = values.iter().position(|v| v.is_nan()) {
        return Err(ferr(0, format!("grid site ({}, {}) missing", k / n, k % n)));
    }
    Ok(values)
}

fn status_label(s: &Option<FlowStatus<f64>>) -> &'static str {
    match s {
        None => "constructed",
        Some(FlowStatus::Converged) => "converged",
        Some(FlowStatus::NonConvergence { .. }) => "nonconvergence",
        Some(FlowStatus::BlowUp { .. }) => "blowup",
    }
}

/// `step residual functional` rows of a flow run.
pub fn flow_trace(res: &FlowResult<f64>) -> String {
    let mut out = String::from("step\tresidual\tfunctional\n");
    for (k, (r, e)) in res.trace.iter().zip(&res.energies).enumerate() {
        let _ = writeln!(out, "{k}\t{r:e}\t{e:e}");
    }
    out
}

#[derive(Serialize)]
struct FamilySummary {
    epsilons: Vec<f64>,
    assumption_b: bool,
    s1_cells: Vec<usize>,
}

#[derive(Serialize)]
struct MemberSummary {
    epsilon: f64,
    nf: usize,
    status: &'static str,
    flow_iterations: usize,
    flow_residual: f64,
    energy: f64,
    fiber_curvature_sup: f64,
    c_nu_max: f64,
    holomorphy_sup: f64,
    holomorphy_l2: f64,
    masked_sites: usize,
    weyl_monodromy: [bool; 2],
    flagged_cells: Vec<usize>,
}

#[derive(Serialize)]
struct TagEntry {
    cell: usize,
    tag: &'static str,
    exponent: f64,
}

#[derive(Serialize)]
struct FamilyReportFile {
    family: FamilySummary,
    member: Vec<MemberSummary>,
    tag: Vec<TagEntry>,
}

pub fn family_report(rep: &AdiabaticReport<f64>) -> String {
    let file = FamilyReportFile {
        family: FamilySummary { epsilons: rep.epsilons.clone(), assumption_b: rep.assumption_b, s1_cells: rep.s1_cells.clone() },
        member: rep
            .members
            .iter()
            .map(|m| MemberSummary {
                epsilon: m.epsilon,
                nf: m.connection.nf(),
                status: status_label(&m.status),
                flow_iterations: m.flow_iterations,
                flow_residual: m.flow_residual,
                energy: m.energy,
                fiber_curvature_sup: m.fiber_curvature_sup,
                c_nu_max: m.c_nu.iter().copied().fold(0.0, f64::max),
                holomorphy_sup: m.section.residual_sup,
                holomorphy_l2: m.section.residual_l2,
                masked_sites: m.section.masked(),
                weyl_monodromy: m.section.weyl_monodromy,
                flagged_cells: m.flagged.clone(),
            })
            .collect(),
        tag: rep.tags.iter().map(|(c, t, e)| TagEntry { cell: *c, tag: t.label(), exponent: *e }).collect(),
    };
    toml::to_string(&file).expect("report is serializable")
}

/// Per-site columns of one family member.
pub fn member_columns(m: &EpsilonReport<f64>, cell: usize) -> String {
    let nb = m.connection.nb();
    let mut out = String::from("s\tt\tcell\tmu\tfiber_curvature\tc_nu\ta_re\ta_im\tbranch\ttracked_re\ttracked_im\tholomorphy_re\tholomorphy_im\n");
    for b in 0..nb * nb {
        let (s, t) = m.connection.base_point(b);
        let c = syz_core::adiabatic::cell_of(nb, cell, b);
        let _ = write!(out, "{s:e}\t{t:e}\t{c}\t{:e}\t{:e}\t{:e}", m.mu[c], m.fiber_curvature_by_base[b], m.c_nu[b]);
        match &m.section.samples[b] {
            Some(p) => {
                let _ = write!(out, "\t{:e}\t{:e}\t{}\t{:e}\t{:e}", p.point.a.re, p.point.a.im, p.branch, p.tracked.re, p.tracked.im);
            }
            None => out.push_str("\tnan\tnan\t0\tnan\tnan"),
        }
        match m.section.residual[b] {
            Some(r) => {
                let _ = writeln!(out, "\t{:e}\t{:e}", r.re, r.im);
            }
            None => out.push_str("\tnan\tnan\n"),
        }
    }
    out
}

fn provenance_label(p: Provenance) -> &'static str {
    match p {
        Provenance::SolvedLimitEquation => "solved",
        Provenance::ExtractedFromConnection => "extracted",
    }
}

/// Header lines carry the grid and per-branch windings; rows are
/// `s t branch a b a_s a_t b_s b_t masked` with the full (unwrapped) values of `a, b`.
pub fn write_multisection(m: &Multisection<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# n = {}", m.n);
    let _ = writeln!(out, "# periods = {:e} {:e}", m.periods[0], m.periods[1]);
    let _ = writeln!(out, "# c0 = {:e}", m.c0);
    let _ = writeln!(out, "# provenance = {}", provenance_label(m.provenance));
    let _ = writeln!(out, "# non_reduced = {}", m.non_reduced);
    out.push_str("s\tt\tbranch\ta\tb\ta_s\ta_t\tb_s\tb_t\tmasked\n");
    let h = [m.periods[0] / m.n as f64, m.periods[1] / m.n as f64];
    for (k, br) in m.branches.iter().enumerate() {
        let (a, b) = (m.values(br, 0), m.values(br, 1));
        let w = br.winding;
        for i in 0..m.n * m.n {
            let (s, t) = ((i / m.n) as f64 * h[0], (i % m.n) as f64 * h[1]);
            let _ = writeln!(out, "{s:e}\t{t:e}\t{k}\t{:e}\t{:e}\t{}\t{}\t{}\t{}\t{}", a[i], b[i], w[0][0], w[0][1], w[1][0], w[1][1], u8::from(m.mask[i]));
        }
    }
    out
}

pub fn read_multisection(text: &str) -> Result<Multisection<f64>, FormatError> {
    let mut n = None;
    let mut periods = [1.0, 1.0];
    let mut c0 = 0.0;
    let mut provenance = Provenance::SolvedLimitEquation;
    let mut non_reduced = false;
    let mut rows: Vec<(usize, Vec<&str>)> = vec![];
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let Some((k, v)) = h.split_once('=') else { continue };
            let v = v.trim();
            let num = |x: &str| x.parse::<f64>().map_err(|e| ferr(ln + 1, format!("{e}")));
            match k.trim() {
                "n" => n = Some(v.parse::<usize>().map_err(|e| ferr(ln + 1, format!("{e}")))?),
                "periods" => {
                    let p: Vec<&str> = v.split_whitespace().collect();
                    if p.len() != 2 {
                        return Err(ferr(ln + 1, "periods needs two values"));
                    }
                    periods = [num(p[0])?, num(p[1])?];
                }
                "c0" => c0 = num(v)?,
                "provenance" => provenance = if v == "extracted" { Provenance::ExtractedFromConnection } else { Provenance::SolvedLimitEquation },
                "non_reduced" => non_reduced = v == "true",
                _ => {}
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        rows.push((ln + 1, line.split('\t').collect()));
    }
    let n = n.ok_or_else(|| ferr(0, "missing `# n =` header"))?;
    let len = n * n;
    let mut branches: Vec<Branch<f64>> = vec![];
    let mut full: Vec<(Vec<f64>, Vec<f64>)> = vec![];
    let mut mask = vec![false; len];
    let h = [periods[0] / n as f64, periods[1] / n as f64];
    for (ln, cols) in rows {
        if cols.len() != 10 {
            return Err(ferr(ln, format!("expected 10 columns, got {}", cols.len())));
        }
        let f = |k: usize| cols[k].parse::<f64>().map_err(|e| ferr(ln, format!("{e}")));
        let i_ = |k: usize| cols[k].parse::<i64>().map_err(|e| ferr(ln, format!("{e}")));
        let (s, t, br) = (f(0)?, f(1)?, cols[2].parse::<usize>().map_err(|e| ferr(ln, format!("{e}")))?);
        let (i, j) = ((s / h[0]).round() as usize, (t / h[1]).round() as usize);
        if i >= n || j >= n {
            return Err(ferr(ln, "site outside the grid"));
        }
        let site = i * n + j;
        if br == branches.len() {
            branches.push(Branch { winding: [[i_(5)?, i_(6)?], [i_(7)?, i_(8)?]], periodic_a: vec![0.0; len], periodic_b: vec![0.0; len] });
            full.push((vec![f64::NAN; len], vec![f64::NAN; len]));
        } else if br > branches.len() {
            return Err(ferr(ln, "branches must be listed in order"));
        }
        full[br].0[site] = f(3)?;
        full[br].1[site] = f(4)?;
        mask[site] |= cols[9] == "1";
    }
    let mut m = Multisection { n, periods, c0, branches, mask, non_reduced, provenance };
    for k in 0..m.branches.len() {
        if full[k].0.iter().chain(&full[k].1).any(|v| v.is_nan()) {
            return Err(ferr(0, format!("branch {k} does not cover the grid")));
        }
        let (ka, kb) = (m.slopes(&m.branches[k], 0), m.slopes(&m.branches[k], 1));
        for site in 0..len {
            let (s, t) = ((site / n) as f64 * h[0], (site % n) as f64 * h[1]);
            m.branches[k].periodic_a[site] = full[k].0[site] - ka[0] * s - ka[1] * t;
            m.branches[k].periodic_b[site] = full[k].1[site] - kb[0] * s - kb[1] * t;
        }
    }
    Ok(m)
}

#[derive(Serialize)]
struct NormsOut {
    sup: f64,
    l2: f64,
}

impl From<&FieldNorms<f64>> for NormsOut {
    fn from(n: &FieldNorms<f64>) -> Self {
        Self { sup: n.sup, l2: n.l2 }
    }
}

#[derive(Serialize)]
struct FlatOut {
    l2: f64,
    sup: f64,
    fiber_variation: f64,
    offdiagonal: f64,
}

impl From<&FlatBundleResidual<f64>> for FlatOut {
    fn from(f: &FlatBundleResidual<f64>) -> Self {
        Self { l2: f.l2, sup: f.sup, fiber_variation: f.fiber_variation, offdiagonal: f.offdiagonal }
    }
}

#[derive(Serialize)]
struct Checks {
    lagrangian: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    special: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flat_bundle: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit_match: Option<bool>,
}

#[derive(Serialize)]
struct VerificationFile {
    pass: bool,
    tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    flat_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    match_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit_distance: Option<f64>,
    lagrangian_path_gap: f64,
    checks: Checks,
    lagrangian: NormsOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    special: Option<NormsOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    special_shifted: Option<NormsOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flat_bundle: Option<FlatOut>,
}

/// Comparison of an extracted multisection against the solved one.
#[derive(Clone, Copy, Debug)]
pub struct LimitMatch {
    pub distance: f64,
    pub tol: f64,
}

impl LimitMatch {
    pub fn pass(&self) -> bool {
        self.distance <= self.tol
    }
}

/// Overall verdict: every check that was run passed.
pub fn verification_pass(v: &VerificationReport<f64>, matched: Option<LimitMatch>) -> bool {
    v.lagrangian_pass && v.special_pass.unwrap_or(true) && v.flat_bundle_pass.unwrap_or(true) && matched.map_or(true, |m| m.pass())
}

pub fn verification_report(v: &VerificationReport<f64>, flat_tol: Option<f64>, matched: Option<LimitMatch>) -> String {
    let file = VerificationFile {
        pass: verification_pass(v, matched),
        tol: v.tol,
        flat_tol,
        match_tol: matched.map(|m| m.tol),
        limit_distance: matched.map(|m| m.distance),
        lagrangian_path_gap: v.lagrangian_path_gap,
        checks: Checks { lagrangian: v.lagrangian_pass, special: v.special_pass, flat_bundle: v.flat_bundle_pass, limit_match: matched.map(|m| m.pass()) },
        lagrangian: (&v.lagrangian).into(),
        special: v.special.as_ref().map(Into::into),
        special_shifted: v.special_shifted.as_ref().map(Into::into),
        flat_bundle: v.flat_bundle.as_ref().map(Into::into),
    };
    toml::to_string(&file).expect("report is serializable")
}
