//! Run configuration: a versioned TOML file. Every numeric threshold used by the pipeline lives
//! here; defaults come from the option types of `syz_core`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use syz_core::adiabatic::{AdiabaticOptions, LumpScaling};
use syz_core::fiber::FiberOptions;
use syz_core::geometry::{GeometryOptions, Scheme};
use syz_core::hym::FlowOptions;
use syz_core::mirror::{ExtractOptions, LimitOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Geometry,
    Solve,
    Family,
    Mirror,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Geometry => "geometry",
            Self::Solve => "solve",
            Self::Family => "family",
            Self::Mirror => "mirror",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed of every random generator used by the run.
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "all_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub family: FamilyConfig,
    #[serde(default)]
    pub connection: SeedConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub fiber: FiberConfig,
    #[serde(default)]
    pub adiabatic: AdiabaticConfig,
    #[serde(default)]
    pub mirror: MirrorConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
}

fn all_stages() -> Vec<Stage> {
    vec![Stage::Geometry, Stage::Solve, Stage::Family, Stage::Mirror]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialKind {
    /// `½(s² + t²)`.
    Flat,
    /// `½pᵀQp + l·p`.
    Quadratic,
    /// Quadratic part plus cosine modes.
    Cosine,
    /// Columnar `s t h` file on the base grid.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub amplitude: f64,
    pub ks: i32,
    pub kt: i32,
    #[serde(default)]
    pub phase_s: f64,
    #[serde(default)]
    pub phase_t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Spectral,
    Fd4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub potential: PotentialKind,
    pub quadratic: [f64; 3],
    pub linear: [f64; 2],
    pub modes: Vec<ModeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_file: Option<PathBuf>,
    pub periods: [f64; 2],
    pub scheme: SchemeName,
    pub cy_tol: f64,
    pub conformal_tol: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let o = GeometryOptions::<f64>::default();
        Self {
            potential: PotentialKind::Flat,
            quadratic: [1.0, 0.0, 1.0],
            linear: [0.0; 2],
            modes: vec![],
            sample_file: None,
            periods: [1.0, 1.0],
            scheme: match o.scheme {
                Scheme::Spectral => SchemeName::Spectral,
                Scheme::FiniteDifference4 => SchemeName::Fd4,
            },
            cy_tol: o.cy_tol,
            conformal_tol: o.conformal_tol,
        }
    }
}

impl GeometryConfig {
    pub fn options(&self) -> GeometryOptions<f64> {
        GeometryOptions {
            cy_tol: self.cy_tol,
            conformal_tol: self.conformal_tol,
            scheme: match self.scheme {
                SchemeName::Spectral => Scheme::Spectral,
                SchemeName::Fd4 => Scheme::FiniteDifference4,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Base resolution `N_B`.
    pub nb: usize,
    /// Fiber resolution per ε; a single entry applies to every ε.
    pub nf: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nb: 16, nf: vec![16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub epsilons: Vec<f64>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { epsilons: vec![1.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedKind {
    /// Constant diagonal class `β` on every fiber.
    Flat,
    /// Abelian linear background with the given windings, plus a diagonal perturbation.
    AbelianWinding,
    /// Curvature lumps on the constant diagonal class `β`.
    AbelianLump,
    /// Constant diagonal class `β` plus a random su(2) perturbation.
    Perturbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingName {
    InverseEpsilon,
    Constant,
    SqrtEpsilon,
}

impl From<ScalingName> for LumpScaling {
    fn from(s: ScalingName) -> Self {
        match s {
            ScalingName::InverseEpsilon => LumpScaling::InverseEpsilon,
            ScalingName::Constant => LumpScaling::Constant,
            ScalingName::SqrtEpsilon => LumpScaling::SqrtEpsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LumpConfig {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
    pub scaling: ScalingName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub kind: SeedKind,
    /// Constant class `β = re + i im`.
    pub beta: [f64; 2],
    /// `[[k_xs, k_xt], [k_ys, k_yt]]`.
    pub windings: [[i64; 2]; 2],
    /// Size of the random smooth perturbation (0 disables it).
    pub amplitude: f64,
    /// Largest wave number of the random perturbation.
    pub kmax: i64,
    pub lumps: Vec<LumpConfig>,
    /// Checkpoint to start from instead of a generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { kind: SeedKind::Flat, beta: [0.8, 0.7], windings: [[1, 0], [0, -1]], amplitude: 0.0, kmax: 1, lumps: vec![], file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub alpha_init: f64,
    pub alpha_max: f64,
    pub max_backtracks: usize,
    pub blowup_factor: f64,
    pub mu: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let o = FlowOptions::<f64>::default();
        Self {
            tol: o.tol,
            max_iters: o.max_iters,
            armijo_c: o.armijo_c,
            alpha_init: o.alpha_init,
            alpha_max: o.alpha_max,
            max_backtracks: o.max_backtracks,
            blowup_factor: o.blowup_factor,
            mu: o.mu,
        }
    }
}

impl FlowConfig {
    pub fn options(&self) -> FlowOptions<f64> {
        FlowOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            armijo_c: self.armijo_c,
            alpha_init: self.alpha_init,
            alpha_max: self.alpha_max,
            max_backtracks: self.max_backtracks,
            blowup_factor: self.blowup_factor,
            mu: self.mu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberConfig {
    pub flatten_energy_max: f64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub newton_stall_tol: f64,
    pub eig_tol: f64,
    pub moduli_tol: f64,
    pub delta0: f64,
    pub hol_warn_tol: f64,
    pub det_tol: f64,
    pub holonomy_substeps: usize,
}

impl Default for FiberConfig {
    fn default() -> Self {
        let o = FiberOptions::<f64>::default();
        Self {
            flatten_energy_max: o.flatten_energy_max,
            newton_tol: o.newton_tol,
            newton_max_iters: o.newton_max_iters,
            newton_stall_tol: o.newton_stall_tol,
            eig_tol: o.eig_tol,
            moduli_tol: o.moduli_tol,
            delta0: o.delta0,
            hol_warn_tol: o.hol_warn_tol,
            det_tol: o.det_tol,
            holonomy_substeps: o.holonomy_substeps,
        }
    }
}

impl FiberConfig {
    pub fn options(&self) -> FiberOptions<f64> {
        FiberOptions {
            flatten_energy_max: self.flatten_energy_max,
            newton_tol: self.newton_tol,
            newton_max_iters: self.newton_max_iters,
            newton_stall_tol: self.newton_stall_tol,
            eig_tol: self.eig_tol,
            moduli_tol: self.moduli_tol,
            delta0: self.delta0,
            hol_warn_tol: self.hol_warn_tol,
            det_tol: self.det_tol,
            holonomy_substeps: self.holonomy_substeps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdiabaticConfig {
    pub eta: f64,
    pub delta_eta: f64,
    pub cell: usize,
    pub exponent_tol: f64,
    pub type2_floor: f64,
    pub s1_threshold: f64,
}

impl Default for AdiabaticConfig {
    fn default() -> Self {
        let o = AdiabaticOptions::<f64>::default();
        Self { eta: o.eta, delta_eta: o.delta_eta, cell: o.cell, exponent_tol: o.exponent_tol, type2_floor: o.type2_floor, s1_threshold: o.s1_threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MirrorConfig {
    /// Residual tolerance of the limit solver.
    pub limit_tol: f64,
    pub limit_max_iters: usize,
    pub branch_tol: f64,
    pub max_masked_fraction: f64,
    /// Pass threshold for the Lagrangian and special residuals.
    pub verify_tol: f64,
    /// Pass threshold for extracted versus solved multisections (sup distance).
    pub match_tol: f64,
    /// Pass threshold for the flat-bundle residual, as a multiple of the flow tolerance.
    pub flat_tol_factor: f64,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        let l = LimitOptions::<f64>::default();
        let e = ExtractOptions::<f64>::default();
        Self {
            limit_tol: l.tol,
            limit_max_iters: l.max_iters,
            branch_tol: e.branch_tol,
            max_masked_fraction: e.max_masked_fraction,
            verify_tol: 1e-3,
            match_tol: 1e-3,
            flat_tol_factor: 10.0,
        }
    }
}

impl MirrorConfig {
    pub fn limit_options(&self) -> LimitOptions<f64> {
        LimitOptions { tol: self.limit_tol, max_iters: self.limit_max_iters }
    }

    pub fn extract_options(&self) -> ExtractOptions<f64> {
        ExtractOptions { max_masked_fraction: self.max_masked_fraction, branch_tol: self.branch_tol }
    }
}

/// Parameters of the brute-force calibration runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub lemma_deltas: Vec<f64>,
    pub lemma_samples: usize,
    pub lemma_max_draws: usize,
    pub bound_samples: usize,
    pub nf: usize,
    pub wave_amp: f64,
    pub safety: f64,
    pub lower_samples: usize,
    pub lower_check: usize,
    pub lower_size: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lemma_deltas: vec![1e-2, 1e-3],
            lemma_samples: 10_000,
            lemma_max_draws: 10_000_000,
            bound_samples: 200,
            nf: 32,
            wave_amp: 0.05,
            safety: 2.0,
            lower_samples: 200,
            lower_check: 200,
            lower_size: 1e-6,
        }
    }
}

impl RunConfig {
    /// Defaults for every section.
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            stages: all_stages(),
            geometry: Default::default(),
            grid: Default::default(),
            family: Default::default(),
            connection: Default::default(),
            flow: Default::default(),
            fiber: Default::default(),
            adiabatic: Default::default(),
            mirror: Default::default(),
            calibration: Default::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a file. Relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        fix(&mut cfg.geometry.sample_file);
        fix(&mut cfg.connection.file);
        Ok(cfg)
    }

    /// Resolved configuration as TOML, without the output directory.
    pub fn echo(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("config is serializable")
    }

    /// Fiber resolution used for the `k`-th ε.
    pub fn nf_at(&self, k: usize) -> usize {
        if self.grid.nf.len() == 1 {
            self.grid.nf[0]
        } else {
            self.grid.nf[k]
        }
    }

    pub fn adiabatic_options(&self) -> AdiabaticOptions<f64> {
        let a = &self.adiabatic;
        AdiabaticOptions {
            eta: a.eta,
            delta_eta: a.delta_eta,
            cell: a.cell,
            exponent_tol: a.exponent_tol,
            type2_floor: a.type2_floor,
            s1_threshold: a.s1_threshold,
            fiber: self.fiber.options(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        self.validate_stages()?;
        let positive = [
            ("geometry.cy_tol", self.geometry.cy_tol),
            ("geometry.conformal_tol", self.geometry.conformal_tol),
            ("geometry.periods[0]", self.geometry.periods[0]),
            ("geometry.periods[1]", self.geometry.periods[1]),
            ("flow.tol", self.flow.tol),
            ("flow.armijo_c", self.flow.armijo_c),
            ("flow.alpha_init", self.flow.alpha_init),
            ("flow.alpha_max", self.flow.alpha_max),
            ("flow.blowup_factor", self.flow.blowup_factor),
            ("flow.mu", self.flow.mu),
            ("fiber.flatten_energy_max", self.fiber.flatten_energy_max),
            ("fiber.newton_tol", self.fiber.newton_tol),
            ("fiber.newton_stall_tol", self.fiber.newton_stall_tol),
            ("fiber.eig_tol", self.fiber.eig_tol),
            ("fiber.moduli_tol", self.fiber.moduli_tol),
            ("fiber.delta0", self.fiber.delta0),
            ("fiber.hol_warn_tol", self.fiber.hol_warn_tol),
            ("fiber.det_tol", self.fiber.det_tol),
            ("adiabatic.eta", self.adiabatic.eta),
            ("adiabatic.delta_eta", self.adiabatic.delta_eta),
            ("adiabatic.exponent_tol", self.adiabatic.exponent_tol),
            ("adiabatic.type2_floor", self.adiabatic.type2_floor),
            ("adiabatic.s1_threshold", self.adiabatic.s1_threshold),
            ("mirror.limit_tol", self.mirror.limit_tol),
            ("mirror.branch_tol", self.mirror.branch_tol),
            ("mirror.max_masked_fraction", self.mirror.max_masked_fraction),
            ("mirror.verify_tol", self.mirror.verify_tol),
            ("mirror.match_tol", self.mirror.match_tol),
            ("mirror.flat_tol_factor", self.mirror.flat_tol_factor),
            ("calibration.wave_amp", self.calibration.wave_amp),
            ("calibration.safety", self.calibration.safety),
            ("calibration.lower_size", self.calibration.lower_size),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive and finite, got {v}")));
            }
        }
        let counts = [
            ("flow.max_iters", self.flow.max_iters),
            ("fiber.newton_max_iters", self.fiber.newton_max_iters),
            ("fiber.holonomy_substeps", self.fiber.holonomy_substeps),
            ("mirror.limit_max_iters", self.mirror.limit_max_iters),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        for (k, d) in self.calibration.lemma_deltas.iter().enumerate() {
            if !(*d > 0.0 && *d < 1.0) {
                return Err(invalid(&format!("calibration.lemma_deltas[{k}]"), "must lie in (0, 1)"));
            }
        }
        if !self.calibration.nf.is_power_of_two() {
            return Err(invalid("calibration.nf", "must be a power of two"));
        }
        self.validate_grid()?;
        self.validate_seed()?;
        if self.geometry.potential == PotentialKind::Sampled && self.geometry.sample_file.is_none() {
            return Err(invalid("geometry.sample_file", "required for a sampled potential"));
        }
        Ok(())
    }

    fn validate_stages(&self) -> Result<(), ConfigError> {
        if self.stages.is_empty() {
            return Err(invalid("stages", "at least one stage is required"));
        }
        if self.stages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("stages", "stages must be listed once each, in pipeline order"));
        }
        let has = |s| self.stages.contains(&s);
        for (s, needs) in [(Stage::Solve, Stage::Geometry), (Stage::Family, Stage::Solve), (Stage::Mirror, Stage::Family)] {
            if has(s) && !has(needs) {
                return Err(invalid("stages", format!("stage `{}` requires `{}`", s.name(), needs.name())));
            }
        }
        Ok(())
    }

    fn validate_grid(&self) -> Result<(), ConfigError> {
        let eps = &self.family.epsilons;
        if eps.is_empty() {
            return Err(invalid("family.epsilons", "at least one value is required"));
        }
        if eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(invalid("family.epsilons", "values must lie in (0, 1]"));
        }
        if eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("family.epsilons", "values must be strictly decreasing"));
        }
        if !self.grid.nb.is_power_of_two() || self.grid.nb < 8 {
            return Err(invalid("grid.nb", format!("must be a power of two and at least 8, got {}", self.grid.nb)));
        }
        if self.grid.nf.len() != 1 && self.grid.nf.len() != eps.len() {
            return Err(invalid("grid.nf", format!("needs 1 or {} entries, got {}", eps.len(), self.grid.nf.len())));
        }
        for (k, n) in self.grid.nf.iter().enumerate() {
            if !n.is_power_of_two() || *n < 4 {
                return Err(invalid(&format!("grid.nf[{k}]"), format!("must be a power of two and at least 4, got {n}")));
            }
        }
        let cell = self.adiabatic.cell;
        if cell == 0 || self.grid.nb % cell != 0 {
            return Err(invalid("adiabatic.cell", format!("must divide grid.nb = {}", self.grid.nb)));
        }
        Ok(())
    }

    fn validate_seed(&self) -> Result<(), ConfigError> {
        let c = &self.connection;
        if !(c.amplitude >= 0.0 && c.amplitude.is_finite()) {
            return Err(invalid("connection.amplitude", "must be finite and nonnegative"));
        }
        if c.kmax < 1 {
            return Err(invalid("connection.kmax", "must be at least 1"));
        }
        if c.kind == SeedKind::AbelianLump && c.lumps.is_empty() && c.file.is_none() {
            return Err(invalid("connection.lumps", "an abelian-lump seed needs at least one lump"));
        }
        for (k, l) in c.lumps.iter().enumerate() {
            if !(l.width > 0.0) {
                return Err(invalid(&format!("connection.lumps[{k}].width"), "must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::new();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let c = RunConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(c.flow.tol, FlowOptions::<f64>::default().tol);
        assert_eq!(c.stages.len(), 4);
    }

    #[test]
    fn rejects_bad_fields() {
        let cases = [
            ("schema_version = 1\n[family]\nepsilons = [0.5, 1.0]\n", "family.epsilons"),
            ("schema_version = 1\n[family]\nepsilons = [1.0, 1.0]\n", "family.epsilons"),
            ("schema_version = 1\n[grid]\nnb = 24\n", "grid.nb"),
            ("schema_version = 1\n[grid]\nnf = [6]\n", "grid.nf[0]"),
            ("schema_version = 1\n[flow]\ntol = 0.0\n", "flow.tol"),
            ("schema_version = 1\n[fiber]\nmoduli_tol = -1.0\n", "fiber.moduli_tol"),
            ("schema_version = 2\n", "schema_version"),
            ("schema_version = 1\nstages = [\"solve\"]\n", "stages"),
        ];
        for (text, field) in cases {
            match RunConfig::from_toml(text) {
                Err(ConfigError::ConfigInvalid { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::from_toml("schema_version = 1\nbogus = 3\n"), Err(ConfigError::Parse(_))));
    }
}
