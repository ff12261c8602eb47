//! Experiment configuration: TOML schema, cross-field validation with
//! field paths, and builders for the runtime objects.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::Bound;
use crate::energy::{Coefficient, Density, EnergyParams};
use crate::grid::{build_grid, Grid};
use crate::kernel::{normalize_mass, CutoffSpec, KernelMode, KernelSpec, Profile};
use crate::{Error, Result};

/// Experiment kind, the CLI's first positional argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Kind {
    Check,
    SolveState,
    SolveControl,
    SweepS,
    SweepDelta,
    Poincare,
    OperatorProbe,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Check => "check",
            Kind::SolveState => "solve-state",
            Kind::SolveControl => "solve-control",
            Kind::SweepS => "sweep-s",
            Kind::SweepDelta => "sweep-delta",
            Kind::Poincare => "poincare",
            Kind::OperatorProbe => "operator-probe",
        }
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Kind> {
        match s {
            "check" => Ok(Kind::Check),
            "solve-state" => Ok(Kind::SolveState),
            "solve-control" => Ok(Kind::SolveControl),
            "sweep-s" => Ok(Kind::SweepS),
            "sweep-delta" => Ok(Kind::SweepDelta),
            "poincare" => Ok(Kind::Poincare),
            "operator-probe" => Ok(Kind::OperatorProbe),
            other => Err(Error::Config(format!("unknown experiment kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub h: f64,
    pub delta: f64,
}

fn default_a0() -> f64 {
    1.0
}
fn default_b0() -> f64 {
    0.5
}
fn default_profile() -> String {
    "quintic".into()
}
fn default_mode() -> String {
    "fixed".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub s: f64,
    #[serde(default = "default_a0")]
    pub a0: f64,
    #[serde(default = "default_b0")]
    pub b0: f64,
    /// `quintic` or `septic`.
    #[serde(default = "default_profile")]
    pub profile: String,
    /// `fixed` (horizon as given) or `rescaled` (unit kernel rescaled).
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub mass_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoeffConfig {
    Identity,
    Scalar { value: f64 },
    /// One factor per gradient-matrix entry, row-major `dim * dim`.
    Diagonal { values: Vec<f64> },
    /// JSON file with one scalar factor per evaluation site.
    PerNode { file: String },
}

impl Default for CoeffConfig {
    fn default() -> Self {
        CoeffConfig::Identity
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensityConfig {
    PLaplacian,
    DoubleWell { kappa: f64 },
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig::PLaplacian
    }
}

fn default_p() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub coefficient: CoeffConfig,
    #[serde(default)]
    pub density: DensityConfig,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            p: 2.0,
            coefficient: CoeffConfig::Identity,
            density: DensityConfig::PLaplacian,
        }
    }
}

/// Closed-form scalar profiles used for targets, loads and probe fields;
/// the same value fills every vector component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude * prod_a (x_a - lo_a)(hi_a - x_a)` on the box.
    Parabola {
        amplitude: f64,
    },
    /// `amplitude * prod_a sin(m_a pi (x_a - lo_a) / L_a)`.
    Sine {
        amplitude: f64,
        #[serde(default)]
        modes: Option<Vec<u32>>,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Zero
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundConfig {
    Scalar(f64),
    PerNode(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub target: FieldSpec,
    /// Control cost weight.
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub lower: Option<BoundConfig>,
    #[serde(default)]
    pub upper: Option<BoundConfig>,
    /// Extra exponents for control error norms in sweeps.
    #[serde(default)]
    pub r_list: Vec<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            target: FieldSpec::Zero,
            weight: 0.0,
            lower: None,
            upper: None,
            r_list: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    #[serde(default)]
    pub load: FieldSpec,
}

impl Default for StateConfig {
    fn default() -> Self {
        StateConfig {
            load: FieldSpec::Zero,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_state_tol")]
    pub state_tol: f64,
    #[serde(default = "default_state_max_iter")]
    pub state_max_iter: usize,
    #[serde(default = "default_control_tol")]
    pub control_tol: f64,
    #[serde(default = "default_control_max_iter")]
    pub control_max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_multistart")]
    pub multistart: usize,
    #[serde(default = "default_poincare_tol")]
    pub poincare_tol: f64,
}

fn default_state_tol() -> f64 {
    1e-10
}
fn default_state_max_iter() -> usize {
    20_000
}
fn default_control_tol() -> f64 {
    1e-6
}
fn default_control_max_iter() -> usize {
    500
}
fn default_multistart() -> usize {
    1
}
fn default_poincare_tol() -> f64 {
    1e-8
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            state_tol: default_state_tol(),
            state_max_iter: default_state_max_iter(),
            control_tol: default_control_tol(),
            control_max_iter: default_control_max_iter(),
            seed: 0,
            multistart: default_multistart(),
            poincare_tol: default_poincare_tol(),
        }
    }
}

fn default_variable() -> String {
    "s".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default)]
    pub values: Vec<f64>,
    /// `s` or `delta`; implied by the sweep kinds, consulted by the
    /// poincare and operator-probe kinds.
    #[serde(default = "default_variable")]
    pub variable: String,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            values: Vec::new(),
            variable: default_variable(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub field: FieldSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub write_fields: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional echo of the kind; must match the CLI argument when given.
    #[serde(default)]
    pub kind: Option<String>,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub state: StateConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// One validation finding, with the config path of the offending field.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn is_integral(value: f64, h: f64) -> bool {
    let ratio = value / h;
    (ratio - ratio.round()).abs() <= 1e-12 * ratio.abs().max(1.0) && ratio.round() >= 1.0
}

/// Check the configuration for the given kind without running anything;
/// an empty list means the config is runnable.
pub fn validate(cfg: &ExperimentConfig, kind: Kind) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: &str, message: String| {
        out.push(Violation {
            path: path.into(),
            message,
        })
    };

    if let Some(k) = &cfg.kind {
        if k != kind.as_str() {
            push(
                "kind",
                format!("config says `{k}` but the run was invoked as `{}`", kind.as_str()),
            );
        }
    }

    // grid block
    let dim = cfg.grid.box_min.len();
    if dim != cfg.grid.box_max.len() {
        push("grid.box_max", "box_min and box_max lengths differ".into());
    }
    if !(dim == 1 || dim == 2) {
        push("grid.box_min", format!("dimension must be 1 or 2, got {dim}"));
    }
    if !(cfg.grid.h > 0.0) {
        push("grid.h", format!("spacing must be positive, got {}", cfg.grid.h));
    } else {
        if cfg.grid.delta < cfg.grid.h {
            push(
                "grid.delta",
                format!("horizon {} is below the spacing {}", cfg.grid.delta, cfg.grid.h),
            );
        } else if !is_integral(cfg.grid.delta, cfg.grid.h) {
            push(
                "grid.delta",
                format!("delta/h = {} must be integral", cfg.grid.delta / cfg.grid.h),
            );
        }
        for a in 0..dim.min(cfg.grid.box_max.len()) {
            let ext = cfg.grid.box_max[a] - cfg.grid.box_min[a];
            if ext <= 0.0 {
                push("grid.box_max", format!("axis {a} extent {ext} is not positive"));
            } else if !is_integral(ext, cfg.grid.h) {
                push(
                    "grid.box_max",
                    format!("axis {a} extent {ext} is not an integral multiple of h"),
                );
            }
        }
    }

    // kernel block
    if !(cfg.kernel.s > 0.0 && cfg.kernel.s < 1.0) {
        push("kernel.s", format!("s must lie in (0,1), got {}", cfg.kernel.s));
    }
    if !(cfg.kernel.a0 > 0.0) {
        push("kernel.a0", "plateau amplitude must be positive".into());
    }
    if !(cfg.kernel.b0 > 0.0 && cfg.kernel.b0 < 1.0) {
        push("kernel.b0", format!("plateau fraction must lie in (0,1), got {}", cfg.kernel.b0));
    }
    if !matches!(cfg.kernel.profile.as_str(), "quintic" | "septic") {
        push(
            "kernel.profile",
            format!("unknown profile `{}` (quintic | septic)", cfg.kernel.profile),
        );
    }
    if !matches!(cfg.kernel.mode.as_str(), "fixed" | "rescaled") {
        push(
            "kernel.mode",
            format!("unknown mode `{}` (fixed | rescaled)", cfg.kernel.mode),
        );
    }
    if let Some(m) = cfg.kernel.mass_target {
        if !(m > 0.0) {
            push("kernel.mass_target", "mass target must be positive".into());
        }
    }

    // energy block
    if !(cfg.energy.p > 1.0) {
        push("energy.p", format!("p must exceed 1, got {}", cfg.energy.p));
    }
    match &cfg.energy.coefficient {
        CoeffConfig::Identity => {}
        CoeffConfig::Scalar { value } => {
            if !(*value > 0.0) {
                push("energy.coefficient.value", "scalar coefficient must be positive".into());
            }
        }
        CoeffConfig::Diagonal { values } => {
            if values.len() != dim * dim {
                push(
                    "energy.coefficient.values",
                    format!("expected {} entries (dim^2), got {}", dim * dim, values.len()),
                );
            }
            if values.iter().any(|v| *v <= 0.0) {
                push("energy.coefficient.values", "all entries must be positive".into());
            }
        }
        CoeffConfig::PerNode { file } => {
            if !Path::new(file).exists() {
                push("energy.coefficient.file", format!("file `{file}` not found"));
            }
        }
    }
    if let DensityConfig::DoubleWell { kappa } = cfg.energy.density {
        if !(kappa > 0.0) {
            push("energy.density.kappa", "well depth must be positive".into());
        }
    }

    // control block: box consistency, per node where applicable
    let node_count = control_node_count(cfg);
    let bound_len = |b: &Option<BoundConfig>| match b {
        Some(BoundConfig::PerNode(v)) => Some(v.len()),
        _ => None,
    };
    for (name, b) in [("control.lower", &cfg.control.lower), ("control.upper", &cfg.control.upper)]
    {
        if let Some(len) = bound_len(b) {
            if let Some(n) = node_count {
                if len != n {
                    push(name, format!("expected {n} per-node values, got {len}"));
                }
            }
        }
    }
    if let (Some(lo), Some(hi)) = (&cfg.control.lower, &cfg.control.upper) {
        match (lo, hi) {
            (BoundConfig::Scalar(a), BoundConfig::Scalar(b)) => {
                if a > b {
                    push("control.lower", format!("lower {a} exceeds upper {b}"));
                }
            }
            _ => {
                if let Some(n) = node_count {
                    let at = |b: &BoundConfig, i: usize| match b {
                        BoundConfig::Scalar(v) => *v,
                        BoundConfig::PerNode(v) => v.get(i).copied().unwrap_or(f64::NAN),
                    };
                    for i in 0..n {
                        let (a, b) = (at(lo, i), at(hi, i));
                        if a > b {
                            push(
                                &format!("control.lower[node {i}]"),
                                format!("lower {a} exceeds upper {b}"),
                            );
                            break; // one finding per box is enough
                        }
                    }
                }
            }
        }
    }
    for (i, r) in cfg.control.r_list.iter().enumerate() {
        if *r < 1.0 {
            push(&format!("control.r_list[{i}]"), format!("norm exponent {r} is below 1"));
        }
    }
    if cfg.control.weight < 0.0 {
        push("control.weight", "control weight must be nonnegative".into());
    }

    // kind-specific cross-field rules
    let sweep_kind = matches!(kind, Kind::SweepS | Kind::SweepDelta);
    let ladder_kind = sweep_kind || matches!(kind, Kind::Poincare | Kind::OperatorProbe);
    let variable = match kind {
        Kind::SweepS => "s",
        Kind::SweepDelta => "delta",
        _ => cfg.sweep.variable.as_str(),
    };
    if ladder_kind {
        if !matches!(cfg.sweep.variable.as_str(), "s" | "delta") {
            push("sweep.variable", format!("must be `s` or `delta`, got `{}`", cfg.sweep.variable));
        }
        if cfg.sweep.values.is_empty() {
            push("sweep.values", "ladder is empty".into());
        }
        match variable {
            "s" => {
                if cfg.kernel.a0 != 1.0 {
                    push(
                        "kernel.a0",
                        format!(
                            "s-ladders require plateau amplitude 1 so the kernel mass localizes \
                             to n as s -> 1 (got {})",
                            cfg.kernel.a0
                        ),
                    );
                }
                for w in cfg.sweep.values.windows(2) {
                    if w[1] <= w[0] {
                        push("sweep.values", "s-ladder must be strictly ascending".into());
                        break;
                    }
                }
                if cfg.sweep.values.iter().any(|v| !(0.0 < *v && *v < 1.0)) {
                    push("sweep.values", "s values must lie in (0,1)".into());
                }
            }
            "delta" => {
                if cfg.kernel.mode != "rescaled" {
                    push(
                        "kernel.mode",
                        "delta-ladders require the rescaled-from-unit kernel family".into(),
                    );
                }
                if cfg.kernel.mass_target != Some(dim as f64) {
                    push(
                        "kernel.mass_target",
                        format!("delta-ladders require total kernel mass n = {dim}"),
                    );
                }
                for w in cfg.sweep.values.windows(2) {
                    if w[1] >= w[0] {
                        push("sweep.values", "delta-ladder must be strictly descending".into());
                        break;
                    }
                }
                for v in &cfg.sweep.values {
                    if *v < 2.0 * cfg.grid.h - 1e-12 {
                        push(
                            "sweep.values",
                            format!("delta = {v} is under-resolved (floor is 2h = {})", 2.0 * cfg.grid.h),
                        );
                        break;
                    }
                    if !is_integral(*v, cfg.grid.h) {
                        push("sweep.values", format!("delta = {v} is not an integral multiple of h"));
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    if sweep_kind && !matches!(cfg.energy.density, DensityConfig::PLaplacian) {
        push(
            "energy.density",
            "minimizer-convergence sweeps are defined for the convex density only".into(),
        );
    }

    out
}

/// Number of control nodes (domain nodes of the grid), when the grid block
/// is itself consistent.
fn control_node_count(cfg: &ExperimentConfig) -> Option<usize> {
    build_grid(&cfg.grid.box_min, &cfg.grid.box_max, cfg.grid.h, cfg.grid.delta)
        .ok()
        .map(|g| g.count(crate::grid::Region::Omega))
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.grid.box_min.len()
    }

    pub fn build_grid(&self) -> Result<Grid> {
        build_grid(&self.grid.box_min, &self.grid.box_max, self.grid.h, self.grid.delta)
    }

    pub fn cutoff(&self) -> Result<CutoffSpec> {
        let profile = match self.kernel.profile.as_str() {
            "quintic" => Profile::Quintic,
            "septic" => Profile::Septic,
            other => return Err(Error::Config(format!("kernel.profile: unknown `{other}`"))),
        };
        Ok(CutoffSpec {
            a0: self.kernel.a0,
            b0: self.kernel.b0,
            profile,
        })
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let mode = match self.kernel.mode.as_str() {
            "fixed" => KernelMode::FixedHorizon,
            "rescaled" => KernelMode::RescaledFromUnit,
            other => return Err(Error::Config(format!("kernel.mode: unknown `{other}`"))),
        };
        let spec = KernelSpec {
            dim: self.dim(),
            s: self.kernel.s,
            delta: self.grid.delta,
            cutoff: self.cutoff()?,
            mode,
            mass_target: None,
        };
        match self.kernel.mass_target {
            Some(target) => normalize_mass(&spec, target),
            None => Ok(spec),
        }
    }

    pub fn energy_params(&self) -> Result<EnergyParams> {
        let dim = self.dim();
        let coefficient = match &self.energy.coefficient {
            CoeffConfig::Identity => Coefficient::Identity,
            CoeffConfig::Scalar { value } => Coefficient::Scalar(*value),
            CoeffConfig::Diagonal { values } => {
                if values.len() != dim * dim {
                    return Err(Error::Config(format!(
                        "energy.coefficient.values: expected {} entries, got {}",
                        dim * dim,
                        values.len()
                    )));
                }
                Coefficient::EntryDiagonal(values.clone())
            }
            CoeffConfig::PerNode { file } => {
                let text = std::fs::read_to_string(file)?;
                let values: Vec<f64> = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("energy.coefficient.file: {e}")))?;
                Coefficient::PerSite(values)
            }
        };
        let density = match self.energy.density {
            DensityConfig::PLaplacian => Density::PLaplacian,
            DensityConfig::DoubleWell { kappa } => Density::DoubleWell { kappa },
        };
        Ok(EnergyParams {
            p: self.energy.p,
            coefficient,
            density,
        })
    }

    /// Evaluate a field spec as a closure of position; every component of
    /// the vector value carries the same scalar profile.
    pub fn field_fn(&self, spec: &FieldSpec) -> Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync> {
        let dim = self.dim();
        let lo = self.grid.box_min.clone();
        let hi = self.grid.box_max.clone();
        match spec {
            FieldSpec::Zero => Box::new(move |_| vec![0.0; dim]),
            FieldSpec::Constant { value } => {
                let v = *value;
                Box::new(move |_| vec![v; dim])
            }
            FieldSpec::Parabola { amplitude } => {
                let a = *amplitude;
                Box::new(move |x| {
                    let mut v = a;
                    for i in 0..dim {
                        v *= (x[i] - lo[i]) * (hi[i] - x[i]);
                    }
                    vec![v; dim]
                })
            }
            FieldSpec::Sine { amplitude, modes } => {
                let a = *amplitude;
                let m: Vec<f64> = (0..dim)
                    .map(|i| modes.as_ref().and_then(|v| v.get(i)).copied().unwrap_or(1) as f64)
                    .collect();
                Box::new(move |x| {
                    let mut v = a;
                    for i in 0..dim {
                        let t = (x[i] - lo[i]) / (hi[i] - lo[i]);
                        v *= (m[i] * std::f64::consts::PI * t).sin();
                    }
                    vec![v; dim]
                })
            }
        }
    }

    pub fn bounds(&self) -> (Bound, Bound) {
        let make = |b: &Option<BoundConfig>, fallback: f64| match b {
            None => Bound::Uniform(fallback),
            Some(BoundConfig::Scalar(v)) => Bound::Uniform(*v),
            Some(BoundConfig::PerNode(v)) => {
                // stored per control node (domain nodes in index order);
                // expand to a per-grid-node table
                match self.build_grid() {
                    Ok(grid) => {
                        let mut table = vec![fallback; grid.num_nodes()];
                        for (val, node) in
                            v.iter().zip(grid.region_nodes(crate::grid::Region::Omega))
                        {
                            table[node] = *val;
                        }
                        Bound::PerNode(table)
                    }
                    Err(_) => Bound::Uniform(fallback),
                }
            }
        };
        (
            make(&self.control.lower, f64::NEG_INFINITY),
            make(&self.control.upper, f64::INFINITY),
        )
    }
}
