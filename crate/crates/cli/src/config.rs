use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use mfg_core::asymptotics::NlsOptions;
use mfg_core::{Grid, ModelParams, PotentialSpec, SolverConfig, SweepSettings};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Solve,
    Sweep,
    Flattest,
    Groundstate,
    Hopfcole,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Flattest => "flattest",
            Command::Groundstate => "groundstate",
            Command::Hopfcole => "hopfcole",
            Command::Verify => "verify",
        }
    }
}

/// Box for single solves (`solve`, `groundstate`, `hopfcole`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub half_width: f64,
    /// Nodes per axis.
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_width: 4.0, points: 401 }
    }
}

/// Thresholds for the assertions recorded in the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    pub competitor_trials: usize,
    /// Bound on `|λM − J̃| / |λM|`.
    pub duality_tolerance: f64,
    /// Allowed relative deviation of the fitted `λ_ε` slope.
    pub slope_tolerance: f64,
    /// Bound on max/min ratios of `λ̃_ε` and `sup m̄_ε` over a sweep.
    pub ratio_bound: f64,
    /// Bound on the ratio of concentration radii at the two smallest ε.
    pub stabilization_bound: f64,
    pub selection_distance: f64,
    pub hopf_cole_tolerance: f64,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            competitor_trials: 50,
            duality_tolerance: 1e-3,
            slope_tolerance: 0.15,
            ratio_bound: 3.0,
            stabilization_bound: 1.5,
            selection_distance: 0.2,
            hopf_cole_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundStateConfig {
    pub deltas: Vec<f64>,
    /// Confinement exponent in `δ|x|^b`.
    pub b: f64,
}

impl Default for GroundStateConfig {
    fn default() -> Self {
        Self { deltas: vec![0.5, 0.25, 0.125, 0.0625], b: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlattestConfig {
    /// Rerun with the exponents reversed (two-minimum potentials only).
    pub swap_rerun: bool,
    /// Energies closer than this count as one equilibrium.
    pub equilibrium_tol: f64,
}

impl Default for FlattestConfig {
    fn default() -> Self {
        Self { swap_rerun: true, equilibrium_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub fenchel_samples: usize,
    /// Viscosity of the subadditivity solves.
    pub epsilon: f64,
    /// `a / M` values; the extremes serve as the endpoint probes.
    pub mass_fractions: Vec<f64>,
    /// Rescaled box for the subadditivity solves.
    pub half_width: f64,
    pub points: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { fenchel_samples: 10_000, epsilon: 0.1, mass_fractions: vec![0.02, 0.05, 0.25, 0.5, 0.75, 0.95, 0.98], half_width: 100.0, points: 2001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub groundstate: GroundStateConfig,
    #[serde(default)]
    pub flattest: FlattestConfig,
    #[serde(default)]
    pub nls: NlsOptions,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty document")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line of the offending key, when it appears in the document.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let start = e.span().map_or(0, |s| s.start);
        // Errors inside tagged tables carry the span of the whole table.
        let line = unknown_field(&message).and_then(|k| key_line_after(text, k, start)).or_else(|| e.span().map(|s| line_of(text, s.start)));
        ConfigError { line, message }
    })?;
    config.validate(text)?;
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("configuration is always representable")
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

fn key_line_after(text: &str, key: &str, offset: usize) -> Option<usize> {
    let first = line_of(text, offset);
    text.lines().enumerate().skip(first - 1).find(|(_, l)| l.split_once('=').is_some_and(|(k, _)| k.trim() == key)).map(|(i, _)| i + 1)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Line of `key` inside `[section]` (`""` for the top level), falling back to
/// the section header.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

struct Checker<'a> {
    text: &'a str,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError { line: locate(self.text, section, key), message: message.into() }
    }

    fn core(&self, section: &str, keys: &[&str], r: mfg_core::Result<()>) -> Result<(), ConfigError> {
        r.map_err(|e| {
            let message = e.to_string();
            let key = keys.iter().find(|k| message.contains(*k)).copied().unwrap_or("");
            self.fail(section, key, message)
        })
    }
}

impl RunConfig {
    pub fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let c = Checker { text };
        let m = &self.model;
        if !(1..=2).contains(&m.dim) {
            return Err(c.fail("model", "dim", format!("dimension must be 1 or 2, got {}", m.dim)));
        }
        c.core("model.hamiltonian", &["c_h", "gamma"], m.hamiltonian.validate())?;
        c.core("model.coupling", &["c_f", "alpha"], m.coupling.validate())?;
        c.core("model.potential", &["coef", "minima", "exponent"], m.potential.validate(m.dim))?;
        if !(m.mass.is_finite() && m.mass > 0.0) {
            return Err(c.fail("model", "mass", format!("mass must be positive, got {}", m.mass)));
        }
        if !(m.epsilon.is_finite() && m.epsilon > 0.0) {
            return Err(c.fail("model", "epsilon", format!("epsilon must be positive, got {}", m.epsilon)));
        }
        c.core("model.coupling", &["alpha"], m.validate())?;
        c.core("solver", &["damping", "max_outer", "mollifier_width", "tol"], self.solver.validate())?;
        c.core("grid", &["half_width", "points"], Grid::new(m.dim, self.grid.half_width, self.grid.points).map(|_| ()))?;

        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(c.fail("", "epsilons", "epsilons must be a non-empty list of positive numbers"));
        }
        let s = &self.sweep;
        if !(s.half_width > 0.0 && s.h_max > 0.0 && s.rescaled_spacing > 0.0 && s.window > 0.0) {
            return Err(c.fail("sweep", "", "sweep lengths must be positive"));
        }
        if s.align == 0 {
            return Err(c.fail("sweep", "align", "align must be at least 1"));
        }
        if s.radii.is_empty() || s.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(c.fail("sweep", "radii", "radii must be a non-empty list of positive numbers"));
        }
        if !(s.eta_fraction > 0.0 && s.eta_fraction < 1.0) {
            return Err(c.fail("sweep", "eta_fraction", format!("eta_fraction must lie in (0, 1), got {}", s.eta_fraction)));
        }
        let g = &self.groundstate;
        if g.deltas.is_empty() || g.deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(c.fail("groundstate", "deltas", "deltas must be a non-empty list of positive numbers"));
        }
        c.core("groundstate", &["b"], PotentialSpec::Power { coef: 1.0, b: g.b }.validate(m.dim))?;
        if !(self.nls.relaxation > 0.0 && self.nls.relaxation <= 1.0 && self.nls.tol > 0.0) {
            return Err(c.fail("nls", "relaxation", "relaxation must lie in (0, 1] and tol must be positive"));
        }
        let v = &self.verify;
        if !(v.epsilon > 0.0) {
            return Err(c.fail("verify", "epsilon", format!("epsilon must be positive, got {}", v.epsilon)));
        }
        if v.mass_fractions.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(c.fail("verify", "mass_fractions", "mass fractions must lie in (0, 1)"));
        }
        c.core("verify", &["half_width", "points"], Grid::new(m.dim, v.half_width, v.points).map(|_| ()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.epsilon, 0.25);
        assert_eq!(c.solver.damping, 0.5);
        assert_eq!(c.epsilons, vec![0.2, 0.1, 0.05, 0.025]);
        assert_eq!(c.command, None);
    }

    #[test]
    fn subcritical_boundary_is_rejected_with_its_line() {
        let doc = "seed = 1\n\n[model.coupling]\nc_f = 1.0\nalpha = 2.0\n";
        let e = parse_config(doc).unwrap_err();
        assert!(e.message.contains("subcritical"), "{e}");
        assert_eq!(e.line, Some(5));
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let e = parse_config("[model]\nepsilon = -0.1\n").unwrap_err();
        assert!(e.message.contains("epsilon"));
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn unknown_keys_and_type_errors_are_line_anchored() {
        let e = parse_config("seed = 3\n[solver]\ndamping = 0.5\nspeed = 2\n").unwrap_err();
        assert_eq!(e.line, Some(4));
        assert!(e.message.contains("speed"), "{e}");
        let e = parse_config("[grid]\npoints = \"many\"\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = parse_config("[model.potential]\nform = \"power\"\ncoef = 1.0\nb = 2.0\nshift = 1\n").unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
    }

    #[test]
    fn round_trip_through_the_echo() {
        let doc = r#"
command = "flattest"
seed = 9
epsilons = [0.4, 0.3]

[model]
epsilon = 0.4

[model.potential]
form = "polynomial_product"
coef = 1.0
minima = [[-1.0], [1.0]]
exponents = [2.0, 4.0]

[sweep]
half_width = 2.5
h_max = 0.01
align = 10
"#;
        let c = parse_config(doc).unwrap();
        assert_eq!(c.command, Some(Command::Flattest));
        let again = parse_config(&to_toml(&c)).unwrap();
        assert_eq!(again, c);
        let d = RunConfig::default();
        assert_eq!(parse_config(&to_toml(&d)).unwrap(), d);
    }
}
