//! Scenario configuration: the TOML description of a run and the builders that
//! turn it into a metric, a flow line, a band basis and an expansion engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{Engine, MAX_ORDER};
use crate::flowline::{connecting_orbit, find_critical_points, integrate_flowline, FlowLine, TimeGrid};
use crate::metric::{MetricFamily, MetricField};
use crate::sphere::BandBasis;

/// Default scale ladder of the expansion.
pub const DEFAULT_LADDER: [f64; 6] = [0.4, 0.3, 0.22, 0.16, 0.12, 0.08];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Sphere dimension (ambient dimension m + 1).
    pub m: usize,
    pub metric: MetricConfig,
    pub flow: FlowConfig,
    pub sphere: SphereConfig,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(flatten)]
    pub family: MetricFamily,
    /// Euclidean radius of the chart domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_radius: Option<f64>,
}

/// How the flow line is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSource {
    /// Heteroclinic orbit leaving the saddle found from `seed` along the
    /// unstable branch of sign `branch`.
    ConnectingOrbit {
        seed: Vec<f64>,
        #[serde(default = "default_branch")]
        branch: f64,
        #[serde(default = "default_offset")]
        offset: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    /// Flow line through `start` at t = 0 (no Morse–Smale checks).
    StartPoint { start: Vec<f64> },
}

fn default_branch() -> f64 {
    1.0
}
fn default_offset() -> f64 {
    1e-6
}
fn default_t_max() -> f64 {
    80.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub source: FlowSource,
    /// Half width T of the window [−T, T].
    pub half_width: f64,
    pub samples: usize,
    /// Boundary margin δ_T excluded from interior norms.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereConfig {
    /// Quadrature exactness degree L_q.
    pub quadrature: usize,
    /// Harmonic degree cap L.
    pub degree_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_order")]
    pub order: usize,
    /// Hölder exponent of the reported norms.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Scale at which the Newton residual reduction is checked.
    #[serde(default = "default_refine_scale")]
    pub refine_scale: f64,
    /// Decreasing scales at which Newton refinement is run to compare the
    /// refined solutions with the partial sums.
    #[serde(default = "default_refine_ladder")]
    pub refine_ladder: Vec<f64>,
    #[serde(default = "default_refine_iterations")]
    pub refine_iterations: usize,
}

fn default_ladder() -> Vec<f64> {
    DEFAULT_LADDER.to_vec()
}
fn default_order() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.5
}
fn default_refine_scale() -> f64 {
    0.2
}
fn default_refine_ladder() -> Vec<f64> {
    vec![0.3, 0.2, 0.12]
}
fn default_refine_iterations() -> usize {
    20
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            ladder: default_ladder(),
            order: default_order(),
            alpha: default_alpha(),
            refine_scale: default_refine_scale(),
            refine_ladder: default_refine_ladder(),
            refine_iterations: default_refine_iterations(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
}

fn default_dir() -> String {
    "reports".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir() }
    }
}

/// Objects built from a scenario, owned so that engines can borrow them.
#[derive(Clone, Debug)]
pub struct Setup {
    pub metric: MetricField,
    pub line: FlowLine,
    pub basis: BandBasis,
}

impl Setup {
    pub fn engine<'a>(&'a self, scenario: &Scenario) -> Result<Engine<'a>> {
        Engine::new(&self.metric, &self.line, &self.basis, &scenario.expansion.ladder, scenario.expansion.alpha)
    }
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("{field}: {msg}"))
}

impl Scenario {
    /// Parse and validate a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Input(format!("config parse error: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Check every field against the ranges the library supports.
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.m) {
            return Err(Error::Unsupported(format!("m = {} (supported: 1, 2, 3)", self.m)));
        }
        let dim = self.m + 1;
        if let Some(r) = self.metric.domain_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(field_error("metric.domain_radius", "must be positive"));
            }
        }
        match &self.flow.source {
            FlowSource::ConnectingOrbit { seed, offset, t_max, branch } => {
                if seed.len() != dim {
                    return Err(field_error("flow.source.seed", format!("expected {dim} coordinates")));
                }
                if *branch == 0.0 || !branch.is_finite() {
                    return Err(field_error("flow.source.branch", "must be ±1"));
                }
                if !(*offset > 0.0 && *offset < 0.1) {
                    return Err(field_error("flow.source.offset", "must lie in (0, 0.1)"));
                }
                if !(*t_max > 0.0 && t_max.is_finite()) {
                    return Err(field_error("flow.source.t_max", "must be positive"));
                }
            }
            FlowSource::StartPoint { start } => {
                if start.len() != dim {
                    return Err(field_error("flow.source.start", format!("expected {dim} coordinates")));
                }
            }
        }
        let f = &self.flow;
        if !(f.half_width > 0.0 && f.half_width.is_finite()) {
            return Err(field_error("flow.half_width", "must be positive"));
        }
        if f.samples < 17 {
            return Err(field_error("flow.samples", "must be ≥ 17"));
        }
        if !(f.margin >= 0.0 && f.margin < f.half_width) {
            return Err(field_error("flow.margin", "must lie in [0, half_width)"));
        }
        let s = &self.sphere;
        if s.degree_cap < 2 {
            return Err(field_error("sphere.degree_cap", "must be ≥ 2"));
        }
        if s.quadrature < 2 * s.degree_cap || s.quadrature > 40 {
            return Err(field_error("sphere.quadrature", "must lie in [2 × degree_cap, 40]"));
        }
        let e = &self.expansion;
        validate_ladder(&e.ladder)?;
        if e.order > MAX_ORDER {
            return Err(Error::Unsupported(format!("expansion.order = {} (maximum {MAX_ORDER})", e.order)));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(field_error("expansion.alpha", "must lie in (0, 1)"));
        }
        if !(e.refine_scale > 0.0 && e.refine_scale <= 0.5) {
            return Err(field_error("expansion.refine_scale", "must lie in (0, 0.5]"));
        }
        if e.refine_ladder.is_empty()
            || e.refine_ladder.iter().any(|&s| !(s > 0.0 && s <= 0.5))
            || e.refine_ladder.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(field_error("expansion.refine_ladder", "scales must be strictly decreasing in (0, 0.5]"));
        }
        if e.refine_iterations == 0 || e.refine_iterations > 100 {
            return Err(field_error("expansion.refine_iterations", "must lie in [1, 100]"));
        }
        if self.output.dir.is_empty() {
            return Err(field_error("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn metric(&self) -> Result<MetricField> {
        MetricField::new(self.m, self.metric.family.clone(), self.metric.domain_radius)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.flow.half_width, self.flow.samples, self.flow.margin)
    }

    pub fn basis(&self) -> Result<BandBasis> {
        BandBasis::new(self.m, self.sphere.degree_cap, self.sphere.quadrature)
    }

    /// Flow line of the scenario. A connecting orbit requires a
    /// nondegenerate saddle at the seed.
    pub fn flow_line(&self, metric: &MetricField) -> Result<FlowLine> {
        let grid = self.time_grid()?;
        match &self.flow.source {
            FlowSource::ConnectingOrbit { seed, branch, offset, t_max } => {
                let (cps, _) = find_critical_points(metric, std::slice::from_ref(seed))?;
                let saddle = cps
                    .into_iter()
                    .find(|c| c.nondegenerate && c.morse_index >= 1)
                    .ok_or_else(|| Error::Input("flow.source.seed does not converge to a nondegenerate saddle".into()))?;
                connecting_orbit(metric, &saddle, *branch, *offset, *t_max, &grid)
            }
            FlowSource::StartPoint { start } => integrate_flowline(metric, start, &grid),
        }
    }

    /// Scales at which refinement runs: the refine ladder plus the check scale.
    pub fn refine_targets(&self) -> Vec<f64> {
        let e = &self.expansion;
        let mut t = e.refine_ladder.clone();
        if !t.iter().any(|v| (v - e.refine_scale).abs() <= 1e-14) {
            t.push(e.refine_scale);
            t.sort_by(|a, b| b.partial_cmp(a).unwrap());
        }
        t
    }

    pub fn setup(&self) -> Result<Setup> {
        let metric = self.metric()?;
        let line = self.flow_line(&metric)?;
        let basis = self.basis()?;
        Ok(Setup { metric, line, basis })
    }
}

/// A ladder must hold at least four strictly decreasing scales in (0, 1).
pub fn validate_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.len() < 4 {
        return Err(field_error("expansion.ladder", "needs at least 4 scales"));
    }
    if ladder.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(field_error("expansion.ladder", "scales must lie in (0, 1)"));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(field_error("expansion.ladder", "scales must be strictly decreasing"));
    }
    Ok(())
}
