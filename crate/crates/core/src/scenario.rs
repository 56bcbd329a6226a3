//! Declarative experiment description read from TOML.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::domain::{MovingDomain, TargetField};
use crate::error::{Error, Result};
use crate::fem::DomainSpec;
use crate::magnetics::{ControlBounds, ControlMode, Controls, Curve, Dipole, DipoleConfig, Point};
use crate::objective::ObjectiveConfig;
use crate::optimize::{BfgsMemory, OptimizerSettings};
use crate::transport::{BoundaryCondition, MassKind, Scheme, SolverSettings, StabilityPolicy, TransportSettings};

/// Scenarios shipped with the library, addressable by name.
pub const BUNDLED: [(&str, &str); 3] = [
    (
        "example1-direction",
        include_str!("../scenarios/example1-direction.toml"),
    ),
    ("example2-position", include_str!("../scenarios/example2-position.toml")),
    ("obstacle", include_str!("../scenarios/obstacle.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// A number written either as a float or as a small expression in `pi`,
/// such as `"3pi/2"`, `"-pi/90"` or `"2pi - pi/90"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            I(i64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(v) => Ok(Num(v)),
            Raw::I(v) => Ok(Num(v as f64)),
            Raw::S(s) => parse_expr(&s).map(Num).map_err(serde::de::Error::custom),
        }
    }
}

/// Evaluate a sum of terms `[coef][*]pi[/den]` or plain numbers.
pub fn parse_expr(s: &str) -> std::result::Result<f64, String> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err("empty number".into());
    }
    let mut total = 0.0;
    let mut rest = compact.as_str();
    let mut first = true;
    while !rest.is_empty() {
        let sign = match rest.as_bytes()[0] {
            b'+' => {
                rest = &rest[1..];
                1.0
            }
            b'-' => {
                rest = &rest[1..];
                -1.0
            }
            _ if first => 1.0,
            _ => return Err(format!("cannot parse `{s}`")),
        };
        first = false;
        // a term ends at the next +/- that is not an exponent sign
        let bytes = rest.as_bytes();
        let mut end = rest.len();
        for i in 1..bytes.len() {
            if (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E') {
                end = i;
                break;
            }
        }
        total += sign * parse_term(&rest[..end]).ok_or_else(|| format!("cannot parse `{s}`"))?;
        rest = &rest[end..];
    }
    Ok(total)
}

fn parse_term(t: &str) -> Option<f64> {
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a, Some(b.parse::<f64>().ok()?)),
        None => (t, None),
    };
    let value = if let Some(coef) = num.strip_suffix("pi") {
        let coef = coef.strip_suffix('*').unwrap_or(coef);
        let c = if coef.is_empty() {
            1.0
        } else {
            coef.parse::<f64>().ok()?
        };
        c * std::f64::consts::PI
    } else {
        num.parse::<f64>().ok()?
    };
    Some(match den {
        Some(d) if d != 0.0 => value / d,
        Some(_) => return None,
        None => value,
    })
}

fn pt(v: [Num; 2]) -> Point {
    Point::new(v[0].0, v[1].0)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    final_time: Num,
    steps: usize,
    control: RawControl,
    dipole: Vec<RawDipole>,
    target: RawTarget,
    domain: RawDomain,
    #[serde(default)]
    objective: RawObjective,
    #[serde(default)]
    optimizer: RawOptimizer,
    pde: Option<RawPde>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    mode: ControlMode,
    #[serde(default = "one")]
    region_radius: Num,
}

fn one() -> Num {
    Num(1.0)
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawCurve {
    Circle {
        #[serde(default = "origin")]
        center: [Num; 2],
        radius: Num,
    },
    Segment {
        start: [Num; 2],
        end: [Num; 2],
    },
}

fn origin() -> [Num; 2] {
    [Num(0.0), Num(0.0)]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDipole {
    position: Option<[Num; 2]>,
    curve: Option<RawCurve>,
    intensity: Num,
    intensity_bounds: [Num; 2],
    /// Initial angle (direction mode) or fixed angle (position mode).
    direction: Num,
    direction_bounds: Option<[Num; 2]>,
    parameter: Option<Num>,
    parameter_bounds: Option<[Num; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawTarget {
    Constant { value: [Num; 2] },
    Piecewise { breaks: Vec<Num>, values: Vec<[Num; 2]> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    radius: Num,
    waypoints: Vec<[Num; 3]>,
    scale: Option<Vec<[Num; 2]>>,
    #[serde(default = "default_refinement")]
    quadrature_refinement: u32,
}

fn default_refinement() -> u32 {
    4
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    #[serde(default)]
    lambda: Option<Num>,
    #[serde(default)]
    eta: Option<Num>,
    #[serde(default)]
    beta: Option<Num>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    grad_tol: Option<f64>,
    max_iters: Option<usize>,
    memory: Option<String>,
    memory_pairs: Option<usize>,
    init: Option<String>,
    init_tol: Option<f64>,
    horizon_stride: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawDomainSpec {
    Disk {
        #[serde(default = "origin")]
        center: [Num; 2],
        radius: Num,
    },
    Rectangle {
        min: [Num; 2],
        max: [Num; 2],
    },
    RotatedRect {
        #[serde(default = "origin")]
        center: [Num; 2],
        width: Num,
        height: Num,
        angle: Num,
    },
    SquareMinusSlot {
        half_width: Num,
        slot_min: [Num; 2],
        slot_max: [Num; 2],
    },
}

impl From<RawDomainSpec> for DomainSpec {
    fn from(r: RawDomainSpec) -> Self {
        let a = |v: [Num; 2]| [v[0].0, v[1].0];
        match r {
            RawDomainSpec::Disk { center, radius } => DomainSpec::Disk {
                center: a(center),
                radius: radius.0,
            },
            RawDomainSpec::Rectangle { min, max } => DomainSpec::Rectangle {
                min: a(min),
                max: a(max),
            },
            RawDomainSpec::RotatedRect {
                center,
                width,
                height,
                angle,
            } => DomainSpec::RotatedRect {
                center: a(center),
                width: width.0,
                height: height.0,
                angle: angle.0,
            },
            RawDomainSpec::SquareMinusSlot {
                half_width,
                slot_min,
                slot_max,
            } => DomainSpec::SquareMinusSlot {
                half_width: half_width.0,
                slot_min: a(slot_min),
                slot_max: a(slot_max),
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    center: [Num; 2],
    sigma2: Num,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPde {
    domain: RawDomainSpec,
    mesh_size: Option<f64>,
    mesh_file: Option<PathBuf>,
    epsilon: Num,
    dt: toml::Value,
    bc: BoundaryCondition,
    scheme: Scheme,
    #[serde(default = "lumped")]
    implicit_mass: MassKind,
    initial: RawInitial,
    #[serde(default)]
    snapshots: Vec<Num>,
    solver_tol: Option<f64>,
    solver_max_iters: Option<usize>,
    #[serde(default = "warn_policy")]
    stability: StabilityPolicy,
    safety: Option<f64>,
}

fn lumped() -> MassKind {
    MassKind::Lumped
}

fn warn_policy() -> StabilityPolicy {
    StabilityPolicy::Warn
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    force_grid: Option<usize>,
    force_times: Option<Vec<Num>>,
}

/// How the full optimization is started.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitStrategy {
    /// Receding-horizon warm start with anchors every `stride` steps.
    Horizon { stride: usize, tol: f64 },
    /// Hold the initial controls.
    Constant,
}

/// PDE time step: fixed, or derived from the explicit stability bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeStep {
    Fixed(f64),
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdeConfig {
    pub domain: DomainSpec,
    pub mesh_size: f64,
    pub mesh_file: Option<PathBuf>,
    pub epsilon: f64,
    pub dt: TimeStep,
    pub bc: BoundaryCondition,
    pub scheme: Scheme,
    pub implicit_mass: MassKind,
    pub initial_center: Point,
    pub sigma2: f64,
    pub snapshots: Vec<f64>,
    pub solver: SolverSettings,
    pub stability: StabilityPolicy,
    pub safety: f64,
}

impl PdeConfig {
    /// Transport settings for a resolved time step.
    pub fn transport_settings(&self, final_time: f64, dt: f64) -> TransportSettings {
        TransportSettings {
            epsilon: self.epsilon,
            dt,
            final_time,
            bc: self.bc,
            scheme: self.scheme,
            solver: self.solver,
            implicit_mass: self.implicit_mass,
            stability: self.stability,
            safety: self.safety,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Points per side of the force sample grid.
    pub force_grid: usize,
    pub force_times: Vec<f64>,
}

/// A validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub final_time: f64,
    pub steps: usize,
    pub dipoles: DipoleConfig,
    pub region_radius: f64,
    pub domain: MovingDomain,
    pub quadrature_refinement: u32,
    pub target: TargetField,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerSettings,
    pub init: InitStrategy,
    pub pde: Option<PdeConfig>,
    pub output: OutputConfig,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

impl Scenario {
    /// Parse and validate a scenario. No computation happens here.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Self::resolve(raw)
    }

    /// Load from a file path, or from a bundled scenario name.
    pub fn load(path_or_name: &str) -> Result<Self> {
        let path = Path::new(path_or_name);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let mut s = Self::from_toml_str(&text).map_err(|e| match e {
                Error::Scenario(m) => invalid(format!("{}: {m}", path.display())),
                other => other,
            })?;
            // mesh files are relative to the scenario file
            if let Some(pde) = s.pde.as_mut() {
                if let (Some(mesh), Some(parent)) = (pde.mesh_file.as_mut(), path.parent()) {
                    if mesh.is_relative() {
                        *mesh = parent.join(&*mesh);
                    }
                }
            }
            return Ok(s);
        }
        match bundled(path_or_name) {
            Some(text) => Self::from_toml_str(text),
            None => Err(invalid(format!(
                "`{path_or_name}` is neither a file nor a bundled scenario ({})",
                BUNDLED.map(|(n, _)| n).join(", ")
            ))),
        }
    }

    fn resolve(raw: RawScenario) -> Result<Self> {
        let final_time = raw.final_time.0;
        if !(final_time > 0.0) || !final_time.is_finite() {
            return Err(invalid("final_time must be positive"));
        }
        if raw.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        let mode = raw.control.mode;
        let region_radius = raw.control.region_radius.0;
        if !(region_radius > 0.0) {
            return Err(invalid("control.region_radius must be positive"));
        }

        let objective = ObjectiveConfig {
            lambda: raw.objective.lambda.map_or(0.0, |v| v.0),
            eta: raw.objective.eta.map_or(0.0, |v| v.0),
            beta: raw.objective.beta.map_or(0.0, |v| v.0),
        };
        objective.validate().map_err(|e| invalid(format!("objective: {e}")))?;

        let dipoles = resolve_dipoles(&raw.dipole, mode, region_radius)?;

        let target = match raw.target {
            RawTarget::Constant { value } => TargetField::Constant(pt(value)),
            RawTarget::Piecewise { breaks, values } => TargetField::piecewise_constant(
                breaks.iter().map(|b| b.0).collect(),
                values.into_iter().map(pt).collect(),
            )
            .map_err(|e| invalid(format!("target: {e}")))?,
        };

        let waypoints: Vec<(f64, Point)> = raw
            .domain
            .waypoints
            .iter()
            .map(|w| (w[0].0, Point::new(w[1].0, w[2].0)))
            .collect();
        let mut domain = MovingDomain::new(raw.domain.radius.0, final_time, waypoints)
            .map_err(|e| invalid(format!("domain: {e}")))?;
        if let Some(scale) = raw.domain.scale {
            domain = domain
                .with_scale(scale.iter().map(|k| (k[0].0, k[1].0)).collect())
                .map_err(|e| invalid(format!("domain: {e}")))?;
        }
        if raw.domain.quadrature_refinement == 0 {
            return Err(invalid("domain.quadrature_refinement must be at least 1"));
        }

        let o = raw.optimizer;
        let memory = match (o.memory.as_deref(), o.memory_pairs) {
            (None | Some("dense"), _) => BfgsMemory::Dense,
            (Some("limited"), pairs) => BfgsMemory::Limited(pairs.unwrap_or(10)),
            (Some(other), _) => {
                return Err(invalid(format!(
                    "optimizer.memory must be `dense` or `limited`, got `{other}`"
                )))
            }
        };
        let optimizer = OptimizerSettings {
            grad_tol: o.grad_tol.unwrap_or(1e-6),
            max_iters: o.max_iters.unwrap_or(1000),
            memory,
            ..OptimizerSettings::default()
        };
        optimizer.validate().map_err(|e| invalid(format!("optimizer: {e}")))?;
        let init = match o.init.as_deref() {
            None | Some("horizon") => {
                let stride = o.horizon_stride.unwrap_or(1);
                if stride == 0 || !raw.steps.is_multiple_of(stride) {
                    return Err(invalid(format!(
                        "optimizer.horizon_stride {stride} must divide steps {}",
                        raw.steps
                    )));
                }
                let tol = o.init_tol.unwrap_or(1e-3);
                if !(tol > 0.0) {
                    return Err(invalid("optimizer.init_tol must be positive"));
                }
                InitStrategy::Horizon { stride, tol }
            }
            Some("constant") => InitStrategy::Constant,
            Some(other) => {
                return Err(invalid(format!(
                    "optimizer.init must be `horizon` or `constant`, got `{other}`"
                )))
            }
        };

        let pde = raw.pde.map(|p| resolve_pde(p, final_time)).transpose()?;

        let output = OutputConfig {
            dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out").join(&raw.name)),
            force_grid: raw.output.force_grid.unwrap_or(41),
            force_times: raw
                .output
                .force_times
                .map(|v| v.iter().map(|t| t.0).collect())
                .unwrap_or_else(|| vec![0.0, 0.5 * final_time, final_time]),
        };
        if output.force_times.iter().any(|t| !(0.0..=final_time).contains(t)) {
            return Err(invalid("output.force_times must lie in [0, final_time]"));
        }

        Ok(Self {
            name: raw.name,
            final_time,
            steps: raw.steps,
            dipoles,
            region_radius,
            domain,
            quadrature_refinement: raw.domain.quadrature_refinement,
            target,
            objective,
            optimizer,
            init,
            pde,
            output,
        })
    }

    pub fn tau(&self) -> f64 {
        self.final_time / self.steps as f64
    }
}

fn resolve_dipoles(raw: &[RawDipole], mode: ControlMode, region_radius: f64) -> Result<DipoleConfig> {
    if raw.is_empty() {
        return Err(invalid("at least one [[dipole]] is required"));
    }
    let mut dipoles = Vec::new();
    let (mut lo, mut hi, mut init) = (
        Controls::new(vec![], vec![]),
        Controls::new(vec![], vec![]),
        Controls::new(vec![], vec![]),
    );
    for (i, d) in raw.iter().enumerate() {
        let n = i + 1;
        lo.intensity.push(d.intensity_bounds[0].0);
        hi.intensity.push(d.intensity_bounds[1].0);
        init.intensity.push(d.intensity.0);
        match mode {
            ControlMode::Direction => {
                let pos = d
                    .position
                    .ok_or_else(|| invalid(format!("dipole {n}: `position` is required in direction mode")))?;
                if d.curve.is_some() || d.parameter.is_some() {
                    return Err(invalid(format!("dipole {n}: curves need mode = \"position\"")));
                }
                let b = d
                    .direction_bounds
                    .ok_or_else(|| invalid(format!("dipole {n}: `direction_bounds` is required in direction mode")))?;
                let p = pt(pos);
                if !(p.norm() > region_radius) {
                    return Err(invalid(format!(
                        "dipole {n} at ({}, {}) is not outside the control region",
                        p.x, p.y
                    )));
                }
                dipoles.push(Dipole::fixed(p, d.direction.0));
                lo.secondary.push(b[0].0);
                hi.secondary.push(b[1].0);
                init.secondary.push(d.direction.0);
            }
            ControlMode::Position => {
                let curve = match d.curve.as_ref() {
                    Some(RawCurve::Circle { center, radius }) => Curve::Circle {
                        center: pt(*center),
                        radius: radius.0,
                    },
                    Some(RawCurve::Segment { start, end }) => Curve::Segment {
                        start: pt(*start),
                        end: pt(*end),
                    },
                    None => return Err(invalid(format!("dipole {n}: `curve` is required in position mode"))),
                };
                let b = d
                    .parameter_bounds
                    .ok_or_else(|| invalid(format!("dipole {n}: `parameter_bounds` is required in position mode")))?;
                let q = d
                    .parameter
                    .ok_or_else(|| invalid(format!("dipole {n}: `parameter` is required in position mode")))?;
                // sample the admissible arc of the curve
                for k in 0..=64 {
                    let s = b[0].0 + (b[1].0 - b[0].0) * k as f64 / 64.0;
                    if !(curve.point(s).norm() > region_radius) {
                        return Err(invalid(format!("dipole {n}: its curve enters the control region")));
                    }
                }
                dipoles.push(Dipole::on_curve(curve, d.direction.0));
                lo.secondary.push(b[0].0);
                hi.secondary.push(b[1].0);
                init.secondary.push(q.0);
            }
        }
    }
    DipoleConfig::new(dipoles, mode, ControlBounds { lower: lo, upper: hi }, init)
        .map_err(|e| invalid(format!("dipoles: {e}")))
}

fn resolve_pde(p: RawPde, final_time: f64) -> Result<PdeConfig> {
    let dt = match &p.dt {
        toml::Value::String(s) if s == "auto" => TimeStep::Auto,
        toml::Value::String(s) => TimeStep::Fixed(parse_expr(s).map_err(|e| invalid(format!("pde.dt: {e}")))?),
        toml::Value::Float(v) => TimeStep::Fixed(*v),
        toml::Value::Integer(v) => TimeStep::Fixed(*v as f64),
        other => return Err(invalid(format!("pde.dt must be a number or \"auto\", got {other}"))),
    };
    if let TimeStep::Fixed(v) = dt {
        if !(v > 0.0) {
            return Err(invalid("pde.dt must be positive"));
        }
    }
    if dt == TimeStep::Auto && p.scheme != Scheme::ExplicitLumped {
        return Err(invalid("pde.dt = \"auto\" is only available for the explicit scheme"));
    }
    let mesh_size = match (p.mesh_size, &p.mesh_file) {
        (Some(h), _) if h > 0.0 => h,
        (Some(h), _) => return Err(invalid(format!("pde.mesh_size must be positive, got {h}"))),
        (None, Some(_)) => 0.0,
        (None, None) => return Err(invalid("pde needs `mesh_size` or `mesh_file`")),
    };
    let sigma2 = p.initial.sigma2.0;
    if !(sigma2 > 0.0) {
        return Err(invalid("pde.initial.sigma2 must be positive"));
    }
    let snapshots: Vec<f64> = p.snapshots.iter().map(|s| s.0).collect();
    if snapshots
        .iter()
        .any(|t| !(*t >= 0.0 && *t <= final_time * (1.0 + 1e-12)))
    {
        return Err(invalid("pde.snapshots must lie in [0, final_time]"));
    }
    let cfg = PdeConfig {
        domain: p.domain.into(),
        mesh_size,
        mesh_file: p.mesh_file,
        epsilon: p.epsilon.0,
        dt,
        bc: p.bc,
        scheme: p.scheme,
        implicit_mass: p.implicit_mass,
        initial_center: pt(p.initial.center),
        sigma2,
        snapshots,
        solver: SolverSettings {
            tol: p.solver_tol.unwrap_or(1e-10),
            max_iters: p.solver_max_iters.unwrap_or(10_000),
        },
        stability: p.stability,
        safety: p.safety.unwrap_or(0.9),
    };
    cfg.transport_settings(
        final_time,
        match dt {
            TimeStep::Fixed(v) => v,
            TimeStep::Auto => final_time,
        },
    )
    .validate()
    .map_err(|e| invalid(format!("pde: {e}")))?;
    Ok(cfg)
}
