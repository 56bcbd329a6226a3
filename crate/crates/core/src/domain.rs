//! Moving target subdomain, reference quadrature and target fields.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::mesh::disk_triangulation;
use crate::magnetics::Point;

const TIME_SLACK: f64 = 1e-12;

/// Continuous piecewise-linear function of time given by knots.
///
/// Values are held constant outside the knot range.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline<T> {
    times: Vec<f64>,
    values: Vec<T>,
}

impl<T> Polyline<T>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    pub fn new(knots: Vec<(f64, T)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidConfig("a path needs at least one knot".into()));
        }
        if knots.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::InvalidConfig("knot times must be strictly increasing".into()));
        }
        let (times, values) = knots.into_iter().unzip();
        Ok(Self { times, values })
    }

    pub fn eval(&self, t: f64) -> T {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let s = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.values[k] * (1.0 - s) + self.values[k + 1] * s
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Reference disk `D̂` moved along a translation path and uniformly scaled:
/// `X(t, x̂) = c + φ(t) + ψ(t) (x̂ - c)` with `φ(0) = 0`, `ψ(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingDomain {
    center: Point,
    radius: f64,
    final_time: f64,
    path: Polyline<Point>,
    scale: Option<Polyline<f64>>,
}

impl MovingDomain {
    /// `waypoints` are absolute positions of the disk center; the first one
    /// must be at `t = 0` and defines the reference disk.
    pub fn new(radius: f64, final_time: f64, waypoints: Vec<(f64, Point)>) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig("domain radius must be positive".into()));
        }
        if !(final_time > 0.0) {
            return Err(Error::InvalidConfig("final time must be positive".into()));
        }
        match waypoints.first() {
            Some((t0, _)) if *t0 == 0.0 => {}
            _ => return Err(Error::InvalidConfig("the first waypoint must be at t = 0".into())),
        }
        let center = waypoints[0].1;
        Ok(Self {
            center,
            radius,
            final_time,
            path: Polyline::new(waypoints)?,
            scale: None,
        })
    }

    /// Uniform scale factor `ψ(t)` given by knots; `ψ(0)` must be 1.
    pub fn with_scale(mut self, knots: Vec<(f64, f64)>) -> Result<Self> {
        let p = Polyline::new(knots)?;
        if (p.eval(0.0) - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidConfig("the scale must equal 1 at t = 0".into()));
        }
        if p.values().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig("the scale must stay positive".into()));
        }
        self.scale = Some(p);
        Ok(self)
    }

    pub fn center(&self) -> Point {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    /// Translation `φ(t)`.
    pub fn translation(&self, t: f64) -> Point {
        self.path.eval(t) - self.center
    }

    /// Scale `ψ(t)`.
    pub fn scale(&self, t: f64) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| s.eval(t))
    }

    /// Jacobian determinant of `X(t, ·)`.
    pub fn jacobian_det(&self, t: f64) -> f64 {
        let s = self.scale(t);
        s * s
    }

    /// `X(t, x̂)`.
    pub fn map_point(&self, t: f64, x: Point) -> Result<Point> {
        self.check_time(t)?;
        Ok(self.map_offset(t, x - self.center))
    }

    /// `X(t, c + y)` for an offset `y` from the reference center (no range check).
    pub fn map_offset(&self, t: f64, y: Point) -> Point {
        self.path.eval(t) + y * self.scale(t)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t < -TIME_SLACK || t > self.final_time + TIME_SLACK || t.is_nan() {
            return Err(Error::TimeOutOfRange {
                t,
                final_time: self.final_time,
            });
        }
        Ok(())
    }

    /// Times in `(0, T)` where the path or scale has a kink.
    pub fn kinks(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self.path.times().to_vec();
        if let Some(s) = &self.scale {
            k.extend_from_slice(s.times());
        }
        k.retain(|&t| t > 0.0 && t < self.final_time);
        k
    }

    /// Largest distance from `omega_center` reached by a mapped quadrature
    /// node at any of `samples` uniformly spaced times in `[0, T]`.
    pub fn max_reach(&self, rule: &QuadratureRule, omega_center: Point, samples: usize) -> (f64, f64) {
        let mut worst = (0.0, f64::NEG_INFINITY);
        for s in 0..=samples.max(1) {
            let t = self.final_time * s as f64 / samples.max(1) as f64;
            for y in &rule.nodes {
                let d = (self.map_offset(t, *y) - omega_center).norm();
                if d > worst.1 {
                    worst = (t, d);
                }
            }
        }
        worst
    }
}

/// Quadrature on the reference disk, nodes given as offsets from its center.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Centroid rule on the structured disk triangulation of the given level.
///
/// Triangles on the rim also carry the circular segment cut off by their
/// boundary chord, so the weights sum to `π r²`.
pub fn disk_quadrature(radius: f64, refinement: u32) -> QuadratureRule {
    let mesh =
        disk_triangulation(Point::zeros(), radius, refinement.max(1)).expect("the disk triangulation is nondegenerate");
    let mut weights: Vec<f64> = (0..mesh.num_triangles()).map(|t| mesh.area(t)).collect();
    for e in mesh.edges().iter().filter(|e| e.is_boundary()) {
        let v = mesh.vertices();
        let chord = (v[e.vertices[0]] - v[e.vertices[1]]).norm();
        let angle = 2.0 * (0.5 * chord / radius).min(1.0).asin();
        weights[e.triangles[0]] += 0.5 * radius * radius * (angle - angle.sin());
    }
    let nodes = (0..mesh.num_triangles())
        .map(|t| {
            let p = mesh.triangle_points(t);
            (p[0] + p[1] + p[2]) / 3.0
        })
        .collect();
    QuadratureRule { nodes, weights }
}

type FieldFn = dyn Fn(f64, Point) -> Point + Send + Sync;

/// Target force field `f(t, x)`.
#[derive(Clone)]
pub enum TargetField {
    Constant(Point),
    /// `values[k]` applies on `[breaks[k-1], breaks[k])`, with `values.len() == breaks.len() + 1`.
    PiecewiseConstant {
        breaks: Vec<f64>,
        values: Vec<Point>,
    },
    Custom(Arc<FieldFn>),
}

impl fmt::Debug for TargetField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetField::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            TargetField::PiecewiseConstant { breaks, values } => f
                .debug_struct("PiecewiseConstant")
                .field("breaks", breaks)
                .field("values", values)
                .finish(),
            TargetField::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl TargetField {
    pub fn piecewise_constant(breaks: Vec<f64>, values: Vec<Point>) -> Result<Self> {
        if values.len() != breaks.len() + 1 {
            return Err(Error::DimensionMismatch {
                what: "piecewise-constant target values",
                expected: breaks.len() + 1,
                found: values.len(),
            });
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(
                "target breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(TargetField::PiecewiseConstant { breaks, values })
    }

    pub fn custom(f: impl Fn(f64, Point) -> Point + Send + Sync + 'static) -> Self {
        TargetField::Custom(Arc::new(f))
    }

    pub fn eval(&self, t: f64, x: Point) -> Point {
        match self {
            TargetField::Constant(v) => *v,
            TargetField::PiecewiseConstant { breaks, values } => values[breaks.partition_point(|&b| b <= t)],
            TargetField::Custom(f) => f(t, x),
        }
    }

    /// Times where the field jumps.
    pub fn breakpoints(&self) -> &[f64] {
        match self {
            TargetField::PiecewiseConstant { breaks, .. } => breaks,
            _ => &[],
        }
    }
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// Time average over `[t^{n-1}, t^n]` of the pulled-back, scale-weighted
/// target `ψ(t) f(t, X(t, x̂))` at every quadrature node.
///
/// The interval is split at jumps of `f` and kinks of the domain motion and
/// each piece is integrated with 3-point Gauss.
pub fn time_averaged_target(
    f: &TargetField,
    n: usize,
    tau: f64,
    dom: &MovingDomain,
    rule: &QuadratureRule,
) -> Vec<Point> {
    let (a, b) = ((n as f64 - 1.0) * tau, n as f64 * tau);
    let mut cuts = vec![a];
    cuts.extend(
        f.breakpoints()
            .iter()
            .chain(dom.kinks().iter())
            .copied()
            .filter(|&t| t > a && t < b),
    );
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut out = vec![Point::zeros(); rule.len()];
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (xi, gw) in GAUSS3 {
            let t = mid + half * xi;
            let s = dom.scale(t);
            let c = gw * half / tau * s;
            for (o, y) in out.iter_mut().zip(&rule.nodes) {
                *o += f.eval(t, dom.map_offset(t, *y)) * c;
            }
        }
    }
    out
}
