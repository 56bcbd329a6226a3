//! Point-dipole superposition fields in the plane.
//!
//! Each source contributes `alpha_i * M(x - x_i) * d_i` with
//! `M(r) = (2 r r^T / |r|^2 - I) / |r|^2`. The Kelvin force is the gradient of
//! `|h|^2`, which is quadratic in the intensities: `kelvin_k = alpha^T B_k alpha`
//! with `B_k = d/dx_k (D^T D)` and `D = [M_1 d_1, ..., M_n d_n]`.
//!
//! All derivatives of `M` are analytic (product and quotient rule), including
//! the second derivatives needed when dipole positions are controls.

use nalgebra::{DMatrix, Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Point = Vector2<f64>;

/// Closest admissible distance between an evaluation point and a source.
pub const MIN_SOURCE_DISTANCE: f64 = 1e-6;

/// Unit direction for an angle.
#[inline]
pub fn direction(angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(c, s)
}

#[inline]
fn direction_derivative(angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    Point::new(-s, c)
}

/// Trajectory along which a position-controlled dipole moves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Curve {
    /// `center + radius (cos p, sin p)`.
    Circle { center: Point, radius: f64 },
    /// `start + p (end - start)`.
    Segment { start: Point, end: Point },
}

impl Curve {
    pub fn point(&self, param: f64) -> Point {
        match *self {
            Curve::Circle { center, radius } => center + direction(param) * radius,
            Curve::Segment { start, end } => start + (end - start) * param,
        }
    }

    /// Derivative of [`Curve::point`] with respect to the parameter.
    pub fn tangent(&self, param: f64) -> Point {
        match *self {
            Curve::Circle { radius, .. } => direction_derivative(param) * radius,
            Curve::Segment { start, end } => end - start,
        }
    }
}

/// Where a dipole sits: at a fixed point, or on a curve parametrized by a control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Placement {
    Fixed(Point),
    OnCurve(Curve),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dipole {
    pub placement: Placement,
    /// Direction angle used when directions are not controls.
    pub direction_angle: f64,
}

impl Dipole {
    pub fn fixed(position: Point, direction_angle: f64) -> Self {
        Self {
            placement: Placement::Fixed(position),
            direction_angle,
        }
    }

    pub fn on_curve(curve: Curve, direction_angle: f64) -> Self {
        Self {
            placement: Placement::OnCurve(curve),
            direction_angle,
        }
    }
}

/// Which quantity, besides the intensities, is controlled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    /// Intensities and direction angles; positions fixed.
    Direction,
    /// Intensities and curve parameters; directions fixed.
    Position,
}

/// Control values at one instant: intensities and, depending on the mode,
/// direction angles or curve parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    pub intensity: Vec<f64>,
    pub secondary: Vec<f64>,
}

impl Controls {
    pub fn new(intensity: Vec<f64>, secondary: Vec<f64>) -> Self {
        Self { intensity, secondary }
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    /// Flattened `[intensity..., secondary...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.intensity.iter().chain(&self.secondary).copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        let n = values.len() / 2;
        Self::new(values[..n].to_vec(), values[n..].to_vec())
    }
}

/// Componentwise lower/upper bounds on the controls.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBounds {
    pub lower: Controls,
    pub upper: Controls,
}

impl ControlBounds {
    pub fn contains(&self, c: &Controls) -> bool {
        let inside =
            |v: &[f64], lo: &[f64], hi: &[f64]| v.iter().zip(lo.iter().zip(hi)).all(|(x, (l, u))| *l <= *x && *x <= *u);
        inside(&c.intensity, &self.lower.intensity, &self.upper.intensity)
            && inside(&c.secondary, &self.lower.secondary, &self.upper.secondary)
    }
}

/// Fixed geometry of the sources plus bounds and initial controls.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleConfig {
    dipoles: Vec<Dipole>,
    mode: ControlMode,
    bounds: ControlBounds,
    initial: Controls,
}

impl DipoleConfig {
    pub fn new(dipoles: Vec<Dipole>, mode: ControlMode, bounds: ControlBounds, initial: Controls) -> Result<Self> {
        let n = dipoles.len();
        if n == 0 {
            return Err(Error::InvalidConfig("at least one dipole is required".into()));
        }
        for (what, v) in [
            ("lower intensity bounds", &bounds.lower.intensity),
            ("upper intensity bounds", &bounds.upper.intensity),
            ("lower secondary bounds", &bounds.lower.secondary),
            ("upper secondary bounds", &bounds.upper.secondary),
            ("initial intensities", &initial.intensity),
            ("initial secondary controls", &initial.secondary),
        ] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: v.len(),
                });
            }
        }
        let lo = bounds.lower.to_flat();
        let hi = bounds.upper.to_flat();
        if lo.iter().zip(&hi).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidConfig("lower bound exceeds upper bound".into()));
        }
        if !bounds.contains(&initial) {
            return Err(Error::InvalidConfig("initial controls violate the bounds".into()));
        }
        for (i, d) in dipoles.iter().enumerate() {
            match (mode, d.placement) {
                (ControlMode::Direction, Placement::OnCurve(_)) => {
                    return Err(Error::InvalidConfig(format!(
                        "dipole {i} is on a curve but positions are not controlled"
                    )))
                }
                (ControlMode::Position, Placement::Fixed(_)) => {
                    return Err(Error::InvalidConfig(format!(
                        "dipole {i} has a fixed position but positions are controlled"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            dipoles,
            mode,
            bounds,
            initial,
        })
    }

    pub fn len(&self) -> usize {
        self.dipoles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dipoles.is_empty()
    }

    pub fn dipoles(&self) -> &[Dipole] {
        &self.dipoles
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }

    pub fn initial(&self) -> &Controls {
        &self.initial
    }

    /// Position of dipole `i` given its secondary control.
    pub fn position(&self, i: usize, secondary: f64) -> Point {
        match self.dipoles[i].placement {
            Placement::Fixed(p) => p,
            Placement::OnCurve(c) => c.point(secondary),
        }
    }

    /// Direction angle of dipole `i` given its secondary control.
    pub fn angle(&self, i: usize, secondary: f64) -> f64 {
        match self.mode {
            ControlMode::Direction => secondary,
            ControlMode::Position => self.dipoles[i].direction_angle,
        }
    }

    /// Resolve the controls into concrete point sources.
    pub fn sources(&self, controls: &Controls) -> Result<Vec<Source>> {
        self.check_len(controls)?;
        Ok((0..self.len())
            .map(|i| Source {
                position: self.position(i, controls.secondary[i]),
                direction: direction(self.angle(i, controls.secondary[i])),
                intensity: controls.intensity[i],
            })
            .collect())
    }

    fn check_len(&self, controls: &Controls) -> Result<()> {
        for v in [&controls.intensity, &controls.secondary] {
            if v.len() != self.len() {
                return Err(Error::DimensionMismatch {
                    what: "controls",
                    expected: self.len(),
                    found: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Field, Jacobian and Kelvin force at `x`.
    pub fn eval_field(&self, controls: &Controls, x: Point) -> Result<FieldSample> {
        field_from_sources(&self.sources(controls)?, x)
    }

    /// Per-dipole contributions at `x`, written into `out`.
    ///
    /// With `with_control_derivatives`, also fills the derivatives with respect
    /// to each dipole's secondary control (angle or curve parameter).
    pub fn terms_into(
        &self,
        secondary: &[f64],
        x: Point,
        with_control_derivatives: bool,
        out: &mut Vec<DipoleTerms>,
    ) -> Result<()> {
        out.clear();
        for (i, dip) in self.dipoles.iter().enumerate() {
            let q = secondary[i];
            let pos = self.position(i, q);
            let r = x - pos;
            let dist = r.norm();
            if !(dist >= MIN_SOURCE_DISTANCE) {
                return Err(Error::TooCloseToSource {
                    index: i,
                    distance: dist,
                    min_distance: MIN_SOURCE_DISTANCE,
                });
            }
            let d = direction(self.angle(i, q));
            let m = shape(&r);
            let dm = shape_gradient(&r);
            let mut t = DipoleTerms {
                value: m * d,
                grad: [dm[0] * d, dm[1] * d],
                control_value: Point::zeros(),
                control_grad: [Point::zeros(); 2],
            };
            if with_control_derivatives {
                match (self.mode, dip.placement) {
                    (ControlMode::Direction, _) => {
                        let dd = direction_derivative(q);
                        t.control_value = m * dd;
                        t.control_grad = [dm[0] * dd, dm[1] * dd];
                    }
                    (ControlMode::Position, Placement::OnCurve(curve)) => {
                        // r = x - rho(q), so d/dq = -rho'(q) . grad_x
                        let tan = curve.tangent(q);
                        let hm = shape_hessian(&r);
                        t.control_value = -(t.grad[0] * tan.x + t.grad[1] * tan.y);
                        t.control_grad = [0, 1].map(|k| -((hm[0][k] * d) * tan.x + (hm[1][k] * d) * tan.y));
                    }
                    (ControlMode::Position, Placement::Fixed(_)) => {}
                }
            }
            out.push(t);
        }
        Ok(())
    }

    /// `B_k` (direction mode) or `G_k` (position mode) at `x`.
    fn quadratic_forms(&self, secondary: &[f64], x: Point) -> Result<[DMatrix<f64>; 2]> {
        if secondary.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "secondary controls",
                expected: self.len(),
                found: secondary.len(),
            });
        }
        let mut terms = Vec::with_capacity(self.len());
        self.terms_into(secondary, x, false, &mut terms)?;
        let n = self.len();
        let mut out = [DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
        for (k, b) in out.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] = terms[i].grad[k].dot(&terms[j].value) + terms[i].value.dot(&terms[j].grad[k]);
                }
            }
            let bt = b.transpose();
            *b = (&*b + bt) * 0.5;
        }
        Ok(out)
    }

    /// `B_k(theta) = d/dx_k (D(theta)^T D(theta))`, `k = 1, 2`, for fixed positions.
    pub fn b_matrices(&self, angles: &[f64], x: Point) -> Result<[DMatrix<f64>; 2]> {
        if self.mode != ControlMode::Direction {
            return Err(Error::InvalidConfig(
                "B matrices need direction-controlled dipoles".into(),
            ));
        }
        self.quadratic_forms(angles, x)
    }

    /// `G_k(phi) = d/dx_k (R(phi)^T R(phi))`, `k = 1, 2`, for curve-mounted dipoles.
    pub fn g_matrices(&self, params: &[f64], x: Point) -> Result<[DMatrix<f64>; 2]> {
        if self.mode != ControlMode::Position {
            return Err(Error::InvalidConfig(
                "G matrices need position-controlled dipoles".into(),
            ));
        }
        self.quadratic_forms(params, x)
    }
}

/// A resolved point source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub position: Point,
    pub direction: Point,
    pub intensity: f64,
}

/// One dipole's column of `D` at a point and its derivatives.
#[derive(Clone, Copy, Debug, Default)]
pub struct DipoleTerms {
    /// `M(r) d`.
    pub value: Point,
    /// `d/dx_k (M(r) d)`.
    pub grad: [Point; 2],
    /// Derivative of `value` with respect to the secondary control.
    pub control_value: Point,
    /// Derivative of `grad[k]` with respect to the secondary control.
    pub control_grad: [Point; 2],
}

/// Magnetic field sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub h: Point,
    /// `jacobian[(j, k)] = d h_j / d x_k`.
    pub jacobian: Matrix2<f64>,
    /// `grad |h|^2`.
    pub kelvin: Point,
}

impl FieldSample {
    pub fn magnitude_squared(&self) -> f64 {
        self.h.norm_squared()
    }
}

pub fn field_from_sources(sources: &[Source], x: Point) -> Result<FieldSample> {
    let mut h = Point::zeros();
    let mut jac = Matrix2::zeros();
    for (i, s) in sources.iter().enumerate() {
        let r = x - s.position;
        let dist = r.norm();
        if !(dist >= MIN_SOURCE_DISTANCE) {
            return Err(Error::TooCloseToSource {
                index: i,
                distance: dist,
                min_distance: MIN_SOURCE_DISTANCE,
            });
        }
        if s.intensity == 0.0 {
            continue;
        }
        let dm = shape_gradient(&r);
        h += shape(&r) * s.direction * s.intensity;
        for k in 0..2 {
            let col = dm[k] * s.direction * s.intensity;
            jac[(0, k)] += col.x;
            jac[(1, k)] += col.y;
        }
    }
    Ok(FieldSample {
        h,
        jacobian: jac,
        kelvin: jac.transpose() * h * 2.0,
    })
}

/// `M(r) = (2 r r^T / s - I) / s`, `s = |r|^2`.
pub fn shape(r: &Point) -> Matrix2<f64> {
    let s = r.norm_squared();
    (r * r.transpose()) * (2.0 / (s * s)) - Matrix2::identity() / s
}

#[inline]
fn sym_outer(a: &Point, b: &Point) -> Matrix2<f64> {
    a * b.transpose() + b * a.transpose()
}

const UNIT: [Point; 2] = [Point::new(1.0, 0.0), Point::new(0.0, 1.0)];

/// `d M / d x_k` for `k = 0, 1`.
pub fn shape_gradient(r: &Point) -> [Matrix2<f64>; 2] {
    let s = r.norm_squared();
    let s2 = s * s;
    let s3 = s2 * s;
    let p = r * r.transpose();
    let f = |k: usize| {
        sym_outer(&UNIT[k], r) * (2.0 / s2) - p * (8.0 * r[k] / s3) + Matrix2::identity() * (2.0 * r[k] / s2)
    };
    [f(0), f(1)]
}

/// `d^2 M / d x_l d x_k`, indexed `[l][k]`.
pub fn shape_hessian(r: &Point) -> [[Matrix2<f64>; 2]; 2] {
    let s = r.norm_squared();
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let p = r * r.transpose();
    let id = Matrix2::identity();
    let f = |l: usize, k: usize| {
        let delta = if k == l { 1.0 } else { 0.0 };
        let pk = sym_outer(&UNIT[k], r);
        let pl = sym_outer(&UNIT[l], r);
        let pkl = sym_outer(&UNIT[k], &UNIT[l]);
        pkl * (2.0 / s2) - pk * (8.0 * r[l] / s3) - p * (8.0 * delta / s3) - pl * (8.0 * r[k] / s3)
            + p * (48.0 * r[k] * r[l] / s4)
            + id * (2.0 * delta / s2)
            - id * (8.0 * r[k] * r[l] / s3)
    };
    [[f(0, 0), f(0, 1)], [f(1, 0), f(1, 1)]]
}
