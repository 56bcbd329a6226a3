//! Discrete tracking functionals over piecewise-linear control trajectories.

use rayon::prelude::*;

use crate::domain::{time_averaged_target, MovingDomain, QuadratureRule, TargetField};
use crate::error::{Error, Result};
use crate::magnetics::{ControlMode, Controls, DipoleConfig, DipoleTerms, Point};

/// Smoothing weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Intensity smoothing.
    pub lambda: f64,
    /// Angle smoothing (direction mode).
    pub eta: f64,
    /// Curve-parameter smoothing (position mode).
    pub beta: f64,
}

impl ObjectiveConfig {
    pub fn new(lambda: f64, eta: f64, beta: f64) -> Result<Self> {
        let c = Self { lambda, eta, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weight of the secondary-control smoothing term for `mode`.
    pub fn secondary_weight(&self, mode: ControlMode) -> f64 {
        match mode {
            ControlMode::Direction => self.eta,
            ControlMode::Position => self.beta,
        }
    }
}

/// Control values at `N + 1` uniform time nodes, each row laid out as
/// `[α_1 .. α_np, q_1 .. q_np]`. Row 0 is the fixed initial control.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTrajectory {
    tau: f64,
    rows: Vec<Vec<f64>>,
}

impl ControlTrajectory {
    pub fn new(tau: f64, rows: Vec<Vec<f64>>) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {tau}")));
        }
        if rows.len() < 2 {
            return Err(Error::InvalidConfig(
                "a trajectory needs at least two time nodes".into(),
            ));
        }
        let m = rows[0].len();
        if m == 0 || !m.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "a control row needs an even, nonzero number of entries, got {m}"
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                what: "trajectory row",
                expected: m,
                found: r.len(),
            });
        }
        Ok(Self { tau, rows })
    }

    /// Trajectory that stays at `initial` for `steps` uniform steps up to `final_time`.
    pub fn constant(initial: &Controls, steps: usize, final_time: f64) -> Result<Self> {
        Self::new(final_time / steps.max(1) as f64, vec![initial.to_flat(); steps + 1])
    }

    /// Rebuild from the initial row and the flattened free rows `1..=N`.
    pub fn from_free(initial: &Controls, tau: f64, free: &[f64]) -> Result<Self> {
        let first = initial.to_flat();
        let m = first.len();
        if m == 0 || !free.len().is_multiple_of(m) || free.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "free trajectory values",
                expected: m * (free.len() / m.max(1)).max(1),
                found: free.len(),
            });
        }
        let mut rows = vec![first];
        rows.extend(free.chunks(m).map(<[f64]>::to_vec));
        Self::new(tau, rows)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Number of time steps `N`.
    pub fn steps(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        self.tau * self.steps() as f64
    }

    pub fn num_dipoles(&self) -> usize {
        self.rows[0].len() / 2
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.rows[n]
    }

    pub fn time(&self, n: usize) -> f64 {
        self.tau * n as f64
    }

    pub fn controls(&self, n: usize) -> Controls {
        Controls::from_flat(&self.rows[n])
    }

    /// Rows `1..=N` flattened.
    pub fn free_values(&self) -> Vec<f64> {
        self.rows[1..].concat()
    }

    /// Piecewise-linear interpolation in time.
    pub fn interpolate(&self, t: f64) -> Result<Controls> {
        let end = self.final_time();
        let slack = 1e-9 * end.max(1.0);
        if !(t >= -slack && t <= end + slack) {
            return Err(Error::Coverage(format!(
                "time {t} is outside the control interval [0, {end}]"
            )));
        }
        let s = (t / self.tau).clamp(0.0, self.steps() as f64);
        let k = (s.floor() as usize).min(self.steps() - 1);
        let w = s - k as f64;
        let row: Vec<f64> = self.rows[k]
            .iter()
            .zip(&self.rows[k + 1])
            .map(|(a, b)| a * (1.0 - w) + b * w)
            .collect();
        Ok(Controls::from_flat(&row))
    }
}

/// Value of the functional split into its three terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub tracking: f64,
    pub intensity_smoothing: f64,
    pub secondary_smoothing: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.intensity_smoothing + self.secondary_smoothing
    }

    pub fn components(&self) -> [f64; 3] {
        [self.tracking, self.intensity_smoothing, self.secondary_smoothing]
    }
}

/// The discrete tracking problem: dipoles, moving domain sampled at the
/// time nodes, and the time-averaged targets.
#[derive(Clone, Debug)]
pub struct TrackingProblem {
    dipoles: DipoleConfig,
    weights: ObjectiveConfig,
    tau: f64,
    steps: usize,
    node_weights: Vec<f64>,
    points: Vec<Vec<Point>>,
    scales: Vec<f64>,
    targets: Vec<Vec<Point>>,
}

impl TrackingProblem {
    pub fn new(
        dipoles: DipoleConfig,
        domain: &MovingDomain,
        rule: &QuadratureRule,
        target: &TargetField,
        weights: ObjectiveConfig,
        steps: usize,
    ) -> Result<Self> {
        weights.validate()?;
        if steps == 0 {
            return Err(Error::InvalidConfig("at least one time step is required".into()));
        }
        let tau = domain.final_time() / steps as f64;
        let mut points = Vec::with_capacity(steps);
        let mut scales = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        for n in 1..=steps {
            let t = n as f64 * tau;
            points.push(rule.nodes.iter().map(|y| domain.map_offset(t, *y)).collect());
            scales.push(domain.scale(t));
            targets.push(time_averaged_target(target, n, tau, domain, rule));
        }
        Ok(Self {
            dipoles,
            weights,
            tau,
            steps,
            node_weights: rule.weights.clone(),
            points,
            scales,
            targets,
        })
    }

    pub fn dipoles(&self) -> &DipoleConfig {
        &self.dipoles
    }

    pub fn weights(&self) -> &ObjectiveConfig {
        &self.weights
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn final_time(&self) -> f64 {
        self.tau * self.steps as f64
    }

    /// Number of control values per time node.
    pub fn row_len(&self) -> usize {
        2 * self.dipoles.len()
    }

    /// Pulled-back time-averaged targets at step `n` (1-based).
    pub fn targets(&self, n: usize) -> &[Point] {
        &self.targets[n - 1]
    }

    /// Trajectory holding the initial controls.
    pub fn constant_trajectory(&self) -> ControlTrajectory {
        ControlTrajectory::constant(self.dipoles.initial(), self.steps, self.final_time())
            .expect("problem dimensions are valid")
    }

    fn check(&self, traj: &ControlTrajectory) -> Result<()> {
        if traj.steps() != self.steps {
            return Err(Error::DimensionMismatch {
                what: "trajectory time steps",
                expected: self.steps,
                found: traj.steps(),
            });
        }
        if traj.row(0).len() != self.row_len() {
            return Err(Error::DimensionMismatch {
                what: "trajectory row",
                expected: self.row_len(),
                found: traj.row(0).len(),
            });
        }
        if (traj.tau() - self.tau).abs() > 1e-12 * self.tau {
            return Err(Error::InvalidConfig(format!(
                "trajectory step {} differs from the problem step {}",
                traj.tau(),
                self.tau
            )));
        }
        if traj.row(0) != self.dipoles.initial().to_flat().as_slice() {
            return Err(Error::InvalidConfig(
                "trajectory row 0 differs from the configured initial controls".into(),
            ));
        }
        Ok(())
    }

    /// `½ Σ_q w_q |ψ αᵀB_k(X_q) α − f̂_q|²` at step `n` for one control row,
    /// optionally accumulating its gradient with respect to the row into `grad`.
    pub fn step_tracking(&self, n: usize, row: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let np = self.dipoles.len();
        if row.len() != 2 * np {
            return Err(Error::DimensionMismatch {
                what: "control row",
                expected: 2 * np,
                found: row.len(),
            });
        }
        let (alpha, q) = row.split_at(np);
        let psi = self.scales[n - 1];
        let mut terms: Vec<DipoleTerms> = Vec::with_capacity(np);
        let mut value = 0.0;
        for ((x, w), f) in self.points[n - 1]
            .iter()
            .zip(&self.node_weights)
            .zip(&self.targets[n - 1])
        {
            self.dipoles.terms_into(q, *x, grad.is_some(), &mut terms)?;
            let mut h = Point::zeros();
            let mut jac = [Point::zeros(); 2];
            for (a, t) in alpha.iter().zip(&terms) {
                h += t.value * *a;
                jac[0] += t.grad[0] * *a;
                jac[1] += t.grad[1] * *a;
            }
            let e = [psi * 2.0 * h.dot(&jac[0]) - f.x, psi * 2.0 * h.dot(&jac[1]) - f.y];
            value += 0.5 * w * (e[0] * e[0] + e[1] * e[1]);
            if let Some(g) = grad.as_deref_mut() {
                for (i, t) in terms.iter().enumerate() {
                    for k in 0..2 {
                        let c = w * e[k] * psi * 2.0;
                        g[i] += c * (t.value.dot(&jac[k]) + h.dot(&t.grad[k]));
                        g[np + i] += c * alpha[i] * (t.control_value.dot(&jac[k]) + h.dot(&t.control_grad[k]));
                    }
                }
            }
        }
        Ok(value)
    }

    fn smoothing(&self, traj: &ControlTrajectory, grad: Option<&mut [f64]>) -> (f64, f64) {
        let np = self.dipoles.len();
        let la = self.weights.lambda / self.tau;
        let lq = self.weights.secondary_weight(self.dipoles.mode()) / self.tau;
        let (mut ja, mut jq) = (0.0, 0.0);
        let m = 2 * np;
        let mut grad = grad;
        for n in 1..=self.steps {
            let (prev, cur) = (traj.row(n - 1), traj.row(n));
            for c in 0..m {
                let d = cur[c] - prev[c];
                let l = if c < np { la } else { lq };
                if c < np {
                    ja += 0.5 * l * d * d;
                } else {
                    jq += 0.5 * l * d * d;
                }
                if let Some(g) = grad.as_deref_mut() {
                    g[(n - 1) * m + c] += l * d;
                    if n >= 2 {
                        g[(n - 2) * m + c] -= l * d;
                    }
                }
            }
        }
        (ja, jq)
    }

    /// Functional value with per-term breakdown.
    pub fn evaluate(&self, traj: &ControlTrajectory) -> Result<Breakdown> {
        self.check(traj)?;
        let per_step: Vec<Result<f64>> = (1..=self.steps)
            .into_par_iter()
            .map(|n| self.step_tracking(n, traj.row(n), None))
            .collect();
        let mut tracking = 0.0;
        for v in per_step {
            tracking += v?;
        }
        let (ja, jq) = self.smoothing(traj, None);
        Ok(Breakdown {
            tracking: self.tau * tracking,
            intensity_smoothing: ja,
            secondary_smoothing: jq,
        })
    }

    /// Value and exact gradient with respect to rows `1..=N`, flattened row-major.
    pub fn gradient(&self, traj: &ControlTrajectory) -> Result<(Breakdown, Vec<f64>)> {
        self.check(traj)?;
        let m = self.row_len();
        let per_step: Vec<Result<(f64, Vec<f64>)>> = (1..=self.steps)
            .into_par_iter()
            .map(|n| {
                let mut g = vec![0.0; m];
                let v = self.step_tracking(n, traj.row(n), Some(&mut g))?;
                Ok((v, g))
            })
            .collect();
        let mut grad = vec![0.0; self.steps * m];
        let mut tracking = 0.0;
        for (n, r) in per_step.into_iter().enumerate() {
            let (v, g) = r?;
            tracking += v;
            for (dst, src) in grad[n * m..(n + 1) * m].iter_mut().zip(g) {
                *dst = self.tau * src;
            }
        }
        let (ja, jq) = self.smoothing(traj, Some(&mut grad));
        Ok((
            Breakdown {
                tracking: self.tau * tracking,
                intensity_smoothing: ja,
                secondary_smoothing: jq,
            },
            grad,
        ))
    }

    /// Value and gradient as functions of the flattened free rows.
    pub fn gradient_free(&self, free: &[f64]) -> Result<(Breakdown, Vec<f64>)> {
        let traj = ControlTrajectory::from_free(self.dipoles.initial(), self.tau, free)?;
        self.gradient(&traj)
    }

    /// Single-step functional used by the receding-horizon initialization:
    /// `½ Σ |xᵀB̂ⁿ(y)x − f̂ⁿ|² + λ/(2κ²)|x − x⁰|² + η/(2κ²)|y − y⁰|²`.
    pub fn step_functional(&self, n: usize, anchor: &[f64], kappa: f64, row: &[f64]) -> Result<(Breakdown, Vec<f64>)> {
        let np = self.dipoles.len();
        let mut g = vec![0.0; 2 * np];
        let tracking = self.step_tracking(n, row, Some(&mut g))?;
        let la = self.weights.lambda / (kappa * kappa);
        let lq = self.weights.secondary_weight(self.dipoles.mode()) / (kappa * kappa);
        let (mut ja, mut jq) = (0.0, 0.0);
        for c in 0..2 * np {
            let d = row[c] - anchor[c];
            let l = if c < np { la } else { lq };
            if c < np {
                ja += 0.5 * l * d * d;
            } else {
                jq += 0.5 * l * d * d;
            }
            g[c] += l * d;
        }
        Ok((
            Breakdown {
                tracking,
                intensity_smoothing: ja,
                secondary_smoothing: jq,
            },
            g,
        ))
    }
}
