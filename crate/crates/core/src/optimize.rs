//! Box-constrained minimization by projected BFGS, and the receding-horizon
//! initialization of control trajectories.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::magnetics::DipoleConfig;
use crate::objective::{ControlTrajectory, TrackingProblem};

/// Componentwise bounds on the decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "upper bounds",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidConfig("lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Bounds of one control row.
    pub fn for_row(dipoles: &DipoleConfig) -> Self {
        let b = dipoles.bounds();
        Self {
            lower: b.lower.to_flat(),
            upper: b.upper.to_flat(),
        }
    }

    /// Bounds of the free rows `1..=steps` of a trajectory.
    pub fn for_trajectory(dipoles: &DipoleConfig, steps: usize) -> Self {
        let row = Self::for_row(dipoles);
        Self {
            lower: row.lower.repeat(steps),
            upper: row.upper.repeat(steps),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.max(*l).min(*u))
            .collect()
    }
}

/// `min(upper, max(x, lower))` componentwise.
pub fn project(x: &[f64], bounds: &BoxBounds) -> Vec<f64> {
    bounds.project(x)
}

/// Inverse-Hessian storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfgsMemory {
    Dense,
    Limited(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub memory: BfgsMemory,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 1000,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            memory: BfgsMemory::Dense,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(Error::InvalidConfig("armijo_c1 must lie in (0, 1)".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidConfig("backtrack factor must lie in (0, 1)".into()));
        }
        if let BfgsMemory::Limited(0) = self.memory {
            return Err(Error::InvalidConfig("limited memory needs at least one pair".into()));
        }
        Ok(())
    }
}

/// Objective value, gradient, and an optional three-term breakdown for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub components: [f64; 3],
}

impl Evaluation {
    pub fn new(value: f64, gradient: Vec<f64>) -> Self {
        Self {
            value,
            gradient,
            components: [value, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    /// The line search could not find sufficient decrease.
    Stalled,
}

/// One accepted iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub components: [f64; 3],
    pub projected_gradient_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub components: [f64; 3],
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient_norm: f64,
    pub status: Status,
}

/// Inverse Hessian approximation acting on the free variables.
enum InverseHessian {
    Dense {
        h: DMatrix<f64>,
        fresh: bool,
    },
    Limited {
        pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
        cap: usize,
        gamma: f64,
    },
}

impl InverseHessian {
    fn new(memory: BfgsMemory, n: usize) -> Self {
        match memory {
            BfgsMemory::Dense => InverseHessian::Dense {
                h: DMatrix::identity(n, n),
                fresh: true,
            },
            BfgsMemory::Limited(m) => InverseHessian::Limited {
                pairs: VecDeque::with_capacity(m),
                cap: m,
                gamma: 1.0,
            },
        }
    }

    fn reset(&mut self, gamma: f64) {
        match self {
            InverseHessian::Dense { h, fresh } => {
                h.fill_with_identity();
                *h *= gamma;
                *fresh = true;
            }
            InverseHessian::Limited { pairs, gamma: g, .. } => {
                pairs.clear();
                *g = gamma;
            }
        }
    }

    fn is_fresh(&self) -> bool {
        match self {
            InverseHessian::Dense { fresh, .. } => *fresh,
            InverseHessian::Limited { pairs, .. } => pairs.is_empty(),
        }
    }

    /// `H v` for `v` supported on the free set.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            InverseHessian::Dense { h, .. } => (h * DVector::from_column_slice(v)).as_slice().to_vec(),
            InverseHessian::Limited { pairs, gamma, .. } => {
                let mut q = v.to_vec();
                let mut a = Vec::with_capacity(pairs.len());
                for (s, y, rho) in pairs.iter().rev() {
                    let ai = rho * dot(s, &q);
                    axpy(-ai, y, &mut q);
                    a.push(ai);
                }
                q.iter_mut().for_each(|x| *x *= gamma);
                for ((s, y, rho), ai) in pairs.iter().zip(a.iter().rev()) {
                    let b = rho * dot(y, &q);
                    axpy(ai - b, s, &mut q);
                }
                q
            }
        }
    }

    fn update(&mut self, s: &[f64], y: &[f64]) {
        let sy = dot(s, y);
        let yy = dot(y, y);
        match self {
            InverseHessian::Dense { h, fresh } => {
                if *fresh {
                    h.fill_with_identity();
                    *h *= sy / yy;
                    *fresh = false;
                }
                let rho = 1.0 / sy;
                let sv = DVector::from_column_slice(s);
                let yv = DVector::from_column_slice(y);
                let hy = &*h * &yv;
                let yhy = yv.dot(&hy);
                // BFGS inverse update written as rank-two corrections
                h.ger(-rho, &hy, &sv, 1.0);
                h.ger(-rho, &sv, &hy, 1.0);
                h.ger(rho * rho * yhy + rho, &sv, &sv, 1.0);
            }
            InverseHessian::Limited { pairs, cap, gamma } => {
                if pairs.len() == *cap {
                    pairs.pop_front();
                }
                pairs.push_back((s.to_vec(), y.to_vec(), 1.0 / sy));
                *gamma = sy / yy;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn projected_gradient(x: &[f64], g: &[f64], b: &BoxBounds) -> Vec<f64> {
    let step: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - gi).collect();
    let p = b.project(&step);
    x.iter().zip(&p).map(|(xi, pi)| xi - pi).collect()
}

fn evaluate_checked<F>(f: &mut F, x: &[f64], iteration: usize) -> Result<Evaluation>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let e = f(x)?;
    if !e.value.is_finite() {
        return Err(Error::NonFiniteObjective {
            iteration,
            value: e.value,
        });
    }
    if e.gradient.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: x.len(),
            found: e.gradient.len(),
        });
    }
    if let Some(v) = e.gradient.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective { iteration, value: *v });
    }
    Ok(e)
}

/// Minimize `f` over the box by projected BFGS with Armijo backtracking
/// along the projected path `P(x - t d)`.
///
/// The active set is estimated with a tolerance tied to the projected
/// gradient norm; the curvature model only acts on free variables and is
/// reset whenever the active set changes. `observer` sees every accepted
/// iterate, starting with the initial point.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    bounds: &BoxBounds,
    settings: &OptimizerSettings,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    settings.validate()?;
    if x0.len() != bounds.len() {
        return Err(Error::DimensionMismatch {
            what: "initial point",
            expected: bounds.len(),
            found: x0.len(),
        });
    }
    let n = x0.len();
    let mut x = bounds.project(x0);
    let mut cur = evaluate_checked(&mut f, &x, 0)?;
    let mut evaluations = 1;
    let mut hess = InverseHessian::new(settings.memory, n);
    let mut active_prev: Option<Vec<bool>> = None;
    let mut iteration = 0;
    let mut step = 0.0;

    loop {
        let pg = projected_gradient(&x, &cur.gradient, bounds);
        let pg_norm = norm(&pg);
        observer(&IterationRecord {
            iteration,
            value: cur.value,
            components: cur.components,
            projected_gradient_norm: pg_norm,
            step,
        });
        let finish = |status, x: Vec<f64>, cur: &Evaluation, evaluations| OptimizeResult {
            x,
            value: cur.value,
            components: cur.components,
            iterations: iteration,
            evaluations,
            projected_gradient_norm: pg_norm,
            status,
        };
        if pg_norm <= settings.grad_tol {
            return Ok(finish(Status::Converged, x, &cur, evaluations));
        }
        if iteration >= settings.max_iters {
            return Ok(finish(Status::MaxIterations, x, &cur, evaluations));
        }

        let eps = pg_norm.min(1e-3);
        let active: Vec<bool> = (0..n)
            .map(|i| {
                let g = cur.gradient[i];
                (x[i] - bounds.lower[i] <= eps && g > 0.0) || (bounds.upper[i] - x[i] <= eps && g < 0.0)
            })
            .collect();
        if active_prev.as_ref() != Some(&active) {
            debug!(
                "iteration {iteration}: active set changed, {} of {n} bounds active",
                active.iter().filter(|a| **a).count()
            );
            hess.reset(1.0 / pg_norm.max(1.0));
            active_prev = Some(active.clone());
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let g_free: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { cur.gradient[i] }).collect();
            let mut d = hess.apply(&g_free);
            for i in 0..n {
                if active[i] {
                    d[i] = cur.gradient[i];
                }
            }
            if dot(&d, &g_free) <= 0.0 && norm(&g_free) > 0.0 {
                hess.reset(1.0 / pg_norm.max(1.0));
                continue;
            }
            let mut t = 1.0;
            for _ in 0..=settings.max_backtracks {
                let trial: Vec<f64> = bounds.project(&x.iter().zip(&d).map(|(xi, di)| xi - t * di).collect::<Vec<_>>());
                let decrease: f64 = cur
                    .gradient
                    .iter()
                    .zip(trial.iter().zip(&x))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                if decrease < 0.0 {
                    let e = evaluate_checked(&mut f, &trial, iteration + 1)?;
                    evaluations += 1;
                    if e.value <= cur.value + settings.armijo_c1 * decrease {
                        accepted = Some((trial, e, t));
                        break;
                    }
                }
                t *= settings.backtrack;
            }
            if accepted.is_some() || (attempt == 0 && hess.is_fresh()) {
                break;
            }
            debug!("line search failed with curvature model, retrying from a reset");
            hess.reset(1.0 / pg_norm.max(1.0));
        }

        let Some((trial, next, t)) = accepted else {
            warn!("line search stalled at iteration {iteration}");
            return Ok(finish(Status::Stalled, x, &cur, evaluations));
        };

        let s: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { trial[i] - x[i] }).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    next.gradient[i] - cur.gradient[i]
                }
            })
            .collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            hess.update(&s, &y);
        }
        x = trial;
        cur = next;
        step = t;
        iteration += 1;
    }
}

/// Receding-horizon initial guess.
///
/// Walks through the anchor times `j κ`, `κ = stride τ`, minimizing the
/// single-step functional anchored at the previous solution to the
/// projected-gradient tolerance `tol`, and interpolates linearly between
/// anchors.
pub fn init_horizon(
    problem: &TrackingProblem,
    settings: &OptimizerSettings,
    stride: usize,
    tol: f64,
) -> Result<ControlTrajectory> {
    let steps = problem.steps();
    if stride == 0 || !steps.is_multiple_of(stride) {
        return Err(Error::InvalidConfig(format!(
            "horizon stride {stride} must divide the number of steps {steps}"
        )));
    }
    let kappa = stride as f64 * problem.tau();
    let bounds = BoxBounds::for_row(problem.dipoles());
    let local = OptimizerSettings {
        grad_tol: tol,
        ..settings.clone()
    };
    let mut anchors = vec![problem.dipoles().initial().to_flat()];
    for j in 1..=steps / stride {
        let n = j * stride;
        let anchor = anchors[j - 1].clone();
        let res = minimize(
            |row: &[f64]| {
                let (b, g) = problem.step_functional(n, &anchor, kappa, row)?;
                Ok(Evaluation {
                    value: b.total(),
                    gradient: g,
                    components: b.components(),
                })
            },
            &anchor,
            &bounds,
            &local,
            &mut |_| {},
        )
        .map_err(|e| Error::HorizonStep {
            step: j,
            source: Box::new(e),
        })?;
        if res.status != Status::Converged {
            debug!("horizon step {j} ended with {:?}", res.status);
        }
        anchors.push(res.x);
    }
    let mut rows = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let (j, r) = (n / stride, n % stride);
        if r == 0 {
            rows.push(anchors[j].clone());
        } else {
            let w = r as f64 / stride as f64;
            rows.push(
                anchors[j]
                    .iter()
                    .zip(&anchors[j + 1])
                    .map(|(a, b)| a * (1.0 - w) + b * w)
                    .collect(),
            );
        }
    }
    ControlTrajectory::new(problem.tau(), rows)
}

/// Full solve over all free trajectory nodes starting from `start`.
pub fn optimize_trajectory(
    problem: &TrackingProblem,
    start: &ControlTrajectory,
    settings: &OptimizerSettings,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<(ControlTrajectory, OptimizeResult)> {
    let bounds = BoxBounds::for_trajectory(problem.dipoles(), problem.steps());
    let res = minimize(
        |x: &[f64]| {
            let (b, g) = problem.gradient_free(x)?;
            Ok(Evaluation {
                value: b.total(),
                gradient: g,
                components: b.components(),
            })
        },
        &start.free_values(),
        &bounds,
        settings,
        observer,
    )?;
    let traj = ControlTrajectory::from_free(problem.dipoles().initial(), problem.tau(), &res.x)?;
    Ok((traj, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<Evaluation> {
        move |x: &[f64]| {
            let v = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let g = x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
            Ok(Evaluation::new(v, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok(Evaluation::new(v, g))
    }

    fn run(
        f: impl FnMut(&[f64]) -> Result<Evaluation>,
        x0: &[f64],
        b: &BoxBounds,
        s: &OptimizerSettings,
    ) -> (OptimizeResult, Vec<f64>) {
        let mut values = Vec::new();
        let r = minimize(f, x0, b, s, &mut |rec| values.push(rec.value)).unwrap();
        (r, values)
    }

    fn monotone(v: &[f64]) -> bool {
        v.windows(2).all(|w| w[1] <= w[0])
    }

    #[test]
    fn clamp_example() {
        let b = BoxBounds::new(vec![-2.0; 2], vec![2.0; 2]).unwrap();
        assert_eq!(project(&[3.0, -3.0], &b), vec![2.0, -2.0]);
        assert_eq!(project(&[0.5, -1.0], &b), vec![0.5, -1.0]);
    }

    #[test]
    fn one_dimensional_clamp() {
        let b = BoxBounds::new(vec![-2.0], vec![2.0]).unwrap();
        let (r, v) = run(quadratic(vec![3.0]), &[0.0], &b, &OptimizerSettings::default());
        assert_eq!(r.status, Status::Converged);
        assert_eq!(r.x, vec![2.0]);
        assert!(r.iterations <= 30);
        assert!(monotone(&v));
    }

    #[test]
    fn separable_quadratic_with_mixed_bounds() {
        let c = vec![3.0, -0.5, -7.0, 0.25, 1.5, -1.9];
        let b = BoxBounds::new(
            vec![-2.0, -1.0, -3.0, 0.0, -1.0, -1.0],
            vec![2.0, 1.0, 3.0, 0.1, 1.0, 1.0],
        )
        .unwrap();
        for memory in [BfgsMemory::Dense, BfgsMemory::Limited(3)] {
            let s = OptimizerSettings {
                memory,
                ..Default::default()
            };
            let (r, v) = run(quadratic(c.clone()), &[0.0; 6], &b, &s);
            let target = project(&c, &b);
            let err =
                r.x.iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            assert!(err <= 1e-8, "{memory:?}: {err}");
            assert!(monotone(&v));
        }
    }

    #[test]
    fn rosenbrock_in_box() {
        let b = BoxBounds::new(vec![-5.0; 2], vec![5.0; 2]).unwrap();
        for memory in [BfgsMemory::Dense, BfgsMemory::Limited(5)] {
            let s = OptimizerSettings {
                memory,
                ..Default::default()
            };
            let (r, v) = run(rosenbrock, &[-1.2, 1.0], &b, &s);
            assert_eq!(r.status, Status::Converged, "{memory:?}");
            assert!(
                (r.x[0] - 1.0).abs() <= 1e-6 && (r.x[1] - 1.0).abs() <= 1e-6,
                "{:?}",
                r.x
            );
            assert!(monotone(&v));
        }
    }

    #[test]
    fn rosenbrock_with_active_bound() {
        // minimizer on the face x1 <= 0.5
        let b = BoxBounds::new(vec![-5.0, -5.0], vec![0.5, 5.0]).unwrap();
        let (r, _) = run(rosenbrock, &[-1.2, 1.0], &b, &OptimizerSettings::default());
        assert_eq!(r.status, Status::Converged);
        assert!(
            (r.x[0] - 0.5).abs() < 1e-12 && (r.x[1] - 0.25).abs() < 1e-6,
            "{:?}",
            r.x
        );
    }

    #[test]
    fn non_finite_objective_aborts() {
        let b = BoxBounds::new(vec![-1.0], vec![1.0]).unwrap();
        let err = minimize(
            |_: &[f64]| Ok(Evaluation::new(f64::NAN, vec![0.0])),
            &[0.0],
            &b,
            &OptimizerSettings::default(),
            &mut |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteObjective { iteration: 0, .. }));
    }

    #[test]
    fn inconsistent_gradient_stalls() {
        // gradient points uphill so no step decreases the value
        let b = BoxBounds::new(vec![-10.0], vec![10.0]).unwrap();
        let (r, _) = run(
            |x: &[f64]| Ok(Evaluation::new(x[0] * x[0], vec![-2.0 * x[0] - 1.0])),
            &[1.0],
            &b,
            &OptimizerSettings::default(),
        );
        assert_eq!(r.status, Status::Stalled);
        assert_eq!(r.x, vec![1.0]);
    }

    #[test]
    fn deterministic_iterates() {
        let b = BoxBounds::new(vec![-5.0; 2], vec![5.0; 2]).unwrap();
        let s = OptimizerSettings::default();
        let (r1, v1) = run(rosenbrock, &[-1.2, 1.0], &b, &s);
        let (r2, v2) = run(rosenbrock, &[-1.2, 1.0], &b, &s);
        assert_eq!(r1, r2);
        assert_eq!(v1, v2);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(
            x in prop::collection::vec(-10.0f64..10.0, 5),
            lo in prop::collection::vec(-3.0f64..0.0, 5),
            width in prop::collection::vec(0.0f64..4.0, 5),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
            let b = BoxBounds::new(lo, hi).unwrap();
            let p = b.project(&x);
            prop_assert!(b.contains(&p));
            prop_assert_eq!(b.project(&p), p);
        }

        #[test]
        fn accepted_iterates_stay_feasible(c in prop::collection::vec(-5.0f64..5.0, 4)) {
            let b = BoxBounds::new(vec![-1.0, 0.0, -2.0, 0.5], vec![1.0, 2.0, 0.0, 0.75]).unwrap();
            let mut seen = Vec::new();
            let mut f = quadratic(c);
            let r = minimize(
                |x: &[f64]| { seen.push(x.to_vec()); f(x) },
                &[0.0, 1.0, -1.0, 0.6],
                &b,
                &OptimizerSettings::default(),
                &mut |_| {},
            ).unwrap();
            prop_assert_eq!(r.status, Status::Converged);
            prop_assert!(seen.iter().all(|x| b.contains(x)));
        }
    }
}
