//! Fisher-orthogonal projection onto the tangent space of an exponential family
//! and integration of the projected parameter ODE `θ̇ = g⁻¹(θ) E_θ[L c]`.

use std::fmt;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{ExponentialFamily, FamilyGrid, FamilyState, GridPolicy};
use crate::models::{alpha_from_log_derivatives, DiffusionModel};
use crate::numerics::{rk4_step_with_estimate, spd_solve, QuadratureGrid};

/// `E_θ[α² ]` above this is treated as a failure of square integrability.
pub const CONDITION_F_OVERFLOW: f64 = 1e200;
/// Boundary share of the `α² p` integrand above which the tails dominate.
pub const CONDITION_F_TAIL: f64 = 1e-6;

/// Result of projecting a function `v` onto `span{c_i − E_θ c_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `b = g⁻¹ ⟨v, c − E_θ c⟩_θ`
    pub coefficients: Vec<f64>,
    /// `Π v = bᵀ(c − E_θ c)` at the nodes.
    pub projected: Vec<f64>,
    /// `v − Π v` at the nodes.
    pub remainder: Vec<f64>,
    /// `‖v − Π v‖_θ`
    pub residual_norm: f64,
}

/// Project `v` (values at the grid nodes) at an already normalized state.
pub fn project_state(state: &FamilyState<'_>, v: &[f64]) -> Result<Projection> {
    let n = state.density().len();
    if v.len() != n {
        return Err(Error::Usage(format!(
            "{} values for a grid of {n} nodes",
            v.len()
        )));
    }
    let m = state.mean_stats().len();
    let centered: Vec<Vec<f64>> = (0..m).map(|i| state.centered_statistic(i)).collect();
    let g = state.fisher()?;
    let rhs = DVector::from_iterator(m, centered.iter().map(|c| state.inner(v, c)));
    let b = spd_solve(&g, &rhs)?.solution;
    let mut projected = vec![0.0; n];
    for (bi, c) in b.iter().zip(&centered) {
        for (p, ci) in projected.iter_mut().zip(c) {
            *p += bi * ci;
        }
    }
    let remainder: Vec<f64> = v.iter().zip(&projected).map(|(a, b)| a - b).collect();
    let residual_norm = state.inner(&remainder, &remainder).max(0.0).sqrt();
    Ok(Projection {
        coefficients: b.iter().copied().collect(),
        projected,
        remainder,
        residual_norm,
    })
}

pub fn project(
    family: &ExponentialFamily,
    theta: &[f64],
    v: &[f64],
    grid: &QuadratureGrid,
) -> Result<Projection> {
    let cache = family.on_grid(grid);
    let state = cache.state(theta)?;
    project_state(&state, v)
}

/// `‖v − Π_θ v‖_θ`
pub fn residual_norm(
    family: &ExponentialFamily,
    theta: &[f64],
    v: &[f64],
    grid: &QuadratureGrid,
) -> Result<f64> {
    Ok(project(family, theta, v, grid)?.residual_norm)
}

/// Everything computed for one evaluation of the projected vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEvaluation {
    /// `θ̇ = g⁻¹ E_θ[L c]`
    pub theta_dot: Vec<f64>,
    /// Coefficients of `Π α`; agree with `theta_dot` up to quadrature error.
    pub alpha_coefficients: Vec<f64>,
    /// `‖α − Π α‖_θ`
    pub residual: f64,
    /// Spectral condition number of `g(θ)`.
    pub fisher_condition: f64,
    pub mean: f64,
    pub variance: f64,
}

/// `E_θ[L c_i]` for each statistic.
pub fn expected_generator(model: &DiffusionModel, t: f64, state: &FamilyState<'_>) -> Vec<f64> {
    let cache = state.family_grid();
    let grid = cache.grid();
    let f: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| model.drift.value(t, x))
        .collect();
    let a: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| model.diffusion.value(t, x))
        .collect();
    (0..state.mean_stats().len())
        .map(|i| {
            let lc: Vec<f64> = cache
                .statistic(i)
                .iter()
                .zip(f.iter().zip(&a))
                .map(|(j, (fv, av))| fv * j.dx + 0.5 * av * j.dxx)
                .collect();
            state.expectation(&lc).expect("lengths match the grid")
        })
        .collect()
}

/// α at the nodes, after checking that `α² p` is integrable on the grid.
pub fn checked_alpha(model: &DiffusionModel, t: f64, state: &FamilyState<'_>) -> Result<Vec<f64>> {
    let cache = state.family_grid();
    let grid = cache.grid();
    let (l1, l2) = cache.log_density_derivatives(state.theta());
    let alpha = alpha_from_log_derivatives(model, t, grid.nodes(), &l1, &l2);
    let integrand: Vec<f64> = alpha
        .iter()
        .zip(state.density())
        .map(|(a, p)| a * a * p)
        .collect();
    let second_moment = grid.integrate(&integrand)?;
    if !second_moment.is_finite() || second_moment > CONDITION_F_OVERFLOW {
        return Err(Error::ConditionF(format!(
            "E[α²] = {second_moment:e} at t = {t}"
        )));
    }
    let peak = integrand.iter().copied().fold(0.0f64, f64::max);
    let edge = integrand[0].max(integrand[integrand.len() - 1]);
    if peak > 0.0 && edge > CONDITION_F_TAIL * peak {
        return Err(Error::ConditionF(format!(
            "α² p at the grid boundary is {:e} of its peak at t = {t}",
            edge / peak
        )));
    }
    Ok(alpha)
}

/// Evaluate the projected field together with its diagnostics.
pub fn evaluate_field(
    model: &DiffusionModel,
    t: f64,
    state: &FamilyState<'_>,
) -> Result<FieldEvaluation> {
    let alpha = checked_alpha(model, t, state)?;
    let g = state.fisher()?;
    let lc = expected_generator(model, t, state);
    let report = spd_solve(&g, &DVector::from_vec(lc))?;
    let alpha_proj = project_state(state, &alpha)?;
    let (mean, variance) = state.mean_variance();
    Ok(FieldEvaluation {
        theta_dot: report.solution.iter().copied().collect(),
        alpha_coefficients: alpha_proj.coefficients,
        residual: alpha_proj.residual_norm,
        fisher_condition: report.condition,
        mean,
        variance,
    })
}

/// `θ̇ = g⁻¹(θ) E_θ[L_t c]`
pub fn projected_field(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta: &[f64],
    t: f64,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let cache = family.on_grid(grid);
    let state = cache.state(theta)?;
    checked_alpha(model, t, &state)?;
    let g = state.fisher()?;
    let lc = expected_generator(model, t, &state);
    Ok(spd_solve(&g, &DVector::from_vec(lc))?
        .solution
        .iter()
        .copied()
        .collect())
}

fn field_only(
    model: &DiffusionModel,
    cache: &FamilyGrid,
    t: f64,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let mut theta = theta.to_vec();
    cache.family().snap_trailing(&mut theta);
    let state = cache.state(&theta)?;
    let g = state.fisher()?;
    let lc = expected_generator(model, t, &state);
    Ok(spd_solve(&g, &DVector::from_vec(lc))?
        .solution
        .iter()
        .copied()
        .collect())
}

/// Parameter trajectory on a uniform time grid with per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ThetaTrajectory {
    pub step: f64,
    pub times: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    /// `‖α − Π α‖_θ` at each time.
    pub residuals: Vec<f64>,
    pub fisher_condition: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Richardson estimate of the local RK4 error for the step ending at each time (0 at t = 0).
    pub step_error: Vec<f64>,
    /// Largest `|θ̇ − coefficients of Π α|` seen.
    pub max_duality_gap: f64,
    pub regrids: usize,
    /// Bounds of the grid in use at the last recorded time.
    pub final_grid: Option<(f64, f64)>,
}

impl ThetaTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_theta(&self) -> Option<&[f64]> {
        self.thetas.last().map(|t| t.as_slice())
    }

    /// `∫ ‖α − Π α‖ dt` by the trapezoid rule over the recorded times.
    pub fn integrated_residual(&self) -> f64 {
        self.residuals
            .windows(2)
            .map(|w| 0.5 * self.step * (w[0] + w[1]))
            .sum()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }

    /// θ at time `t` by linear interpolation between recorded times.
    pub fn theta_at(&self, t: f64) -> Option<Vec<f64>> {
        let n = self.times.len();
        if n == 0 {
            return None;
        }
        if n == 1 || t <= self.times[0] {
            return Some(self.thetas[0].clone());
        }
        if t >= self.times[n - 1] {
            return Some(self.thetas[n - 1].clone());
        }
        let k = (((t - self.times[0]) / self.step).floor() as usize).min(n - 2);
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        Some(
            self.thetas[k]
                .iter()
                .zip(&self.thetas[k + 1])
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        )
    }

    fn push(&mut self, t: f64, theta: Vec<f64>, eval: &FieldEvaluation, step_error: f64) {
        self.times.push(t);
        self.thetas.push(theta);
        self.residuals.push(eval.residual);
        self.fisher_condition.push(eval.fisher_condition);
        self.means.push(eval.mean);
        self.variances.push(eval.variance);
        self.step_error.push(step_error);
        let gap = eval
            .theta_dot
            .iter()
            .zip(&eval.alpha_coefficients)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.max_duality_gap = self.max_duality_gap.max(gap);
    }

    /// Write `t, theta_1..theta_m, residual, mean_x, var_x` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.thetas.first().map_or(0, |t| t.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|i| format!("theta_{i}")));
        header.extend(["residual", "mean_x", "var_x"].map(String::from));
        w.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![fmt_num(self.times[k])];
            row.extend(self.thetas[k].iter().map(|v| fmt_num(*v)));
            row.push(fmt_num(self.residuals[k]));
            row.push(fmt_num(self.means[k]));
            row.push(fmt_num(self.variances[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal that round-trips.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

/// Integration stopped early; carries what was computed before the failure.
#[derive(Debug)]
pub struct IntegrationFailure {
    pub partial: ThetaTrajectory,
    pub time: f64,
    pub error: Error,
}

impl fmt::Display for IntegrationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trajectory stopped at t = {} after {} recorded steps: {}",
            self.time,
            self.partial.len(),
            self.error
        )
    }
}

impl std::error::Error for IntegrationFailure {}

impl From<IntegrationFailure> for Error {
    fn from(f: IntegrationFailure) -> Self {
        Error::stage("integrate_theta", Some(f.time), f.error)
    }
}

/// Number of uniform steps of size `h` covering `[0, t_end]`.
pub fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(t_end > 0.0 && t_end.is_finite()) || !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!(
            "need T > 0 and h > 0, got T = {t_end}, h = {h}"
        )));
    }
    let n = (t_end / h).round();
    if n < 1.0 || (n * h - t_end).abs() > 1e-9 * t_end {
        return Err(Error::Usage(format!(
            "T = {t_end} is not a whole number of steps h = {h}"
        )));
    }
    Ok(n as usize)
}

/// RK4 integration of the projected field from `theta0` over `[0, t_end]`.
/// The grid is fitted with `policy` at the start and refitted whenever the
/// policy asks for it, or once after a tail error inside a step.
pub fn integrate_theta(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta0: &[f64],
    t_end: f64,
    h: f64,
    policy: &GridPolicy,
) -> std::result::Result<ThetaTrajectory, IntegrationFailure> {
    let mut traj = ThetaTrajectory {
        step: h,
        ..ThetaTrajectory::default()
    };
    let fail = |traj: &ThetaTrajectory, time: f64, error: Error| IntegrationFailure {
        partial: traj.clone(),
        time,
        error,
    };
    let steps = step_count(t_end, h).map_err(|e| fail(&traj, 0.0, e))?;
    let grid = policy
        .fit(family, theta0)
        .map_err(|e| fail(&traj, 0.0, e))?;
    let mut cache = family.on_grid(&grid);

    let eval = cache
        .state(theta0)
        .and_then(|s| evaluate_field(model, 0.0, &s))
        .map_err(|e| fail(&traj, 0.0, e))?;
    traj.push(0.0, theta0.to_vec(), &eval, 0.0);
    traj.final_grid = Some((grid.x_min(), grid.x_max()));

    let mut theta = theta0.to_vec();
    for k in 0..steps {
        let t = k as f64 * h;
        let attempt = |cache: &FamilyGrid| {
            rk4_step_with_estimate(|s, y| field_only(model, cache, s, y), t, &theta, h)
        };
        let (mut next, err) = match attempt(&cache) {
            Ok(r) => r,
            Err(Error::Tail(_)) => {
                let grid = policy.fit(family, &theta).map_err(|e| fail(&traj, t, e))?;
                cache = family.on_grid(&grid);
                traj.regrids += 1;
                attempt(&cache).map_err(|e| fail(&traj, t, e))?
            }
            Err(e) => return Err(fail(&traj, t, e)),
        };
        let t_next = (k + 1) as f64 * h;
        family.snap_trailing(&mut next);
        if let Err(e) = family.check_domain(&next) {
            return Err(fail(&traj, t_next, e));
        }
        let eval = match cache.state(&next) {
            Ok(state) => {
                if policy.needs_regrid_state(&state) {
                    None
                } else {
                    Some(evaluate_field(model, t_next, &state))
                }
            }
            Err(Error::Tail(_)) => None,
            Err(e) => Some(Err(e)),
        };
        let eval = match eval {
            Some(r) => r.map_err(|e| fail(&traj, t_next, e))?,
            None => {
                let grid = policy
                    .fit(family, &next)
                    .map_err(|e| fail(&traj, t_next, e))?;
                cache = family.on_grid(&grid);
                traj.regrids += 1;
                cache
                    .state(&next)
                    .and_then(|s| evaluate_field(model, t_next, &s))
                    .map_err(|e| fail(&traj, t_next, e))?
            }
        };
        theta = next;
        traj.push(t_next, theta.clone(), &eval, err);
        traj.final_grid = Some((cache.grid().x_min(), cache.grid().x_max()));
    }
    Ok(traj)
}
