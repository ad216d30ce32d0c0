//! Finite-dimensional exponential families `p(x, θ) = exp(θᵀc(x) + c₀(x) − ψ(θ))`
//! with polynomial statistics: log-partition, expectations, Fisher matrix,
//! moment matching and grid fitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{eigen_extremes, spd_solve, Jet, Polynomial, QuadratureGrid};

/// Top exponent coefficient must be at most this (negative) value.
pub const DOMAIN_MARGIN: f64 = 1e-8;
/// Boundary density above this fraction of the total mass is a tail error.
/// Trailing parameters this small relative to the largest one are rounding noise.
pub const ROUNDING_FLOOR: f64 = 1e-12;
pub const TAIL_TOLERANCE: f64 = 1e-12;
/// Fisher matrices with `λ_min < FISHER_TOLERANCE · trace` are singular.
pub const FISHER_TOLERANCE: f64 = 1e-10;

/// Sufficient statistics `c = (c_1..c_m)` plus an optional carrier `c₀`
/// whose coefficient is fixed at one.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialFamily {
    statistics: Vec<Polynomial>,
    carrier: Option<Polynomial>,
    tag: String,
}

impl ExponentialFamily {
    pub fn new(
        statistics: Vec<Polynomial>,
        carrier: Option<Polynomial>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if statistics.is_empty() {
            return Err(Error::Validation(
                "a family needs at least one statistic".into(),
            ));
        }
        Ok(ExponentialFamily {
            statistics,
            carrier,
            tag: tag.into(),
        })
    }

    /// Monomials `x, x², …, x^m`. `m` must be even, otherwise no parameter is normalizable.
    pub fn polynomial(max_degree: usize) -> Result<Self> {
        if max_degree == 0 || !max_degree.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "polynomial family needs an even positive top degree, got {max_degree}"
            )));
        }
        ExponentialFamily::new(
            (1..=max_degree).map(Polynomial::monomial).collect(),
            None,
            format!("polynomial degrees 1..{max_degree}"),
        )
    }

    /// `N(θ, 1)`: statistic `x`, carrier `−x²/2 − ½ log 2π`.
    pub fn mean_shift_gaussian() -> Self {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        ExponentialFamily {
            statistics: vec![Polynomial::monomial(1)],
            carrier: Some(Polynomial::new(vec![-half_log_2pi, 0.0, -0.5])),
            tag: "mean-shift gaussian".into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.statistics.len()
    }

    pub fn statistics(&self) -> &[Polynomial] {
        &self.statistics
    }

    pub fn carrier(&self) -> Option<&Polynomial> {
        self.carrier.as_ref()
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Whether the statistics are the monomials `x..x^m` without carrier.
    pub fn is_plain_polynomial(&self) -> bool {
        self.carrier.is_none()
            && self
                .statistics
                .iter()
                .enumerate()
                .all(|(i, c)| *c == Polynomial::monomial(i + 1))
    }

    /// Unnormalized log-density `θᵀc + c₀` as a polynomial.
    pub fn exponent(&self, theta: &[f64]) -> Polynomial {
        let mut poly = Polynomial::linear_combination(&self.statistics, theta);
        if let Some(c0) = &self.carrier {
            poly = poly.add(c0);
        }
        poly
    }

    /// Domain guard: the highest nonzero exponent coefficient must sit at an
    /// even degree and be `≤ −1e-8`.
    pub fn check_domain(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Domain(format!(
                "{} natural parameters for a {}-dimensional family",
                theta.len(),
                self.dim()
            )));
        }
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite natural parameter {bad}")));
        }
        let exponent = self.exponent(theta);
        match exponent.degree() {
            Some(d) if d >= 2 && d % 2 == 0 => {
                let top = exponent.coeffs()[d];
                if top <= -DOMAIN_MARGIN {
                    Ok(())
                } else {
                    Err(Error::Domain(format!(
                        "leading exponent coefficient {top:e} at degree {d} is not below -{DOMAIN_MARGIN:e}"
                    )))
                }
            }
            Some(d) => Err(Error::Domain(format!(
                "exponent has odd or too small leading degree {d}; density not normalizable"
            ))),
            None => Err(Error::Domain("exponent is identically zero".into())),
        }
    }

    /// Zero the trailing parameters of a plain polynomial family that are
    /// rounding noise, so a member of a smaller nested family stays on it.
    pub fn snap_trailing(&self, theta: &mut [f64]) {
        if !self.is_plain_polynomial() {
            return;
        }
        let scale = theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for v in theta.iter_mut().rev() {
            if v.abs() > ROUNDING_FLOOR * scale {
                break;
            }
            *v = 0.0;
        }
    }

    /// Embed `theta` from a lower-dimensional nested family by zero padding.
    pub fn embed(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() > self.dim() {
            return Err(Error::Usage(format!(
                "cannot embed {} parameters into a {}-dimensional family",
                theta.len(),
                self.dim()
            )));
        }
        let mut out = theta.to_vec();
        out.resize(self.dim(), 0.0);
        Ok(out)
    }

    /// Statistic and carrier jets on the grid, reused across θ.
    pub fn on_grid(&self, grid: &QuadratureGrid) -> FamilyGrid {
        let stats = self
            .statistics
            .iter()
            .map(|c| grid.nodes().iter().map(|&x| c.jet(x)).collect())
            .collect();
        let carrier = self
            .carrier
            .as_ref()
            .map(|c0| grid.nodes().iter().map(|&x| c0.jet(x)).collect());
        FamilyGrid {
            family: self.clone(),
            grid: grid.clone(),
            stats,
            carrier,
        }
    }
}

/// An [`ExponentialFamily`] evaluated on a fixed grid.
#[derive(Debug, Clone)]
pub struct FamilyGrid {
    family: ExponentialFamily,
    grid: QuadratureGrid,
    stats: Vec<Vec<Jet>>,
    carrier: Option<Vec<Jet>>,
}

impl FamilyGrid {
    pub fn family(&self) -> &ExponentialFamily {
        &self.family
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// Jets of statistic `i` at the nodes.
    pub fn statistic(&self, i: usize) -> &[Jet] {
        &self.stats[i]
    }

    fn exponent_values(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .map(|k| {
                let base = self.carrier.as_ref().map_or(0.0, |c| c[k].value);
                theta
                    .iter()
                    .zip(&self.stats)
                    .fold(base, |acc, (t, c)| acc + t * c[k].value)
            })
            .collect()
    }

    /// `(∂x log p, ∂xx log p)` at the nodes; the normalizer does not enter.
    pub fn log_density_derivatives(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.len();
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        for k in 0..n {
            if let Some(c) = &self.carrier {
                d1[k] = c[k].dx;
                d2[k] = c[k].dxx;
            }
            for (t, c) in theta.iter().zip(&self.stats) {
                d1[k] += t * c[k].dx;
                d2[k] += t * c[k].dxx;
            }
        }
        (d1, d2)
    }

    /// Normalize at `theta`; fails outside the domain or when the grid clips the tails.
    pub fn state(&self, theta: &[f64]) -> Result<FamilyState<'_>> {
        self.family.check_domain(theta)?;
        let exponent = self.exponent_values(theta);
        let peak = exponent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scaled: f64 = self
            .grid
            .weights()
            .iter()
            .zip(&exponent)
            .map(|(w, e)| w * (e - peak).exp())
            .sum();
        let log_partition = peak + scaled.ln();
        if !log_partition.is_finite() {
            return Err(Error::Numerical(format!(
                "log-partition is not finite at θ = {theta:?}"
            )));
        }
        let log_density: Vec<f64> = exponent.iter().map(|e| e - log_partition).collect();
        let boundary = log_density[0].max(log_density[log_density.len() - 1]);
        if boundary > TAIL_TOLERANCE.ln() {
            return Err(Error::Tail(format!(
                "density {:e} at the grid boundary [{}, {}] exceeds {TAIL_TOLERANCE:e}",
                boundary.exp(),
                self.grid.x_min(),
                self.grid.x_max()
            )));
        }
        let density: Vec<f64> = log_density.iter().map(|l| l.exp()).collect();
        let mean_stats = self
            .stats
            .iter()
            .map(|c| {
                self.grid
                    .weights()
                    .iter()
                    .zip(&density)
                    .zip(c)
                    .map(|((w, p), j)| w * p * j.value)
                    .sum()
            })
            .collect();
        Ok(FamilyState {
            cache: self,
            theta: theta.to_vec(),
            log_partition,
            log_density,
            density,
            mean_stats,
        })
    }
}

/// A normalized member `p(·, θ)` of a family on its grid.
#[derive(Debug, Clone)]
pub struct FamilyState<'a> {
    cache: &'a FamilyGrid,
    theta: Vec<f64>,
    log_partition: f64,
    log_density: Vec<f64>,
    density: Vec<f64>,
    mean_stats: Vec<f64>,
}

impl<'a> FamilyState<'a> {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn grid(&self) -> &'a QuadratureGrid {
        &self.cache.grid
    }

    pub fn family_grid(&self) -> &'a FamilyGrid {
        self.cache
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    /// `E_θ[c]`, the gradient of ψ.
    pub fn mean_stats(&self) -> &[f64] {
        &self.mean_stats
    }

    /// `c_i − E_θ c_i` at the nodes.
    pub fn centered_statistic(&self, i: usize) -> Vec<f64> {
        let mean = self.mean_stats[i];
        self.cache.stats[i].iter().map(|j| j.value - mean).collect()
    }

    pub fn expectation(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.density.len() {
            return Err(Error::Usage(format!(
                "{} values for a grid of {} nodes",
                phi.len(),
                self.density.len()
            )));
        }
        Ok(self.expectation_unchecked(phi))
    }

    fn expectation_unchecked(&self, phi: &[f64]) -> f64 {
        self.cache
            .grid
            .weights()
            .iter()
            .zip(&self.density)
            .zip(phi)
            .map(|((w, p), v)| w * p * v)
            .sum()
    }

    /// Fisher inner product `⟨v1, v2⟩_θ = E_θ[v1 v2]`.
    pub fn inner(&self, v1: &[f64], v2: &[f64]) -> f64 {
        self.cache
            .grid
            .weights()
            .iter()
            .zip(&self.density)
            .zip(v1.iter().zip(v2))
            .map(|((w, p), (a, b))| w * p * a * b)
            .sum()
    }

    /// `(E_θ[x], Var_θ[x])` by quadrature, independent of the statistics.
    pub fn mean_variance(&self) -> (f64, f64) {
        let nodes = self.cache.grid.nodes();
        let mean = self.expectation_unchecked(nodes);
        let centered: Vec<f64> = nodes.iter().map(|x| (x - mean) * (x - mean)).collect();
        (mean, self.expectation_unchecked(&centered))
    }

    /// `g(θ)`: covariance of the statistics. Errors when nearly singular.
    pub fn fisher(&self) -> Result<DMatrix<f64>> {
        let m = self.mean_stats.len();
        let centered: Vec<Vec<f64>> = (0..m).map(|i| self.centered_statistic(i)).collect();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.inner(&centered[i], &centered[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let (lo, _) = eigen_extremes(&g);
        let trace = g.trace();
        if !(lo >= FISHER_TOLERANCE * trace) || !(trace > 0.0) {
            return Err(Error::SingularFisher {
                pivot: lo,
                scale: trace,
            });
        }
        Ok(g)
    }

    /// Density values packaged with their grid.
    pub fn to_density_grid(&self) -> DensityGrid {
        DensityGrid {
            grid: self.cache.grid.clone(),
            values: self.density.clone(),
        }
    }
}

/// Density values on a quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: QuadratureGrid,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(grid: QuadratureGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Usage(format!(
                "{} density values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(DensityGrid { grid, values })
    }

    pub fn from_fn(grid: &QuadratureGrid, f: impl Fn(f64) -> f64) -> Self {
        DensityGrid {
            grid: grid.clone(),
            values: grid.nodes().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn gaussian(grid: &QuadratureGrid, mean: f64, variance: f64) -> Self {
        DensityGrid::from_fn(grid, |x| gaussian_pdf(x, mean, variance))
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate_unchecked(&self.values)
    }

    pub fn mean_variance(&self) -> (f64, f64) {
        let mass = self.mass();
        let nodes = self.grid.nodes();
        let weighted: Vec<f64> = nodes.iter().zip(&self.values).map(|(x, p)| x * p).collect();
        let mean = self.grid.integrate_unchecked(&weighted) / mass;
        let sq: Vec<f64> = nodes
            .iter()
            .zip(&self.values)
            .map(|(x, p)| (x - mean) * (x - mean) * p)
            .collect();
        (mean, self.grid.integrate_unchecked(&sq) / mass)
    }
}

pub fn gaussian_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    (-0.5 * z * z / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// Natural parameters of `N(mean, variance)` in the family `(x, x²)`.
pub fn gaussian_natural(mean: f64, variance: f64) -> [f64; 2] {
    [mean / variance, -0.5 / variance]
}

/// Inverse of [`gaussian_natural`].
pub fn gaussian_from_natural(theta: &[f64]) -> (f64, f64) {
    let variance = -0.5 / theta[1];
    (theta[0] * variance, variance)
}

/// `ψ(θ) = log ∫ exp(θᵀc + c₀) dx` on the grid.
pub fn log_partition(
    family: &ExponentialFamily,
    theta: &[f64],
    grid: &QuadratureGrid,
) -> Result<f64> {
    Ok(family.on_grid(grid).state(theta)?.log_partition())
}

pub fn density(
    family: &ExponentialFamily,
    theta: &[f64],
    grid: &QuadratureGrid,
) -> Result<DensityGrid> {
    Ok(family.on_grid(grid).state(theta)?.to_density_grid())
}

/// `E_θ[φ]` for `φ` given at the nodes.
pub fn expectation(
    family: &ExponentialFamily,
    theta: &[f64],
    phi: &[f64],
    grid: &QuadratureGrid,
) -> Result<f64> {
    family.on_grid(grid).state(theta)?.expectation(phi)
}

pub fn fisher_matrix(
    family: &ExponentialFamily,
    theta: &[f64],
    grid: &QuadratureGrid,
) -> Result<DMatrix<f64>> {
    family.on_grid(grid).state(theta)?.fisher()
}

const NEWTON_MAX_ITERATIONS: usize = 100;
const NEWTON_MAX_HALVINGS: usize = 30;
const NEWTON_TOLERANCE: f64 = 1e-10;

/// Solve `∇ψ(θ) = η` by Newton's method with step halving on the convex
/// objective `ψ(θ) − θᵀη`.
pub fn moment_match(
    family: &ExponentialFamily,
    target: &[f64],
    grid: &QuadratureGrid,
    theta_init: &[f64],
) -> Result<Vec<f64>> {
    if target.len() != family.dim() {
        return Err(Error::Usage(format!(
            "{} target moments for a {}-dimensional family",
            target.len(),
            family.dim()
        )));
    }
    let cache = family.on_grid(grid);
    let residual_of = |state: &FamilyState<'_>| -> (f64, Vec<f64>) {
        let r: Vec<f64> = state
            .mean_stats()
            .iter()
            .zip(target)
            .map(|(e, t)| t - e)
            .collect();
        (r.iter().fold(0.0f64, |m, v| m.max(v.abs())), r)
    };
    let objective = |state: &FamilyState<'_>| -> f64 {
        state.log_partition()
            - state
                .theta()
                .iter()
                .zip(target)
                .map(|(t, e)| t * e)
                .sum::<f64>()
    };

    let mut theta = theta_init.to_vec();
    let mut state = cache.state(&theta)?;
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let (res, r) = residual_of(&state);
        if res <= NEWTON_TOLERANCE {
            return Ok(theta);
        }
        let g = state.fisher()?;
        let step = spd_solve(&g, &DVector::from_vec(r))?.solution;
        let obj = objective(&state);

        let mut lambda = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            let candidate: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t + lambda * s)
                .collect();
            match cache.state(&candidate) {
                Ok(next) => {
                    let (next_res, _) = residual_of(&next);
                    if objective(&next) < obj || next_res < res {
                        accepted = Some((candidate, next));
                        break;
                    }
                }
                Err(e) => last_err = Some(e),
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((t, s)) => {
                theta = t;
                state = s;
            }
            None => {
                return Err(match last_err {
                    Some(Error::Domain(msg)) | Some(Error::Tail(msg)) => Error::Domain(format!(
                        "Newton iterate left the domain after {NEWTON_MAX_HALVINGS} halvings: {msg}"
                    )),
                    Some(other) => other,
                    None => Error::NonConvergence {
                        iterations: NEWTON_MAX_ITERATIONS,
                        residual: res,
                    },
                });
            }
        }
    }
    let (res, _) = residual_of(&state);
    if res <= NEWTON_TOLERANCE {
        Ok(theta)
    } else {
        Err(Error::NonConvergence {
            iterations: NEWTON_MAX_ITERATIONS,
            residual: res,
        })
    }
}

/// How grids are sized and when they are rebuilt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPolicy {
    pub panels: usize,
    pub nodes_per_panel: usize,
    /// Grid ends where the log-density drops this far below its peak.
    pub log_cutoff: f64,
    /// Rebuild once the ±8 sd interval leaves the bounds by this fraction of the width.
    pub regrid_tolerance: f64,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            panels: 64,
            nodes_per_panel: 16,
            log_cutoff: 46.0,
            regrid_tolerance: 0.1,
        }
    }
}

impl GridPolicy {
    /// Build a Gauss–Legendre grid over the region where
    /// `log p ≥ max log p − log_cutoff`, extended to cover `mean ± 8 sd`.
    pub fn fit(&self, family: &ExponentialFamily, theta: &[f64]) -> Result<QuadratureGrid> {
        family.check_domain(theta)?;
        let e = family.exponent(theta);
        let (lo, hi) = significant_interval(&e, self.log_cutoff)?;
        let margin = 0.01 * (hi - lo);
        let core = QuadratureGrid::gauss_legendre(
            lo - margin,
            hi + margin,
            self.panels,
            self.nodes_per_panel,
        )?;
        // light-tailed members: widen to ±8 sd so the regrid test starts out satisfied
        let (mean, variance) = family.on_grid(&core).state(theta)?.mean_variance();
        let sd = variance.sqrt();
        let (lo8, hi8) = (mean - 8.0 * sd, mean + 8.0 * sd);
        if lo8 >= core.x_min() && hi8 <= core.x_max() {
            return Ok(core);
        }
        QuadratureGrid::gauss_legendre(
            lo8.min(core.x_min()),
            hi8.max(core.x_max()),
            self.panels,
            self.nodes_per_panel,
        )
    }

    /// True when the `mean ± 8 sd` interval leaves the grid by more than the
    /// tolerance, or has shrunk below a quarter of the grid width.
    pub fn needs_regrid(&self, grid: &QuadratureGrid, mean: f64, variance: f64) -> bool {
        let sd = variance.max(0.0).sqrt();
        let (lo, hi) = (mean - 8.0 * sd, mean + 8.0 * sd);
        let width = grid.x_max() - grid.x_min();
        let slack = self.regrid_tolerance * width;
        lo < grid.x_min() - slack || hi > grid.x_max() + slack || (hi - lo) < 0.25 * width
    }

    /// [`needs_regrid`](Self::needs_regrid) for `state`, also true when the
    /// log-density at an outermost node is within `log_cutoff − 10` of its peak.
    pub fn needs_regrid_state(&self, state: &FamilyState<'_>) -> bool {
        let (mean, var) = state.mean_variance();
        let logp = state.log_density();
        let peak = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let edge = logp[0].max(logp[logp.len() - 1]);
        self.needs_regrid(state.grid(), mean, var) || edge > peak - (self.log_cutoff - TAIL_SLACK)
    }
}

/// Log-density headroom lost before a fitted grid is refitted.
const TAIL_SLACK: f64 = 10.0;

/// Interval on which the polynomial `e` stays within `cutoff` of its maximum.
/// `e` must tend to −∞ on both sides.
fn significant_interval(e: &Polynomial, cutoff: f64) -> Result<(f64, f64)> {
    let de = e.derivative();
    let d = de
        .degree()
        .ok_or_else(|| Error::Domain("constant exponent".into()))?;
    let lead = de.coeffs()[d];
    // every critical point of e lies inside [-radius, radius] (Cauchy bound)
    let radius = 1.0
        + de.coeffs()[..d]
            .iter()
            .map(|c| (c / lead).abs())
            .fold(0.0, f64::max);

    const SCAN: usize = 20_001;
    let step = 2.0 * radius / (SCAN - 1) as f64;
    let xs: Vec<f64> = (0..SCAN).map(|i| -radius + i as f64 * step).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| e.eval(x)).collect();
    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = peak - cutoff;

    let first = vals
        .iter()
        .position(|&v| v >= level)
        .expect("peak is on the scan");
    let last = vals
        .iter()
        .rposition(|&v| v >= level)
        .expect("peak is on the scan");

    // e is monotone outside [-radius, radius]
    let outward = |inside: f64, direction: f64| -> f64 {
        let mut span = step.max(radius);
        let mut outside = inside + direction * span;
        let mut guard = 0;
        while e.eval(outside) >= level && guard < 200 {
            span *= 2.0;
            outside = inside + direction * span;
            guard += 1;
        }
        bisect_level(e, level, inside, outside)
    };

    let lo = if first == 0 {
        outward(xs[0], -1.0)
    } else {
        bisect_level(e, level, xs[first], xs[first - 1])
    };
    let hi = if last == SCAN - 1 {
        outward(xs[SCAN - 1], 1.0)
    } else {
        bisect_level(e, level, xs[last], xs[last + 1])
    };
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Numerical(format!(
            "could not bracket the density support (got [{lo}, {hi}])"
        )));
    }
    Ok((lo, hi))
}

/// Point between `inside` (e ≥ level) and `outside` (e < level) where e crosses level.
fn bisect_level(e: &Polynomial, level: f64, mut inside: f64, mut outside: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (inside + outside);
        if mid == inside || mid == outside {
            break;
        }
        if e.eval(mid) >= level {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    outside
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide() -> QuadratureGrid {
        QuadratureGrid::gauss_legendre(-12.0, 12.0, 64, 16).unwrap()
    }

    #[test]
    fn snapping_only_touches_trailing_noise() {
        let fam = ExponentialFamily::polynomial(4).unwrap();
        let mut th = vec![1e-14, -0.5, 3e-16, 1e-15];
        fam.snap_trailing(&mut th);
        assert_eq!(th, vec![1e-14, -0.5, 0.0, 0.0]);
        let mut th = vec![0.1, -0.5, 0.0, -1e-3];
        fam.snap_trailing(&mut th);
        assert_eq!(th, vec![0.1, -0.5, 0.0, -1e-3]);
    }

    #[test]
    fn log_partition_examples() {
        let g = wide();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_partition(&gauss, &[0.0, -0.5], &g).unwrap() - half_log_2pi).abs() < 1e-13);
        assert!(
            (log_partition(&gauss, &[0.0, -1.0], &g).unwrap() - 0.5 * std::f64::consts::PI.ln())
                .abs()
                < 1e-13
        );
        let shift = ExponentialFamily::mean_shift_gaussian();
        assert!(log_partition(&shift, &[0.0], &g).unwrap().abs() < 1e-13);
    }

    #[test]
    fn density_examples() {
        let g = QuadratureGrid::gauss_legendre(-12.0, 13.0, 25, 16).unwrap();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let zero = g.nodes().iter().position(|x| x.abs() < 1e-12);
        let p = density(&gauss, &[0.0, -0.5], &g).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-10);
        assert!(p.values.iter().all(|v| *v > 0.0));
        if let Some(k) = zero {
            assert!((p.values[k] - 0.398942280401432).abs() < 1e-12);
        }
        // off-node check through the interpolant
        let at0 = g.interpolate(&p.values, 0.0).unwrap();
        assert!((at0 - 0.398942280401432).abs() < 1e-12);
        let shifted = density(&gauss, &[1.0, -0.5], &g).unwrap();
        let at1 = g.interpolate(&shifted.values, 1.0).unwrap();
        assert!((at1 - 0.398942280401432).abs() < 1e-12);
    }

    #[test]
    fn expectation_examples() {
        let g = wide();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let ones = vec![1.0; g.len()];
        assert!((expectation(&gauss, &[0.0, -0.5], &ones, &g).unwrap() - 1.0).abs() < 1e-12);
        let x4: Vec<f64> = g.nodes().iter().map(|x| x.powi(4)).collect();
        assert!((expectation(&gauss, &[0.0, -0.5], &x4, &g).unwrap() - 3.0).abs() < 1e-9);
        let (m, q) = (0.7, 0.4);
        let theta = gaussian_natural(m, q);
        let xs = g.nodes().to_vec();
        assert!((expectation(&gauss, &theta, &xs, &g).unwrap() - m).abs() < 1e-12);
    }

    #[test]
    fn fisher_examples() {
        let g = wide();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let f = fisher_matrix(&gauss, &[0.0, -0.5], &g).unwrap();
        for (got, want) in f.iter().zip([1.0, 0.0, 0.0, 2.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        let q = 0.6;
        let f = fisher_matrix(&gauss, &gaussian_natural(0.0, q), &g).unwrap();
        assert!((f[(0, 0)] - q).abs() < 1e-12);
        assert!((f[(1, 1)] - 2.0 * q * q).abs() < 1e-12);
        assert!(f[(0, 1)].abs() < 1e-13);
    }

    #[test]
    fn fisher_ignores_constant_shifts() {
        let g = wide();
        let shifted = ExponentialFamily::new(
            vec![
                Polynomial::new(vec![3.0, 1.0]),
                Polynomial::new(vec![-2.0, 0.0, 1.0]),
            ],
            None,
            "shifted",
        )
        .unwrap();
        let plain = ExponentialFamily::polynomial(2).unwrap();
        let theta = [0.3, -0.7];
        let a = fisher_matrix(&shifted, &theta, &g).unwrap();
        let b = fisher_matrix(&plain, &theta, &g).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn domain_guard() {
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        assert!(gauss.check_domain(&[0.0, -0.5]).is_ok());
        assert!(matches!(
            gauss.check_domain(&[0.0, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            gauss.check_domain(&[0.0, -1e-9]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(gauss.check_domain(&[1.0]), Err(Error::Domain(_))));
        let quartic = ExponentialFamily::polynomial(4).unwrap();
        // a zero top coefficient falls back to the next nonzero even degree
        assert!(quartic.check_domain(&[0.0, -0.5, 0.0, 0.0]).is_ok());
        assert!(quartic.check_domain(&[0.0, -0.5, 1.0, 0.0]).is_err());
        assert!(quartic.check_domain(&[0.0, 0.5, 0.0, -0.1]).is_ok());
        assert!(ExponentialFamily::polynomial(3).is_err());
        let shift = ExponentialFamily::mean_shift_gaussian();
        assert!(shift.check_domain(&[5.0]).is_ok());
    }

    #[test]
    fn tail_error_when_grid_clips_density() {
        let narrow = QuadratureGrid::gauss_legendre(-2.0, 2.0, 8, 16).unwrap();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        assert!(matches!(
            log_partition(&gauss, &[0.0, -0.5], &narrow),
            Err(Error::Tail(_))
        ));
    }

    #[test]
    fn moment_match_examples() {
        let g = wide();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let theta = moment_match(&gauss, &[0.0, 1.0], &g, &[0.2, -0.3]).unwrap();
        assert!(theta[0].abs() < 1e-9 && (theta[1] + 0.5).abs() < 1e-9);
        let theta = moment_match(&gauss, &[1.0, 2.0], &g, &[0.0, -0.5]).unwrap();
        assert!((theta[0] - 1.0).abs() < 1e-9 && (theta[1] + 0.5).abs() < 1e-9);
        let init = [0.4, -0.8];
        let eta = gauss
            .on_grid(&g)
            .state(&init)
            .unwrap()
            .mean_stats()
            .to_vec();
        assert_eq!(
            moment_match(&gauss, &eta, &g, &init).unwrap(),
            init.to_vec()
        );
    }

    #[test]
    fn moment_match_quartic_family() {
        let g = wide();
        let quartic = ExponentialFamily::polynomial(4).unwrap();
        let truth = [0.2, 0.5, -0.1, -0.25];
        let eta = quartic
            .on_grid(&g)
            .state(&truth)
            .unwrap()
            .mean_stats()
            .to_vec();
        let theta = moment_match(&quartic, &eta, &g, &[0.0, -0.5, 0.0, -0.1]).unwrap();
        for (a, b) in theta.iter().zip(truth) {
            assert!((a - b).abs() < 1e-7, "{theta:?}");
        }
    }

    #[test]
    fn moment_match_rejects_unreachable_moments() {
        let g = wide();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        // E x² < (E x)² is outside the moment range
        assert!(moment_match(&gauss, &[2.0, 1.0], &g, &[0.0, -0.5]).is_err());
    }

    #[test]
    fn fitted_grid_covers_density() {
        let policy = GridPolicy::default();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let grid = policy.fit(&gauss, &gaussian_natural(3.0, 0.25)).unwrap();
        // log-density 46 below peak at √92 sd
        assert!((grid.x_min() - (3.0 - 92f64.sqrt() * 0.5 * 1.02)).abs() < 0.05);
        assert!(gauss
            .on_grid(&grid)
            .state(&gaussian_natural(3.0, 0.25))
            .is_ok());
        let quartic = ExponentialFamily::polynomial(4).unwrap();
        let theta = [0.0, 2.0, 0.0, -1.0];
        let grid = policy.fit(&quartic, &theta).unwrap();
        let cache = quartic.on_grid(&grid);
        let st = cache.state(&theta).unwrap();
        assert!((st.to_density_grid().mass() - 1.0).abs() < 1e-12);
        assert!(!policy.needs_regrid(&grid, 0.0, st.mean_variance().1));
        assert!(policy.needs_regrid(&grid, 20.0, 1.0));
        assert!(!policy.needs_regrid_state(&st));
        let wider = quartic.on_grid(&grid);
        let wider = wider.state(&[0.0, 2.0, 0.0, -0.3]).unwrap();
        assert!(policy.needs_regrid_state(&wider));
    }
}
