//! The drift `u*` under which a diffusion with the original `σ` has exactly
//! the projected density evolution, and Monte Carlo simulation of that diffusion.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{DensityGrid, ExponentialFamily, FamilyState, GridPolicy};
use crate::models::DiffusionModel;
use crate::numerics::{
    gauss_legendre_reference, linear_interpolate, spd_solve, Polynomial, QuadratureGrid,
};
use crate::projection::{expected_generator, project_state, ThetaTrajectory};

/// Integrand share at the grid ends above which the truncated `−∞` bound is rejected.
pub const USTAR_TAIL_TOLERANCE: f64 = 1e-12;
/// Nodes with `p ≥ INTERIOR_DENSITY · max p` count as interior.
pub const INTERIOR_DENSITY: f64 = 1e-6;
/// Default number of histogram bins.
pub const DEFAULT_BINS: usize = 100;
/// Largest tolerated fraction of exploded paths.
pub const MAX_EXCLUDED_FRACTION: f64 = 1e-3;

/// `∫_{−∞}^{x} v dy` at each node, taken as `−∫_x^{∞} v dy` right of the
/// density's mode. Valid because `v` integrates to zero over the line.
/// `tails` holds the mass of `v` left of `x_min` and right of `x_max`.
fn signed_prefix(
    grid: &QuadratureGrid,
    v: &[f64],
    split: usize,
    tails: (f64, f64),
) -> Result<Vec<f64>> {
    let left = grid.cumulative(v)?;
    let right = grid.cumulative_from_right(v)?;
    Ok((0..v.len())
        .map(|k| {
            if k <= split {
                tails.0 + left[k]
            } else {
                -(tails.1 + right[k])
            }
        })
        .collect())
}

/// `∫ g e^ℓ` beyond `x` (left tail when `left`), by two integrations by parts:
/// `e^ℓ (g/ℓ' − g'/ℓ'² + g ℓ''/ℓ'³)` with the sign of the tail's direction.
fn laplace_tail(g: &Polynomial, ell: &Polynomial, x: f64, left: bool) -> f64 {
    let gj = g.jet(x);
    let lj = ell.jet(x);
    if lj.dx == 0.0 {
        return 0.0;
    }
    let d = lj.dx;
    let series = gj.value / d - gj.dx / (d * d) + gj.value * lj.dxx / (d * d * d);
    let v = lj.value.exp() * series;
    if left {
        v
    } else {
        -v
    }
}

fn mode_index(state: &FamilyState<'_>) -> usize {
    state
        .log_density()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn tail_guard(integrand: &[f64], what: &str) -> Result<()> {
    let peak = integrand.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge = integrand[0].abs().max(integrand[integrand.len() - 1].abs());
    if peak > 0.0 && edge > USTAR_TAIL_TOLERANCE * peak {
        return Err(Error::Tail(format!(
            "{what} integrand at the grid boundary is {:e} of its maximum",
            edge / peak
        )));
    }
    Ok(())
}

/// `b = g⁻¹ E_θ[L c]`
fn generator_coefficients(
    model: &DiffusionModel,
    t: f64,
    state: &FamilyState<'_>,
) -> Result<Vec<f64>> {
    let g = state.fisher()?;
    let lc = expected_generator(model, t, state);
    Ok(spd_solve(&g, &DVector::from_vec(lc))?
        .solution
        .iter()
        .copied()
        .collect())
}

/// Closed form `u*(x) = ½∂a + ½a ∂log p − bᵀ ∫_{−∞}^x (c − E_θc) p dy / p(x)`.
pub fn ustar_state(model: &DiffusionModel, t: f64, state: &FamilyState<'_>) -> Result<Vec<f64>> {
    let cache = state.family_grid();
    let grid = cache.grid();
    let b = generator_coefficients(model, t, state)?;
    let n = grid.len();
    let mut integrand = vec![0.0; n];
    for (i, bi) in b.iter().enumerate() {
        for (s, c) in integrand.iter_mut().zip(state.centered_statistic(i)) {
            *s += bi * c;
        }
    }
    for (s, p) in integrand.iter_mut().zip(state.density()) {
        *s *= p;
    }
    tail_guard(&integrand, "u*")?;
    let family = cache.family();
    let mut g = Polynomial::linear_combination(family.statistics(), &b);
    let shift: f64 = b.iter().zip(state.mean_stats()).map(|(bi, e)| bi * e).sum();
    g = g.add(&Polynomial::new(vec![-shift]));
    let ell = family
        .exponent(state.theta())
        .add(&Polynomial::new(vec![-state.log_partition()]));
    let tails = (
        laplace_tail(&g, &ell, grid.x_min(), true),
        laplace_tail(&g, &ell, grid.x_max(), false),
    );
    let prefix = signed_prefix(grid, &integrand, mode_index(state), tails)?;
    let (l1, _) = cache.log_density_derivatives(state.theta());
    Ok((0..n)
        .map(|k| {
            let a = model.diffusion.jet(t, grid.nodes()[k]);
            // prefix/p through the log density so tiny p never divides directly
            let ratio = prefix[k] * (-state.log_density()[k]).exp();
            0.5 * a.dx + 0.5 * a.value * l1[k] - ratio
        })
        .collect())
}

pub fn ustar(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta: &[f64],
    t: f64,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let cache = family.on_grid(grid);
    let state = cache.state(theta)?;
    ustar_state(model, t, &state)
}

/// Right-hand side of the drift equation `∂x u + ∂x log p · u = B`:
/// `B = ½ D − ½ Π D + Π E` with `D = ∂xx(a p)/p` and `E = ∂x(f p)/p`.
pub fn drift_equation_rhs(
    model: &DiffusionModel,
    t: f64,
    state: &FamilyState<'_>,
) -> Result<Vec<f64>> {
    let cache = state.family_grid();
    let grid = cache.grid();
    let (l1, l2) = cache.log_density_derivatives(state.theta());
    let mut d = Vec::with_capacity(grid.len());
    let mut e = Vec::with_capacity(grid.len());
    for (k, &x) in grid.nodes().iter().enumerate() {
        let a = model.diffusion.jet(t, x);
        let f = model.drift.jet(t, x);
        d.push(a.dxx + 2.0 * a.dx * l1[k] + a.value * (l2[k] + l1[k] * l1[k]));
        e.push(f.dx + f.value * l1[k]);
    }
    let pd = project_state(state, &d)?;
    let pe = project_state(state, &e)?;
    Ok((0..grid.len())
        .map(|k| 0.5 * d[k] - 0.5 * pd.projected[k] + pe.projected[k])
        .collect())
}

/// `u* p = ∫_{−∞}^x B p dy`, integrating the drift equation without expanding `∂xx(a p)`.
pub fn ustar_unexpanded_state(
    model: &DiffusionModel,
    t: f64,
    state: &FamilyState<'_>,
) -> Result<Vec<f64>> {
    let grid = state.grid();
    let rhs = drift_equation_rhs(model, t, state)?;
    let integrand: Vec<f64> = rhs
        .iter()
        .zip(state.density())
        .map(|(b, p)| b * p)
        .collect();
    tail_guard(&integrand, "drift equation")?;
    let prefix = signed_prefix(grid, &integrand, mode_index(state), (0.0, 0.0))?;
    Ok(prefix
        .iter()
        .zip(state.log_density())
        .map(|(s, l)| s * (-l).exp())
        .collect())
}

pub fn ustar_unexpanded(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta: &[f64],
    t: f64,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let cache = family.on_grid(grid);
    let state = cache.state(theta)?;
    ustar_unexpanded_state(model, t, &state)
}

/// Indices with `p ≥ 1e-6 · max p`.
pub fn interior_nodes(state: &FamilyState<'_>) -> Vec<usize> {
    let peak = state
        .log_density()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = peak + INTERIOR_DENSITY.ln();
    state
        .log_density()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= cut)
        .map(|(i, _)| i)
        .collect()
}

/// `∂x u* + ∂x log p · u* − B` at every node, with `∂x u*` by spectral differentiation.
pub fn drift_pde_residual_state(
    model: &DiffusionModel,
    t: f64,
    state: &FamilyState<'_>,
) -> Result<Vec<f64>> {
    let cache = state.family_grid();
    let u = ustar_state(model, t, state)?;
    let du = cache.grid().differentiate(&u)?;
    let (l1, _) = cache.log_density_derivatives(state.theta());
    let rhs = drift_equation_rhs(model, t, state)?;
    Ok((0..u.len())
        .map(|k| du[k] + l1[k] * u[k] - rhs[k])
        .collect())
}

/// Largest `|drift PDE residual|` over the interior nodes.
pub fn drift_pde_residual(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta: &[f64],
    t: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let cache = family.on_grid(grid);
    let state = cache.state(theta)?;
    let r = drift_pde_residual_state(model, t, &state)?;
    Ok(interior_nodes(&state)
        .into_iter()
        .map(|k| r[k].abs())
        .fold(0.0, f64::max))
}

/// `u*` on the nodes of the grid fitted at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftProfile {
    pub t: f64,
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl DriftProfile {
    /// Linear interpolation between nodes, extended linearly past the ends.
    pub fn eval(&self, x: f64) -> f64 {
        linear_interpolate(&self.nodes, &self.values, x)
    }
}

/// `u*` at `t` for the parameter `theta`, on a grid fitted by `policy`.
pub fn drift_profile(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    theta: &[f64],
    t: f64,
    policy: &GridPolicy,
) -> Result<DriftProfile> {
    let grid = policy.fit(family, theta)?;
    let values = ustar(model, family, theta, t, &grid)?;
    Ok(DriftProfile {
        t,
        nodes: grid.nodes().to_vec(),
        values,
    })
}

/// Drift used when stepping paths.
#[derive(Debug, Clone, Copy)]
pub enum DriftSource<'a> {
    /// The model's own drift `f`.
    Model,
    /// One reconstructed profile per Euler step.
    Profiles(&'a [DriftProfile]),
}

/// Euler–Maruyama settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSettings {
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    /// Paths with `|Y| >` this are dropped.
    pub explosion_bound: f64,
    /// Moments are recorded every this many steps (and at the end).
    pub record_every: usize,
}

/// Sample mean and variance of the surviving paths at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Simulated paths: start and end points of every surviving path plus moment snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
    pub paths: usize,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    pub excluded: usize,
    pub snapshots: Vec<Snapshot>,
}

impl PathEnsemble {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.paths.max(1) as f64
    }

    pub fn histogram(&self, lo: f64, hi: f64, bins: usize) -> Histogram {
        Histogram::from_samples(&self.terminal, lo, hi, bins)
    }
}

/// Per-path generator: ChaCha8 keyed by `seed`, stream = path index.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Run Euler–Maruyama from the given start points. Deterministic for a given
/// seed regardless of thread count. Increments are `√dt · ξ` with `ξ` a
/// ziggurat standard normal from the path's own stream.
pub fn simulate_paths(
    model: &DiffusionModel,
    drift: DriftSource<'_>,
    start: &[f64],
    settings: &PathSettings,
) -> Result<PathEnsemble> {
    let PathSettings {
        dt,
        steps,
        seed,
        explosion_bound,
        record_every,
    } = *settings;
    if !(dt > 0.0) || steps == 0 || start.is_empty() {
        return Err(Error::Usage(
            "simulation needs dt > 0, at least one step and one path".into(),
        ));
    }
    if let DriftSource::Profiles(p) = drift {
        if p.len() < steps {
            return Err(Error::Usage(format!(
                "{} drift profiles for {steps} steps",
                p.len()
            )));
        }
    }
    let every = record_every.clamp(1, steps);
    let record_at: Vec<usize> = (1..=steps)
        .filter(|s| s % every == 0 || *s == steps)
        .collect();
    let sqrt_dt = dt.sqrt();

    // time-major so each step's drift profile stays in cache; every path
    // keeps its own stream, so the result does not depend on the order
    struct Walker {
        rng: ChaCha8Rng,
        y: f64,
        alive: bool,
        rec: Vec<f64>,
    }
    let mut walkers: Vec<Walker> = start
        .iter()
        .enumerate()
        .map(|(i, &y0)| Walker {
            rng: path_rng(seed, i as u64 + 1),
            y: y0,
            alive: true,
            rec: Vec::with_capacity(record_at.len()),
        })
        .collect();
    let mut next = 0;
    for s in 0..steps {
        let t = s as f64 * dt;
        let record = next < record_at.len() && record_at[next] == s + 1;
        walkers.par_iter_mut().with_min_len(256).for_each(|w| {
            if !w.alive {
                return;
            }
            let u = match drift {
                DriftSource::Model => model.drift.value(t, w.y),
                DriftSource::Profiles(p) => p[s].eval(w.y),
            };
            let xi: f64 = w.rng.sample(StandardNormal);
            w.y += u * dt + model.sigma(t, w.y) * sqrt_dt * xi;
            if !(w.y.abs() <= explosion_bound) {
                w.alive = false;
            } else if record {
                w.rec.push(w.y);
            }
        });
        if record {
            next += 1;
        }
    }
    let runs: Vec<Option<Vec<f64>>> = walkers
        .into_iter()
        .map(|w| if w.alive { Some(w.rec) } else { None })
        .collect();

    let mut initial = Vec::with_capacity(start.len());
    let mut terminal = Vec::with_capacity(start.len());
    let mut excluded = 0;
    let mut sums = vec![(0.0f64, 0.0f64); record_at.len()];
    for (y0, run) in start.iter().zip(&runs) {
        match run {
            Some(rec) => {
                initial.push(*y0);
                terminal.push(*rec.last().expect("at least one record"));
                for (acc, v) in sums.iter_mut().zip(rec) {
                    acc.0 += v;
                    acc.1 += v * v;
                }
            }
            None => excluded += 1,
        }
    }
    let kept = terminal.len() as f64;
    let snapshots = record_at
        .iter()
        .zip(&sums)
        .map(|(&s, &(sum, sq))| {
            let mean = sum / kept;
            let variance = if kept > 1.0 {
                (sq - kept * mean * mean) / (kept - 1.0)
            } else {
                0.0
            };
            Snapshot {
                t: s as f64 * dt,
                mean,
                variance,
            }
        })
        .collect();
    Ok(PathEnsemble {
        seed,
        dt,
        steps,
        paths: start.len(),
        initial,
        terminal,
        excluded,
        snapshots,
    })
}

/// Key offset separating the initial-draw streams from the increment streams.
const INITIAL_KEY: u64 = 0x9E37_79B9_7F4A_7C15;

/// Inverse-CDF draws from a density on its grid, one per path stream.
pub fn sample_initial(density: &DensityGrid, paths: usize, seed: u64) -> Result<Vec<f64>> {
    let grid = &density.grid;
    let cdf = grid.cumulative(&density.values)?;
    let total = grid.integrate(&density.values)?;
    // pad with the grid ends so every uniform draw maps inside the bounds
    let mut xs = Vec::with_capacity(cdf.len() + 2);
    let mut ps = Vec::with_capacity(cdf.len() + 2);
    xs.push(grid.x_min());
    ps.push(0.0);
    let mut last = 0.0;
    for (x, c) in grid.nodes().iter().zip(&cdf) {
        let c = (c / total).clamp(last, 1.0);
        if c > last {
            xs.push(*x);
            ps.push(c);
            last = c;
        }
    }
    xs.push(grid.x_max());
    ps.push(1.0 + f64::EPSILON);
    Ok((0..paths)
        .into_par_iter()
        .map(|i| {
            let u: f64 = path_rng(seed ^ INITIAL_KEY, i as u64).random();
            linear_interpolate(&ps, &xs, u)
        })
        .collect())
}

/// Monte Carlo settings for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub bins: usize,
}

/// Simulate `dY = u*(t, Y) dt + σ(t, Y) dW` along a projected trajectory,
/// starting from draws of `p(·, θ₀)`.
pub fn simulate(
    model: &DiffusionModel,
    family: &ExponentialFamily,
    trajectory: &ThetaTrajectory,
    policy: &GridPolicy,
    config: &SimulationConfig,
) -> Result<PathEnsemble> {
    let t_end = *trajectory
        .times
        .last()
        .ok_or_else(|| Error::Usage("empty trajectory".into()))?;
    if config.dt > trajectory.step * (1.0 + 1e-12) {
        return Err(Error::Usage(format!(
            "Euler step {} exceeds the trajectory step {}",
            config.dt, trajectory.step
        )));
    }
    let steps = crate::projection::step_count(t_end, config.dt)?;
    let profiles: Vec<DriftProfile> = (0..steps)
        .into_par_iter()
        .map(|s| {
            let t = s as f64 * config.dt;
            let theta = trajectory.theta_at(t).expect("nonempty trajectory");
            drift_profile(model, family, &theta, t, policy)
                .map_err(|e| Error::stage("ustar", Some(t), e))
        })
        .collect::<Result<_>>()?;
    let theta0 = &trajectory.thetas[0];
    let grid0 = policy.fit(family, theta0)?;
    let p0 = family.on_grid(&grid0).state(theta0)?.to_density_grid();
    let start = sample_initial(&p0, config.paths, config.seed)?;
    let reach = profiles
        .iter()
        .map(|p| p.nodes[0].abs().max(p.nodes[p.nodes.len() - 1].abs()))
        .fold(grid0.x_min().abs().max(grid0.x_max().abs()), f64::max);
    let ensemble = simulate_paths(
        model,
        DriftSource::Profiles(&profiles),
        &start,
        &PathSettings {
            dt: config.dt,
            steps,
            seed: config.seed,
            explosion_bound: 10.0 * reach,
            record_every: (steps / 10).max(1),
        },
    )?;
    if ensemble.excluded_fraction() > MAX_EXCLUDED_FRACTION {
        return Err(Error::Numerical(format!(
            "{} of {} paths exploded",
            ensemble.excluded, ensemble.paths
        )));
    }
    Ok(ensemble)
}

/// Bin masses on `[lo, hi]` plus the mass falling outside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub masses: Vec<f64>,
    pub below: f64,
    pub above: f64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.masses.len() as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins())
            .map(|i| self.lo + i as f64 * self.width())
            .collect()
    }

    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
        let mut counts = vec![0usize; bins];
        let (mut below, mut above) = (0usize, 0usize);
        let width = (hi - lo) / bins as f64;
        for &y in samples {
            if y < lo {
                below += 1;
            } else if y >= hi {
                above += 1;
            } else {
                counts[(((y - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
        let n = samples.len().max(1) as f64;
        Histogram {
            lo,
            hi,
            masses: counts.iter().map(|&c| c as f64 / n).collect(),
            below: below as f64 / n,
            above: above as f64 / n,
        }
    }

    /// Exact bin masses of a grid density: its interpolant integrated with
    /// an 8-point Gauss–Legendre rule per bin.
    pub fn from_density(density: &DensityGrid, lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
        let grid = &density.grid;
        let (xi, wi) = gauss_legendre_reference(8);
        let width = (hi - lo) / bins as f64;
        let mut masses = Vec::with_capacity(bins);
        for b in 0..bins {
            let a = lo + b as f64 * width;
            let mut m = 0.0;
            for (s, w) in xi.iter().zip(&wi) {
                let x = a + 0.5 * width * (s + 1.0);
                if x >= grid.x_min() && x <= grid.x_max() {
                    m += 0.5 * width * w * grid.interpolate(&density.values, x)?.max(0.0);
                }
            }
            masses.push(m);
        }
        let total = density.mass();
        let inside: f64 = masses.iter().sum();
        let outside = (total - inside).max(0.0);
        // the grid density has no mass outside its own bounds
        let below = if lo > grid.x_min() {
            outside * 0.5
        } else {
            0.0
        };
        let above = if hi < grid.x_max() {
            outside * 0.5
        } else {
            0.0
        };
        Ok(Histogram {
            lo,
            hi,
            masses,
            below,
            above,
        })
    }

    /// L1 and Hellinger distances between bin masses (outside mass included).
    pub fn distance(&self, other: &Histogram) -> Result<EmpiricalDistance> {
        if self.bins() != other.bins() || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::Usage("histograms have different bins".into()));
        }
        let pairs = self
            .masses
            .iter()
            .zip(&other.masses)
            .map(|(a, b)| (*a, *b))
            .chain([(self.below, other.below), (self.above, other.above)]);
        let (mut l1, mut h2) = (0.0, 0.0);
        for (a, b) in pairs {
            l1 += (a - b).abs();
            let d = a.sqrt() - b.sqrt();
            h2 += d * d;
        }
        Ok(EmpiricalDistance {
            l1,
            hellinger: (0.5 * h2).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalDistance {
    pub l1: f64,
    pub hellinger: f64,
}

/// Distances between the terminal histogram and the bin masses of `density`,
/// with `bins` uniform bins over the density's grid.
pub fn empirical_distance(
    ensemble: &PathEnsemble,
    density: &DensityGrid,
    bins: usize,
) -> Result<EmpiricalDistance> {
    let (lo, hi) = (density.grid.x_min(), density.grid.x_max());
    let h = ensemble.histogram(lo, hi, bins);
    let p = Histogram::from_density(density, lo, hi, bins)?;
    h.distance(&p)
}
