//! Configured experiments: projection runs, drift reconstruction and
//! simulation, the nested-family convergence sweep, oracle runs and the
//! geometry self-check, each writing CSV output.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, VALIDATION_STAGE};
use crate::expfam::{gaussian_natural, moment_match, DensityGrid, ExponentialFamily, GridPolicy};
use crate::geometry::{
    chart, cumulant, cumulant_differentials, orlicz_norm, patch, sqrt_map_derivative_check,
    CenteredVariable,
};
use crate::models::{
    probe_grid, DiffusionModel, ModelKind, PolynomialField, SineField, TimeSpaceField,
};
use crate::numerics::{Polynomial, QuadratureGrid};
use crate::oracle::{distance, fd_fpe_solve, gaussian_exact, Distances, GaussianState};
use crate::projection::{fmt_num, integrate_theta, step_count, ThetaTrajectory};
use crate::reconstruction::{
    drift_pde_residual_state, empirical_distance, interior_nodes, simulate, ustar_state,
    EmpiricalDistance, Histogram, SimulationConfig, DEFAULT_BINS,
};

/// Diffusion coefficient choices for the unit-variance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Constant {
        value: f64,
    },
    /// `base + amplitude · sin x`
    Sine {
        base: f64,
        amplitude: f64,
    },
    /// Ascending coefficients.
    Polynomial {
        coeffs: Vec<f64>,
    },
}

impl DiffusionSpec {
    fn build(&self) -> TimeSpaceField {
        match self {
            DiffusionSpec::Constant { value } => {
                TimeSpaceField::new(PolynomialField(Polynomial::new(vec![*value])))
            }
            DiffusionSpec::Sine { base, amplitude } => TimeSpaceField::new(SineField {
                base: *base,
                amplitude: *amplitude,
            }),
            DiffusionSpec::Polynomial { coeffs } => {
                TimeSpaceField::new(PolynomialField(Polynomial::new(coeffs.clone())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `f = F x`, `a = A`
    Linear {
        drift_rate: f64,
        diffusion: f64,
    },
    UnitVariance {
        k: f64,
        diffusion: DiffusionSpec,
    },
    /// `f = x − x³`, `a = σ₀²`
    DoubleWell {
        sigma0_sq: f64,
    },
    /// Polynomial drift and diffusion coefficient, ascending coefficients.
    Polynomial {
        drift: Vec<f64>,
        diffusion: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> DiffusionModel {
        match self {
            ModelSpec::Linear {
                drift_rate,
                diffusion,
            } => DiffusionModel::linear(*drift_rate, *diffusion),
            ModelSpec::UnitVariance { k, diffusion } => {
                DiffusionModel::unit_variance(*k, diffusion.build())
            }
            ModelSpec::DoubleWell { sigma0_sq } => DiffusionModel::double_well(*sigma0_sq),
            ModelSpec::Polynomial { drift, diffusion } => DiffusionModel::new(
                "polynomial",
                TimeSpaceField::new(PolynomialField(Polynomial::new(drift.clone()))),
                TimeSpaceField::new(PolynomialField(Polynomial::new(diffusion.clone()))),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "basis", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilySpec {
    /// Monomials `x..x^m`; give `max_degree` for one family or `sizes` for a sweep.
    Poly {
        #[serde(default)]
        max_degree: Option<usize>,
        #[serde(default)]
        sizes: Option<Vec<usize>>,
    },
    /// `N(θ, 1)` through the carrier `−x²/2`.
    MeanShiftGaussian,
}

impl FamilySpec {
    /// Family sizes in increasing order.
    pub fn sizes(&self) -> Result<Vec<usize>> {
        match self {
            FamilySpec::MeanShiftGaussian => Ok(vec![1]),
            FamilySpec::Poly { max_degree, sizes } => {
                let mut list =
                    match (max_degree, sizes) {
                        (Some(m), None) => vec![*m],
                        (None, Some(s)) if !s.is_empty() => s.clone(),
                        _ => return Err(Error::Validation(
                            "poly family needs exactly one of max_degree or a nonempty sizes list"
                                .into(),
                        )),
                    };
                for &m in &list {
                    if m == 0 || m % 2 != 0 {
                        return Err(Error::Validation(format!(
                            "polynomial family size {m} is not a positive even number"
                        )));
                    }
                }
                list.sort_unstable();
                list.dedup();
                Ok(list)
            }
        }
    }

    pub fn build(&self, size: usize) -> Result<ExponentialFamily> {
        match self {
            FamilySpec::MeanShiftGaussian => Ok(ExponentialFamily::mean_shift_gaussian()),
            FamilySpec::Poly { .. } => ExponentialFamily::polynomial(size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Natural parameters of the (largest) family; zero-padded for larger families.
    Theta(Vec<f64>),
    /// Target `E[c_1..c_m]`, matched by Newton's method.
    Moments(Vec<f64>),
    /// A normal law, embedded exactly.
    Gaussian { mean: f64, variance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub panels: usize,
    pub nodes_per_panel: usize,
    pub log_cutoff: f64,
    pub regrid_tolerance: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let p = GridPolicy::default();
        GridSpec {
            panels: p.panels,
            nodes_per_panel: p.nodes_per_panel,
            log_cutoff: p.log_cutoff,
            regrid_tolerance: p.regrid_tolerance,
        }
    }
}

impl GridSpec {
    pub fn policy(&self) -> GridPolicy {
        GridPolicy {
            panels: self.panels,
            nodes_per_panel: self.nodes_per_panel,
            log_cutoff: self.log_cutoff,
            regrid_tolerance: self.regrid_tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub paths: usize,
    /// Euler step; defaults to `h`.
    pub dt: Option<f64>,
    pub seed: u64,
    pub bins: usize,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        MonteCarloSpec {
            paths: 100_000,
            dt: None,
            seed: 1,
            bins: DEFAULT_BINS,
        }
    }
}

/// Finite-difference reference used by the convergence sweep and `oracle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Minimum node count; raised automatically to stay 2× finer than the
    /// projection grid and to keep the cell Péclet number below 2.
    pub nodes: usize,
    /// Largest time step; defaults to `h` and is reduced to meet the
    /// diffusive Courant limit.
    pub dt: Option<f64>,
    /// Half-width of the domain in initial standard deviations.
    pub half_width_sd: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            nodes: 400,
            dt: None,
            half_width_sd: 8.0,
        }
    }
}

/// One experiment, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub family: FamilySpec,
    pub initial: InitialSpec,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub h: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    /// Non-explosion constant `K`, checked on the probe grid when given.
    #[serde(default)]
    pub nonexplosion: Option<f64>,
    /// `[a, b]` for the drift sup-distance; defaults to terminal mean ± 3 sd.
    #[serde(default)]
    pub drift_window: Option<[f64; 2]>,
    /// Write every n-th trajectory row.
    #[serde(default = "default_stride")]
    pub output_stride: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_stride() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.build().name)
    }

    pub fn mc_dt(&self) -> f64 {
        self.monte_carlo.dt.unwrap_or(self.h)
    }

    /// Check everything that can be checked before computing: numbers,
    /// family sizes, the initial condition and the model's assumptions.
    pub fn validate(&self) -> Result<Validated> {
        self.validate_inner()
            .map_err(|e| Error::stage(VALIDATION_STAGE, None, e))
    }

    fn validate_inner(&self) -> Result<Validated> {
        let steps = step_count(self.t_end, self.h).map_err(as_validation)?;
        let dt = self.mc_dt();
        if !(dt > 0.0) || dt > self.h * (1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "Monte Carlo step {dt} must be positive and at most h = {}",
                self.h
            )));
        }
        step_count(self.t_end, dt).map_err(as_validation)?;
        if self.monte_carlo.paths == 0 || self.monte_carlo.bins == 0 {
            return Err(Error::Validation("paths and bins must be positive".into()));
        }
        if self.output_stride == 0 {
            return Err(Error::Validation("output_stride must be positive".into()));
        }
        let g = &self.grid;
        if g.panels == 0
            || g.nodes_per_panel < 2
            || !(g.log_cutoff > 0.0)
            || !(g.regrid_tolerance > 0.0)
        {
            return Err(Error::Validation(format!("invalid grid settings {g:?}")));
        }
        if let Some([a, b]) = self.drift_window {
            if !(a < b) {
                return Err(Error::Validation(format!(
                    "drift window [{a}, {b}] is empty"
                )));
            }
        }
        let sizes = self.family.sizes()?;
        let mut families = Vec::with_capacity(sizes.len());
        for &m in &sizes {
            let family = self.family.build(m).map_err(as_validation)?;
            let theta0 = self.initial_theta(&family)?;
            families.push((m, family, theta0));
        }
        let model = self.model.build();
        let model = match self.nonexplosion {
            Some(k) => model.with_nonexplosion(k),
            None => model,
        };
        let (_, fam, th) = families.last().expect("at least one size");
        let grid = self.grid.policy().fit(fam, th)?;
        let (mean, var) = fam.on_grid(&grid).state(th)?.mean_variance();
        let stride = (steps / 100).max(1);
        let times: Vec<f64> = (0..=steps)
            .step_by(stride)
            .map(|k| k as f64 * self.h)
            .collect();
        model.validate(&probe_grid(mean, var.sqrt()), &times)?;
        Ok(Validated {
            model,
            families,
            steps,
        })
    }

    /// θ₀ for `family` from the configured initial condition.
    pub fn initial_theta(&self, family: &ExponentialFamily) -> Result<Vec<f64>> {
        let theta = match &self.initial {
            InitialSpec::Gaussian { mean, variance } => {
                if !(*variance > 0.0) {
                    return Err(Error::Validation(format!(
                        "initial variance {variance} must be positive"
                    )));
                }
                if family.is_plain_polynomial() {
                    family.embed(&gaussian_natural(*mean, *variance))?
                } else if family.dim() == 1 && (*variance - 1.0).abs() < 1e-12 {
                    vec![*mean]
                } else {
                    return Err(Error::Validation(format!(
                        "N({mean}, {variance}) is not a member of the {} family",
                        family.tag()
                    )));
                }
            }
            InitialSpec::Theta(theta) => {
                if theta.len() > family.dim() {
                    return Err(Error::Validation(format!(
                        "{} initial parameters for a {}-dimensional family",
                        theta.len(),
                        family.dim()
                    )));
                }
                family.embed(theta)?
            }
            InitialSpec::Moments(eta) => {
                if eta.len() < family.dim() {
                    return Err(Error::Validation(format!(
                        "{} moments given, the family needs {}",
                        eta.len(),
                        family.dim()
                    )));
                }
                let eta = &eta[..family.dim()];
                let start = if family.is_plain_polynomial() {
                    let var = eta[1] - eta[0] * eta[0];
                    if !(var > 0.0) {
                        return Err(Error::Validation(
                            "moments imply a nonpositive variance".into(),
                        ));
                    }
                    family.embed(&gaussian_natural(eta[0], var))?
                } else {
                    vec![0.0; family.dim()]
                };
                let grid = self.grid.policy().fit(family, &start)?;
                let mut theta = moment_match(family, eta, &grid, &start)?;
                // refine on a grid fitted to the matched density
                let grid = self.grid.policy().fit(family, &theta)?;
                theta = moment_match(family, eta, &grid, &theta)?;
                theta
            }
        };
        family.check_domain(&theta)?;
        Ok(theta)
    }
}

fn as_validation(e: Error) -> Error {
    match e {
        Error::Usage(msg) => Error::Validation(msg),
        other => other,
    }
}

/// A configuration that passed [`ExperimentConfig::validate`].
#[derive(Debug, Clone)]
pub struct Validated {
    pub model: DiffusionModel,
    /// `(size, family, θ₀)` in increasing size.
    pub families: Vec<(usize, ExponentialFamily, Vec<f64>)>,
    pub steps: usize,
}

impl Validated {
    fn single(&self) -> Result<&(usize, ExponentialFamily, Vec<f64>)> {
        match self.families.as_slice() {
            [one] => Ok(one),
            _ => Err(Error::stage(
                VALIDATION_STAGE,
                None,
                Error::Validation(
                    "this command needs a single family size (use max_degree)".into(),
                ),
            )),
        }
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn prepare_dir(dir: Option<&Path>) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

/// `p(x, θ)` at arbitrary points given the normalizer from a grid state.
fn density_at(
    family: &ExponentialFamily,
    theta: &[f64],
    log_partition: f64,
    xs: &[f64],
) -> Vec<f64> {
    let e = family.exponent(theta);
    xs.iter()
        .map(|&x| (e.eval(x) - log_partition).exp())
        .collect()
}

/// Terminal summary of a projection run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionSummary {
    pub name: String,
    pub family: String,
    pub steps: usize,
    pub theta_final: Vec<f64>,
    pub mean_final: f64,
    pub variance_final: f64,
    pub max_residual: f64,
    pub integrated_residual: f64,
    pub max_step_error: f64,
    pub max_duality_gap: f64,
    pub regrids: usize,
}

#[derive(Debug, Clone)]
pub struct ProjectionRun {
    pub trajectory: ThetaTrajectory,
    pub summary: ProjectionSummary,
}

fn summarize(
    cfg: &ExperimentConfig,
    family: &ExponentialFamily,
    traj: &ThetaTrajectory,
) -> ProjectionSummary {
    ProjectionSummary {
        name: cfg.label(),
        family: family.tag().to_string(),
        steps: traj.len().saturating_sub(1),
        theta_final: traj.last_theta().map(|t| t.to_vec()).unwrap_or_default(),
        mean_final: traj.means.last().copied().unwrap_or(f64::NAN),
        variance_final: traj.variances.last().copied().unwrap_or(f64::NAN),
        max_residual: traj.max_residual(),
        integrated_residual: traj.integrated_residual(),
        max_step_error: traj.step_error.iter().copied().fold(0.0, f64::max),
        max_duality_gap: traj.max_duality_gap,
        regrids: traj.regrids,
    }
}

fn write_trajectory(path: &Path, traj: &ThetaTrajectory, stride: usize) -> Result<()> {
    let keep: Vec<usize> = (0..traj.len())
        .filter(|k| k % stride == 0 || *k + 1 == traj.len())
        .collect();
    let thin = ThetaTrajectory {
        step: traj.step * stride as f64,
        times: keep.iter().map(|&k| traj.times[k]).collect(),
        thetas: keep.iter().map(|&k| traj.thetas[k].clone()).collect(),
        residuals: keep.iter().map(|&k| traj.residuals[k]).collect(),
        fisher_condition: keep.iter().map(|&k| traj.fisher_condition[k]).collect(),
        means: keep.iter().map(|&k| traj.means[k]).collect(),
        variances: keep.iter().map(|&k| traj.variances[k]).collect(),
        step_error: keep.iter().map(|&k| traj.step_error[k]).collect(),
        ..traj.clone()
    };
    thin.write_csv(fs::File::create(path)?)
}

fn integrate(
    cfg: &ExperimentConfig,
    v: &Validated,
    family: &ExponentialFamily,
    theta0: &[f64],
) -> Result<ThetaTrajectory> {
    Ok(integrate_theta(
        &v.model,
        family,
        theta0,
        cfg.t_end,
        cfg.h,
        &cfg.grid.policy(),
    )?)
}

/// Integrate the projected ODE and write `trajectory.csv` and `summary.json`
/// into `out` when given.
pub fn run_projection(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ProjectionRun> {
    let v = cfg.validate()?;
    let (_, family, theta0) = v.single()?;
    let trajectory = integrate(cfg, &v, family, theta0)?;
    let summary = summarize(cfg, family, &trajectory);
    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        write_trajectory(&dir.join("trajectory.csv"), &trajectory, cfg.output_stride)?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(ProjectionRun {
        trajectory,
        summary,
    })
}

/// Drift reconstruction diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UstarSummary {
    pub name: String,
    /// Largest drift-equation residual over interior nodes and written times.
    pub max_pde_residual: f64,
    /// Times at which `u*` was written.
    pub times: Vec<f64>,
}

/// Reconstructed drift `u*` at eleven evenly spaced times; writes
/// `ustar.csv` (`t, x, ustar, drift`) when `out` is given.
pub fn run_ustar(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(ThetaTrajectory, UstarSummary)> {
    let v = cfg.validate()?;
    let (_, family, theta0) = v.single()?;
    let traj = integrate(cfg, &v, family, theta0)?;
    let summary = ustar_table(cfg, &v, family, &traj, out)?;
    Ok((traj, summary))
}

fn ustar_table(
    cfg: &ExperimentConfig,
    v: &Validated,
    family: &ExponentialFamily,
    traj: &ThetaTrajectory,
    out: Option<&Path>,
) -> Result<UstarSummary> {
    let policy = cfg.grid.policy();
    let n = traj.len() - 1;
    let mut picks: Vec<usize> = (0..=10).map(|i| i * n / 10).collect();
    picks.dedup();
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for &k in &picks {
        let t = traj.times[k];
        let theta = &traj.thetas[k];
        let stage = |e| Error::stage("ustar", Some(t), e);
        let grid = policy.fit(family, theta).map_err(stage)?;
        let cache = family.on_grid(&grid);
        let state = cache.state(theta).map_err(stage)?;
        let u = ustar_state(&v.model, t, &state).map_err(stage)?;
        let r = drift_pde_residual_state(&v.model, t, &state).map_err(stage)?;
        for i in interior_nodes(&state) {
            worst = worst.max(r[i].abs());
        }
        for (x, ui) in grid.nodes().iter().zip(&u) {
            rows.push(vec![
                fmt_num(t),
                fmt_num(*x),
                fmt_num(*ui),
                fmt_num(v.model.drift.value(t, *x)),
            ]);
        }
    }
    let summary = UstarSummary {
        name: cfg.label(),
        max_pde_residual: worst,
        times: picks.iter().map(|&k| traj.times[k]).collect(),
    };
    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        write_rows(
            &dir.join("ustar.csv"),
            &header(&["t", "x", "ustar", "drift"]),
            &rows,
        )?;
    }
    Ok(summary)
}

/// Outcome of a Monte Carlo run of the reconstructed diffusion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionSummary {
    pub name: String,
    pub ustar: UstarSummary,
    pub paths: usize,
    pub excluded: usize,
    pub dt: f64,
    pub seed: u64,
    pub bins: usize,
    pub distance: EmpiricalDistance,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub projected_mean: f64,
    pub projected_variance: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionRun {
    pub summary: ReconstructionSummary,
    pub empirical: Histogram,
    pub projected: Histogram,
}

/// Simulate `Y` under `u*` and compare its terminal histogram with `p(·, θ_T)`.
/// Writes `ustar.csv`, `histogram.csv` and `reconstruction.json`.
pub fn run_reconstruction(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ReconstructionRun> {
    let v = cfg.validate()?;
    let (_, family, theta0) = v.single()?;
    let traj = integrate(cfg, &v, family, theta0)?;
    let ustar = ustar_table(cfg, &v, family, &traj, out)?;
    let policy = cfg.grid.policy();
    let mc = SimulationConfig {
        paths: cfg.monte_carlo.paths,
        dt: cfg.mc_dt(),
        seed: cfg.monte_carlo.seed,
        bins: cfg.monte_carlo.bins,
    };
    let ensemble = simulate(&v.model, family, &traj, &policy, &mc)
        .map_err(|e| Error::stage("simulate", None, e))?;
    let theta_t = traj.last_theta().expect("nonempty trajectory");
    let grid = policy.fit(family, theta_t)?;
    let cache = family.on_grid(&grid);
    let state = cache.state(theta_t)?;
    let density = state.to_density_grid();
    let dist = empirical_distance(&ensemble, &density, mc.bins)?;
    let (lo, hi) = (grid.x_min(), grid.x_max());
    let empirical = ensemble.histogram(lo, hi, mc.bins);
    let projected = Histogram::from_density(&density, lo, hi, mc.bins)?;
    let (pm, pv) = state.mean_variance();
    let last = ensemble.snapshots.last().copied();
    let summary = ReconstructionSummary {
        name: cfg.label(),
        ustar,
        paths: ensemble.paths,
        excluded: ensemble.excluded,
        dt: mc.dt,
        seed: mc.seed,
        bins: mc.bins,
        distance: dist,
        sample_mean: last.map_or(f64::NAN, |s| s.mean),
        sample_variance: last.map_or(f64::NAN, |s| s.variance),
        projected_mean: pm,
        projected_variance: pv,
    };
    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        let edges = empirical.edges();
        let rows: Vec<Vec<String>> = (0..mc.bins)
            .map(|b| {
                vec![
                    fmt_num(edges[b]),
                    fmt_num(edges[b + 1]),
                    fmt_num(empirical.masses[b]),
                    fmt_num(projected.masses[b]),
                ]
            })
            .collect();
        write_rows(
            &dir.join("histogram.csv"),
            &header(&["bin_lo", "bin_hi", "empirical_mass", "projected_mass"]),
            &rows,
        )?;
        write_json(&dir.join("reconstruction.json"), &summary)?;
    }
    Ok(ReconstructionRun {
        summary,
        empirical,
        projected,
    })
}

/// One family size in the convergence sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub l1: f64,
    pub hellinger: f64,
    /// `KL(reference ‖ projected)`
    pub kl: f64,
    pub integrated_residual: f64,
    pub residual_t0: f64,
    pub drift_sup: f64,
    /// `None` on success, otherwise the failure message.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub name: String,
    pub reference: String,
    pub drift_window: [f64; 2],
    pub rows: Vec<ConvergenceRow>,
    /// t = 0 residuals nonincreasing in m (1e-10 slack) over the successful rows.
    pub residual_t0_monotone: bool,
}

/// Reference density at `T` on a uniform grid.
struct Reference {
    label: String,
    density: DensityGrid,
    mean: f64,
    variance: f64,
}

fn reference_grid(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    lo: f64,
    hi: f64,
    projection_spacing: f64,
) -> Result<QuadratureGrid> {
    let width = hi - lo;
    let mut nodes = cfg
        .reference
        .nodes
        .max((2.0 * width / projection_spacing).ceil() as usize + 1);
    // refine until the cell Péclet number is below 2 on the domain
    let probe: Vec<f64> = (0..=200).map(|i| lo + width * i as f64 / 200.0).collect();
    let ratio = (0..=10)
        .flat_map(|k| {
            let t = cfg.t_end * k as f64 / 10.0;
            probe
                .iter()
                .map(move |&x| model.drift.value(t, x).abs() / model.diffusion.value(t, x))
        })
        .fold(0.0, f64::max);
    let needed = (ratio * width / 1.9).ceil() as usize + 1;
    nodes = nodes.max(needed).min(40_001);
    QuadratureGrid::trapezoid(lo, hi, nodes)
}

/// Time step for the finite-difference reference: at most the configured
/// step, small enough for the diffusive Courant limit, and dividing `T`.
fn reference_dt(cfg: &ExperimentConfig, model: &DiffusionModel, grid: &QuadratureGrid) -> f64 {
    let requested = cfg.reference.dt.unwrap_or(cfg.h);
    let dx = (grid.x_max() - grid.x_min()) / (grid.len() - 1) as f64;
    let a_max = (0..=10)
        .flat_map(|k| {
            let t = cfg.t_end * k as f64 / 10.0;
            grid.nodes()
                .iter()
                .map(move |&x| model.diffusion.value(t, x))
        })
        .fold(0.0, f64::max);
    let limit = 0.9 * crate::oracle::MAX_DIFFUSIVE_COURANT * dx * dx / a_max;
    let n = (cfg.t_end / requested.min(limit) - 1e-9).ceil().max(1.0);
    cfg.t_end / n
}

fn build_reference(
    cfg: &ExperimentConfig,
    v: &Validated,
    lo: f64,
    hi: f64,
    projection_spacing: f64,
) -> Result<Reference> {
    let (_, fam, theta0) = v.families.last().expect("at least one family");
    let grid = reference_grid(cfg, &v.model, lo, hi, projection_spacing)?;
    let fit = cfg.grid.policy().fit(fam, theta0)?;
    let cache = fam.on_grid(&fit);
    let st0 = cache.state(theta0)?;
    if let ModelKind::Linear {
        drift_rate,
        diffusion,
    } = v.model.kind
    {
        let (m0, q0) = st0.mean_variance();
        let s = gaussian_exact(|_| drift_rate, |_| diffusion, m0, q0, cfg.t_end, cfg.h)?;
        let GaussianState { mean, variance, .. } = *s.last().expect("nonempty");
        return Ok(Reference {
            label: "gaussian_exact".into(),
            density: DensityGrid::gaussian(&grid, mean, variance),
            mean,
            variance,
        });
    }
    let p0 = density_at(fam, theta0, st0.log_partition(), grid.nodes());
    let p0 = DensityGrid::new(grid.clone(), p0)?;
    let mass = p0.mass();
    let p0 = DensityGrid::new(grid.clone(), p0.values.iter().map(|v| v / mass).collect())?;
    let dt = reference_dt(cfg, &v.model, &grid);
    let report = fd_fpe_solve(&v.model, &p0, cfg.t_end, dt)?;
    let (mean, variance) = report.density.mean_variance();
    Ok(Reference {
        label: format!("fd_fpe_solve({} nodes, dt {dt})", grid.len()),
        density: report.density,
        mean,
        variance,
    })
}

struct SizeOutcome {
    m: usize,
    trajectory: ThetaTrajectory,
    family: ExponentialFamily,
}

/// Sweep nested polynomial families, comparing each terminal projected
/// density with a reference. Writes `convergence.csv`, `convergence.json`
/// and `density_m{m}.csv` per size.
pub fn run_convergence(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ConvergenceReport> {
    let v = cfg.validate()?;
    if !matches!(cfg.family, FamilySpec::Poly { .. }) {
        return Err(Error::stage(
            VALIDATION_STAGE,
            None,
            Error::Validation("the convergence sweep needs a poly family".into()),
        ));
    }
    let outcomes: Vec<std::result::Result<SizeOutcome, (usize, String)>> = v
        .families
        .par_iter()
        .map(|(m, family, theta0)| {
            integrate(cfg, &v, family, theta0)
                .map(|trajectory| SizeOutcome {
                    m: *m,
                    trajectory,
                    family: family.clone(),
                })
                .map_err(|e| (*m, e.to_string()))
        })
        .collect();

    let policy = cfg.grid.policy();
    let (_, fam0, th0) = v.families.last().expect("at least one family");
    let fit0 = policy.fit(fam0, th0)?;
    let (m0, var0) = fam0.on_grid(&fit0).state(th0)?.mean_variance();
    let half = cfg.reference.half_width_sd * var0.sqrt();
    let (mut lo, mut hi) = (m0 - half, m0 + half);
    for o in outcomes.iter().flatten() {
        let (m, q) = (
            *o.trajectory.means.last().unwrap(),
            *o.trajectory.variances.last().unwrap(),
        );
        lo = lo.min(m - cfg.reference.half_width_sd * q.sqrt());
        hi = hi.max(m + cfg.reference.half_width_sd * q.sqrt());
    }
    let spacing = (fit0.x_max() - fit0.x_min()) / fit0.len() as f64;
    let reference = build_reference(cfg, &v, lo, hi, spacing)
        .map_err(|e| Error::stage("reference", None, e))?;
    let window = cfg.drift_window.unwrap_or([
        reference.mean - 3.0 * reference.variance.sqrt(),
        reference.mean + 3.0 * reference.variance.sqrt(),
    ]);

    let mut rows = Vec::new();
    let mut densities = Vec::new();
    for o in outcomes {
        match o.and_then(|o| {
            score_size(cfg, &v.model, &o, &reference, window, &policy)
                .map_err(|e| (o.m, e.to_string()))
        }) {
            Ok((row, dens)) => {
                densities.push((row.m, dens));
                rows.push(row);
            }
            Err((m, msg)) => rows.push(ConvergenceRow {
                m,
                l1: f64::NAN,
                hellinger: f64::NAN,
                kl: f64::NAN,
                integrated_residual: f64::NAN,
                residual_t0: f64::NAN,
                drift_sup: f64::NAN,
                error: Some(msg),
            }),
        }
    }
    rows.sort_by_key(|r| r.m);
    let ok: Vec<f64> = rows
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| r.residual_t0)
        .collect();
    let residual_t0_monotone = ok.windows(2).all(|w| w[1] <= w[0] + 1e-10);
    let report = ConvergenceReport {
        name: cfg.label(),
        reference: reference.label.clone(),
        drift_window: window,
        rows,
        residual_t0_monotone,
    };
    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        let table: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.m.to_string(),
                    fmt_num(r.l1),
                    fmt_num(r.hellinger),
                    fmt_num(r.kl),
                    fmt_num(r.integrated_residual),
                    fmt_num(r.residual_t0),
                    fmt_num(r.drift_sup),
                    r.error.clone().unwrap_or_else(|| "ok".into()),
                ]
            })
            .collect();
        write_rows(
            &dir.join("convergence.csv"),
            &header(&[
                "m",
                "l1",
                "hellinger",
                "kl",
                "integrated_residual",
                "residual_t0",
                "drift_sup",
                "status",
            ]),
            &table,
        )?;
        for (m, dens) in &densities {
            let rows: Vec<Vec<String>> = reference
                .density
                .grid
                .nodes()
                .iter()
                .zip(dens.iter().zip(&reference.density.values))
                .map(|(x, (p, r))| vec![fmt_num(*x), fmt_num(*p), fmt_num(*r)])
                .collect();
            write_rows(
                &dir.join(format!("density_m{m}.csv")),
                &header(&["x", "projected", "reference"]),
                &rows,
            )?;
        }
        write_json(&dir.join("convergence.json"), &report)?;
    }
    Ok(report)
}

fn score_size(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    o: &SizeOutcome,
    reference: &Reference,
    window: [f64; 2],
    policy: &GridPolicy,
) -> Result<(ConvergenceRow, Vec<f64>)> {
    let theta_t = o.trajectory.last_theta().expect("nonempty trajectory");
    let grid = policy.fit(&o.family, theta_t)?;
    let cache = o.family.on_grid(&grid);
    let state = cache.state(theta_t)?;
    let ref_grid = &reference.density.grid;
    let e = o.family.exponent(theta_t);
    let logp: Vec<f64> = ref_grid
        .nodes()
        .iter()
        .map(|&x| e.eval(x) - state.log_partition())
        .collect();
    let projected = DensityGrid::new(ref_grid.clone(), logp.iter().map(|l| l.exp()).collect())?;
    let Distances { l1, hellinger, .. } = distance(&reference.density, &projected)?;
    // in log space, so underflow of p(·, θ) in the far tails does not read as a zero
    let integrand: Vec<f64> = reference
        .density
        .values
        .iter()
        .zip(&logp)
        .map(|(&r, &l)| if r > 0.0 { r * (r.ln() - l) } else { 0.0 })
        .collect();
    let kl = ref_grid.integrate(&integrand)?;
    let u = ustar_state(model, cfg.t_end, &state)?;
    let drift_sup = grid
        .nodes()
        .iter()
        .zip(&u)
        .filter(|(x, _)| **x >= window[0] && **x <= window[1])
        .map(|(x, ui)| (ui - model.drift.value(cfg.t_end, *x)).abs())
        .fold(0.0, f64::max);
    Ok((
        ConvergenceRow {
            m: o.m,
            l1,
            hellinger,
            kl,
            integrated_residual: o.trajectory.integrated_residual(),
            residual_t0: o.trajectory.residuals[0],
            drift_sup,
            error: None,
        },
        projected.values,
    ))
}

/// Reference solutions for the configured model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub name: String,
    pub fd_nodes: usize,
    pub fd_dt: f64,
    pub fd_mass_drift: f64,
    pub fd_clips: usize,
    /// FD against the exact Gaussian law (linear models only).
    pub fd_vs_exact: Option<Distances>,
    pub fd_mean: f64,
    pub fd_variance: f64,
}

/// Run the finite-difference solver (and the exact Gaussian evolution for
/// linear models). Writes `oracle_density.csv`, `gaussian_exact.csv` when
/// applicable, and `oracle.json`.
pub fn run_oracle(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<OracleSummary> {
    let v = cfg.validate()?;
    let (_, fam, theta0) = v.families.last().expect("at least one family");
    let policy = cfg.grid.policy();
    let fit = policy.fit(fam, theta0)?;
    let cache = fam.on_grid(&fit);
    let st0 = cache.state(theta0)?;
    let (m0, q0) = st0.mean_variance();
    let half = cfg.reference.half_width_sd * q0.sqrt();
    let mut lo = m0 - half;
    let mut hi = m0 + half;
    let exact = if let ModelKind::Linear {
        drift_rate,
        diffusion,
    } = v.model.kind
    {
        let s = gaussian_exact(|_| drift_rate, |_| diffusion, m0, q0, cfg.t_end, cfg.h)?;
        let last = *s.last().expect("nonempty");
        lo = lo.min(last.mean - cfg.reference.half_width_sd * last.variance.sqrt());
        hi = hi.max(last.mean + cfg.reference.half_width_sd * last.variance.sqrt());
        Some((s, last))
    } else {
        None
    };
    let spacing = (fit.x_max() - fit.x_min()) / fit.len() as f64;
    let grid = reference_grid(cfg, &v.model, lo, hi, spacing)?;
    let raw = DensityGrid::new(
        grid.clone(),
        density_at(fam, theta0, st0.log_partition(), grid.nodes()),
    )?;
    let mass = raw.mass();
    let p0 = DensityGrid::new(grid.clone(), raw.values.iter().map(|v| v / mass).collect())?;
    let dt = reference_dt(cfg, &v.model, &grid);
    let report = fd_fpe_solve(&v.model, &p0, cfg.t_end, dt)
        .map_err(|e| Error::stage("fd_fpe_solve", None, e))?;
    let exact_density = exact
        .as_ref()
        .map(|(_, last)| DensityGrid::gaussian(&grid, last.mean, last.variance));
    let fd_vs_exact = match &exact_density {
        Some(d) => Some(distance(&report.density, d)?),
        None => None,
    };
    let (fm, fv) = report.density.mean_variance();
    let summary = OracleSummary {
        name: cfg.label(),
        fd_nodes: grid.len(),
        fd_dt: dt,
        fd_mass_drift: report.mass_drift,
        fd_clips: report.clips,
        fd_vs_exact,
        fd_mean: fm,
        fd_variance: fv,
    };
    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        let rows: Vec<Vec<String>> = (0..grid.len())
            .map(|k| {
                let mut r = vec![
                    fmt_num(grid.nodes()[k]),
                    fmt_num(p0.values[k]),
                    fmt_num(report.density.values[k]),
                ];
                if let Some(d) = &exact_density {
                    r.push(fmt_num(d.values[k]));
                }
                r
            })
            .collect();
        let mut cols = vec!["x", "p0", "fd_terminal"];
        if exact_density.is_some() {
            cols.push("exact_terminal");
        }
        write_rows(&dir.join("oracle_density.csv"), &header(&cols), &rows)?;
        if let Some((series, _)) = &exact {
            let rows: Vec<Vec<String>> = series
                .iter()
                .map(|s| vec![fmt_num(s.t), fmt_num(s.mean), fmt_num(s.variance)])
                .collect();
            write_rows(
                &dir.join("gaussian_exact.csv"),
                &header(&["t", "mean", "variance"]),
                &rows,
            )?;
        }
        write_json(&dir.join("oracle.json"), &summary)?;
    }
    Ok(summary)
}

/// One numerical identity checked by [`geometry_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Identities of the chart, cumulant functional, Orlicz norm and square-root
/// map under `N(0, 1)`. Writes `geometry.csv` when `out` is given.
pub fn geometry_check(out: Option<&Path>) -> Result<Vec<GeometryCheck>> {
    let grid = QuadratureGrid::gauss_legendre(-14.0, 14.0, 64, 16)?;
    let p = DensityGrid::gaussian(&grid, 0.0, 1.0);
    let x = CenteredVariable::centered(&p, grid.nodes())?;
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, tolerance: f64| {
        checks.push(GeometryCheck {
            name: name.into(),
            value,
            tolerance,
            passed: value.abs() <= tolerance,
        });
    };

    let expected = 1.0 / (2.0 * std::f64::consts::LN_2).sqrt();
    push("orlicz_norm_of_x_error", orlicz_norm(&x) - expected, 1e-6);
    push("cumulant_of_x_error", cumulant(&x)? - 0.5, 1e-10);

    let raw_u: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|x| 0.3 * x - 0.05 * x * x)
        .collect();
    let u = CenteredVariable::centered(&p, &raw_u)?;
    let raw_v: Vec<f64> = grid.nodes().iter().map(|x| x * x + 0.5 * x).collect();
    let v = CenteredVariable::centered(&p, &raw_v)?;
    let (d1, d2) = cumulant_differentials(&u, &v)?;
    let eps = 1e-4;
    let kp = cumulant(&u.axpy(eps, &v))?;
    let k0 = cumulant(&u)?;
    let km = cumulant(&u.axpy(-eps, &v))?;
    push(
        "cumulant_first_differential_rel_error",
        ((kp - km) / (2.0 * eps) - d1) / d1.abs().max(1e-300),
        1e-5,
    );
    push(
        "cumulant_second_differential_rel_error",
        ((kp - 2.0 * k0 + km) / (eps * eps) - d2) / d2.abs().max(1e-300),
        1e-5,
    );

    let zero = CenteredVariable::new(&p, vec![0.0; grid.len()])?;
    let r0 = sqrt_map_derivative_check(&zero, &x, eps)?;
    push(
        "sqrt_map_derivative_rel_error_at_0",
        r0.derivative_error,
        1e-5,
    );
    push(
        "sqrt_map_norm_at_0_minus_quarter",
        r0.derivative_norm_sq - 0.25,
        1e-8,
    );
    let ru = sqrt_map_derivative_check(&u, &v, eps)?;
    push("sqrt_map_derivative_rel_error", ru.derivative_error, 1e-5);
    push(
        "sqrt_map_norm_identity_rel_error",
        ru.norm_identity_error,
        1e-8,
    );

    let back = chart(&p, &patch(&u)?)?;
    let roundtrip = back
        .values()
        .iter()
        .zip(u.values())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    push("chart_patch_roundtrip_sup_error", roundtrip, 1e-8);

    if let Some(dir) = out {
        prepare_dir(Some(dir))?;
        let rows: Vec<Vec<String>> = checks
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    fmt_num(c.value),
                    fmt_num(c.tolerance),
                    c.passed.to_string(),
                ]
            })
            .collect();
        write_rows(
            &dir.join("geometry.csv"),
            &header(&["check", "value", "tolerance", "passed"]),
            &rows,
        )?;
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_stationary() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "model": {"type": "linear", "drift_rate": -1.0, "diffusion": 2.0},
                "family": {"basis": "poly", "max_degree": 2},
                "initial": {"gaussian": {"mean": 0.0, "variance": 1.0}},
                "T": 0.2, "h": 0.01
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_roundtrip() {
        let cfg = linear_stationary();
        assert_eq!(cfg.grid, GridSpec::default());
        assert_eq!(cfg.monte_carlo.bins, DEFAULT_BINS);
        assert_eq!(cfg.output_stride, 1);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{"model": {"type": "linear", "drift_rate": -1.0, "diffusion": 2.0},
                "family": {"basis": "poly", "max_degree": 2},
                "initial": {"theta": [0.0, -0.5]}, "T": 1.0, "h": 0.1, "colour": 3}"#,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_errors_exit_with_two() {
        let mut cfg = linear_stationary();
        cfg.family = FamilySpec::Poly {
            max_degree: Some(3),
            sizes: None,
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);

        let mut cfg = linear_stationary();
        cfg.initial = InitialSpec::Theta(vec![0.0, 0.5]);
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err.root(), Error::Domain(_)));
        assert_eq!(err.exit_code(), 2);

        let mut cfg = linear_stationary();
        cfg.h = 0.03;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);

        let mut cfg = linear_stationary();
        cfg.model = ModelSpec::Linear {
            drift_rate: 0.0,
            diffusion: -1.0,
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn moments_initial_condition() {
        let mut cfg = linear_stationary();
        cfg.initial = InitialSpec::Moments(vec![1.0, 2.0]);
        let v = cfg.validate().unwrap();
        let th = &v.families[0].2;
        assert!((th[0] - 1.0).abs() < 1e-9 && (th[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn projection_run_writes_flat_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_projection(&linear_stationary(), Some(dir.path())).unwrap();
        assert!(run
            .trajectory
            .thetas
            .iter()
            .all(|t| t[0].abs() < 1e-9 && (t[1] + 0.5).abs() < 1e-9));
        let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(text.lines().count(), 22);
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn convergence_rows_are_ordered() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "model": {"type": "double-well", "sigma0_sq": 0.5},
                "family": {"basis": "poly", "sizes": [4, 2]},
                "initial": {"gaussian": {"mean": 0.0, "variance": 1.0}},
                "T": 0.2, "h": 0.01
            }"#,
        )
        .unwrap();
        let report = run_convergence(&cfg, None).unwrap();
        assert_eq!(
            report.rows.iter().map(|r| r.m).collect::<Vec<_>>(),
            vec![2, 4]
        );
        for r in &report.rows {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.l1.is_finite(), "{r:?}");
        }
        assert!(report.rows[1].l1 < report.rows[0].l1, "{:?}", report.rows);
        assert!(report.residual_t0_monotone);
    }

    #[test]
    fn linear_sweep_is_exact_at_every_size() {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "model": {"type": "linear", "drift_rate": -1.0, "diffusion": 2.0},
                "family": {"basis": "poly", "sizes": [2, 4]},
                "initial": {"gaussian": {"mean": 0.5, "variance": 0.3}},
                "T": 0.5, "h": 0.01
            }"#,
        )
        .unwrap();
        let report = run_convergence(&cfg, None).unwrap();
        assert_eq!(report.reference, "gaussian_exact");
        for r in &report.rows {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.l1 <= 1e-3 && r.hellinger <= 1e-3, "{r:?}");
        }
    }

    #[test]
    fn single_path_reconstruction_still_reports() {
        let mut cfg = linear_stationary();
        cfg.monte_carlo.paths = 1;
        let dir = tempfile::tempdir().unwrap();
        let run = run_reconstruction(&cfg, Some(dir.path())).unwrap();
        assert_eq!(run.summary.paths, 1);
        assert!(run.summary.distance.l1 > 0.5);
        assert!(run.summary.ustar.max_pde_residual < 1e-7);
        for f in ["ustar.csv", "histogram.csv", "reconstruction.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn geometry_checks_pass() {
        for c in geometry_check(None).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
