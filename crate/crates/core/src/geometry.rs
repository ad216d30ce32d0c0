//! Grid realizations of the exponential-manifold objects: the chart `s_p`,
//! its inverse patch, the cumulant functional `K_p`, the Orlicz norm and the
//! square-root map.

use crate::error::{Error, Result};
use crate::expfam::{DensityGrid, TAIL_TOLERANCE};

/// Tolerance for `E_p[u] = 0` on construction.
pub const CENTERING_TOLERANCE: f64 = 1e-9;

/// A random variable `u` on the grid of its base density `p`, with `E_p[u] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredVariable {
    values: Vec<f64>,
    base: DensityGrid,
}

impl CenteredVariable {
    /// Wrap `values`, which must already be centered under `base`.
    pub fn new(base: &DensityGrid, values: Vec<f64>) -> Result<Self> {
        check_len(base, &values)?;
        let mean = mean_under(base, &values);
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if mean.abs() > CENTERING_TOLERANCE * scale {
            return Err(Error::Usage(format!(
                "variable has mean {mean:e} under its base density"
            )));
        }
        Ok(CenteredVariable {
            values,
            base: base.clone(),
        })
    }

    /// Subtract `E_p[values]`.
    pub fn centered(base: &DensityGrid, values: &[f64]) -> Result<Self> {
        check_len(base, values)?;
        let mean = mean_under(base, values);
        Ok(CenteredVariable {
            values: values.iter().map(|v| v - mean).collect(),
            base: base.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn base(&self) -> &DensityGrid {
        &self.base
    }

    pub fn scale(&self, lambda: f64) -> CenteredVariable {
        CenteredVariable {
            values: self.values.iter().map(|v| lambda * v).collect(),
            base: self.base.clone(),
        }
    }

    /// `self + eps · other` (both must share a base).
    pub fn axpy(&self, eps: f64, other: &CenteredVariable) -> CenteredVariable {
        CenteredVariable {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u + eps * v)
                .collect(),
            base: self.base.clone(),
        }
    }
}

fn check_len(base: &DensityGrid, values: &[f64]) -> Result<()> {
    if values.len() != base.values.len() {
        return Err(Error::Usage(format!(
            "{} values for a grid of {} nodes",
            values.len(),
            base.values.len()
        )));
    }
    Ok(())
}

fn mean_under(p: &DensityGrid, values: &[f64]) -> f64 {
    let weighted: Vec<f64> = p.values.iter().zip(values).map(|(d, v)| d * v).collect();
    p.grid.integrate_unchecked(&weighted) / p.mass()
}

fn log_values(p: &DensityGrid) -> Result<Vec<f64>> {
    p.values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::Domain(format!(
                    "density value {v} at x = {} is not positive",
                    p.grid.nodes()[k]
                )))
            }
        })
        .collect()
}

/// `s_p(q) = log(q/p) − E_p[log(q/p)]`
pub fn chart(p: &DensityGrid, q: &DensityGrid) -> Result<CenteredVariable> {
    if p.grid != q.grid {
        return Err(Error::Usage(
            "chart needs both densities on one grid".into(),
        ));
    }
    let lp = log_values(p)?;
    let lq = log_values(q)?;
    let ratio: Vec<f64> = lq.iter().zip(&lp).map(|(a, b)| a - b).collect();
    CenteredVariable::centered(p, &ratio)
}

/// `e_p(u) = exp(u − K_p(u)) · p`, the inverse of [`chart`].
pub fn patch(u: &CenteredVariable) -> Result<DensityGrid> {
    let k = cumulant(u)?;
    let p = u.base();
    let values = p
        .values
        .iter()
        .zip(u.values())
        .map(|(d, v)| d * (v - k).exp())
        .collect();
    DensityGrid::new(p.grid.clone(), values)
}

/// `K_p(u) = log E_p[e^u]`, evaluated with a max shift.
pub fn cumulant(u: &CenteredVariable) -> Result<f64> {
    let p = u.base();
    let lp = log_values(p)?;
    let expo: Vec<f64> = lp.iter().zip(u.values()).map(|(l, v)| l + v).collect();
    let peak = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = expo.iter().map(|e| (e - peak).exp()).collect();
    let total = p.grid.integrate_unchecked(&shifted);
    let log_total = peak + total.ln() - p.mass().ln();
    let boundary = shifted[0].max(shifted[shifted.len() - 1]) / total;
    if boundary > TAIL_TOLERANCE {
        return Err(Error::Tail(format!(
            "e^u p is {boundary:e} of its integral at the grid boundary"
        )));
    }
    if !log_total.is_finite() {
        return Err(Error::Numerical("cumulant is not finite".into()));
    }
    Ok(log_total)
}

/// Weights of `q = e_p(u)` at the nodes, normalized to unit mass.
fn tilted(u: &CenteredVariable) -> Result<Vec<f64>> {
    let k = cumulant(u)?;
    let p = u.base();
    let mass = p.mass();
    Ok(p.values
        .iter()
        .zip(u.values())
        .map(|(d, v)| d * (v - k).exp() / mass)
        .collect())
}

/// First and second differentials of `K_p` at `u` in direction `v`:
/// `(E_q[v], Var_q[v])` with `q = e_p(u)`.
pub fn cumulant_differentials(u: &CenteredVariable, v: &CenteredVariable) -> Result<(f64, f64)> {
    let q = tilted(u)?;
    let grid = &u.base().grid;
    let qv: Vec<f64> = q.iter().zip(v.values()).map(|(a, b)| a * b).collect();
    let mean = grid.integrate_unchecked(&qv);
    let qvv: Vec<f64> = q
        .iter()
        .zip(v.values())
        .map(|(a, b)| a * (b - mean) * (b - mean))
        .collect();
    Ok((mean, grid.integrate_unchecked(&qvv)))
}

/// Orlicz norm `inf{r > 0 : E_p[cosh(u/r) − 1] ≤ 1}` by bisection.
/// Returns `+∞` when no `r` in `[1e-8, 1e8]` satisfies the bound.
pub fn orlicz_norm(u: &CenteredVariable) -> f64 {
    let max_abs = u.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return 0.0;
    }
    let p = u.base();
    let mass = p.mass();
    let excess = |r: f64| -> f64 {
        let vals: Vec<f64> = p
            .values
            .iter()
            .zip(u.values())
            .map(|(d, v)| {
                let s = (v / (2.0 * r)).sinh();
                2.0 * s * s * d
            })
            .collect();
        p.grid.integrate_unchecked(&vals) / mass
    };
    let feasible = |r: f64| excess(r) <= 1.0;

    const R_MIN: f64 = 1e-8;
    const R_MAX: f64 = 1e8;
    let mut lo = (max_abs / 50.0).max(R_MIN);
    let mut hi = (50.0 * max_abs).min(R_MAX);
    while !feasible(hi) {
        if hi >= R_MAX {
            return f64::INFINITY;
        }
        lo = hi;
        hi = (hi * 4.0).min(R_MAX);
    }
    while feasible(lo) {
        if lo <= R_MIN {
            return lo;
        }
        hi = lo;
        lo = (lo / 4.0).max(R_MIN);
    }
    while hi - lo > 1e-8 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Outcome of [`sqrt_map_derivative_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqrtMapReport {
    /// `‖FD − DH v‖₂ / ‖DH v‖₂` (absolute when the derivative vanishes).
    pub derivative_error: f64,
    /// `‖DH v‖₂²`
    pub derivative_norm_sq: f64,
    /// `¼ D²K(u)(v, v)`
    pub quarter_second_differential: f64,
    /// Relative gap between the two quantities above.
    pub norm_identity_error: f64,
}

/// `H(u) = √(e_p(u))` at the nodes.
pub fn sqrt_map(u: &CenteredVariable) -> Result<Vec<f64>> {
    Ok(tilted(u)?.iter().map(|q| q.sqrt()).collect())
}

/// Compare the central difference of `H` at `u` in direction `v` with the
/// analytic derivative `H(u) · ½(v − E_q v)`, and check `‖DH v‖² = ¼ D²K(u)(v,v)`.
pub fn sqrt_map_derivative_check(
    u: &CenteredVariable,
    v: &CenteredVariable,
    eps: f64,
) -> Result<SqrtMapReport> {
    let grid = &u.base().grid;
    let h0 = sqrt_map(u)?;
    let hp = sqrt_map(&u.axpy(eps, v))?;
    let hm = sqrt_map(&u.axpy(-eps, v))?;
    let (mean_v, var_v) = cumulant_differentials(u, v)?;
    let analytic: Vec<f64> = h0
        .iter()
        .zip(v.values())
        .map(|(h, x)| 0.5 * h * (x - mean_v))
        .collect();
    let diff_sq: Vec<f64> = hp
        .iter()
        .zip(&hm)
        .zip(&analytic)
        .map(|((a, b), d)| {
            let fd = (a - b) / (2.0 * eps);
            (fd - d) * (fd - d)
        })
        .collect();
    let norm_sq: Vec<f64> = analytic.iter().map(|d| d * d).collect();
    let derivative_norm_sq = grid.integrate_unchecked(&norm_sq);
    let err = grid.integrate_unchecked(&diff_sq).sqrt();
    let derivative_error = if derivative_norm_sq > 0.0 {
        err / derivative_norm_sq.sqrt()
    } else {
        err
    };
    let quarter = 0.25 * var_v;
    let norm_identity_error = if quarter > 0.0 {
        (derivative_norm_sq - quarter).abs() / quarter
    } else {
        derivative_norm_sq
    };
    Ok(SqrtMapReport {
        derivative_error,
        derivative_norm_sq,
        quarter_second_differential: quarter,
        norm_identity_error,
    })
}

/// `s_{p₂}(e_{p₁}(u))` computed through the densities.
pub fn change_chart(u: &CenteredVariable, p2: &DensityGrid) -> Result<CenteredVariable> {
    chart(p2, &patch(u)?)
}

/// Closed form of [`change_chart`]: `u + log(p₁/p₂) − E_{p₂}[u + log(p₁/p₂)]`.
pub fn transition_map(u: &CenteredVariable, p2: &DensityGrid) -> Result<CenteredVariable> {
    let l1 = log_values(u.base())?;
    let l2 = log_values(p2)?;
    let shifted: Vec<f64> = u
        .values()
        .iter()
        .zip(l1.iter().zip(&l2))
        .map(|(v, (a, b))| v + a - b)
        .collect();
    CenteredVariable::centered(p2, &shifted)
}
