//! Reference solutions: exact Gaussian moments for linear models, a
//! Crank–Nicolson finite-volume Fokker–Planck solver, and density distances.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::DensityGrid;
use crate::models::DiffusionModel;
use crate::numerics::{rk4_step, solve_tridiagonal, QuadratureGrid, Scheme};

/// Mean and variance of a normal law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianState {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
}

/// RK4 on `ṁ = F m`, `Q̇ = 2 F Q + A` from `(m₀, Q₀)` over `[0, t_end]`.
pub fn gaussian_exact(
    drift_rate: impl Fn(f64) -> f64,
    diffusion: impl Fn(f64) -> f64,
    m0: f64,
    q0: f64,
    t_end: f64,
    h: f64,
) -> Result<Vec<GaussianState>> {
    if !(q0 > 0.0) {
        return Err(Error::Usage(format!(
            "initial variance must be positive, got {q0}"
        )));
    }
    let steps = crate::projection::step_count(t_end, h)?;
    let field = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let f = drift_rate(t);
        Ok(vec![f * y[0], 2.0 * f * y[1] + diffusion(t)])
    };
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = vec![m0, q0];
    out.push(GaussianState {
        t: 0.0,
        mean: m0,
        variance: q0,
    });
    for k in 0..steps {
        let t = k as f64 * h;
        y = rk4_step(field, t, &y, h)?;
        if !(y[1] > 0.0) {
            return Err(Error::Numerical(format!(
                "variance {} is not positive at t = {}",
                y[1],
                t + h
            )));
        }
        out.push(GaussianState {
            t: (k + 1) as f64 * h,
            mean: y[0],
            variance: y[1],
        });
    }
    Ok(out)
}

/// Diagnostics from [`fd_fpe_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub density: DensityGrid,
    /// `|mass(T) − mass(0)|`
    pub mass_drift: f64,
    /// Entries clipped to zero over the whole run.
    pub clips: usize,
    pub steps: usize,
}

/// Largest tolerated cell Péclet number `|f| Δ / a`.
pub const MAX_PECLET: f64 = 2.0;
/// Largest tolerated diffusive Courant number `dt · max a / Δ²`.
pub const MAX_DIFFUSIVE_COURANT: f64 = 50.0;

/// Crank–Nicolson finite-volume solve of `∂t p = −∂x(f p) + ½ ∂xx(a p)` with
/// zero-flux ends. `p0` must live on a uniform trapezoid grid; the cells are
/// centred on the nodes, so the discrete mass is exactly the trapezoid integral.
pub fn fd_fpe_solve(
    model: &DiffusionModel,
    p0: &DensityGrid,
    t_end: f64,
    dt: f64,
) -> Result<FdReport> {
    let grid = &p0.grid;
    let dx = match (grid.scheme(), grid.spacing()) {
        (Scheme::Trapezoid, Some(d)) => d,
        _ => {
            return Err(Error::Usage(
                "finite-difference solver needs a uniform trapezoid grid".into(),
            ))
        }
    };
    let n = grid.len();
    if n < 3 {
        return Err(Error::Usage(
            "finite-difference grid needs at least 3 nodes".into(),
        ));
    }
    let mass0 = p0.mass();
    if (mass0 - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "initial density has mass {mass0}, expected 1"
        )));
    }
    if t_end == 0.0 {
        return Ok(FdReport {
            density: p0.clone(),
            mass_drift: 0.0,
            clips: 0,
            steps: 0,
        });
    }
    let steps = crate::projection::step_count(t_end, dt)?;
    let x = grid.nodes();
    let vol: Vec<f64> = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * dx } else { dx })
        .collect();

    // flux J_{i+½} = c_lo[i] p_i + c_hi[i] p_{i+1}
    let coefficients = |t: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let a: Vec<f64> = x.iter().map(|&xi| model.diffusion.value(t, xi)).collect();
        let mut c_lo = vec![0.0; n - 1];
        let mut c_hi = vec![0.0; n - 1];
        let mut worst_peclet = 0.0f64;
        for i in 0..n - 1 {
            let xm = 0.5 * (x[i] + x[i + 1]);
            let f = model.drift.value(t, xm);
            let am = 0.5 * (a[i] + a[i + 1]);
            worst_peclet = worst_peclet.max(f.abs() * dx / am);
            c_lo[i] = 0.5 * f + 0.5 * a[i] / dx;
            c_hi[i] = 0.5 * f - 0.5 * a[i + 1] / dx;
        }
        let a_max = a.iter().copied().fold(0.0, f64::max);
        if worst_peclet > MAX_PECLET {
            return Err(Error::Numerical(format!(
                "cell Péclet number {worst_peclet:.3} exceeds {MAX_PECLET}; refine the grid"
            )));
        }
        let courant = dt * a_max / (dx * dx);
        if courant > MAX_DIFFUSIVE_COURANT {
            return Err(Error::Numerical(format!(
                "diffusive Courant number {courant:.1} exceeds {MAX_DIFFUSIVE_COURANT}; reduce dt"
            )));
        }
        Ok((c_lo, c_hi))
    };

    let mut p = p0.values.clone();
    let mut clips = 0usize;
    for k in 0..steps {
        let t_mid = (k as f64 + 0.5) * dt;
        let (c_lo, c_hi) = coefficients(t_mid)?;
        // V dp/dt = −(J_{i+½} − J_{i−½}) = (M p)_i, M tridiagonal
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            if i + 1 < n {
                diag[i] -= c_lo[i];
                upper[i] -= c_hi[i];
            }
            if i > 0 {
                diag[i] += c_hi[i - 1];
                lower[i] += c_lo[i - 1];
            }
        }
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let mut mp = diag[i] * p[i];
            if i > 0 {
                mp += lower[i] * p[i - 1];
            }
            if i + 1 < n {
                mp += upper[i] * p[i + 1];
            }
            rhs[i] = vol[i] / dt * p[i] + 0.5 * mp;
        }
        let sys_lower: Vec<f64> = lower.iter().map(|v| -0.5 * v).collect();
        let sys_upper: Vec<f64> = upper.iter().map(|v| -0.5 * v).collect();
        let sys_diag: Vec<f64> = (0..n).map(|i| vol[i] / dt - 0.5 * diag[i]).collect();
        solve_tridiagonal(&sys_lower, &sys_diag, &sys_upper, &mut rhs)?;
        p = rhs;

        let mut clipped = false;
        for v in p.iter_mut() {
            if *v < -1e-12 {
                clips += 1;
                clipped = true;
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if clipped {
            let mass: f64 = p.iter().zip(&vol).map(|(a, b)| a * b).sum();
            p.iter_mut().for_each(|v| *v *= mass0 / mass);
        }
    }
    let density = DensityGrid::new(grid.clone(), p)?;
    let mass_drift = (density.mass() - mass0).abs();
    if mass_drift > 1e-6 {
        return Err(Error::Numerical(format!("mass drifted by {mass_drift:e}")));
    }
    if clips > n {
        return Err(Error::Numerical(format!(
            "{clips} negative values clipped on {n} nodes"
        )));
    }
    Ok(FdReport {
        density,
        mass_drift,
        clips,
        steps,
    })
}

/// Distances between two densities on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distances {
    pub l1: f64,
    pub hellinger: f64,
    /// `KL(pa ‖ pb)`; `+∞` when `pb` vanishes where `pa` does not.
    pub kl: f64,
}

impl Distances {
    pub fn kl_is_infinite(&self) -> bool {
        self.kl.is_infinite()
    }
}

pub fn distance(pa: &DensityGrid, pb: &DensityGrid) -> Result<Distances> {
    if pa.grid != pb.grid {
        return Err(Error::Usage(
            "distance needs both densities on one grid".into(),
        ));
    }
    let g = &pa.grid;
    let abs: Vec<f64> = pa
        .values
        .iter()
        .zip(&pb.values)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let sq: Vec<f64> = pa
        .values
        .iter()
        .zip(&pb.values)
        .map(|(a, b)| {
            let d = a.max(0.0).sqrt() - b.max(0.0).sqrt();
            d * d
        })
        .collect();
    let mut infinite = false;
    let kl: Vec<f64> = pa
        .values
        .iter()
        .zip(&pb.values)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else if b <= 0.0 {
                infinite = true;
                0.0
            } else {
                a * (a / b).ln()
            }
        })
        .collect();
    Ok(Distances {
        l1: g.integrate(&abs)?,
        hellinger: (0.5 * g.integrate(&sq)?).max(0.0).sqrt(),
        kl: if infinite {
            f64::INFINITY
        } else {
            g.integrate(&kl)?
        },
    })
}

/// Uniform trapezoid grid with `nodes` points covering `mean ± half_width`.
pub fn uniform_grid(lo: f64, hi: f64, nodes: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::trapezoid(lo, hi, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::gaussian_pdf;

    fn hellinger_gauss(m1: f64, q1: f64, m2: f64, q2: f64) -> f64 {
        let bc = (2.0 * (q1 * q2).sqrt() / (q1 + q2)).sqrt()
            * (-(m1 - m2).powi(2) / (4.0 * (q1 + q2))).exp();
        (1.0 - bc).sqrt()
    }

    #[test]
    fn gaussian_exact_examples() {
        let s = gaussian_exact(|_| 0.0, |_| 1.0, 0.0, 1.0, 1.0, 0.01).unwrap();
        let last = s.last().unwrap();
        assert!((last.t - 1.0).abs() < 1e-12);
        assert!(last.mean.abs() < 1e-15 && (last.variance - 2.0).abs() < 1e-12);
        let s = gaussian_exact(|_| -1.0, |_| 2.0, 0.7, 1.0, 1.0, 0.01).unwrap();
        for st in &s {
            assert!((st.variance - 1.0).abs() < 1e-12);
            assert!((st.mean - 0.7 * (-st.t).exp()).abs() < 1e-9);
        }
        let s = gaussian_exact(|_| 0.0, |_| 0.0, 0.3, 0.4, 1.0, 0.1).unwrap();
        assert!(s.iter().all(|st| st.mean == 0.3 && st.variance == 0.4));
        assert!(gaussian_exact(|_| 0.0, |_| 1.0, 0.0, -1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn distance_examples() {
        let g = QuadratureGrid::gauss_legendre(-15.0, 15.0, 64, 16).unwrap();
        let a = DensityGrid::gaussian(&g, 0.0, 1.0);
        let d = distance(&a, &a).unwrap();
        assert_eq!((d.l1, d.hellinger, d.kl), (0.0, 0.0, 0.0));
        let b = DensityGrid::gaussian(&g, 0.0, 2.0);
        let d = distance(&a, &b).unwrap();
        assert!((d.hellinger - hellinger_gauss(0.0, 1.0, 0.0, 2.0)).abs() < 1e-10);
        assert!((d.hellinger - 0.1703421750).abs() < 1e-6);
        let c = DensityGrid::gaussian(&g, 1.0, 1.0);
        assert!((distance(&a, &c).unwrap().kl - 0.5).abs() < 1e-10);
        let sym = distance(&b, &a).unwrap();
        assert!((sym.l1 - d.l1).abs() < 1e-14 && (sym.hellinger - d.hellinger).abs() < 1e-14);
        let mut z = a.clone();
        z.values.iter_mut().zip(g.nodes()).for_each(|(v, x)| {
            if *x > 0.0 {
                *v = 0.0
            }
        });
        assert!(distance(&a, &z).unwrap().kl_is_infinite());
    }

    fn fd_grid() -> QuadratureGrid {
        QuadratureGrid::trapezoid(-10.0, 10.0, 400).unwrap()
    }

    #[test]
    fn fd_heat_equation() {
        let g = fd_grid();
        let p0 = DensityGrid::gaussian(&g, 0.0, 1.0);
        let r = fd_fpe_solve(&DiffusionModel::linear(0.0, 1.0), &p0, 0.5, 1e-3).unwrap();
        let exact = DensityGrid::gaussian(&g, 0.0, 1.5);
        assert!(distance(&r.density, &exact).unwrap().l1 <= 1e-3);
        assert!(r.mass_drift <= 1e-8);
        assert_eq!(r.clips, 0);
    }

    #[test]
    fn fd_stationary_and_zero_time() {
        let g = fd_grid();
        let p0 = DensityGrid::gaussian(&g, 0.0, 1.0);
        let model = DiffusionModel::linear(-1.0, 2.0);
        let r = fd_fpe_solve(&model, &p0, 1.0, 1e-3).unwrap();
        assert!(distance(&r.density, &p0).unwrap().l1 <= 1e-3);
        let r = fd_fpe_solve(&model, &p0, 0.0, 1e-3).unwrap();
        assert_eq!(r.density, p0);
    }

    #[test]
    fn fd_matches_linear_oracle() {
        let g = fd_grid();
        let (m0, q0) = (0.5, 0.3);
        let p0 = DensityGrid::from_fn(&g, |x| gaussian_pdf(x, m0, q0));
        let p0 =
            DensityGrid::new(g.clone(), p0.values.iter().map(|v| v / p0.mass()).collect()).unwrap();
        let r = fd_fpe_solve(&DiffusionModel::linear(-1.0, 2.0), &p0, 0.5, 1e-3).unwrap();
        let s = *gaussian_exact(|_| -1.0, |_| 2.0, m0, q0, 0.5, 1e-3)
            .unwrap()
            .last()
            .unwrap();
        let exact = DensityGrid::gaussian(&g, s.mean, s.variance);
        assert!(distance(&r.density, &exact).unwrap().l1 <= 1e-3);
    }

    #[test]
    fn fd_rejects_bad_inputs() {
        let gl = QuadratureGrid::gauss_legendre(-5.0, 5.0, 4, 8).unwrap();
        let p = DensityGrid::gaussian(&gl, 0.0, 1.0);
        assert!(fd_fpe_solve(&DiffusionModel::linear(0.0, 1.0), &p, 0.1, 1e-3).is_err());
        let coarse = QuadratureGrid::trapezoid(-10.0, 10.0, 20).unwrap();
        let p = DensityGrid::gaussian(&coarse, 0.0, 1.0);
        let p = DensityGrid::new(
            coarse.clone(),
            p.values.iter().map(|v| v / p.mass()).collect(),
        )
        .unwrap();
        // drift 30x on cells of width ~1 with a = 1: Péclet far above 2
        assert!(fd_fpe_solve(&DiffusionModel::linear(-30.0, 1.0), &p, 0.1, 1e-3).is_err());
    }
}
