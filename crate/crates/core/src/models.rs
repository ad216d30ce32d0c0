//! Scalar Itô diffusions `dX = f dt + σ dW`, their backward operator, and the
//! exponential-coordinate tangent field `α = (L*p)/p`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expfam::ExponentialFamily;
use crate::numerics::{Jet, Polynomial, QuadratureGrid};

/// A coefficient `(t, x) ↦ value` together with its first two spatial derivatives.
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn jet(&self, t: f64, x: f64) -> Jet;
}

/// Shared handle to a [`ScalarField`].
#[derive(Debug, Clone)]
pub struct TimeSpaceField(Arc<dyn ScalarField>);

impl TimeSpaceField {
    pub fn new(field: impl ScalarField + 'static) -> Self {
        TimeSpaceField(Arc::new(field))
    }

    pub fn jet(&self, t: f64, x: f64) -> Jet {
        self.0.jet(t, x)
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.0.jet(t, x).value
    }

    /// Compare the supplied derivatives with central differences (step 1e-5).
    /// `check_dxx` is off for drifts, whose second derivative is never used.
    pub fn check_derivatives(&self, t: f64, probe: &[f64], check_dxx: bool) -> Result<()> {
        const STEP: f64 = 1e-5;
        const TOL: f64 = 1e-4;
        for &x in probe {
            let j = self.jet(t, x);
            let lo = self.value(t, x - STEP);
            let hi = self.value(t, x + STEP);
            let fd1 = (hi - lo) / (2.0 * STEP);
            if (j.dx - fd1).abs() > TOL * j.dx.abs().max(1.0) {
                return Err(Error::Validation(format!(
                    "first derivative disagrees with finite differences at t={t}, x={x}: {} vs {fd1}",
                    j.dx
                )));
            }
            if check_dxx {
                let fd2 = (hi - 2.0 * j.value + lo) / (STEP * STEP);
                // second differences lose ~eps/STEP² of the value scale
                let floor = 1.0f64.max(j.value.abs() * 1e-16 / (STEP * STEP) / TOL);
                if (j.dxx - fd2).abs() > TOL * j.dxx.abs().max(floor) {
                    return Err(Error::Validation(format!(
                        "second derivative disagrees with finite differences at t={t}, x={x}: {} vs {fd2}",
                        j.dxx
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Time-independent polynomial coefficient.
#[derive(Debug, Clone)]
pub struct PolynomialField(pub Polynomial);

impl ScalarField for PolynomialField {
    fn jet(&self, _t: f64, x: f64) -> Jet {
        self.0.jet(x)
    }
}

/// `base + amplitude · sin x`
#[derive(Debug, Clone, Copy)]
pub struct SineField {
    pub base: f64,
    pub amplitude: f64,
}

impl ScalarField for SineField {
    fn jet(&self, _t: f64, x: f64) -> Jet {
        let (s, c) = x.sin_cos();
        Jet::new(
            self.base + self.amplitude * s,
            self.amplitude * c,
            -self.amplitude * s,
        )
    }
}

/// Drift `f = ½ ∂a + ½ a (kt − x) + k`, which keeps the law `N(kt, 1)` for any
/// diffusion coefficient `a` when started from `N(0, 1)`.
#[derive(Debug, Clone)]
pub struct UnitVarianceDrift {
    pub k: f64,
    pub diffusion: TimeSpaceField,
}

impl UnitVarianceDrift {
    fn value_dx(&self, t: f64, x: f64) -> (f64, f64) {
        let a = self.diffusion.jet(t, x);
        let shift = self.k * t - x;
        let value = 0.5 * a.dx + 0.5 * a.value * shift + self.k;
        let dx = 0.5 * a.dxx + 0.5 * a.dx * shift - 0.5 * a.value;
        (value, dx)
    }
}

impl ScalarField for UnitVarianceDrift {
    fn jet(&self, t: f64, x: f64) -> Jet {
        const STEP: f64 = 1e-4;
        let (value, dx) = self.value_dx(t, x);
        // needs ∂³a otherwise; only diagnostics read the drift's second derivative
        let dxx = (self.value_dx(t, x + STEP).1 - self.value_dx(t, x - STEP).1) / (2.0 * STEP);
        Jet::new(value, dx, dxx)
    }
}

/// Closure-backed field for ad-hoc models.
pub struct FnField<F>(pub F);

impl<F> fmt::Debug for FnField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnField")
    }
}

impl<F> ScalarField for FnField<F>
where
    F: Fn(f64, f64) -> Jet + Send + Sync,
{
    fn jet(&self, t: f64, x: f64) -> Jet {
        (self.0)(t, x)
    }
}

/// Which built-in a model came from; oracles key off this.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Linear { drift_rate: f64, diffusion: f64 },
    UnitVariance { k: f64 },
    DoubleWell { sigma0_sq: f64 },
    Custom,
}

/// `dX = f(t, X) dt + √a(t, X) dW` with optional non-explosion constant `K`.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub name: String,
    pub kind: ModelKind,
    pub drift: TimeSpaceField,
    pub diffusion: TimeSpaceField,
    pub nonexplosion: Option<f64>,
}

impl DiffusionModel {
    pub fn new(name: impl Into<String>, drift: TimeSpaceField, diffusion: TimeSpaceField) -> Self {
        DiffusionModel {
            name: name.into(),
            kind: ModelKind::Custom,
            drift,
            diffusion,
            nonexplosion: None,
        }
    }

    /// `f = F x`, `a = A`.
    pub fn linear(drift_rate: f64, diffusion: f64) -> Self {
        DiffusionModel {
            name: format!("linear({drift_rate},{diffusion})"),
            kind: ModelKind::Linear {
                drift_rate,
                diffusion,
            },
            drift: TimeSpaceField::new(PolynomialField(Polynomial::new(vec![0.0, drift_rate]))),
            diffusion: TimeSpaceField::new(PolynomialField(Polynomial::new(vec![diffusion]))),
            nonexplosion: None,
        }
    }

    pub fn unit_variance(k: f64, diffusion: TimeSpaceField) -> Self {
        DiffusionModel {
            name: format!("unit-variance({k})"),
            kind: ModelKind::UnitVariance { k },
            drift: TimeSpaceField::new(UnitVarianceDrift {
                k,
                diffusion: diffusion.clone(),
            }),
            diffusion,
            nonexplosion: None,
        }
    }

    /// `f = x − x³`, `a = σ₀²`.
    pub fn double_well(sigma0_sq: f64) -> Self {
        DiffusionModel {
            name: format!("double-well({sigma0_sq})"),
            kind: ModelKind::DoubleWell { sigma0_sq },
            drift: TimeSpaceField::new(PolynomialField(Polynomial::new(vec![0.0, 1.0, 0.0, -1.0]))),
            diffusion: TimeSpaceField::new(PolynomialField(Polynomial::new(vec![sigma0_sq]))),
            nonexplosion: None,
        }
    }

    pub fn with_nonexplosion(mut self, k: f64) -> Self {
        self.nonexplosion = Some(k);
        self
    }

    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        self.diffusion.value(t, x).sqrt()
    }

    /// Check positivity of `a`, derivative consistency and, when `K` is set,
    /// non-explosion on the probe nodes at each sampled time.
    pub fn validate(&self, probe: &[f64], times: &[f64]) -> Result<()> {
        for &t in times {
            for &x in probe {
                let a = self.diffusion.value(t, x);
                if !(a > 0.0) {
                    return Err(Error::Validation(format!(
                        "diffusion coefficient a({t}, {x}) = {a} is not positive"
                    )));
                }
            }
        }
        for &t in times {
            self.drift.check_derivatives(t, probe, false)?;
            self.diffusion.check_derivatives(t, probe, true)?;
        }
        if let Some(k) = self.nonexplosion {
            let report = nonexplosion_check(self, probe, times, k);
            if !report.holds {
                return Err(Error::Validation(format!(
                    "non-explosion bound 2xf + a <= K(1+x²) fails with K={k} at t={}, x={} (excess {:e})",
                    report.worst_t, report.worst_x, report.worst_excess
                )));
            }
        }
        Ok(())
    }
}

/// 41 uniform nodes over `mean ± 6 sd`.
pub fn probe_grid(mean: f64, sd: f64) -> Vec<f64> {
    (0..41)
        .map(|i| mean - 6.0 * sd + 12.0 * sd * i as f64 / 40.0)
        .collect()
}

/// `(Lφ)(x) = f φ′ + ½ a φ″` at each node, `phi` given as jets on the grid.
pub fn backward_apply(
    model: &DiffusionModel,
    t: f64,
    phi: &[Jet],
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    if phi.len() != grid.len() {
        return Err(Error::Usage(format!(
            "{} test-function jets for a grid of {} nodes",
            phi.len(),
            grid.len()
        )));
    }
    Ok(grid
        .nodes()
        .iter()
        .zip(phi)
        .map(|(&x, p)| {
            let f = model.drift.value(t, x);
            let a = model.diffusion.value(t, x);
            f * p.dx + 0.5 * a * p.dxx
        })
        .collect())
}

/// `α = (L*p)/p` from the log-density derivatives `ℓ′ = ∂x log p`, `ℓ″ = ∂xx log p`.
pub(crate) fn alpha_from_log_derivatives(
    model: &DiffusionModel,
    t: f64,
    nodes: &[f64],
    l1: &[f64],
    l2: &[f64],
) -> Vec<f64> {
    nodes
        .iter()
        .zip(l1.iter().zip(l2))
        .map(|(&x, (&d1, &d2))| {
            let f = model.drift.jet(t, x);
            let a = model.diffusion.jet(t, x);
            -f.value * d1 - f.dx
                + 0.5 * (a.value * d2 + a.value * d1 * d1 + 2.0 * a.dx * d1 + a.dxx)
        })
        .collect()
}

/// Tangent field `α_{t,θ}` of the Fokker–Planck flow at `p(·, θ)` on the grid.
pub fn alpha_field(
    model: &DiffusionModel,
    t: f64,
    theta: &[f64],
    family: &ExponentialFamily,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    family.check_domain(theta)?;
    let cache = family.on_grid(grid);
    let (l1, l2) = cache.log_density_derivatives(theta);
    Ok(alpha_from_log_derivatives(model, t, grid.nodes(), &l1, &l2))
}

/// Outcome of [`nonexplosion_check`]: whether `2xf + a ≤ K(1 + x²)` held and
/// where the margin was worst.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonexplosionReport {
    pub holds: bool,
    /// Largest `2xf + a − K(1 + x²)` seen (≤ 0 when the bound holds).
    pub worst_excess: f64,
    pub worst_x: f64,
    pub worst_t: f64,
}

pub fn nonexplosion_check(
    model: &DiffusionModel,
    probe: &[f64],
    times: &[f64],
    k: f64,
) -> NonexplosionReport {
    let mut report = NonexplosionReport {
        holds: true,
        worst_excess: f64::NEG_INFINITY,
        worst_x: f64::NAN,
        worst_t: f64::NAN,
    };
    for &t in times {
        for &x in probe {
            let lhs = 2.0 * x * model.drift.value(t, x) + model.diffusion.value(t, x);
            let excess = lhs - k * (1.0 + x * x);
            if excess > report.worst_excess {
                report.worst_excess = excess;
                report.worst_x = x;
                report.worst_t = t;
            }
        }
    }
    report.holds = report.worst_excess <= 0.0;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> QuadratureGrid {
        QuadratureGrid::gauss_legendre(-8.0, 8.0, 16, 16).unwrap()
    }

    fn jets(grid: &QuadratureGrid, p: &Polynomial) -> Vec<Jet> {
        grid.nodes().iter().map(|&x| p.jet(x)).collect()
    }

    #[test]
    fn backward_operator_examples() {
        let g = grid();
        let x = Polynomial::monomial(1);
        let x2 = Polynomial::monomial(2);
        let bm = DiffusionModel::linear(0.0, 1.0);
        assert!(backward_apply(&bm, 0.0, &jets(&g, &x), &g)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(backward_apply(&bm, 0.0, &jets(&g, &x2), &g)
            .unwrap()
            .iter()
            .all(|v| (*v - 1.0).abs() < 1e-15));

        let (f, a) = (-0.7, 1.3);
        let lin = DiffusionModel::linear(f, a);
        let lx = backward_apply(&lin, 0.0, &jets(&g, &x), &g).unwrap();
        let lx2 = backward_apply(&lin, 0.0, &jets(&g, &x2), &g).unwrap();
        for (k, &node) in g.nodes().iter().enumerate() {
            assert!((lx[k] - f * node).abs() < 1e-14);
            assert!((lx2[k] - (2.0 * f * node * node + a)).abs() < 1e-12);
        }
        assert!(backward_apply(&lin, 0.0, &jets(&g, &x)[1..], &g).is_err());
    }

    #[test]
    fn generator_is_centered_and_dual() {
        let fam = ExponentialFamily::polynomial(4).unwrap();
        let theta = [0.3, 1.0, 0.0, -0.5];
        let g = crate::expfam::GridPolicy::default()
            .fit(&fam, &theta)
            .unwrap();
        let cache = fam.on_grid(&g);
        let p = cache.state(&theta).unwrap().density().to_vec();
        let models = [
            DiffusionModel::double_well(0.5),
            DiffusionModel::unit_variance(
                0.8,
                TimeSpaceField::new(SineField {
                    base: 2.0,
                    amplitude: 1.0,
                }),
            ),
            DiffusionModel::linear(-0.4, 1.7),
        ];
        for model in &models {
            let alpha = alpha_field(model, 0.3, &theta, &fam, &g).unwrap();
            let ap: Vec<f64> = alpha.iter().zip(&p).map(|(a, p)| a * p).collect();
            assert!(g.integrate(&ap).unwrap().abs() < 1e-9, "{}", model.name);
            for k in 1..=4 {
                let phi = Polynomial::monomial(k);
                let forward: Vec<f64> = g
                    .nodes()
                    .iter()
                    .zip(&ap)
                    .map(|(x, v)| phi.eval(*x) * v)
                    .collect();
                let lphi = backward_apply(model, 0.3, &jets(&g, &phi), &g).unwrap();
                let backward: Vec<f64> = lphi.iter().zip(&p).map(|(l, p)| l * p).collect();
                let (f, b) = (
                    g.integrate(&forward).unwrap(),
                    g.integrate(&backward).unwrap(),
                );
                assert!(
                    (f - b).abs() <= 1e-8 * b.abs().max(1.0),
                    "{} k={k}: {f} vs {b}",
                    model.name
                );
            }
        }
    }

    #[test]
    fn alpha_examples() {
        let g = grid();
        let gauss = ExponentialFamily::polynomial(2).unwrap();
        let std_normal = [0.0, -0.5];

        let ou = DiffusionModel::linear(1.0, 1.0);
        let alpha = alpha_field(&ou, 0.0, &std_normal, &gauss, &g).unwrap();
        for (x, a) in g.nodes().iter().zip(&alpha) {
            assert!((a - (1.5 * x * x - 1.5)).abs() < 1e-12);
        }

        let bm = DiffusionModel::linear(0.0, 1.0);
        let alpha = alpha_field(&bm, 0.0, &std_normal, &gauss, &g).unwrap();
        for (x, a) in g.nodes().iter().zip(&alpha) {
            assert!((a - 0.5 * (x * x - 1.0)).abs() < 1e-12);
        }

        assert!(matches!(
            alpha_field(&bm, 0.0, &[0.0, 0.5], &gauss, &g),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn unit_variance_alpha_matches_closed_form() {
        let g = grid();
        let k = 0.8;
        let a = TimeSpaceField::new(SineField {
            base: 2.0,
            amplitude: 1.0,
        });
        let model = DiffusionModel::unit_variance(k, a.clone());
        let family = ExponentialFamily::mean_shift_gaussian();
        let t = 0.6;
        for theta in [k * t, 0.1, -0.4] {
            let alpha = alpha_field(&model, t, &[theta], &family, &g).unwrap();
            for (&x, got) in g.nodes().iter().zip(&alpha) {
                let aj = a.jet(t, x);
                let want = -0.5 * aj.dx * (k * t - theta)
                    + 0.5 * aj.value * (x - theta) * (k * t - theta)
                    + k * (x - theta);
                assert!(
                    (got - want).abs() < 1e-9 * (1.0 + want.abs()),
                    "θ={theta} x={x}"
                );
            }
        }
        // on the solution curve α = k(x − kt)
        let alpha = alpha_field(&model, t, &[k * t], &family, &g).unwrap();
        for (&x, got) in g.nodes().iter().zip(&alpha) {
            assert!((got - k * (x - k * t)).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn nonexplosion_examples() {
        let probe: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let times = [0.0, 0.5, 1.0];
        assert!(nonexplosion_check(&DiffusionModel::linear(0.0, 1.0), &probe, &times, 1.0).holds);
        assert!(nonexplosion_check(&DiffusionModel::linear(1.0, 1.0), &probe, &times, 3.0).holds);
        let cubic = DiffusionModel::new(
            "cubic",
            TimeSpaceField::new(PolynomialField(Polynomial::monomial(3))),
            TimeSpaceField::new(PolynomialField(Polynomial::new(vec![1.0]))),
        );
        let r = nonexplosion_check(&cubic, &probe, &times, 10.0);
        assert!(!r.holds);
        assert!(r.worst_x.abs() >= 3.0 - 1e-12);
        // at x = 3: 2·81 + 1 = 163 > 100
        assert!(r.worst_excess >= 62.0);
    }

    #[test]
    fn builtin_fields_pass_derivative_checks() {
        let probe = probe_grid(0.0, 1.0);
        let sine = DiffusionModel::unit_variance(
            1.0,
            TimeSpaceField::new(SineField {
                base: 2.0,
                amplitude: 1.0,
            }),
        );
        for model in [
            DiffusionModel::linear(-1.0, 2.0),
            DiffusionModel::double_well(0.5),
            sine,
        ] {
            model.validate(&probe, &[0.0, 0.5, 1.0]).unwrap();
        }
        let bad = DiffusionModel::new(
            "wrong-derivative",
            TimeSpaceField::new(FnField(|_t, x: f64| Jet::new(x * x, 0.0, 2.0))),
            TimeSpaceField::new(PolynomialField(Polynomial::new(vec![1.0]))),
        );
        assert!(bad.validate(&probe, &[0.0]).is_err());
        let negative = DiffusionModel::linear(0.0, -1.0);
        assert!(negative.validate(&probe, &[0.0]).is_err());
        let explosive = DiffusionModel::double_well(0.5).with_nonexplosion(1e-3);
        assert!(explosive.validate(&probe, &[0.0]).is_err());
    }
}
