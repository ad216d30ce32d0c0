//! Quadrature grids, prefix integrals, small dense solves and fixed-step RK4.

mod linalg;
mod ode;
mod poly;
mod quadrature;

pub use linalg::{eigen_extremes, solve_tridiagonal, spd_solve, SpdSolveReport, PIVOT_TOLERANCE};
pub use ode::{rk4_step, rk4_step_with_estimate};
pub use poly::{Jet, Polynomial};
pub use quadrature::{
    cumulative_integral, gauss_legendre_reference, integrate, linear_interpolate, QuadratureGrid,
    Scheme,
};
