//! Fixtures shared by the benchmarks.

use projfpe_core::expfam::{gaussian_natural, ExponentialFamily, GridPolicy};
use projfpe_core::{DiffusionModel, QuadratureGrid};

/// Double-well model with a polynomial family of size `m` at the
/// moment-matched image of `N(0, 1)`, and a grid fitted to it.
pub fn double_well_case(m: usize) -> (DiffusionModel, ExponentialFamily, Vec<f64>, QuadratureGrid) {
    let model = DiffusionModel::double_well(0.5);
    let family = ExponentialFamily::polynomial(m).expect("even size");
    let theta = family.embed(&gaussian_natural(0.0, 1.0)).expect("fits");
    let grid = GridPolicy::default()
        .fit(&family, &theta)
        .expect("normalizable");
    (model, family, theta, grid)
}
