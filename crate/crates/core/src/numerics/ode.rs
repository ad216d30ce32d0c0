use crate::error::{Error, Result};

/// One classical fourth-order Runge–Kutta step of `ẏ = field(t, y)`.
pub fn rk4_step<F>(mut field: F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("RK4 step must be positive, got {h}")));
    }
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect() };

    let k1 = field(t, y)?;
    check_dim(y, &k1)?;
    let k2 = field(t + 0.5 * h, &axpy(0.5 * h, &k1))?;
    check_dim(y, &k2)?;
    let k3 = field(t + 0.5 * h, &axpy(0.5 * h, &k2))?;
    check_dim(y, &k3)?;
    let k4 = field(t + h, &axpy(h, &k3))?;
    check_dim(y, &k4)?;

    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Full step plus two half steps; the error estimate is the Richardson
/// difference `‖y_half − y_full‖∞ / 15`. The full-step result is returned as
/// the state so trajectories stay on the fixed step `h`.
pub fn rk4_step_with_estimate<F>(mut field: F, t: f64, y: &[f64], h: f64) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let full = rk4_step(&mut field, t, y, h)?;
    let mid = rk4_step(&mut field, t, y, 0.5 * h)?;
    let half = rk4_step(&mut field, t + 0.5 * h, &mid, 0.5 * h)?;
    let err = full
        .iter()
        .zip(&half)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / 15.0;
    Ok((full, err))
}

fn check_dim(y: &[f64], k: &[f64]) -> Result<()> {
    if y.len() != k.len() {
        return Err(Error::Usage(format!(
            "vector field returned {} components for a state of {}",
            k.len(),
            y.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_examples() {
        let y = rk4_step(|_, _| Ok(vec![0.0]), 0.0, &[1.0], 0.1).unwrap();
        assert_eq!(y, vec![1.0]);

        let y = rk4_step(|_, y| Ok(y.to_vec()), 0.0, &[1.0], 0.1).unwrap();
        assert!((y[0] - 1.105170833).abs() < 1e-8);
        assert!((y[0] - 0.1f64.exp()).abs() < 1e-6);

        let y = rk4_step(|_, _| Ok(vec![0.0, 0.5]), 0.0, &[0.0, -0.5], 0.2).unwrap();
        assert!(y[0].abs() < 1e-15 && (y[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_step_rejected_and_errors_propagate() {
        assert!(rk4_step(|_, y| Ok(y.to_vec()), 0.0, &[1.0], 0.0).is_err());
        let r = rk4_step(
            |_, _| Err(Error::Numerical("boom".into())),
            0.0,
            &[1.0],
            0.1,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    fn global_error(n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut y = vec![1.0];
        for k in 0..n {
            y = rk4_step(|_, y| Ok(y.to_vec()), k as f64 * h, &y, h).unwrap();
        }
        (y[0] - 1f64.exp()).abs()
    }

    #[test]
    fn fourth_order_convergence() {
        for n in [5, 10, 20] {
            let ratio = global_error(n) / global_error(2 * n);
            assert!((ratio / 16.0 - 1.0).abs() < 0.2, "n={n}: ratio {ratio}");
        }
    }

    #[test]
    fn estimate_tracks_local_error() {
        let (y, est) = rk4_step_with_estimate(|_, y| Ok(y.to_vec()), 0.0, &[1.0], 0.2).unwrap();
        let err = (y[0] - 0.2f64.exp()).abs();
        assert!(est > 0.0 && est < err && err < 20.0 * est);
    }
}
