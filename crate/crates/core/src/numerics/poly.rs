use serde::{Deserialize, Serialize};

/// Value and first two spatial derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub dx: f64,
    pub dxx: f64,
}

impl Jet {
    pub fn new(value: f64, dx: f64, dxx: f64) -> Self {
        Jet { value, dx, dxx }
    }
}

/// Polynomial with ascending coefficients: `Σ coeffs[k] x^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Polynomial { coeffs }
    }

    pub fn monomial(degree: usize) -> Self {
        let mut coeffs = vec![0.0; degree + 1];
        coeffs[degree] = 1.0;
        Polynomial { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Highest degree with a nonzero coefficient, `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.iter().rposition(|&c| c != 0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Value, first and second derivative by a single Horner sweep.
    pub fn jet(&self, x: f64) -> Jet {
        let (mut p, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for c in self.coeffs.iter().rev() {
            d2 = d2 * x + 2.0 * d1;
            d1 = d1 * x + p;
            p = p * x + c;
        }
        Jet::new(p, d1, d2)
    }

    pub fn derivative(&self) -> Polynomial {
        if self.coeffs.len() <= 1 {
            return Polynomial::new(vec![0.0]);
        }
        Polynomial::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c)
                .collect(),
        )
    }

    /// `Σ weights[i] · polys[i]`
    pub fn linear_combination(polys: &[Polynomial], weights: &[f64]) -> Polynomial {
        let len = polys.iter().map(|p| p.coeffs.len()).max().unwrap_or(1);
        let mut coeffs = vec![0.0; len];
        for (p, w) in polys.iter().zip(weights) {
            for (k, c) in p.coeffs.iter().enumerate() {
                coeffs[k] += w * c;
            }
        }
        Polynomial { coeffs }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        Polynomial::linear_combination(&[self.clone(), other.clone()], &[1.0, 1.0])
    }
}
