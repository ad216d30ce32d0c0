use std::sync::Arc;

use crate::error::{Error, Result};

/// Quadrature scheme behind a [`QuadratureGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Composite Gauss–Legendre: `panels` equal panels, `nodes_per_panel` nodes each.
    GaussLegendre {
        panels: usize,
        nodes_per_panel: usize,
    },
    /// Uniform nodes including both endpoints, trapezoid weights.
    Trapezoid,
}

/// Reference-panel data on [-1, 1]: nodes, weights, barycentric weights, and
/// the spectral integration/differentiation matrices of the nodal interpolant.
#[derive(Debug)]
struct PanelRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    bary: Vec<f64>,
    /// `integ[k][j] = ∫_{-1}^{ξ_k} ℓ_j(s) ds`
    integ: Vec<Vec<f64>>,
    /// `diff[i][j] = ℓ_j'(ξ_i)`
    diff: Vec<Vec<f64>>,
}

impl PanelRule {
    fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre_reference(n);
        let bary: Vec<f64> = (0..n)
            .map(|j| {
                let prod: f64 = (0..n)
                    .filter(|&k| k != j)
                    .map(|k| nodes[j] - nodes[k])
                    .product();
                1.0 / prod
            })
            .collect();

        let mut rule = PanelRule {
            nodes,
            weights,
            bary,
            integ: Vec::new(),
            diff: Vec::new(),
        };

        let mut integ = vec![vec![0.0; n]; n];
        for (k, row) in integ.iter_mut().enumerate() {
            let half = 0.5 * (rule.nodes[k] + 1.0);
            for q in 0..n {
                let s = -1.0 + half * (rule.nodes[q] + 1.0);
                let basis = rule.lagrange_basis(s);
                for (j, entry) in row.iter_mut().enumerate() {
                    *entry += half * rule.weights[q] * basis[j];
                }
            }
        }

        let mut diff = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i != j {
                    let d = (rule.bary[j] / rule.bary[i]) / (rule.nodes[i] - rule.nodes[j]);
                    diff[i][j] = d;
                    diag -= d;
                }
            }
            diff[i][i] = diag;
        }

        rule.integ = integ;
        rule.diff = diff;
        rule
    }

    /// All Lagrange basis values at `s` (barycentric form).
    fn lagrange_basis(&self, s: f64) -> Vec<f64> {
        let n = self.nodes.len();
        if let Some(hit) = self.nodes.iter().position(|&x| x == s) {
            let mut out = vec![0.0; n];
            out[hit] = 1.0;
            return out;
        }
        let terms: Vec<f64> = (0..n).map(|j| self.bary[j] / (s - self.nodes[j])).collect();
        let denom: f64 = terms.iter().sum();
        terms.into_iter().map(|t| t / denom).collect()
    }
}

/// Gauss–Legendre nodes (ascending) and weights on [-1, 1].
pub fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "at least one Gauss-Legendre node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    let mut pairs: Vec<(f64, f64)> = nodes.into_iter().zip(weights).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Truncated spatial grid carrying the nodes and weights used for every
/// expectation and inner product. Cheap to clone.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    x_min: f64,
    x_max: f64,
    nodes: Arc<[f64]>,
    weights: Arc<[f64]>,
    scheme: Scheme,
    rule: Option<Arc<PanelRule>>,
}

impl PartialEq for QuadratureGrid {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.x_min == other.x_min
            && self.x_max == other.x_max
            && self.nodes == other.nodes
    }
}

impl QuadratureGrid {
    pub fn gauss_legendre(
        x_min: f64,
        x_max: f64,
        panels: usize,
        nodes_per_panel: usize,
    ) -> Result<Self> {
        check_bounds(x_min, x_max)?;
        if panels == 0 || nodes_per_panel == 0 {
            return Err(Error::Usage(
                "Gauss-Legendre grid needs at least one panel and one node".into(),
            ));
        }
        let rule = PanelRule::new(nodes_per_panel);
        let width = (x_max - x_min) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * nodes_per_panel);
        let mut weights = Vec::with_capacity(panels * nodes_per_panel);
        for p in 0..panels {
            let a = x_min + p as f64 * width;
            for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
                nodes.push(a + 0.5 * width * (xi + 1.0));
                weights.push(0.5 * width * w);
            }
        }
        Ok(QuadratureGrid {
            x_min,
            x_max,
            nodes: nodes.into(),
            weights: weights.into(),
            scheme: Scheme::GaussLegendre {
                panels,
                nodes_per_panel,
            },
            rule: Some(Arc::new(rule)),
        })
    }

    pub fn trapezoid(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        check_bounds(x_min, x_max)?;
        if n < 2 {
            return Err(Error::Usage(
                "trapezoid grid needs at least two nodes".into(),
            ));
        }
        let step = (x_max - x_min) / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n)
            .map(|i| {
                if i == n - 1 {
                    x_max
                } else {
                    x_min + i as f64 * step
                }
            })
            .collect();
        let mut weights = vec![step; n];
        weights[0] = 0.5 * step;
        weights[n - 1] = 0.5 * step;
        Ok(QuadratureGrid {
            x_min,
            x_max,
            nodes: nodes.into(),
            weights: weights.into(),
            scheme: Scheme::Trapezoid,
            rule: None,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Highest polynomial degree integrated exactly.
    pub fn exactness_degree(&self) -> usize {
        match self.scheme {
            Scheme::GaussLegendre {
                nodes_per_panel, ..
            } => 2 * nodes_per_panel - 1,
            Scheme::Trapezoid => 1,
        }
    }

    /// Uniform spacing for trapezoid grids.
    pub fn spacing(&self) -> Option<f64> {
        match self.scheme {
            Scheme::Trapezoid => Some(self.nodes[1] - self.nodes[0]),
            Scheme::GaussLegendre { .. } => None,
        }
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Usage(format!(
                "{} values supplied for a grid of {} nodes",
                values.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        self.check_len(values)?;
        Ok(self.integrate_unchecked(values))
    }

    pub(crate) fn integrate_unchecked(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Prefix integrals `∫_{x_min}^{x_k} v dy` at every node.
    pub fn cumulative(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        match self.scheme {
            Scheme::Trapezoid => {
                let h = self.nodes[1] - self.nodes[0];
                let mut out = Vec::with_capacity(values.len());
                let mut acc = 0.0;
                out.push(0.0);
                for pair in values.windows(2) {
                    acc += 0.5 * h * (pair[0] + pair[1]);
                    out.push(acc);
                }
                Ok(out)
            }
            Scheme::GaussLegendre {
                panels,
                nodes_per_panel: n,
            } => {
                let rule = self.rule.as_ref().expect("GL grid carries its panel rule");
                let half = 0.5 * (self.x_max - self.x_min) / panels as f64;
                let mut out = vec![0.0; values.len()];
                let mut before = 0.0;
                for p in 0..panels {
                    let v = &values[p * n..(p + 1) * n];
                    for k in 0..n {
                        let inner: f64 = rule.integ[k].iter().zip(v).map(|(s, x)| s * x).sum();
                        out[p * n + k] = before + half * inner;
                    }
                    let total: f64 = rule.weights.iter().zip(v).map(|(w, x)| w * x).sum();
                    before += half * total;
                }
                Ok(out)
            }
        }
    }

    /// Suffix integrals `∫_{x_k}^{x_max} v dy`, accumulated from the right end.
    pub fn cumulative_from_right(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        match self.scheme {
            Scheme::Trapezoid => {
                let h = self.nodes[1] - self.nodes[0];
                let len = values.len();
                let mut out = vec![0.0; len];
                let mut acc = 0.0;
                for k in (0..len - 1).rev() {
                    acc += 0.5 * h * (values[k] + values[k + 1]);
                    out[k] = acc;
                }
                Ok(out)
            }
            Scheme::GaussLegendre {
                panels,
                nodes_per_panel: n,
            } => {
                let rule = self.rule.as_ref().expect("GL grid carries its panel rule");
                let half = 0.5 * (self.x_max - self.x_min) / panels as f64;
                let mut out = vec![0.0; values.len()];
                let mut after = 0.0;
                for p in (0..panels).rev() {
                    let v = &values[p * n..(p + 1) * n];
                    for k in 0..n {
                        let inner: f64 = rule.integ[k]
                            .iter()
                            .zip(&rule.weights)
                            .zip(v)
                            .map(|((s, w), x)| (w - s) * x)
                            .sum();
                        out[p * n + k] = after + half * inner;
                    }
                    let total: f64 = rule.weights.iter().zip(v).map(|(w, x)| w * x).sum();
                    after += half * total;
                }
                Ok(out)
            }
        }
    }

    /// Derivative of the nodal interpolant at every node: spectral within each
    /// Gauss–Legendre panel, second-order differences on trapezoid grids.
    pub fn differentiate(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        match self.scheme {
            Scheme::Trapezoid => {
                let h = self.nodes[1] - self.nodes[0];
                let len = values.len();
                let mut out = vec![0.0; len];
                if len == 2 {
                    let d = (values[1] - values[0]) / h;
                    return Ok(vec![d, d]);
                }
                out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h);
                for k in 1..len - 1 {
                    out[k] = (values[k + 1] - values[k - 1]) / (2.0 * h);
                }
                out[len - 1] =
                    (3.0 * values[len - 1] - 4.0 * values[len - 2] + values[len - 3]) / (2.0 * h);
                Ok(out)
            }
            Scheme::GaussLegendre {
                panels,
                nodes_per_panel: n,
            } => {
                let rule = self.rule.as_ref().expect("GL grid carries its panel rule");
                let scale = 2.0 * panels as f64 / (self.x_max - self.x_min);
                let mut out = vec![0.0; values.len()];
                for p in 0..panels {
                    let v = &values[p * n..(p + 1) * n];
                    for i in 0..n {
                        let d: f64 = rule.diff[i].iter().zip(v).map(|(a, b)| a * b).sum();
                        out[p * n + i] = scale * d;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Evaluate the nodal interpolant at `x` inside `[x_min, x_max]`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> Result<f64> {
        self.check_len(values)?;
        if !(self.x_min..=self.x_max).contains(&x) {
            return Err(Error::Usage(format!(
                "interpolation point {x} outside [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        match self.scheme {
            Scheme::Trapezoid => Ok(linear_interpolate(&self.nodes, values, x)),
            Scheme::GaussLegendre {
                panels,
                nodes_per_panel: n,
            } => {
                let rule = self.rule.as_ref().expect("GL grid carries its panel rule");
                let width = (self.x_max - self.x_min) / panels as f64;
                let p = (((x - self.x_min) / width) as usize).min(panels - 1);
                let a = self.x_min + p as f64 * width;
                let s = 2.0 * (x - a) / width - 1.0;
                let basis = rule.lagrange_basis(s);
                Ok(basis
                    .iter()
                    .zip(&values[p * n..(p + 1) * n])
                    .map(|(l, v)| l * v)
                    .sum())
            }
        }
    }
}

fn check_bounds(x_min: f64, x_max: f64) -> Result<()> {
    if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
        return Err(Error::Usage(format!(
            "grid bounds must be finite with x_min < x_max (got [{x_min}, {x_max}])"
        )));
    }
    Ok(())
}

/// Piecewise-linear interpolation on increasing `xs`; extrapolates linearly
/// from the end segments.
pub fn linear_interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 2 && ys.len() == n);
    let idx = match xs.partition_point(|&node| node <= x) {
        0 => 0,
        k if k >= n => n - 2,
        k => k - 1,
    };
    let (x0, x1) = (xs[idx], xs[idx + 1]);
    let (y0, y1) = (ys[idx], ys[idx + 1]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// `Σ wᵢ vᵢ` over the grid.
pub fn integrate(grid: &QuadratureGrid, values: &[f64]) -> Result<f64> {
    grid.integrate(values)
}

/// Prefix integrals `F(x_k) = ∫_{x_min}^{x_k} v dy` aligned with the grid nodes.
///
/// On trapezoid grids the first node is `x_min` (so `F = 0` there) and the last
/// is `x_max` (so `F` equals [`integrate`]). Gauss–Legendre nodes are interior;
/// there the prefix integrals come from the spectral interpolant on each panel.
pub fn cumulative_integral(grid: &QuadratureGrid, values: &[f64]) -> Result<Vec<f64>> {
    grid.cumulative(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gl() -> QuadratureGrid {
        QuadratureGrid::gauss_legendre(-1.0, 1.0, 4, 16).unwrap()
    }

    #[test]
    fn reference_rule_matches_known_three_point_rule() {
        let (x, w) = gauss_legendre_reference(3);
        let r = (0.6f64).sqrt();
        assert!((x[0] + r).abs() < 1e-15 && x[1].abs() < 1e-15 && (x[2] - r).abs() < 1e-15);
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-15 && (w[1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn integrate_examples() {
        let unit = QuadratureGrid::gauss_legendre(0.0, 1.0, 64, 16).unwrap();
        let ones = vec![1.0; unit.len()];
        assert!((integrate(&unit, &ones).unwrap() - 1.0).abs() < 1e-14);

        let g = gl();
        let sq: Vec<f64> = g.nodes().iter().map(|x| x * x).collect();
        assert!((integrate(&g, &sq).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let wide = QuadratureGrid::gauss_legendre(-12.0, 12.0, 64, 16).unwrap();
        let pdf: Vec<f64> = wide
            .nodes()
            .iter()
            .map(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
            .collect();
        assert!((integrate(&wide, &pdf).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polynomial_exactness_up_to_scheme_degree() {
        let g = QuadratureGrid::gauss_legendre(-1.0, 2.0, 3, 16).unwrap();
        for deg in 0..=g.exactness_degree() {
            let vals: Vec<f64> = g.nodes().iter().map(|x| x.powi(deg as i32)).collect();
            let d = deg as f64 + 1.0;
            let exact = (2f64.powf(d) - (-1f64).powf(d)) / d;
            let got = g.integrate(&vals).unwrap();
            assert!(
                (got - exact).abs() <= 1e-12 * exact.abs().max(1.0),
                "degree {deg}: {got} vs {exact}"
            );
        }
        let t = QuadratureGrid::trapezoid(0.0, 3.0, 7).unwrap();
        let lin: Vec<f64> = t.nodes().iter().map(|x| 2.0 * x - 1.0).collect();
        assert!((t.integrate(&lin).unwrap() - 6.0).abs() < 1e-12);
        let wsum: f64 = t.weights().iter().sum();
        assert!((wsum - 3.0).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let g = gl();
        assert!(matches!(g.integrate(&[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(g.cumulative(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn cumulative_examples() {
        // Odd node count puts a node at each panel midpoint.
        let g = QuadratureGrid::gauss_legendre(0.0, 1.0, 1, 17).unwrap();
        let mid = g
            .nodes()
            .iter()
            .position(|&x| (x - 0.5).abs() < 1e-15)
            .unwrap();
        let ones = vec![1.0; g.len()];
        let f = cumulative_integral(&g, &ones).unwrap();
        assert!((f[mid] - 0.5).abs() < 1e-14);

        let t = QuadratureGrid::trapezoid(0.0, 1.0, 11).unwrap();
        let f = cumulative_integral(&t, &[1.0; 11]).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[5] - 0.5).abs() < 1e-15);
        let lin: Vec<f64> = t.nodes().iter().map(|y| 2.0 * y).collect();
        let f = cumulative_integral(&t, &lin).unwrap();
        assert!((f[10] - 1.0).abs() < 1e-14);

        // 63 panels of 17 nodes: the middle node of the central panel is x = 0.
        let wide = QuadratureGrid::gauss_legendre(-12.0, 12.0, 63, 17).unwrap();
        let pdf: Vec<f64> = wide
            .nodes()
            .iter()
            .map(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
            .collect();
        let f = cumulative_integral(&wide, &pdf).unwrap();
        let zero = wide.nodes().iter().position(|x| x.abs() < 1e-14).unwrap();
        assert!((f[zero] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn cumulative_matches_antiderivative_inside_panels() {
        let g = QuadratureGrid::gauss_legendre(-2.0, 3.0, 5, 16).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| x.cos()).collect();
        let f = g.cumulative(&v).unwrap();
        let r = g.cumulative_from_right(&v).unwrap();
        let total = g.integrate(&v).unwrap();
        for (k, x) in g.nodes().iter().enumerate() {
            let exact = x.sin() - (-2f64).sin();
            assert!((f[k] - exact).abs() < 1e-13, "{k}");
            assert!((f[k] + r[k] - total).abs() < 1e-13);
        }
    }

    #[test]
    fn differentiate_and_interpolate_are_spectral() {
        let g = QuadratureGrid::gauss_legendre(-3.0, 3.0, 12, 16).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|x| (-x * x).exp()).collect();
        let d = g.differentiate(&v).unwrap();
        for (x, dv) in g.nodes().iter().zip(&d) {
            assert!((dv + 2.0 * x * (-x * x).exp()).abs() < 1e-10);
        }
        for x in [-3.0, -1.234, 0.0, 0.5, 2.999, 3.0] {
            let got = g.interpolate(&v, x).unwrap();
            let want: f64 = (-x * x).exp();
            assert!((got - want).abs() < 1e-12, "{x}: {got} vs {want}");
        }
        assert!(g.interpolate(&v, 3.5).is_err());
    }

    #[test]
    fn linear_interpolation_extrapolates_end_segments() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.0, 2.0, 3.0];
        assert_eq!(linear_interpolate(&xs, &ys, 0.5), 1.0);
        assert_eq!(linear_interpolate(&xs, &ys, -1.0), -2.0);
        assert_eq!(linear_interpolate(&xs, &ys, 3.0), 4.0);
        assert_eq!(linear_interpolate(&xs, &ys, 2.0), 3.0);
    }
}
