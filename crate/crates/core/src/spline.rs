//! One-dimensional natural cubic splines with analytic derivatives.
//!
//! The hedge-ratio formulas consume first and second moneyness derivatives of
//! interpolated price surfaces, so the interpolant must expose `s'` and `s''`
//! in closed form rather than through finite differences.

use crate::error::{Error, Result};

/// Natural cubic spline through `(x_i, y_i)` knots.
///
/// With two knots the spline degenerates to the straight line through them.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends (natural boundary).
    m2: Vec<f64>,
}

impl CubicSpline {
    /// Fit a natural cubic spline. Knots must be strictly increasing.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Dimension {
                context: "spline knots".into(),
                expected: xs.len(),
                got: ys.len(),
            });
        }
        if xs.len() < 2 {
            return Err(Error::InsufficientData(
                "spline needs at least 2 knots".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "spline knots must be strictly increasing".into(),
            ));
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("spline knots must be finite".into()));
        }

        let n = xs.len();
        let mut m2 = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives, solved by
            // the Thomas algorithm. Natural boundary pins m2[0] = m2[n-1] = 0.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            let mut sup = vec![0.0; k];
            for i in 0..k {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0;
            }
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m2[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k.saturating_sub(1)).rev() {
                m2[i + 1] = (rhs[i] - sup[i] * m2[i + 2]) / diag[i];
            }
        }
        Ok(Self { xs, ys, m2 })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluate `(s, s', s'')` at `x`, which must lie within the knot range.
    pub fn eval(&self, x: f64) -> Result<(f64, f64, f64)> {
        if !(self.x_min()..=self.x_max()).contains(&x) {
            return Err(Error::OutOfRange {
                context: "spline evaluation".into(),
                tau: f64::NAN,
                m: x,
            });
        }
        // Rightmost interval whose left knot is <= x.
        let i = match self.xs.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
            Ok(j) => j.min(self.xs.len() - 2),
            Err(j) => j - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.m2[i], self.m2[i + 1]);
        let value = a * y0
            + b * y1
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let deriv1 = (y1 - y0) / h + h / 6.0 * (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1);
        let deriv2 = a * m0 + b * m1;
        Ok((value, deriv1, deriv2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_knots_exactly() {
        let xs: Vec<f64> = (0..9).map(|i| -0.4 + 0.1 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (1.3 * x).sin() + 0.2 * x * x).collect();
        let s = CubicSpline::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (v, _, _) = s.eval(*x).unwrap();
            assert!((v - y).abs() < 1e-12, "knot residual {}", (v - y).abs());
        }
    }

    #[test]
    fn derivative_matches_central_difference_of_itself() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 * 0.05).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (-3.0 * x).exp()).collect();
        let s = CubicSpline::new(xs, ys).unwrap();
        let h = 1e-6;
        for k in 1..40 {
            let x = 0.01 + 0.012 * k as f64;
            let (_, d1, d2) = s.eval(x).unwrap();
            let (vp, dp, _) = s.eval(x + h).unwrap();
            let (vm, dm, _) = s.eval(x - h).unwrap();
            let fd1 = (vp - vm) / (2.0 * h);
            let fd2 = (dp - dm) / (2.0 * h);
            assert!((d1 - fd1).abs() <= 1e-4 * d1.abs().max(1.0), "d1={d1} fd={fd1}");
            assert!((d2 - fd2).abs() <= 1e-4 * d2.abs().max(1.0), "d2={d2} fd={fd2}");
        }
    }

    #[test]
    fn two_knots_is_linear() {
        let s = CubicSpline::new(vec![0.0, 1.0], vec![2.0, 4.0]).unwrap();
        let (v, d1, d2) = s.eval(0.25).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        assert!((d1 - 2.0).abs() < 1e-15);
        assert_eq!(d2, 0.0);
    }

    #[test]
    fn rejects_out_of_range_and_bad_knots() {
        let s = CubicSpline::new(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(s.eval(1.0 + 1e-12).is_err());
        assert!(s.eval(-1e-12).is_err());
        assert!(CubicSpline::new(vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]).is_err());
        assert!(CubicSpline::new(vec![0.0], vec![0.0]).is_err());
    }
}
