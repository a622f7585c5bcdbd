//! Natural cubic spline interpolation.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// Interpolates strictly increasing knots `x`. With two knots the spline
    /// is a line; beyond the end knots it continues linearly.
    pub fn natural(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::Signal(format!(
                "spline needs >= 2 paired knots, got {n} x and {} y",
                y.len()
            )));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Signal("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    fn slope_at_end(&self, last: bool) -> f64 {
        let n = self.x.len();
        let (i, j) = if last { (n - 2, n - 1) } else { (0, 1) };
        let h = self.x[j] - self.x[i];
        let d = (self.y[j] - self.y[i]) / h;
        if last {
            d + h * (2.0 * self.m[j] + self.m[i]) / 6.0
        } else {
            d - h * (2.0 * self.m[i] + self.m[j]) / 6.0
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0] + (t - self.x[0]) * self.slope_at_end(false);
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1] + (t - self.x[n - 1]) * self.slope_at_end(true);
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubic_free_data() {
        // a line is reproduced exactly, including extrapolation
        let s = CubicSpline::natural(&[0.0, 1.0, 3.0, 4.0], &[1.0, 3.0, 7.0, 9.0]).unwrap();
        for t in [-1.0, 0.5, 2.0, 3.7, 6.0] {
            assert!((s.eval(t) - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_reference_values() {
        // natural spline through (0,0),(1,1),(2,0): m1 = -3, s(0.5) = 0.6875
        let s = CubicSpline::natural(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((s.eval(0.5) - 0.6875).abs() < 1e-12);
        assert!((s.eval(1.0) - 1.0).abs() < 1e-12);
    }
}
