//! Natural cubic spline interpolation on uniform grids.

use crate::error::{Error, Result};

/// Second derivatives of the natural cubic spline through `y` (unit knot
/// spacing), by the Thomas algorithm.
pub fn natural_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // interior rows: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2y[i] + y[i-1])
    let inner = n - 2;
    let mut c = vec![0.0; inner];
    let mut d = vec![0.0; inner];
    for i in 0..inner {
        let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]);
        let (c_prev, d_prev) = if i == 0 { (0.0, 0.0) } else { (c[i - 1], d[i - 1]) };
        let denom = 4.0 - c_prev;
        c[i] = 1.0 / denom;
        d[i] = (rhs - d_prev) / denom;
    }
    for i in (0..inner).rev() {
        let next = if i + 1 < inner { m[i + 2] } else { 0.0 };
        m[i + 1] = d[i] - c[i] * next;
    }
    m
}

/// Evaluates the spline at fractional knot coordinate `x ∈ [0, n−1]`.
pub fn eval(y: &[f64], m: &[f64], x: f64) -> f64 {
    let n = y.len();
    if n == 1 {
        return y[0];
    }
    let i = (x.floor().max(0.0) as usize).min(n - 2);
    let t = x - i as f64;
    let s = 1.0 - t;
    s * y[i] + t * y[i + 1] + ((s * s * s - s) * m[i] + (t * t * t - t) * m[i + 1]) / 6.0
}

/// Source coordinate of output sample `j` when `n_src` knots are stretched
/// over `n_out` samples with both end points aligned.
pub fn source_coordinate(j: usize, n_src: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_src - 1) as f64 / 2.0
    } else {
        j as f64 * (n_src - 1) as f64 / (n_out - 1) as f64
    }
}

/// Dense `[n_out, n_src]` matrix of the linear map knots → resampled values.
pub fn resample_matrix(n_src: usize, n_out: usize) -> Result<Vec<f64>> {
    if n_src < 2 {
        return Err(Error::Domain(format!("spline needs ≥ 2 knots, got {n_src}")));
    }
    if n_out < 1 {
        return Err(Error::Domain("resize target must be ≥ 1".into()));
    }
    let mut w = vec![0.0; n_out * n_src];
    let mut unit = vec![0.0; n_src];
    for k in 0..n_src {
        unit[k] = 1.0;
        let m = natural_second_derivatives(&unit);
        for j in 0..n_out {
            w[j * n_src + k] = eval(&unit, &m, source_coordinate(j, n_src, n_out));
        }
        unit[k] = 0.0;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots() {
        let y = [0.3, -1.0, 2.0, 0.5, 0.25];
        let m = natural_second_derivatives(&y);
        for (i, &v) in y.iter().enumerate() {
            assert!((eval(&y, &m, i as f64) - v).abs() < 1e-12);
        }
        assert_eq!(m[0], 0.0);
        assert_eq!(m[4], 0.0);
    }

    #[test]
    fn reproduces_lines() {
        let y: Vec<f64> = (0..6).map(|i| 2.0 * i as f64 - 1.0).collect();
        let m = natural_second_derivatives(&y);
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        assert!((eval(&y, &m, 2.5) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rows_of_the_resample_matrix_sum_to_one() {
        let w = resample_matrix(5, 9).unwrap();
        for row in w.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
