//! Ordinary least squares by Householder QR.

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of R below which the design is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-9;

/// Solution of a least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    pub residual_sum_squares: f64,
}

/// Minimises `||y - X b||²` for a row-major design `rows` (n × p, n ≥ p).
pub fn solve(rows: &[Vec<f64>], y: &[f64]) -> Result<LeastSquares> {
    let n = rows.len();
    if n != y.len() {
        return Err(Error::invalid("design and response lengths differ"));
    }
    let p = rows.first().map_or(0, Vec::len);
    if p == 0 || n < p {
        return Err(Error::insufficient(format!("{n} observations for {p} coefficients")));
    }
    // Column-major working copy.
    let mut a: Vec<Vec<f64>> = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let mut b = y.to_vec();
    let scale = a
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateFit("design matrix is zero or non-finite".into()));
    }

    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= RANK_TOL * scale {
            return Err(Error::DegenerateFit(format!("design column {k} is linearly dependent")));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k below the diagonal.
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k + 1) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(x, y)| x * y).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, x) in col[k..].iter_mut().zip(&v) {
                    *c -= f * x;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, x) in b[k..].iter_mut().zip(&v) {
                *c -= f * x;
            }
        }
        a[k][k] = alpha;
        for c in a[k][k + 1..].iter_mut() {
            *c = 0.0;
        }
    }

    let mut coef = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s -= a[j][k] * coef[j];
        }
        coef[k] = s / a[k][k];
    }
    let residual_sum_squares = b[p..].iter().map(|v| v * v).sum();
    Ok(LeastSquares {
        coefficients: coef,
        residual_sum_squares,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_line() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 * i as f64 + 1.0).collect();
        let fit = solve(&rows, &y).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.residual_sum_squares, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let y = vec![1.0; 5];
        assert!(matches!(solve(&rows, &y), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn residual_matches_direct_computation() {
        let rows: Vec<Vec<f64>> = [[0.3, 1.0], [1.1, 1.0], [2.4, 1.0], [3.2, 1.0], [3.9, 1.0]]
            .iter()
            .map(|r| r.to_vec())
            .collect();
        let y = [1.0, 2.5, 2.9, 4.8, 5.1];
        let fit = solve(&rows, &y).unwrap();
        let rss: f64 = rows
            .iter()
            .zip(y)
            .map(|(r, yi)| (yi - r[0] * fit.coefficients[0] - fit.coefficients[1]).powi(2))
            .sum();
        assert_abs_diff_eq!(fit.residual_sum_squares, rss, epsilon = 1e-12);
    }
}
