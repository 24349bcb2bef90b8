//! Descriptive statistics used throughout.

use nalgebra::{DMatrix, DVector};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Empirical quantile by linear interpolation between order statistics with
/// inclusive endpoints (`h = (n - 1) p`). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Sorts a copy and returns the interpolated quantile.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

/// Central moment of order `k` (population normalization).
pub fn central_moment(xs: &[f64], k: i32) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).abs().powi(k)).sum::<f64>() / xs.len() as f64
}

/// Polynomial basis of the columns of `x`: an intercept, then for degree
/// one the columns themselves, and for degree two also every square and
/// pairwise product. Degree zero is the intercept alone.
pub fn polynomial_basis(x: &DMatrix<f64>, degree: usize) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    if degree >= 1 {
        for j in 0..k {
            cols.push(x.column(j).into_owned());
        }
    }
    if degree >= 2 {
        for i in 0..k {
            for j in i..k {
                cols.push(x.column(i).component_mul(&x.column(j)));
            }
        }
    }
    DMatrix::from_columns(&cols)
}

/// Number of columns produced by [`polynomial_basis`].
pub fn basis_size(k: usize, degree: usize) -> usize {
    match degree {
        0 => 1,
        1 => 1 + k,
        _ => 1 + k + k * (k + 1) / 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&[4.0, 1.0, 3.0, 2.0], 1.0 / 3.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn variance_basic() {
        assert!((sample_variance(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(sample_variance(&[5.0]), 0.0);
    }
}
