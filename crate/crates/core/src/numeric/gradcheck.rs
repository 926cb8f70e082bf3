//! Central finite differences, used as the independent oracle for every
//! differentiable op and composite loss.

use super::array::Array;
use crate::error::{Error, Result};

/// Default step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Default tolerance on [`relative_error`].
pub const FD_TOLERANCE: f64 = 1e-4;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Array, h: f64) -> Result<Array>
where
    F: FnMut(&Array) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    let g = finite_diff_coords(f, x, h, &coords)?;
    Ok(Array::from_parts(x.shape().to_vec(), g))
}

/// Central differences for a subset of coordinates only.
pub fn finite_diff_coords<F>(mut f: F, x: &Array, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Array) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest absolute disagreement, relative to the largest gradient magnitude
/// of either vector. Two all-zero vectors compare as 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Array::row(&[0.3, -1.2, 4.0]);
        let g = finite_diff_grad(|a| Ok(a.data().iter().sum()), &x, FD_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squared_norm() {
        let x = Array::row(&[1.0, -2.0]);
        let g =
            finite_diff_grad(|a| Ok(a.data().iter().map(|v| v * v).sum()), &x, FD_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Array::row(&[1.0]);
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, FD_STEP).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Array::row(&[1.0]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
