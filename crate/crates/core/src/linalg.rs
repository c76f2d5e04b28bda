//! Small dense linear-algebra helpers: matrix exponential by scaling and
//! squaring, and the augmented-matrix integrals built on it.

use nalgebra::{DMatrix, DVector};

fn norm1(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential `e^A` by scaling and squaring with a Taylor series.
///
/// The matrix is scaled so that its 1-norm is at most 1/2, the series is summed
/// until the next term no longer changes the result in double precision, and
/// the result is squared back up.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = norm1(a);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        result += &term;
        if norm1(&term) <= f64::EPSILON * norm1(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `∫₀ᵗ e^{As} v ds` via the exponential of the augmented matrix `[[A, v], [0, 0]]`.
pub fn integrated_exp_times(a: &DMatrix<f64>, v: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(v * t));
    let e = expm(&aug);
    e.view((0, n), (n, 1)).column(0).into_owned()
}

/// Process-noise Gramian `∫₀ᵗ e^{As} Q e^{Aᵀs} ds` by Van Loan's construction.
pub fn noise_gramian(a: &DMatrix<f64>, q: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::<f64>::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(-a * t));
    aug.view_mut((0, n), (n, n)).copy_from(&(q * t));
    aug.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * t));
    let e = expm(&aug);
    let phi_t = e.view((n, n), (n, n)).into_owned();
    let g = e.view((0, n), (n, n)).into_owned();
    let gram = phi_t.transpose() * g;
    (&gram + gram.transpose()) * 0.5
}

/// 2-norm condition number from singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_rotation_generator() {
        let l = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        for &t in &[0.1, 1.0, 3.0, 10.0] {
            let b = expm(&(-&l * t));
            let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
            assert_relative_eq!(b, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn expm_diagonal_matches_scalar_exp() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5, 7.0]));
        let e = expm(&a);
        for (i, v) in [-3.0f64, 0.5, 7.0].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], v.exp(), max_relative = 1e-13);
        }
    }

    #[test]
    fn integral_of_scalar_exponential() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let v = DVector::from_element(1, 3.0);
        let got = integrated_exp_times(&a, &v, 0.7);
        let want = 3.0 * (1.0 - (-1.4f64).exp()) / 2.0;
        assert_relative_eq!(got[0], want, max_relative = 1e-13);
    }

    #[test]
    fn gramian_of_ou() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let g = noise_gramian(&a, &q, 1.0);
        assert_relative_eq!(g[(0, 0)], (1.0 - (-2.0f64).exp()) / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn singular_matrix_has_infinite_condition() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(condition_number(&a) > 1e12);
        assert_relative_eq!(condition_number(&DMatrix::identity(3, 3)), 1.0);
    }
}
