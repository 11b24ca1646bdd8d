//! Small dense matrix helpers. Matrices are `nalgebra::DMatrix<f64>`; the
//! norm used for all Lipschitz and Gronwall purposes is the max-entry norm.

use nalgebra::DMatrix;

/// `max_{ij} |a_ij|`.
pub fn max_entry_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, a| acc.max(a.abs()))
}

/// Determinant through partial-pivoting LU.
pub fn det_lu(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant()
}

/// Determinant through the Leibniz permutation expansion. Cost is `O(n · n!)`,
/// intended only as an independent cross-check for small matrices.
pub fn det_leibniz(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "determinant of a non-square matrix");
    if n == 0 {
        return 1.0;
    }
    // Heap's algorithm; each swap flips the permutation sign.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut counters = vec![0usize; n];
    let mut sign = 1.0;
    let term = |perm: &[usize]| (0..n).map(|i| m[(i, perm[i])]).product::<f64>();
    let mut total = term(&perm);
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            let j = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(j, i);
            sign = -sign;
            total += sign * term(&perm);
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    total
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leibniz_matches_known_values() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.9]);
        assert!((det_leibniz(&a) - 0.81).abs() < 1e-15);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 1.0, 1.0, 3.0, 2.0, 1.0, 1.0, 1.0]);
        // 2(3-2) - 0 + 1(1-3) = 0
        assert!(det_leibniz(&b).abs() < 1e-15);
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(det_leibniz(&p), -1.0);
    }

    #[test]
    fn lu_agrees_with_leibniz() {
        let m = DMatrix::from_fn(4, 4, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 1.5 + (i == j) as u8 as f64
        });
        assert!((det_lu(&m) - det_leibniz(&m)).abs() < 1e-12);
    }

    #[test]
    fn norms() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, 2.0, 0.5]);
        assert_eq!(max_entry_norm(&m), 3.0);
        assert_eq!(factorial(4), 24.0);
        assert_eq!(factorial(0), 1.0);
    }
}
