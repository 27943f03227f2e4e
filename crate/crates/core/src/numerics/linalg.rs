//! Small dense solvers used by the alignment optimiser and the merge reports.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ops, Mat};

/// Inverse by Gauss-Jordan elimination with partial pivoting.
///
/// Fails on a non-square input or an exactly zero pivot; near-singular inputs
/// are left to [`condition_1`].
pub fn inverse<T: Scalar>(m: &Mat<T>) -> Result<Mat<T>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Dimension {
            op: "inverse",
            lhs: m.shape(),
            rhs: (n, n),
        });
    }
    let mut a = m.clone();
    let mut inv = Mat::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a.get(i, col).abs().partial_cmp(&a.get(j, col).abs()).unwrap())
            .unwrap();
        let pv = a.get(pivot, col);
        if pv == T::zero() || !pv.is_finite() {
            return Err(Error::contract("singular matrix"));
        }
        if pivot != col {
            for j in 0..n {
                let (x, y) = (a.get(col, j), a.get(pivot, j));
                a.set(col, j, y);
                a.set(pivot, j, x);
                let (x, y) = (inv.get(col, j), inv.get(pivot, j));
                inv.set(col, j, y);
                inv.set(pivot, j, x);
            }
        }
        let scale = T::one() / pv;
        for j in 0..n {
            a.set(col, j, a.get(col, j) * scale);
            inv.set(col, j, inv.get(col, j) * scale);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a.get(i, col);
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                a.set(i, j, a.get(i, j) - f * a.get(col, j));
                inv.set(i, j, inv.get(i, j) - f * inv.get(col, j));
            }
        }
    }
    Ok(inv)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm_1<T: Scalar>(m: &Mat<T>) -> T {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

/// `‖M‖₁ · ‖M⁻¹‖₁`; infinite when the inverse does not exist.
pub fn condition_1<T: Scalar>(m: &Mat<T>, inv: Option<&Mat<T>>) -> T {
    let owned;
    let inv = match inv {
        Some(i) => i,
        None => match inverse(m) {
            Ok(i) => {
                owned = i;
                &owned
            }
            Err(_) => return T::infinity(),
        },
    };
    let c = norm_1(m) * norm_1(inv);
    if c.is_finite() {
        c
    } else {
        T::infinity()
    }
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Iterates until the relative change of the estimate drops below `tol`.
pub fn spectral_norm<T: Scalar>(m: &Mat<T>, tol: T) -> T {
    let n = m.cols();
    if n == 0 || m.rows() == 0 || m.max_abs() == T::zero() {
        return T::zero();
    }
    let mtm = ops::matmul_tn(m, m).expect("square Gram matrix");
    // A deterministic start that is not orthogonal to the dominant vector for
    // generic inputs.
    let mut v = Mat::from_fn(n, 1, |i, _| T::one() + T::of(i as f64) * T::of(0.1));
    let mut sigma2 = T::zero();
    for _ in 0..10_000 {
        let w = ops::matmul(&mtm, &v).expect("shape");
        let norm = w.frobenius();
        if norm == T::zero() {
            return T::zero();
        }
        let next = norm / v.frobenius();
        v = ops::scale(&w, T::one() / norm);
        if (next - sigma2).abs() <= tol * next {
            sigma2 = next;
            break;
        }
        sigma2 = next;
    }
    sigma2.sqrt()
}
