//! Pure matrix kernels. Every function allocates its output and leaves inputs untouched.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Mat;

fn same_shape<T: Scalar>(op: &'static str, a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Mat::from_vec_unchecked(n, m, out))
}

/// `a · bᵀ`, the layout used by row-batched linear layers (`x · Wᵀ`).
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out.push(acc);
        }
    }
    Ok(Mat::from_vec_unchecked(n, m, out))
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); n * m];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..n {
            let av = arow[i];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Mat::from_vec_unchecked(n, m, out))
}

pub fn add<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn hadamard<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Mat<T>, s: T) -> Mat<T> {
    a.map(|v| v * s)
}

/// `x·a + y·b`.
pub fn lincomb<T: Scalar>(x: T, a: &Mat<T>, y: T, b: &Mat<T>) -> Result<Mat<T>> {
    zip_with("lincomb", a, b, |u, v| x * u + y * v)
}

pub fn relu<T: Scalar>(a: &Mat<T>) -> Mat<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn tanh<T: Scalar>(a: &Mat<T>) -> Mat<T> {
    a.map(|v| v.tanh())
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Mat<T>,
    b: &Mat<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Mat<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Mat::from_vec_unchecked(a.rows(), a.cols(), data))
}

/// Pointwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Hadamard,
    Relu,
    Tanh,
}

/// Applies a pointwise operation; binary operations require `b`.
pub fn elementwise<T: Scalar>(op: Pointwise, a: &Mat<T>, b: Option<&Mat<T>>) -> Result<Mat<T>> {
    match (op, b) {
        (Pointwise::Add, Some(b)) => add(a, b),
        (Pointwise::Hadamard, Some(b)) => hadamard(a, b),
        (Pointwise::Relu, None) => Ok(relu(a)),
        (Pointwise::Tanh, None) => Ok(tanh(a)),
        (op, _) => Err(Error::contract(format!("wrong operand count for {op:?}"))),
    }
}

/// Row index of the maximum entry in each row; the first maximum wins ties.
pub fn argmax_rows<T: Scalar>(a: &Mat<T>) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_left_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 5, &mut rng);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Mat::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Mat::from_rows(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        for ((x, y), z) in nt.data().iter().zip(tn.data()).zip(want.data()) {
            assert!((x - z).abs() <= 1e-12 && (y - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = matmul(&Mat::<f64>::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(add(&Mat::<f64>::zeros(2, 2), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn pointwise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(4, 4, &mut rng);
        assert_eq!(elementwise(Pointwise::Hadamard, &m, Some(&Mat::ones(4, 4))).unwrap(), m);
        let r = elementwise(Pointwise::Relu, &Mat::<f64>::from_rows(&[&[-1.0, 2.0]]), None).unwrap();
        assert_eq!(r, Mat::from_rows(&[&[0.0, 2.0]]));
        let n = random(4, 4, &mut rng);
        let s = elementwise(Pointwise::Add, &m, Some(&n)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((s.get(i, j) - (m.get(i, j) + n.get(i, j))).abs() <= 1e-15);
            }
        }
        assert!(elementwise(Pointwise::Tanh, &m, Some(&n)).is_err());
    }

    #[test]
    fn rejects_non_finite_construction() {
        assert!(Mat::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Mat::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn f32_kernels() {
        let a = Mat::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::<f32>::from_rows(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0f32, 4.0]);
    }
}
