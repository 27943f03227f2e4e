use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    #[default]
    SoftmaxCrossEntropy,
}

/// Regression or classification target for a batch of predictions.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a, T> {
    /// Class index per row; expanded to one-hot where a dense target is needed.
    Labels(&'a [usize]),
    /// Dense target with the prediction's shape (one-hot rows for cross-entropy).
    Dense(&'a Mat<T>),
}

impl<T: Scalar> Target<'_, T> {
    fn value(&self, i: usize, j: usize) -> T {
        match self {
            Target::Labels(l) => {
                if l[i] == j {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Target::Dense(m) => m.get(i, j),
        }
    }

    fn check(&self, pred: &Mat<T>) -> Result<()> {
        match self {
            Target::Labels(l) => {
                if l.len() != pred.rows() {
                    return Err(Error::Dimension {
                        op: "loss",
                        lhs: pred.shape(),
                        rhs: (l.len(), 1),
                    });
                }
                if let Some(&bad) = l.iter().find(|&&c| c >= pred.cols()) {
                    return Err(Error::Index {
                        index: bad,
                        len: pred.cols(),
                    });
                }
            }
            Target::Dense(m) => {
                if m.shape() != pred.shape() {
                    return Err(Error::Dimension {
                        op: "loss",
                        lhs: pred.shape(),
                        rhs: m.shape(),
                    });
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite("loss target"));
                }
            }
        }
        if !pred.is_finite() {
            return Err(Error::NonFinite("loss prediction"));
        }
        if pred.rows() == 0 {
            return Err(Error::contract("loss over an empty batch"));
        }
        Ok(())
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Mean loss over the batch.
///
/// `Mse` averages over every entry; cross-entropy averages the per-row
/// `logsumexp(row) - <target, row>` with max-subtraction for stability.
pub fn loss<T: Scalar>(kind: LossKind, pred: &Mat<T>, target: Target<'_, T>) -> Result<T> {
    target.check(pred)?;
    let (n, k) = pred.shape();
    let v = match kind {
        LossKind::Mse => {
            let mut s = T::zero();
            for i in 0..n {
                for j in 0..k {
                    let d = pred.get(i, j) - target.value(i, j);
                    s += d * d;
                }
            }
            s / T::of((n * k) as f64)
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut s = T::zero();
            for i in 0..n {
                let row = pred.row(i);
                let lse = log_sum_exp(row);
                let mut mass = T::zero();
                let mut dot = T::zero();
                for (j, &z) in row.iter().enumerate() {
                    let t = target.value(i, j);
                    mass += t;
                    dot += t * z;
                }
                s += mass * lse - dot;
            }
            s / T::of(n as f64)
        }
    };
    Ok(v)
}

/// Per-row losses, so that `loss` equals their mean.
pub fn row_losses<T: Scalar>(kind: LossKind, pred: &Mat<T>, target: Target<'_, T>) -> Result<Vec<T>> {
    target.check(pred)?;
    let k = pred.cols();
    Ok((0..pred.rows())
        .map(|i| {
            let row = pred.row(i);
            match kind {
                LossKind::Mse => {
                    row.iter()
                        .enumerate()
                        .map(|(j, &z)| {
                            let d = z - target.value(i, j);
                            d * d
                        })
                        .sum::<T>()
                        / T::of(k as f64)
                }
                LossKind::SoftmaxCrossEntropy => {
                    let lse = log_sum_exp(row);
                    row.iter()
                        .enumerate()
                        .map(|(j, &z)| target.value(i, j) * (lse - z))
                        .sum()
                }
            }
        })
        .collect())
}

/// Gradient of [`loss`] with respect to `pred`.
pub fn loss_grad<T: Scalar>(kind: LossKind, pred: &Mat<T>, target: Target<'_, T>) -> Result<Mat<T>> {
    target.check(pred)?;
    let (n, k) = pred.shape();
    let g = match kind {
        LossKind::Mse => {
            let c = T::of(2.0) / T::of((n * k) as f64);
            Mat::from_fn(n, k, |i, j| c * (pred.get(i, j) - target.value(i, j)))
        }
        LossKind::SoftmaxCrossEntropy => {
            let inv_n = T::one() / T::of(n as f64);
            let mut out = Mat::zeros(n, k);
            for i in 0..n {
                let row = pred.row(i);
                let lse = log_sum_exp(row);
                let mass: T = (0..k).map(|j| target.value(i, j)).sum();
                for (j, &z) in row.iter().enumerate() {
                    out.set(i, j, inv_n * (mass * (z - lse).exp() - target.value(i, j)));
                }
            }
            out
        }
    };
    Ok(g)
}
