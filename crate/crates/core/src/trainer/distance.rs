use crate::error::{Error, Result};
use crate::model::AdapterPair;
use crate::report::{fmt_f64, CsvTable};
use crate::scalar::Scalar;

/// Mean over layers of `‖vec(Aᵢ, Bᵢ) − vec(A'ᵢ, B'ᵢ)‖₂`.
pub fn adapter_distance<T: Scalar>(x: &[AdapterPair<T>], y: &[AdapterPair<T>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Architecture(format!("{} layers vs {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Architecture("no adapters to compare".into()));
    }
    let mut total = 0.0;
    for (i, (p, q)) in x.iter().zip(y).enumerate() {
        if p.a.shape() != q.a.shape() || p.b.shape() != q.b.shape() {
            return Err(Error::Architecture(format!(
                "layer {}: adapter shapes {:?}/{:?} vs {:?}/{:?}",
                i + 1,
                p.a.shape(),
                p.b.shape(),
                q.a.shape(),
                q.b.shape()
            )));
        }
        let sq: f64 = p
            .flat()
            .iter()
            .zip(q.flat())
            .map(|(&u, v)| (u.as_f64() - v.as_f64()).powi(2))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / x.len() as f64)
}

/// Pairwise distances between labelled adapter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl DistanceTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.matrix[i][j])
    }

    /// Long form, one row per unordered pair.
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["from", "to", "distance"]);
        for i in 0..self.labels.len() {
            for j in i + 1..self.labels.len() {
                t.rows
                    .push(vec![self.labels[i].clone(), self.labels[j].clone(), fmt_f64(self.matrix[i][j])]);
            }
        }
        t
    }
}

pub fn weight_distance_report<T: Scalar>(items: &[(String, &[AdapterPair<T>])]) -> Result<DistanceTable> {
    let n = items.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = adapter_distance(items[i].1, items[j].1)?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(DistanceTable {
        labels: items.iter().map(|(l, _)| l.clone()).collect(),
        matrix,
    })
}
