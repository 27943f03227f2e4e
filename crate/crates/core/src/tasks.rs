//! Seeded synthetic tasks and CSV datasets.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ops, Mat};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
    Full,
}

/// Inputs (`N×d`) with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Mat<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Mat<T>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::config("dataset must have at least one row"));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Dimension {
                op: "Dataset::new",
                lhs: inputs.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Index { index: bad, len: classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// SHA-256 over shape, entries (as little-endian `f64`) and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.inputs.rows() as u64).to_le_bytes());
        h.update((self.inputs.cols() as u64).to_le_bytes());
        for v in self.inputs.data() {
            h.update(v.as_f64().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of the teacher-labelled synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTask {
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub teacher_depth: usize,
}

impl TeacherTask {
    /// Pinned reference task used by the directional experiments.
    pub const REFERENCE: TeacherTask = TeacherTask {
        seed: 7,
        n: 2000,
        dim: 16,
        classes: 4,
        teacher_depth: 2,
    };

    pub fn generate<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        gen_teacher_task(self.seed, self.n, self.dim, self.classes, self.teacher_depth)
    }
}

const CALIBRATION_ROWS: usize = 4096;
const REJECTION_BUDGET: usize = 200;

fn normal_mat(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

struct Teacher {
    hidden: Vec<Mat<f64>>,
    out: Mat<f64>,
    bias: Vec<f64>,
}

impl Teacher {
    fn logits(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut h = x.clone();
        for w in &self.hidden {
            h = ops::tanh(&ops::matmul_nt(&h, w).expect("teacher shapes"));
        }
        let mut o = ops::matmul_nt(&h, &self.out).expect("teacher shapes");
        for i in 0..o.rows() {
            for (j, b) in self.bias.iter().enumerate() {
                o.set(i, j, o.get(i, j) + b);
            }
        }
        o
    }
}

/// Standard-normal inputs labelled by the argmax of a frozen random teacher.
///
/// `teacher_depth = 1` is a linear teacher; deeper teachers insert tanh layers
/// of width `dim`. Classes are filled to equal quotas by rejection, then each
/// class is split 80/20 in arrival order, so both splits are stratified.
/// Splits `n_train` over classes in proportion to `quotas` (largest remainder,
/// ties to the lower class index).
fn train_quotas(quotas: &[usize], n_train: usize) -> Vec<usize> {
    let n: usize = quotas.iter().sum();
    let mut out: Vec<usize> = quotas.iter().map(|&q| q * n_train / n).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(quotas[c] * n_train % n));
    let short = n_train - out.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        out[c] += 1;
    }
    out
}

pub fn gen_teacher_task<T: Scalar>(
    seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
    teacher_depth: usize,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if n < 10 * classes {
        return Err(Error::config(format!("n = {n} is below 10 x {classes} classes")));
    }
    if dim == 0 || teacher_depth == 0 {
        return Err(Error::config("dim and teacher_depth must be positive"));
    }

    let mut trng = rng::stream(seed, 0, Purpose::Init);
    let hidden: Vec<Mat<f64>> = (1..teacher_depth)
        .map(|_| normal_mat(dim, dim, 2.0 / (dim as f64).sqrt(), &mut trng))
        .collect();
    let out = normal_mat(classes, dim, 1.0 / (dim as f64).sqrt(), &mut trng);
    let mut teacher = Teacher {
        hidden,
        out,
        bias: vec![0.0; classes],
    };
    // Centre the teacher's logits so no class is vanishingly rare.
    let calib = normal_mat(CALIBRATION_ROWS, dim, 1.0, &mut trng);
    let logits = teacher.logits(&calib);
    teacher.bias = (0..classes)
        .map(|j| -(0..CALIBRATION_ROWS).map(|i| logits.get(i, j)).sum::<f64>() / CALIBRATION_ROWS as f64)
        .collect();

    let quotas: Vec<usize> = (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect();
    let train_quotas = train_quotas(&quotas, (4 * n + 2) / 5);
    let mut filled = vec![0usize; classes];
    let mut rows: Vec<(Vec<f64>, usize, bool)> = Vec::with_capacity(n);
    let mut drng = rng::stream(seed, 1, Purpose::Sampling);
    let chunk = 256;
    let mut drawn = 0usize;
    while rows.len() < n {
        if drawn >= REJECTION_BUDGET * n {
            return Err(Error::config(format!(
                "could not fill class quotas {quotas:?} (got {filled:?}); teacher too unbalanced"
            )));
        }
        let x = normal_mat(chunk, dim, 1.0, &mut drng);
        drawn += chunk;
        let labels = ops::argmax_rows(&teacher.logits(&x));
        for (i, &c) in labels.iter().enumerate() {
            if filled[c] < quotas[c] {
                rows.push((x.row(i).to_vec(), c, filled[c] < train_quotas[c]));
                filled[c] += 1;
                if rows.len() == n {
                    break;
                }
            }
        }
    }

    let build = |train: bool, split: Split| -> Result<Dataset<T>> {
        let picked: Vec<&(Vec<f64>, usize, bool)> = rows.iter().filter(|r| r.2 == train).collect();
        let data = picked.iter().flat_map(|r| r.0.iter().map(|&v| T::of(v))).collect();
        let inputs = Mat::new(picked.len(), dim, data)?;
        Dataset::new(inputs, picked.iter().map(|r| r.1).collect(), classes, split)
    };
    Ok((build(true, Split::Train)?, build(false, Split::Eval)?))
}

/// Expected layout of a CSV dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Required feature count; inferred from the header when `None`.
    pub features: Option<usize>,
    /// Declared class count; labels at or above it are rejected. Inferred as
    /// `max label + 1` when `None`.
    pub classes: Option<usize>,
}

/// Reads a header-first CSV whose final column is `label`.
pub fn load_csv<T: Scalar>(path: &Path, schema: CsvSchema, split: Split) -> Result<Dataset<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    }
    if header.iter().last() != Some("label") {
        return Err(Error::Parse {
            line: 1,
            msg: "final column must be named `label`".into(),
        });
    }
    let features = header.len() - 1;
    if let Some(want) = schema.features {
        if want != features {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected {want} feature columns, found {features}"),
            });
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (k, cell) in rec.iter().take(features).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {} is not a number: {cell:?}", k + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column {} is not finite", k + 1),
                });
            }
            data.push(T::of(v));
        }
        let raw = rec.get(features).unwrap().trim();
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("unknown label {raw:?}"),
        })?;
        if let Some(c) = schema.classes {
            if label >= c {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown label {label} (declared {c} classes)"),
                });
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let classes = schema
        .classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let inputs = Mat::new(labels.len(), features, data)?;
    Dataset::new(inputs, labels, classes, split)
}

/// Writes `x0,…,x{d-1},label` with round-trip float formatting.
pub fn write_csv<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.inputs.row(i).iter().map(|v| format!("{}", v.as_f64())).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
