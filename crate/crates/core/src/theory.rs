//! Exhaustive check that the expected loss under random gates dominates the
//! binomially weighted losses of the size-`j` subnetwork mean predictions.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateVector, Predictor};
use crate::numerics::loss::{loss, Target};
use crate::numerics::{ops, LossKind, Mat};
use crate::report::{fmt_f64, CsvTable};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::schedule::binomial_weights;
use crate::tasks::Dataset;

pub const EXACT_MAX_LAYERS: usize = 14;
pub const MC_SAMPLES: usize = 1024;
pub const DEFAULT_SAMPLE_ROWS: usize = 32;
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn masks_of_size(layers: usize, j: usize) -> impl Iterator<Item = u64> {
    (0..1u64 << layers).filter(move |m| m.count_ones() as usize == j)
}

fn check_j(layers: usize, j: usize) -> Result<()> {
    if j > layers {
        return Err(Error::config(format!("subnetwork size {j} exceeds depth {layers}")));
    }
    Ok(())
}

/// `ỹ_j(x)`: mean prediction over every gate pattern with exactly `j`
/// adapters on. Enumerates all `C(L, j)` patterns up to
/// [`EXACT_MAX_LAYERS`], and averages [`MC_SAMPLES`] uniform draws beyond.
pub fn subnetwork_expected_prediction<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    x: &Mat<T>,
    j: usize,
) -> Result<Mat<T>> {
    let layers = model.depth();
    check_j(layers, j)?;
    if layers > EXACT_MAX_LAYERS {
        return subnetwork_expected_prediction_sampled(model, x, j, MC_SAMPLES, 0);
    }
    let mut sum: Option<Mat<T>> = None;
    let mut count = 0usize;
    for m in masks_of_size(layers, j) {
        let y = model.predict(x, &GateVector::from_bits(m, layers))?;
        sum = Some(match sum {
            None => y,
            Some(s) => ops::add(&s, &y)?,
        });
        count += 1;
    }
    let sum = sum.expect("at least one mask of every size");
    Ok(if count == 1 { sum } else { ops::scale(&sum, T::one() / T::of(count as f64)) })
}

/// Monte Carlo `ỹ_j(x)` from `samples` uniformly drawn size-`j` patterns.
pub fn subnetwork_expected_prediction_sampled<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    x: &Mat<T>,
    j: usize,
    samples: usize,
    seed: u64,
) -> Result<Mat<T>> {
    let layers = model.depth();
    check_j(layers, j)?;
    if samples == 0 {
        return Err(Error::config("need at least one sample"));
    }
    if j == 0 || j == layers {
        return model.predict(x, &GateVector::new(vec![j > 0; layers]));
    }
    let mut rng = rng::stream(seed, j as u64, Purpose::Sampling);
    let mut sum = Mat::zeros(x.rows(), 0);
    for s in 0..samples {
        let mut gates = vec![false; layers];
        for i in sample(&mut rng, layers, j) {
            gates[i] = true;
        }
        let y = model.predict(x, &GateVector::new(gates))?;
        sum = if s == 0 { y } else { ops::add(&sum, &y)? };
    }
    Ok(ops::scale(&sum, T::one() / T::of(samples as f64)))
}

/// Both sides of the bound on a grid of inclusion probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub p: Vec<f64>,
    /// `E_δ[ℓ]`, exact over all masks.
    pub lhs: Vec<f64>,
    /// `Σ_{j=0}^{L} w_j(p) ℓ(ỹ_j)`.
    pub rhs_full: Vec<f64>,
    /// The same sum without the `j = 0` term.
    pub rhs_j_ge_1: Vec<f64>,
    /// `lhs − rhs_full`.
    pub gap: Vec<f64>,
    /// `Σ_j w_j(p) E_{‖δ‖₁=j}[ℓ]`, which must equal `lhs`.
    pub decomposition: Vec<f64>,
    /// `ℓ(ỹ_j)` for `j = 0..=L`.
    pub subnetwork_loss: Vec<f64>,
    /// Mean of `ℓ` over masks of size `j`.
    pub stratum_loss: Vec<f64>,
    pub masks: u64,
    pub rows: usize,
}

impl BoundReport {
    pub fn min_gap(&self) -> f64 {
        self.gap.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["p", "lhs", "rhs_full", "rhs_j_ge_1", "gap"]);
        for k in 0..self.p.len() {
            t.rows.push(
                [self.p[k], self.lhs[k], self.rhs_full[k], self.rhs_j_ge_1[k], self.gap[k]]
                    .iter()
                    .map(|&v| fmt_f64(v))
                    .collect(),
            );
        }
        t
    }
}

/// Evaluates both sides of the bound on `data` by enumerating all `2^L`
/// gate patterns, and fails if `lhs < rhs_full − 1e-9` anywhere.
pub fn verify_bound<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    data: &Dataset<T>,
    p_grid: &[f64],
    kind: LossKind,
) -> Result<BoundReport> {
    let layers = model.depth();
    if layers == 0 || layers > EXACT_MAX_LAYERS {
        return Err(Error::contract(format!(
            "exhaustive bound check needs 1 to {EXACT_MAX_LAYERS} adapters, model has {layers}"
        )));
    }
    if data.is_empty() {
        return Err(Error::config("bound check needs at least one row"));
    }
    if let Some(p) = p_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config(format!("inclusion probability {p} outside [0, 1]")));
    }
    let target = Target::Labels(&data.labels);
    let preds = (0..1u64 << layers)
        .into_par_iter()
        .map(|m| model.predict(&data.inputs, &GateVector::from_bits(m, layers)))
        .collect::<Result<Vec<_>>>()?;
    let mask_loss = preds
        .par_iter()
        .map(|y| Ok(to_f64(loss(kind, y, target)?)))
        .collect::<Result<Vec<f64>>>()?;

    let mut subnetwork_loss = Vec::with_capacity(layers + 1);
    let mut stratum_loss = Vec::with_capacity(layers + 1);
    for j in 0..=layers {
        let mut sum: Option<Mat<T>> = None;
        let mut total = 0.0;
        let mut count = 0usize;
        for m in masks_of_size(layers, j) {
            let y = &preds[m as usize];
            sum = Some(match sum {
                None => y.clone(),
                Some(s) => ops::add(&s, y)?,
            });
            total += mask_loss[m as usize];
            count += 1;
        }
        let sum = sum.expect("at least one mask of every size");
        let mean = if count == 1 { sum } else { ops::scale(&sum, T::one() / T::of(count as f64)) };
        subnetwork_loss.push(to_f64(loss(kind, &mean, target)?));
        stratum_loss.push(total / count as f64);
    }

    let mut report = BoundReport {
        p: p_grid.to_vec(),
        lhs: Vec::new(),
        rhs_full: Vec::new(),
        rhs_j_ge_1: Vec::new(),
        gap: Vec::new(),
        decomposition: Vec::new(),
        subnetwork_loss,
        stratum_loss,
        masks: 1 << layers,
        rows: data.len(),
    };
    for &p in p_grid {
        let w = binomial_weights(layers, p);
        let lhs: f64 = mask_loss
            .iter()
            .enumerate()
            .map(|(m, l)| {
                let k = (m as u64).count_ones() as i32;
                p.powi(k) * (1.0 - p).powi(layers as i32 - k) * l
            })
            .sum();
        let rhs_j_ge_1: f64 = (1..=layers).map(|j| w[j] * report.subnetwork_loss[j]).sum();
        let rhs_full = w[0] * report.subnetwork_loss[0] + rhs_j_ge_1;
        let gap = lhs - rhs_full;
        if gap < -BOUND_TOLERANCE {
            return Err(Error::contract(format!(
                "bound violated at p = {p}: lhs {lhs} < rhs {rhs_full}"
            )));
        }
        report.lhs.push(lhs);
        report.rhs_full.push(rhs_full);
        report.rhs_j_ge_1.push(rhs_j_ge_1);
        report.gap.push(gap);
        report
            .decomposition
            .push(w.iter().zip(&report.stratum_loss).map(|(w, l)| w * l).sum());
    }
    Ok(report)
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("finite scalar")
}

/// Evenly spaced grid `0, 1/(n−1), …, 1`.
pub fn p_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..points).map(|k| k as f64 / (points - 1) as f64).collect(),
    }
}
