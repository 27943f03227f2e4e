//! Two-model merging: factor fusion, delta ensemble, aligned fusion and
//! interpolation sweeps.
//!
//! `λ` weights the first model throughout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterPair, GateVector, GatedModel, Predictor};
use crate::numerics::linalg::{condition_1, inverse, spectral_norm};
use crate::numerics::{ops, LossKind, Mat};
use crate::report::{fmt_f64, CsvTable};
use crate::scalar::Scalar;
use crate::tasks::Dataset;
use crate::trainer::evaluate;

pub const SINGULAR_CONDITION: f64 = 1e12;
pub const MAX_HALVINGS: usize = 20;
pub const SPECTRAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    #[default]
    Fusion,
    Ensemble,
    AlignedFusion,
}

impl MergeMode {
    pub fn name(self) -> &'static str {
        match self {
            MergeMode::Fusion => "fusion",
            MergeMode::Ensemble => "ensemble",
            MergeMode::AlignedFusion => "aligned-fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSettings {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight `μ` of the `μ‖P‖²_F` term.
    pub ridge: f64,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            ridge: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub mode: MergeMode,
    pub lambda: f64,
    #[serde(default)]
    pub align: AlignSettings,
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.align.learning_rate > 0.0 && self.align.ridge >= 0.0) {
            return Err(Error::config("alignment needs a positive learning rate and a non-negative ridge"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Both models must share the frozen base, the head and every adapter shape.
pub fn check_compatible<T: Scalar>(m1: &GatedModel<T>, m2: &GatedModel<T>) -> Result<()> {
    if m1.architecture() != m2.architecture() {
        return Err(Error::Architecture(format!(
            "{:?} vs {:?}",
            m1.architecture(),
            m2.architecture()
        )));
    }
    if m1.layers() != m2.layers() || m1.head() != m2.head() {
        return Err(Error::Architecture("models do not share a frozen base".into()));
    }
    for (i, (a, b)) in m1.adapters().iter().zip(m2.adapters()).enumerate() {
        if a.a.shape() != b.a.shape() || a.b.shape() != b.b.shape() {
            return Err(Error::Architecture(format!("adapter {} shapes differ", i + 1)));
        }
    }
    Ok(())
}

/// `(λB₁ + (1−λ)B₂, λA₁ + (1−λ)A₂)` with `α` from the first adapter.
pub fn fuse_adapters<T: Scalar>(a1: &AdapterPair<T>, a2: &AdapterPair<T>, lambda: T) -> Result<AdapterPair<T>> {
    if a1.rank() != a2.rank() {
        return Err(Error::contract(format!("rank {} vs {}", a1.rank(), a2.rank())));
    }
    if a1.alpha != a2.alpha {
        return Err(Error::contract(format!("alpha {} vs {}", a1.alpha, a2.alpha)));
    }
    let mu = T::one() - lambda;
    AdapterPair::new(
        ops::lincomb(lambda, &a1.a, mu, &a2.a)?,
        ops::lincomb(lambda, &a1.b, mu, &a2.b)?,
        a1.alpha,
    )
}

pub fn weight_fusion<T: Scalar>(m1: &GatedModel<T>, m2: &GatedModel<T>, lambda: f64) -> Result<GatedModel<T>> {
    check_lambda(lambda)?;
    check_compatible(m1, m2)?;
    let adapters = m1
        .adapters()
        .iter()
        .zip(m2.adapters())
        .map(|(a, b)| fuse_adapters(a, b, T::of(lambda)))
        .collect::<Result<Vec<_>>>()?;
    m1.with_adapters(adapters)
}

/// `λ·α₁B₁A₁ + (1−λ)·α₂B₂A₂` as a dense matrix.
pub fn ensemble_delta<T: Scalar>(a1: &AdapterPair<T>, a2: &AdapterPair<T>, lambda: T) -> Result<Mat<T>> {
    ops::lincomb(lambda, &a1.delta(), T::one() - lambda, &a2.delta())
}

/// Dense ensemble delta for every layer.
pub fn model_ensemble<T: Scalar>(m1: &GatedModel<T>, m2: &GatedModel<T>, lambda: f64) -> Result<Vec<Mat<T>>> {
    check_lambda(lambda)?;
    check_compatible(m1, m2)?;
    m1.adapters()
        .iter()
        .zip(m2.adapters())
        .map(|(a, b)| ensemble_delta(a, b, T::of(lambda)))
        .collect()
}

/// Ensemble as one adapter of rank `r₁ + r₂`: `A = [A₁; A₂]`,
/// `B = [λB₁, (1−λ)(α₂/α₁)B₂]`, `α = α₁`, so `αBA = ΔW_e` exactly.
pub fn stack_adapters<T: Scalar>(a1: &AdapterPair<T>, a2: &AdapterPair<T>, lambda: T) -> Result<AdapterPair<T>> {
    if a1.in_dim() != a2.in_dim() || a1.out_dim() != a2.out_dim() {
        return Err(Error::Architecture("adapter shapes differ".into()));
    }
    let (r1, r2) = (a1.rank(), a2.rank());
    let a = Mat::from_fn(r1 + r2, a1.in_dim(), |i, j| {
        if i < r1 {
            a1.a.get(i, j)
        } else {
            a2.a.get(i - r1, j)
        }
    });
    let mu = (T::one() - lambda) * a2.alpha / a1.alpha;
    let b = Mat::from_fn(a1.out_dim(), r1 + r2, |i, j| {
        if j < r1 {
            lambda * a1.b.get(i, j)
        } else {
            mu * a2.b.get(i, j - r1)
        }
    });
    AdapterPair::new(a, b, a1.alpha)
}

/// [`stack_adapters`] on every layer; a plain model equivalent to [`EnsembleModel`].
pub fn stacked_ensemble<T: Scalar>(m1: &GatedModel<T>, m2: &GatedModel<T>, lambda: f64) -> Result<GatedModel<T>> {
    check_lambda(lambda)?;
    check_compatible(m1, m2)?;
    let adapters = m1
        .adapters()
        .iter()
        .zip(m2.adapters())
        .map(|(a, b)| stack_adapters(a, b, T::of(lambda)))
        .collect::<Result<Vec<_>>>()?;
    m1.with_adapters(adapters)
}

/// Model whose layer `i` uses `Wᵢ + λΔW₁ᵢ + (1−λ)ΔW₂ᵢ`.
///
/// The update is applied as `λ·(x ΔW₁ᵀ) + (1−λ)·(x ΔW₂ᵀ)`, which equals
/// `x (ΔW_e)ᵀ` and reproduces either source model exactly at `λ ∈ {0, 1}`.
#[derive(Debug, Clone)]
pub struct EnsembleModel<'a, T> {
    m1: &'a GatedModel<T>,
    m2: &'a GatedModel<T>,
    lambda: T,
}

impl<'a, T: Scalar> EnsembleModel<'a, T> {
    pub fn new(m1: &'a GatedModel<T>, m2: &'a GatedModel<T>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        check_compatible(m1, m2)?;
        Ok(Self {
            m1,
            m2,
            lambda: T::of(lambda),
        })
    }
}

impl<T: Scalar> Predictor<T> for EnsembleModel<'_, T> {
    fn depth(&self) -> usize {
        self.m1.depth()
    }

    fn input_dim(&self) -> usize {
        self.m1.input_dim()
    }

    fn predict(&self, x: &Mat<T>, gates: &GateVector) -> Result<Mat<T>> {
        let (a1, a2) = (self.m1.adapters(), self.m2.adapters());
        self.m1.forward_with(x, gates, |i, h| {
            let u1 = a1[i].apply(h, None)?;
            let u2 = a2[i].apply(h, None)?;
            ops::lincomb(self.lambda, &u1, T::one() - self.lambda, &u2)
        })
    }
}

/// Result of aligning one layer's second adapter to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAlignment<T> {
    /// 1-based layer index.
    pub layer: usize,
    pub p: Mat<T>,
    pub p_inv: Mat<T>,
    pub obj_initial: f64,
    pub obj_final: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub p_norm2: f64,
    pub condition: f64,
    /// `‖ΔW_f − ΔW_e‖_F` before and after alignment.
    pub gap_fro_initial: f64,
    pub gap_fro_final: f64,
    /// `‖ΔW_f − ΔW_e‖₂` after alignment.
    pub gap_spectral_final: f64,
    /// Stopped because a candidate `P` became numerically singular.
    pub aborted: bool,
}

struct Objective<'a, T> {
    a1: &'a Mat<T>,
    b1: &'a Mat<T>,
    a2: &'a Mat<T>,
    b2: &'a Mat<T>,
    alpha: T,
    lambda: T,
    ridge: T,
    ensemble: Mat<T>,
}

struct Eval<T> {
    value: T,
    residual: Mat<T>,
    b_mix: Mat<T>,
    a_mix: Mat<T>,
}

impl<T: Scalar> Objective<'_, T> {
    fn eval(&self, p: &Mat<T>, q: &Mat<T>) -> Result<Eval<T>> {
        let mu = T::one() - self.lambda;
        let b_mix = ops::lincomb(self.lambda, self.b1, mu, &ops::matmul(self.b2, p)?)?;
        let a_mix = ops::lincomb(self.lambda, self.a1, mu, &ops::matmul(q, self.a2)?)?;
        let fused = ops::scale(&ops::matmul(&b_mix, &a_mix)?, self.alpha);
        let residual = ops::sub(&fused, &self.ensemble)?;
        let value = residual.frobenius().powi(2) + self.ridge * p.frobenius().powi(2);
        Ok(Eval {
            value,
            residual,
            b_mix,
            a_mix,
        })
    }

    /// Gradient with respect to `P`, given `Q = P⁻¹` and the evaluation at `P`.
    fn grad(&self, p: &Mat<T>, q: &Mat<T>, e: &Eval<T>) -> Result<Mat<T>> {
        let mu = T::one() - self.lambda;
        let two_alpha = T::of(2.0) * self.alpha;
        let g_b = ops::scale(&ops::matmul_nt(&e.residual, &e.a_mix)?, two_alpha);
        let g_a = ops::scale(&ops::matmul_tn(&e.b_mix, &e.residual)?, two_alpha);
        let from_b = ops::scale(&ops::matmul_tn(self.b2, &g_b)?, mu);
        let g_q = ops::scale(&ops::matmul_nt(&g_a, self.a2)?, mu);
        let qt = q.transpose();
        let from_a = ops::matmul(&ops::matmul(&qt, &g_q)?, &qt)?;
        let g = ops::sub(&from_b, &from_a)?;
        ops::lincomb(T::one(), &g, T::of(2.0) * self.ridge, p)
    }
}

/// Learns `P` so that fusing `(A₁, B₁)` with `(P⁻¹A₂, B₂P)` at `λ` approaches
/// the ensemble `λΔW₁ + (1−λ)ΔW₂`.
///
/// Gradient descent from `P = I` on `‖ΔW_f(P) − ΔW_e‖²_F + μ‖P‖²_F`. Each
/// step halves its size (at most [`MAX_HALVINGS`] times) until the objective
/// does not increase; if no such step exists the optimiser stops.
pub fn align_layer<T: Scalar>(
    layer: usize,
    x: &AdapterPair<T>,
    y: &AdapterPair<T>,
    lambda: f64,
    settings: &AlignSettings,
) -> Result<LayerAlignment<T>> {
    check_lambda(lambda)?;
    if x.rank() != y.rank() || x.a.shape() != y.a.shape() || x.b.shape() != y.b.shape() {
        return Err(Error::contract(format!("layer {layer}: adapter shapes differ")));
    }
    if x.alpha != y.alpha {
        return Err(Error::contract(format!("layer {layer}: alpha {} vs {}", x.alpha, y.alpha)));
    }
    let lam = T::of(lambda);
    let obj = Objective {
        a1: &x.a,
        b1: &x.b,
        a2: &y.a,
        b2: &y.b,
        alpha: x.alpha,
        lambda: lam,
        ridge: T::of(settings.ridge),
        ensemble: ensemble_delta(x, y, lam)?,
    };
    let r = x.rank();
    let mut p = Mat::identity(r);
    let mut q = Mat::identity(r);
    let mut cur = obj.eval(&p, &q)?;
    let gap_fro_initial = cur.residual.frobenius().as_f64();
    let mut trace = vec![cur.value.as_f64()];
    let mut aborted = false;

    'outer: for _ in 0..settings.steps {
        let g = obj.grad(&p, &q, &cur)?;
        if g.max_abs() == T::zero() {
            break;
        }
        let mut eta = T::of(settings.learning_rate);
        for _ in 0..=MAX_HALVINGS {
            let cand = ops::lincomb(T::one(), &p, -eta, &g)?;
            let inv = inverse(&cand);
            let cond = match &inv {
                Ok(i) => condition_1(&cand, Some(i)).as_f64(),
                Err(_) => f64::INFINITY,
            };
            if cond > SINGULAR_CONDITION {
                aborted = true;
                break 'outer;
            }
            let inv = inv?;
            let next = obj.eval(&cand, &inv)?;
            if next.value <= cur.value {
                p = cand;
                q = inv;
                cur = next;
                trace.push(cur.value.as_f64());
                continue 'outer;
            }
            eta = eta * T::of(0.5);
        }
        break;
    }

    Ok(LayerAlignment {
        layer,
        p_norm2: spectral_norm(&p, T::of(SPECTRAL_TOL)).as_f64(),
        condition: condition_1(&p, Some(&q)).as_f64(),
        obj_initial: trace[0],
        obj_final: cur.value.as_f64(),
        gap_fro_initial,
        gap_fro_final: cur.residual.frobenius().as_f64(),
        gap_spectral_final: spectral_norm(&cur.residual, T::of(SPECTRAL_TOL)).as_f64(),
        trace,
        p,
        p_inv: q,
        aborted,
    })
}

pub fn align<T: Scalar>(
    m1: &GatedModel<T>,
    m2: &GatedModel<T>,
    lambda: f64,
    settings: &AlignSettings,
) -> Result<Vec<LayerAlignment<T>>> {
    check_compatible(m1, m2)?;
    m1.adapters()
        .iter()
        .zip(m2.adapters())
        .enumerate()
        .map(|(i, (x, y))| align_layer(i + 1, x, y, lambda, settings))
        .collect()
}

/// Second model's adapters reparameterised as `(P⁻¹A₂, B₂P)`.
pub fn reparameterise<T: Scalar>(ad: &AdapterPair<T>, p: &Mat<T>, p_inv: &Mat<T>) -> Result<AdapterPair<T>> {
    AdapterPair::new(ops::matmul(p_inv, &ad.a)?, ops::matmul(&ad.b, p)?, ad.alpha)
}

/// Fusion after aligning the second model. At `λ ∈ {0, 1}` alignment is
/// skipped (`P = I`) so the endpoints are the source models.
pub fn aligned_fusion<T: Scalar>(
    m1: &GatedModel<T>,
    m2: &GatedModel<T>,
    lambda: f64,
    settings: &AlignSettings,
) -> Result<(GatedModel<T>, Vec<LayerAlignment<T>>)> {
    if lambda == 0.0 || lambda == 1.0 {
        return Ok((weight_fusion(m1, m2, lambda)?, Vec::new()));
    }
    let report = align(m1, m2, lambda, settings)?;
    let adapters = m2
        .adapters()
        .iter()
        .zip(&report)
        .map(|(ad, a)| reparameterise(ad, &a.p, &a.p_inv))
        .collect::<Result<Vec<_>>>()?;
    let m2p = m2.with_adapters(adapters)?;
    Ok((weight_fusion(m1, &m2p, lambda)?, report))
}

pub fn alignment_table<T: Scalar>(report: &[LayerAlignment<T>]) -> CsvTable {
    let mut t = CsvTable::new(&["layer", "obj_initial", "obj_final", "p_norm2", "fusion_ensemble_gap"]);
    for a in report {
        t.rows.push(vec![
            a.layer.to_string(),
            fmt_f64(a.obj_initial),
            fmt_f64(a.obj_final),
            fmt_f64(a.p_norm2),
            fmt_f64(a.gap_spectral_final),
        ]);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Metrics of the merged model at `λ = k/(grid−1)`, `k = 0..grid`.
pub fn interpolate_sweep<T: Scalar>(
    m1: &GatedModel<T>,
    m2: &GatedModel<T>,
    grid: usize,
    data: &Dataset<T>,
    mode: MergeMode,
    kind: LossKind,
    settings: &AlignSettings,
) -> Result<Vec<SweepPoint>> {
    if grid < 2 {
        return Err(Error::config("interpolation grid needs at least 2 points"));
    }
    check_compatible(m1, m2)?;
    (0..grid)
        .into_par_iter()
        .map(|k| {
            let lambda = k as f64 / (grid - 1) as f64;
            let m = match mode {
                MergeMode::Fusion => evaluate(&weight_fusion(m1, m2, lambda)?, data, None, kind)?,
                MergeMode::Ensemble => evaluate(&EnsembleModel::new(m1, m2, lambda)?, data, None, kind)?,
                MergeMode::AlignedFusion => evaluate(&aligned_fusion(m1, m2, lambda, settings)?.0, data, None, kind)?,
            };
            Ok(SweepPoint {
                lambda,
                loss: m.loss,
                accuracy: m.accuracy,
            })
        })
        .collect()
}

pub fn sweep_table(points: &[SweepPoint]) -> CsvTable {
    let mut t = CsvTable::new(&["lambda", "loss", "accuracy"]);
    for p in points {
        t.rows.push(vec![fmt_f64(p.lambda), fmt_f64(p.loss), fmt_f64(p.accuracy)]);
    }
    t
}

/// Mean of the endpoint accuracies minus the accuracy at `λ = ½`.
pub fn midpoint_drop(points: &[SweepPoint]) -> Result<f64> {
    let first = points.first().ok_or_else(|| Error::contract("empty sweep"))?;
    let last = points.last().unwrap();
    let mid = points
        .iter()
        .find(|p| p.lambda == 0.5)
        .ok_or_else(|| Error::contract("sweep has no λ = 0.5 point; use an odd grid"))?;
    Ok((first.accuracy + last.accuracy) / 2.0 - mid.accuracy)
}
