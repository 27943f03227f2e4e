//! Adapters as players of a cooperative game.
//!
//! The value of a coalition `R` is the mean loss with exactly the adapters in
//! `R` switched on, so lower is better. Reports flip the sign and call
//! `−φᵢ` the contribution of adapter `i`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateVector, Predictor};
use crate::numerics::LossKind;
use crate::report::{fmt_f64, CsvTable};
use crate::rng::{self, unit_open_closed, Purpose};
use crate::scalar::Scalar;
use crate::tasks::Dataset;
use crate::trainer::evaluate;

/// Largest game solved by enumerating every coalition.
pub const EXACT_MAX_PLAYERS: usize = 14;
pub const DEFAULT_P_GRID: usize = 11;
pub const DEFAULT_SAMPLES: usize = 256;

/// A set function over `players()` players; coalitions are bit patterns
/// with bit `i` set when player `i` (0-based) is in.
pub trait ValueFunction: Sync {
    fn players(&self) -> usize;
    fn value(&self, coalition: u64) -> Result<f64>;
}

impl<F: Fn(u64) -> f64 + Sync> ValueFunction for (usize, F) {
    fn players(&self) -> usize {
        self.0
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        Ok((self.1)(coalition))
    }
}

/// `v(R)` of a model on a dataset, memoised per coalition.
pub struct CoalitionValue<'a, T, P: ?Sized> {
    model: &'a P,
    data: &'a Dataset<T>,
    kind: LossKind,
    cache: Mutex<HashMap<u64, f64>>,
    evaluations: AtomicU64,
    pub model_digest: String,
    pub data_digest: String,
}

impl<'a, T: Scalar, P: Predictor<T> + ?Sized> CoalitionValue<'a, T, P> {
    /// `model_digest` identifies the snapshot the cache belongs to.
    pub fn new(model: &'a P, model_digest: String, data: &'a Dataset<T>, kind: LossKind) -> Result<Self> {
        if model.depth() > 63 {
            return Err(Error::config("coalition bit patterns support at most 63 adapters"));
        }
        Ok(Self {
            model,
            data,
            kind,
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicU64::new(0),
            model_digest,
            data_digest: data.digest(),
        })
    }

    /// Model evaluations performed so far (cache misses).
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn compute(&self, coalition: u64) -> Result<f64> {
        let gates = GateVector::from_bits(coalition, self.model.depth());
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(evaluate(self.model, self.data, Some(&gates), self.kind)?.loss)
    }
}

impl<T: Scalar, P: Predictor<T> + ?Sized> ValueFunction for CoalitionValue<'_, T, P> {
    fn players(&self) -> usize {
        self.model.depth()
    }

    fn value(&self, coalition: u64) -> Result<f64> {
        if coalition >> self.players() != 0 {
            return Err(Error::Index {
                index: 63 - coalition.leading_zeros() as usize,
                len: self.players(),
            });
        }
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&coalition) {
            return Ok(v);
        }
        let v = self.compute(coalition)?;
        // Evaluation is deterministic, so a racing insert stores the same bits.
        Ok(*self.cache.lock().expect("cache lock").entry(coalition).or_insert(v))
    }
}

fn full(n: usize) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, stderr: 0.0 }
    }

    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// `cᵢ(p) = E[v(Rᵢ ∪ {i}) − v(Rᵢ)]` over random `Rᵢ ⊆ S∖{i}` that include
/// each other player with probability `p`, from `samples` paired draws.
pub fn marginal_contribution<V: ValueFunction + ?Sized, R: Rng + ?Sized>(
    v: &V,
    i: usize,
    p: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let n = v.players();
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    if samples == 0 {
        return Err(Error::config("need at least one sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("inclusion probability {p} outside [0, 1]")));
    }
    let bit = 1u64 << i;
    let diffs = (0..samples)
        .map(|_| {
            let mut r = 0u64;
            for j in 0..n {
                // One draw per player keeps the stream aligned across players.
                let u = unit_open_closed(rng.next_u64());
                if j != i && u <= p {
                    r |= 1 << j;
                }
            }
            Ok(v.value(r | bit)? - v.value(r)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&diffs))
}

/// `cᵢ(p)` by enumerating all `2^{L−1}` coalitions without `i`.
pub fn exact_marginal<V: ValueFunction + ?Sized>(v: &V, i: usize, p: f64) -> Result<f64> {
    let n = v.players();
    check_exact(n)?;
    let mut total = 0.0;
    for m in 0..1u64 << (n - 1) {
        let r = insert_zero_bit(m, i);
        let k = m.count_ones() as i32;
        let w = p.powi(k) * (1.0 - p).powi(n as i32 - 1 - k);
        total += w * (v.value(r | 1 << i)? - v.value(r)?);
    }
    Ok(total)
}

/// Spreads the bits of `m` over every position except `i`.
fn insert_zero_bit(m: u64, i: usize) -> u64 {
    let low = m & ((1u64 << i) - 1);
    let high = (m >> i) << (i + 1);
    low | high
}

fn check_exact(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("game has no players"));
    }
    if n > EXACT_MAX_PLAYERS {
        return Err(Error::contract(format!(
            "exact Shapley needs 2^{n} coalitions; with more than {EXACT_MAX_PLAYERS} adapters use the multilinear estimator"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapleyMethod {
    Multilinear,
    Exact,
}

/// Per-adapter Shapley values of the loss game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub method: ShapleyMethod,
    /// `φᵢ` in loss units (negative = the adapter lowers the loss).
    pub phi: Vec<f64>,
    pub stderr: Vec<f64>,
    pub p_grid: Vec<f64>,
    /// `c[i][k] = cᵢ(p_k)`.
    pub c: Vec<Vec<f64>>,
    pub c_stderr: Vec<Vec<f64>>,
    /// Monte Carlo draws per interior grid point (0 for exact).
    pub samples: usize,
    pub seed: Option<u64>,
    pub v_empty: f64,
    pub v_full: f64,
}

impl ContributionReport {
    /// `−φᵢ`, so that higher is better.
    pub fn contributions(&self) -> Vec<f64> {
        self.phi.iter().map(|&p| -p).collect()
    }

    /// `Σφᵢ − (v(S) − v(∅))`.
    pub fn efficiency_residual(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.v_full - self.v_empty)
    }

    /// Report rows use the contribution sign: `phi` holds `−φᵢ` and the
    /// `c_p*` columns hold `−cᵢ(p)`.
    pub fn to_table(&self) -> CsvTable {
        let mut header = vec!["adapter".to_string(), "phi".into(), "stderr".into()];
        header.extend((0..self.p_grid.len()).map(|k| format!("c_p{k}")));
        let mut t = CsvTable::new(&header);
        for i in 0..self.phi.len() {
            let mut row = vec![(i + 1).to_string(), fmt_f64(-self.phi[i]), fmt_f64(self.stderr[i])];
            row.extend(self.c[i].iter().map(|&c| fmt_f64(-c)));
            t.rows.push(row);
        }
        t
    }
}

fn uniform_grid(points: usize) -> Vec<f64> {
    (0..points).map(|k| k as f64 / (points - 1) as f64).collect()
}

fn trapezoid_weights(points: usize) -> Vec<f64> {
    let h = 1.0 / (points - 1) as f64;
    (0..points)
        .map(|k| if k == 0 || k == points - 1 { h / 2.0 } else { h })
        .collect()
}

/// `φᵢ = ∫₀¹ cᵢ(p) dp` by the trapezoid rule on a uniform grid.
///
/// Endpoints are exact (`cᵢ(0) = v({i}) − v(∅)`, `cᵢ(1) = v(S) − v(S∖{i})`);
/// interior points use `samples` paired draws from a stream addressed by
/// `(seed, i, k)`.
pub fn shapley_multilinear<V: ValueFunction + ?Sized>(
    v: &V,
    p_grid: usize,
    samples: usize,
    seed: u64,
) -> Result<ContributionReport> {
    let n = v.players();
    if n == 0 || n > 63 {
        return Err(Error::config("multilinear estimator supports 1 to 63 players"));
    }
    if p_grid < 2 {
        return Err(Error::config("p grid needs at least 2 points"));
    }
    let grid = uniform_grid(p_grid);
    let s = full(n);
    let v_empty = v.value(0)?;
    let v_full = v.value(s)?;
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..p_grid).map(move |k| (i, k))).collect();
    let est = cells
        .par_iter()
        .map(|&(i, k)| {
            let bit = 1u64 << i;
            if k == 0 {
                Ok(Estimate::exact(v.value(bit)? - v_empty))
            } else if k == p_grid - 1 {
                Ok(Estimate::exact(v_full - v.value(s & !bit)?))
            } else {
                let mut r = rng::stream(seed, (i * p_grid + k) as u64, Purpose::Sampling);
                marginal_contribution(v, i, grid[k], samples, &mut r)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let w = trapezoid_weights(p_grid);
    let mut report = ContributionReport {
        method: ShapleyMethod::Multilinear,
        phi: Vec::with_capacity(n),
        stderr: Vec::with_capacity(n),
        p_grid: grid,
        c: Vec::with_capacity(n),
        c_stderr: Vec::with_capacity(n),
        samples,
        seed: Some(seed),
        v_empty,
        v_full,
    };
    for row in est.chunks(p_grid) {
        report.phi.push(row.iter().zip(&w).map(|(e, w)| w * e.mean).sum());
        report
            .stderr
            .push(row.iter().zip(&w).map(|(e, w)| (w * e.stderr).powi(2)).sum::<f64>().sqrt());
        report.c.push(row.iter().map(|e| e.mean).collect());
        report.c_stderr.push(row.iter().map(|e| e.stderr).collect());
    }
    Ok(report)
}

/// Shapley values by full enumeration; `c` holds exact `cᵢ(p)` on a
/// `p_grid`-point grid.
pub fn shapley_exact<V: ValueFunction + ?Sized>(v: &V, p_grid: usize) -> Result<ContributionReport> {
    let n = v.players();
    check_exact(n)?;
    if p_grid < 2 {
        return Err(Error::config("p grid needs at least 2 points"));
    }
    let values = (0..1u64 << n)
        .into_par_iter()
        .map(|r| v.value(r))
        .collect::<Result<Vec<_>>>()?;
    let table = (n, |r: u64| values[r as usize]);

    // |R|!(L−|R|−1)!/L! = 1 / (L · C(L−1, |R|)).
    let mut binom = vec![1.0f64; n];
    for k in 1..n {
        binom[k] = binom[k - 1] * (n - k) as f64 / k as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|b| 1.0 / (n as f64 * b)).collect();
    let grid = uniform_grid(p_grid);
    let mut report = ContributionReport {
        method: ShapleyMethod::Exact,
        phi: Vec::with_capacity(n),
        stderr: vec![0.0; n],
        p_grid: grid.clone(),
        c: Vec::with_capacity(n),
        c_stderr: vec![vec![0.0; p_grid]; n],
        samples: 0,
        seed: None,
        v_empty: values[0],
        v_full: values[full(n) as usize],
    };
    for i in 0..n {
        let mut phi = 0.0;
        for m in 0..1u64 << (n - 1) {
            let r = insert_zero_bit(m, i);
            phi += weight[m.count_ones() as usize] * (values[(r | 1 << i) as usize] - values[r as usize]);
        }
        report.phi.push(phi);
        report.c.push(
            grid.iter()
                .map(|&p| exact_marginal(&table, i, p))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(report)
}

/// Share of the positive contributions held by each of `buckets` contiguous
/// layer groups (ragged when `buckets` does not divide `L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    /// `(first, last)` 1-based layer of each bucket.
    pub ranges: Vec<(usize, usize)>,
    pub shares: Vec<f64>,
    /// Every contribution was ≤ 0, so the uniform split was returned.
    pub degenerate: bool,
}

impl ConcentrationSummary {
    pub fn top_share(&self) -> f64 {
        *self.shares.last().expect("at least one bucket")
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["bucket", "share"]);
        for ((a, b), s) in self.ranges.iter().zip(&self.shares) {
            t.rows.push(vec![format!("{a}-{b}"), fmt_f64(*s)]);
        }
        t
    }
}

pub fn concentration_summary(report: &ContributionReport, buckets: usize) -> Result<ConcentrationSummary> {
    let n = report.phi.len();
    if buckets == 0 || buckets > n {
        return Err(Error::config(format!("cannot split {n} adapters into {buckets} buckets")));
    }
    let edges: Vec<usize> = (0..=buckets).map(|b| b * n / buckets).collect();
    let pos: Vec<f64> = report.contributions().iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = pos.iter().sum();
    let ranges = edges.windows(2).map(|e| (e[0] + 1, e[1])).collect();
    if total <= 0.0 {
        return Ok(ConcentrationSummary {
            ranges,
            shares: vec![1.0 / buckets as f64; buckets],
            degenerate: true,
        });
    }
    let shares = edges
        .windows(2)
        .map(|e| pos[e[0]..e[1]].iter().sum::<f64>() / total)
        .collect();
    Ok(ConcentrationSummary {
        ranges,
        shares,
        degenerate: false,
    })
}
