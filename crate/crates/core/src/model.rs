//! Layered model with frozen base weights and one low-rank adapter per layer.
//!
//! Layer `i` computes `x_i = act(x_{i-1} Wᵢᵀ + δᵢ · α (x_{i-1} Aᵢᵀ) Bᵢᵀ)` for a
//! row-batched input, and a frozen linear head maps `x_L` to outputs. When
//! `δᵢ = 0` the adapter factors are not read at all.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, Mat, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Nonlinearity {
    fn apply<T: Scalar>(self, m: &Mat<T>) -> Mat<T> {
        match self {
            Nonlinearity::Tanh => ops::tanh(m),
            Nonlinearity::Relu => ops::relu(m),
            Nonlinearity::Identity => m.clone(),
        }
    }

    fn record<T: Scalar>(self, g: &mut Graph<T>, v: Var) -> Var {
        match self {
            Nonlinearity::Tanh => g.tanh(v),
            Nonlinearity::Relu => g.relu(v),
            Nonlinearity::Identity => v,
        }
    }
}

/// Low-rank factors `A (r×n)`, `B (m×r)` and scale `α`; the update is `α·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub alpha: T,
}

impl<T: Scalar> AdapterPair<T> {
    pub fn new(a: Mat<T>, b: Mat<T>, alpha: T) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Dimension {
                op: "AdapterPair::new",
                lhs: b.shape(),
                rhs: a.shape(),
            });
        }
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(Error::config("adapter alpha must be a finite non-negative number"));
        }
        if a.rows() > a.cols().min(b.rows()) {
            return Err(Error::config(format!(
                "rank {} exceeds min({}, {})",
                a.rows(),
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense update `α·B·A` (`m×n`).
    pub fn delta(&self) -> Mat<T> {
        let ba = ops::matmul(&self.b, &self.a).expect("validated shapes");
        ops::scale(&ba, self.alpha)
    }

    /// `α (x Aᵀ) Bᵀ` for a row batch, with an optional mask on the `x Aᵀ` activation.
    pub fn apply(&self, x: &Mat<T>, mask: Option<&Mat<T>>) -> Result<Mat<T>> {
        let mut u = ops::matmul_nt(x, &self.a)?;
        if let Some(m) = mask {
            u = ops::hadamard(&u, m)?;
        }
        let v = ops::matmul_nt(&u, &self.b)?;
        Ok(ops::scale(&v, self.alpha))
    }

    /// Concatenated `A` then `B` entries, row-major.
    pub fn flat(&self) -> Vec<T> {
        self.a.data().iter().chain(self.b.data()).copied().collect()
    }
}

/// Frozen base weight `W (m×n)` followed by a nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer<T> {
    w: Mat<T>,
    act: Nonlinearity,
}

impl<T: Scalar> BaseLayer<T> {
    pub fn new(w: Mat<T>, act: Nonlinearity) -> Self {
        Self { w, act }
    }

    pub fn weight(&self) -> &Mat<T> {
        &self.w
    }

    pub fn activation(&self) -> Nonlinearity {
        self.act
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

/// Per-layer activation indicators for one evaluation or optimisation step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GateVector(Vec<bool>);

impl GateVector {
    pub fn new(gates: Vec<bool>) -> Self {
        Self(gates)
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    /// Bit `i` of `bits` gates layer `i` (0-based).
    pub fn from_bits(bits: u64, len: usize) -> Self {
        assert!(len <= 64, "bit patterns cover at most 64 layers");
        Self((0..len).map(|i| bits >> i & 1 == 1).collect())
    }

    pub fn bits(&self) -> u64 {
        assert!(self.0.len() <= 64, "bit patterns cover at most 64 layers");
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &on)| acc | (u64::from(on) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&g| g).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Inverted dropout on the adapter's rank-`r` activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterDropout {
    rate: f64,
}

impl AdapterDropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Training-time mask: entries are 0 with probability `rate`, otherwise
    /// `1/(1-rate)`. `None` when the rate is zero.
    pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Option<Mat<T>> {
        if self.rate == 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        Some(Mat::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < self.rate {
                T::zero()
            } else {
                keep
            }
        }))
    }

    /// Applies dropout in training mode; identity in evaluation mode.
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, x: &Mat<T>, training: bool, rng: &mut R) -> Mat<T> {
        if !training {
            return x.clone();
        }
        match self.sample_mask(x.rows(), x.cols(), rng) {
            Some(m) => ops::hadamard(x, &m).expect("same shape"),
            None => x.clone(),
        }
    }
}

/// Anything that maps a row batch to outputs under per-layer gates.
pub trait Predictor<T: Scalar>: Sync {
    fn depth(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn predict(&self, x: &Mat<T>, gates: &GateVector) -> Result<Mat<T>>;
}

/// Parameter handles for adapters registered on a [`Graph`]; `None` for
/// adapters skipped by their gate.
pub type AdapterVars = Vec<Option<(Var, Var)>>;

/// Frozen base network, one adapter per layer, frozen linear head.
#[derive(Debug)]
pub struct GatedModel<T> {
    layers: Vec<BaseLayer<T>>,
    adapters: Vec<AdapterPair<T>>,
    head: Mat<T>,
    invocations: Vec<AtomicU64>,
}

impl<T: Clone> Clone for GatedModel<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            adapters: self.adapters.clone(),
            head: self.head.clone(),
            invocations: self
                .invocations
                .iter()
                .map(|c| AtomicU64::new(c.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

/// Layer widths and adapter settings for a fully connected model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each adapted layer; its length is the depth `L`.
    pub widths: Vec<usize>,
    pub outputs: usize,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub activation: Nonlinearity,
}

impl Architecture {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `(m, n)` of every layer weight.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut n = self.input_dim;
        self.widths
            .iter()
            .map(|&m| {
                let s = (m, n);
                n = m;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.input_dim == 0 || self.outputs == 0 || self.widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        for (i, (m, n)) in self.layer_shapes().into_iter().enumerate() {
            if self.rank > m.min(n) {
                return Err(Error::config(format!(
                    "rank {} exceeds min({m}, {n}) at layer {}",
                    self.rank,
                    i + 1
                )));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        Ok(())
    }
}

/// Draws adapters with `A ~ U[-1/√n, 1/√n]` and `B = 0`, so every update starts at zero.
pub fn init_adapters<T: Scalar, R: Rng + ?Sized>(
    shapes: &[(usize, usize)],
    rank: usize,
    alpha: T,
    rng: &mut R,
) -> Result<Vec<AdapterPair<T>>> {
    if rank == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    shapes
        .iter()
        .map(|&(m, n)| {
            if rank > m.min(n) {
                return Err(Error::config(format!("rank {rank} exceeds min({m}, {n})")));
            }
            let bound = 1.0 / (n as f64).sqrt();
            let a = Mat::from_fn(rank, n, |_, _| T::of(rng.random_range(-bound..=bound)));
            AdapterPair::new(a, Mat::zeros(m, rank), alpha)
        })
        .collect()
}

impl<T: Scalar> GatedModel<T> {
    pub fn new(layers: Vec<BaseLayer<T>>, adapters: Vec<AdapterPair<T>>, head: Mat<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        if layers.len() != adapters.len() {
            return Err(Error::Architecture(format!(
                "{} layers but {} adapters",
                layers.len(),
                adapters.len()
            )));
        }
        for i in 1..layers.len() {
            if layers[i].in_dim() != layers[i - 1].out_dim() {
                return Err(Error::Dimension {
                    op: "layer chain",
                    lhs: layers[i - 1].w.shape(),
                    rhs: layers[i].w.shape(),
                });
            }
        }
        for (l, a) in layers.iter().zip(&adapters) {
            if a.in_dim() != l.in_dim() || a.out_dim() != l.out_dim() {
                return Err(Error::Dimension {
                    op: "adapter shape",
                    lhs: l.w.shape(),
                    rhs: (a.out_dim(), a.in_dim()),
                });
            }
        }
        if head.cols() != layers.last().unwrap().out_dim() {
            return Err(Error::Dimension {
                op: "head",
                lhs: layers.last().unwrap().w.shape(),
                rhs: head.shape(),
            });
        }
        let invocations = (0..layers.len()).map(|_| AtomicU64::new(0)).collect();
        Ok(Self {
            layers,
            adapters,
            head,
            invocations,
        })
    }

    /// Random frozen base (entries `N(0, 1/n)`) with freshly initialised adapters.
    pub fn from_seeds<R: Rng + ?Sized>(arch: &Architecture, base_rng: &mut R, adapter_rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        let layers = shapes
            .iter()
            .map(|&(m, n)| BaseLayer::new(gaussian(m, n, 1.0 / (n as f64).sqrt(), base_rng), arch.activation))
            .collect();
        let last = *arch.widths.last().unwrap();
        let head = gaussian(arch.outputs, last, 1.0 / (last as f64).sqrt(), base_rng);
        let adapters = init_adapters(&shapes, arch.rank, T::of(arch.alpha), adapter_rng)?;
        Self::new(layers, adapters, head)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.layers[0].in_dim(),
            widths: self.layers.iter().map(BaseLayer::out_dim).collect(),
            outputs: self.head.rows(),
            rank: self.adapters[0].rank(),
            alpha: self.adapters[0].alpha.as_f64(),
            activation: self.layers[0].act,
        }
    }

    pub fn layers(&self) -> &[BaseLayer<T>] {
        &self.layers
    }

    pub fn head(&self) -> &Mat<T> {
        &self.head
    }

    pub fn adapters(&self) -> &[AdapterPair<T>] {
        &self.adapters
    }

    /// Adapter factors are the only mutable state; base weights stay frozen.
    pub fn adapters_mut(&mut self) -> &mut [AdapterPair<T>] {
        &mut self.adapters
    }

    /// Same base and head with different adapters.
    pub fn with_adapters(&self, adapters: Vec<AdapterPair<T>>) -> Result<Self> {
        Self::new(self.layers.clone(), adapters, self.head.clone())
    }

    pub fn output_dim(&self) -> usize {
        self.head.rows()
    }

    /// `α Bᵢ Aᵢ` for 1-based layer index `i`.
    pub fn adapter_delta(&self, i: usize) -> Result<Mat<T>> {
        if i == 0 || i > self.adapters.len() {
            return Err(Error::Index {
                index: i,
                len: self.adapters.len(),
            });
        }
        Ok(self.adapters[i - 1].delta())
    }

    /// SHA-256 over every weight (as f64 LE), activation and adapter scale.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |m: &Mat<T>| {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for &v in m.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        };
        for (l, a) in self.layers.iter().zip(&self.adapters) {
            put(&l.w);
            put(&a.a);
            put(&a.b);
        }
        put(&self.head);
        for (l, a) in self.layers.iter().zip(&self.adapters) {
            h.update([l.act as u8]);
            h.update(a.alpha.as_f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Number of forward passes in which each adapter participated.
    pub fn invocation_counts(&self) -> Vec<u64> {
        self.invocations.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn set_invocation_counts(&self, counts: &[u64]) {
        for (c, &v) in self.invocations.iter().zip(counts) {
            c.store(v, Ordering::Relaxed);
        }
    }

    pub fn reset_invocation_counts(&self) {
        for c in &self.invocations {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn check_input(&self, x: &Mat<T>, gates: &GateVector) -> Result<()> {
        if gates.len() != self.layers.len() {
            return Err(Error::Dimension {
                op: "gates",
                lhs: (self.layers.len(), 1),
                rhs: (gates.len(), 1),
            });
        }
        if x.cols() != self.layers[0].in_dim() {
            return Err(Error::Dimension {
                op: "forward input",
                lhs: x.shape(),
                rhs: self.layers[0].w.shape(),
            });
        }
        Ok(())
    }

    /// Forward pass with a per-layer adapter output hook; shared by every
    /// model that reuses this base so evaluation order is identical.
    pub(crate) fn forward_with(
        &self,
        x: &Mat<T>,
        gates: &GateVector,
        mut adapter_out: impl FnMut(usize, &Mat<T>) -> Result<Mat<T>>,
    ) -> Result<Mat<T>> {
        self.check_input(x, gates)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = ops::matmul_nt(&h, &layer.w)?;
            if gates.is_active(i) {
                let u = adapter_out(i, &h)?;
                pre = ops::add(&pre, &u)?;
            }
            h = layer.act.apply(&pre);
        }
        ops::matmul_nt(&h, &self.head)
    }

    /// `f(x; {Wᵢ + δᵢ ΔWᵢ})` without dropout.
    pub fn forward(&self, x: &Mat<T>, gates: &GateVector) -> Result<Mat<T>> {
        self.forward_with(x, gates, |i, h| {
            self.invocations[i].fetch_add(1, Ordering::Relaxed);
            self.adapters[i].apply(h, None)
        })
    }

    /// Records the forward pass on `g`. Active adapters are registered as
    /// parameters; skipped adapters are never touched. `masks[i]`, when
    /// present, multiplies adapter `i`'s rank-`r` activation.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        gates: &GateVector,
        masks: &[Option<Mat<T>>],
    ) -> Result<(Var, AdapterVars)> {
        self.check_input(g.value(x), gates)?;
        let mut vars = vec![None; self.layers.len()];
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.constant(layer.w.clone());
            let mut pre = g.matmul_nt(h, w)?;
            if gates.is_active(i) {
                self.invocations[i].fetch_add(1, Ordering::Relaxed);
                let ad = &self.adapters[i];
                let a = g.param(ad.a.clone());
                let b = g.param(ad.b.clone());
                let mut u = g.matmul_nt(h, a)?;
                if let Some(Some(m)) = masks.get(i) {
                    u = g.mask(u, m.clone())?;
                }
                let v = g.matmul_nt(u, b)?;
                let s = g.scale(v, ad.alpha);
                pre = g.add(pre, s)?;
                vars[i] = Some((a, b));
            }
            h = layer.act.record(g, pre);
        }
        let head = g.constant(self.head.clone());
        let out = g.matmul_nt(h, head)?;
        Ok((out, vars))
    }

    /// Base model alone (every gate off).
    pub fn base_forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        self.forward(x, &GateVector::zeros(self.layers.len()))
    }
}

impl<T: Scalar> Predictor<T> for GatedModel<T> {
    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn predict(&self, x: &Mat<T>, gates: &GateVector) -> Result<Mat<T>> {
        self.forward(x, gates)
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
