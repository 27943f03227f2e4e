//! Activation-probability schedules, gate sampling and subnetwork-size weights.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GateVector;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleShape {
    #[default]
    Linear,
    /// `(e^{k·u} − 1)/(e^k − 1)` with `k = 3`: slow start.
    Exponential,
    /// `sin(π·u/2)`: fast start.
    Sine,
}

/// Growth constant of the exponential ramp.
pub const EXP_RATE: f64 = 3.0;

/// `p(t)` ramps from 0 to 1 over the first `phase1_fraction · T` steps and
/// stays at 1 afterwards. A zero phase fraction disables the ramp (`p ≡ 1`),
/// which is plain adapter training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub shape: ScheduleShape,
    pub phase1_fraction: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn linear(phase1_fraction: f64, total_steps: u64) -> Self {
        Self {
            shape: ScheduleShape::Linear,
            phase1_fraction,
            total_steps,
        }
    }

    /// Always-on schedule.
    pub fn constant(total_steps: u64) -> Self {
        Self::linear(0.0, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return Err(Error::config(format!(
                "phase1_fraction {} outside [0, 1]",
                self.phase1_fraction
            )));
        }
        Ok(())
    }

    /// Step from which `p = 1`.
    pub fn phase2_start(&self) -> f64 {
        self.phase1_fraction * self.total_steps as f64
    }

    /// Continuous curve at `t` (a real step count, `t ≥ 0`).
    pub fn curve(&self, t: f64) -> f64 {
        let ramp = self.phase2_start();
        if ramp <= 0.0 || t >= ramp {
            return 1.0;
        }
        let u = (t / ramp).max(0.0);
        let p = match self.shape {
            ScheduleShape::Linear => u,
            ScheduleShape::Exponential => (EXP_RATE * u).exp_m1() / EXP_RATE.exp_m1(),
            ScheduleShape::Sine => (std::f64::consts::FRAC_PI_2 * u).sin(),
        };
        p.clamp(0.0, 1.0)
    }

    /// `p(t)` for an optimisation step `1 ≤ t ≤ T`.
    pub fn activation_prob(&self, t: u64) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::contract(format!(
                "step {t} outside [1, {}]",
                self.total_steps
            )));
        }
        Ok(self.curve(t as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Independent Bernoulli(p) gate per layer.
    #[default]
    Uniform,
    /// Lower layers are switched off first.
    NestedLow,
    /// Higher layers are switched off first.
    NestedHigh,
}

fn floor_count(x: f64) -> usize {
    // Absorb representation error so that e.g. (1 - 0.9) * 10 floors to 1.
    (x + 1e-9).floor().max(0.0) as usize
}

/// Gates for step `step` of a run seeded with `seed`.
///
/// In uniform mode `δᵢ = 1[ηᵢ ≤ p]` where `ηᵢ ∈ (0, 1]` is addressed by
/// `(seed, step, i)`. Nested modes are deterministic thresholds on `p`.
pub fn sample_gates(p: f64, layers: usize, mode: SamplerMode, seed: u64, step: u64) -> GateVector {
    let p = p.clamp(0.0, 1.0);
    match mode {
        SamplerMode::Uniform => GateVector::new(
            (0..layers)
                .map(|i| rng::uniform_at(seed, step, Purpose::Gates, i as u64) <= p)
                .collect(),
        ),
        SamplerMode::NestedLow => {
            let off = floor_count((1.0 - p) * layers as f64).min(layers);
            GateVector::new((0..layers).map(|i| i >= off).collect())
        }
        SamplerMode::NestedHigh => {
            let on = floor_count(p * layers as f64).min(layers);
            GateVector::new((0..layers).map(|i| i < on).collect())
        }
    }
}

fn from_count<T: Num + Clone>(n: usize) -> T {
    (0..n).fold(T::zero(), |acc, _| acc + T::one())
}

/// Probability that exactly `j` of `L` independent Bernoulli(p) gates are on,
/// for `j = 0..=L`: `C(L, j) pʲ (1−p)^{L−j}`.
///
/// Generic over any numeric field, so exact rationals work as well as floats.
pub fn binomial_weights<T: Num + Clone>(layers: usize, p: T) -> Vec<T> {
    let q = T::one() - p.clone();
    let mut p_pow = vec![T::one(); layers + 1];
    let mut q_pow = vec![T::one(); layers + 1];
    for j in 1..=layers {
        p_pow[j] = p_pow[j - 1].clone() * p.clone();
        q_pow[j] = q_pow[j - 1].clone() * q.clone();
    }
    let mut coeff = T::one();
    let mut out = Vec::with_capacity(layers + 1);
    for j in 0..=layers {
        out.push(coeff.clone() * p_pow[j].clone() * q_pow[layers - j].clone());
        if j < layers {
            coeff = coeff * from_count::<T>(layers - j) / from_count::<T>(j + 1);
        }
    }
    out
}
