use serde::{Deserialize, Serialize};

use crate::model::AdapterPair;
use crate::numerics::Mat;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

/// Moment buffers for one adapter. `steps` counts the updates this adapter
/// actually received, which drives Adam's bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSlot<T> {
    pub m_a: Mat<T>,
    pub v_a: Mat<T>,
    pub m_b: Mat<T>,
    pub v_b: Mat<T>,
    pub steps: u64,
}

impl<T: Scalar> AdapterSlot<T> {
    fn zeros_like(ad: &AdapterPair<T>) -> Self {
        let (ra, ca) = ad.a.shape();
        let (rb, cb) = ad.b.shape();
        Self {
            m_a: Mat::zeros(ra, ca),
            v_a: Mat::zeros(ra, ca),
            m_b: Mat::zeros(rb, cb),
            v_b: Mat::zeros(rb, cb),
            steps: 0,
        }
    }
}

/// Optimiser state over all adapters.
///
/// An adapter whose gate was off at a step has no gradient and is skipped
/// outright: neither its parameters nor its moment buffers change.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub slots: Vec<AdapterSlot<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, adapters: &[AdapterPair<T>]) -> Self {
        Self {
            kind,
            slots: adapters.iter().map(AdapterSlot::zeros_like).collect(),
        }
    }

    /// Applies one update to adapter `i` from its factor gradients.
    pub fn update(&mut self, i: usize, ad: &mut AdapterPair<T>, grad_a: &Mat<T>, grad_b: &Mat<T>, lr: T) {
        let slot = &mut self.slots[i];
        slot.steps += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = slot.steps as i32;
                adam(&mut ad.a, &mut slot.m_a, &mut slot.v_a, grad_a, lr, t);
                adam(&mut ad.b, &mut slot.m_b, &mut slot.v_b, grad_b, lr, t);
            }
            OptimizerKind::SgdMomentum => {
                momentum(&mut ad.a, &mut slot.m_a, grad_a, lr);
                momentum(&mut ad.b, &mut slot.m_b, grad_b, lr);
            }
        }
    }
}

fn adam<T: Scalar>(p: &mut Mat<T>, m: &mut Mat<T>, v: &mut Mat<T>, g: &Mat<T>, lr: T, t: i32) {
    let (b1, b2, eps) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2), T::of(ADAM_EPS));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let pd = p.data_mut();
    let md = m.data_mut();
    let vd = v.data_mut();
    for (k, &gk) in g.data().iter().enumerate() {
        md[k] = b1 * md[k] + (T::one() - b1) * gk;
        vd[k] = b2 * vd[k] + (T::one() - b2) * gk * gk;
        let mhat = md[k] / c1;
        let vhat = vd[k] / c2;
        pd[k] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn momentum<T: Scalar>(p: &mut Mat<T>, buf: &mut Mat<T>, g: &Mat<T>, lr: T) {
    let mu = T::of(SGD_MOMENTUM);
    let pd = p.data_mut();
    let bd = buf.data_mut();
    for (k, &gk) in g.data().iter().enumerate() {
        bd[k] = mu * bd[k] + gk;
        pd[k] -= lr * bd[k];
    }
}
