use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{fmt_f64, CsvTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub p: f64,
    pub train_loss: f64,
    pub active_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

/// Append-only training log. `invocations[i]` counts the steps at which
/// adapter `i` was active.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub invocations: Vec<u64>,
}

impl MetricsLog {
    pub fn new(layers: usize) -> Self {
        Self {
            steps: Vec::new(),
            evals: Vec::new(),
            invocations: vec![0; layers],
        }
    }

    pub fn push_step(&mut self, rec: StepRecord, gates: &[bool]) -> Result<()> {
        if self.steps.last().is_some_and(|last| last.step >= rec.step) {
            return Err(Error::contract(format!("step {} logged out of order", rec.step)));
        }
        if gates.len() != self.invocations.len() {
            return Err(Error::Index {
                index: gates.len(),
                len: self.invocations.len(),
            });
        }
        for (c, &g) in self.invocations.iter_mut().zip(gates) {
            *c += u64::from(g);
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn push_eval(&mut self, rec: EvalRecord) -> Result<()> {
        if self.evals.last().is_some_and(|last| last.step >= rec.step) {
            return Err(Error::contract(format!("eval at step {} logged out of order", rec.step)));
        }
        self.evals.push(rec);
        Ok(())
    }

    /// Realised adapter invocations over `L · steps`.
    pub fn invocation_fraction(&self) -> f64 {
        let slots = self.invocations.len() as u64 * self.steps.len() as u64;
        if slots == 0 {
            return 0.0;
        }
        self.invocations.iter().sum::<u64>() as f64 / slots as f64
    }

    pub fn steps_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["step", "p", "train_loss", "active_count"]);
        for r in &self.steps {
            t.rows.push(vec![
                r.step.to_string(),
                fmt_f64(r.p),
                fmt_f64(r.train_loss),
                r.active_count.to_string(),
            ]);
        }
        t
    }

    pub fn evals_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["step", "eval_loss", "eval_accuracy"]);
        for r in &self.evals {
            t.rows.push(vec![r.step.to_string(), fmt_f64(r.eval_loss), fmt_f64(r.eval_accuracy)]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> StepRecord {
        StepRecord {
            step,
            p: 0.5,
            train_loss: 1.0,
            active_count: 1,
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut m = MetricsLog::new(2);
        m.push_step(rec(1), &[true, false]).unwrap();
        assert!(m.push_step(rec(1), &[true, false]).is_err());
        m.push_step(rec(2), &[true, true]).unwrap();
        assert_eq!(m.invocations, vec![2, 1]);
        assert_eq!(m.invocation_fraction(), 0.75);
    }

    #[test]
    fn csv_headers() {
        let m = MetricsLog::new(1);
        assert_eq!(m.steps_table().to_csv_string(), "step,p,train_loss,active_count\n");
        assert_eq!(m.evals_table().to_csv_string(), "step,eval_loss,eval_accuracy\n");
    }
}
