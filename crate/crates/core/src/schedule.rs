//! Early stopping with an optional grace period.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub grace_epochs: usize,
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    counter: usize,
    epochs_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(grace_epochs: usize, patience: usize) -> Self {
        Self {
            grace_epochs,
            patience,
            best: None,
            best_epoch: 0,
            counter: 0,
            epochs_seen: 0,
        }
    }

    /// Records the validation metric of the next epoch (higher is better).
    /// Only strict improvements reset the counter, and the counter does not
    /// move during the first `grace_epochs` epochs.
    pub fn observe(&mut self, metric: f64) -> Verdict {
        self.epochs_seen += 1;
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = self.epochs_seen;
            self.counter = 0;
        } else if self.epochs_seen > self.grace_epochs {
            self.counter += 1;
        }
        Verdict {
            improved,
            stop: self.counter >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best metric so far.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs_seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(es: &mut EarlyStopping, seq: &[f64]) -> Option<usize> {
        seq.iter()
            .position(|&m| es.observe(m).stop)
            .map(|i| i + 1)
    }

    #[test]
    fn plain_patience_stops_after_five_flat_epochs() {
        let mut es = EarlyStopping::new(0, 5);
        assert_eq!(run(&mut es, &[0.1, 0.2, 0.2, 0.1, 0.15, 0.2, 0.19, 0.3]), Some(7));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn drop_during_grace_is_ignored() {
        let mut es = EarlyStopping::new(5, 5);
        es.observe(0.5);
        es.observe(0.6);
        es.observe(0.3);
        assert_eq!(es.counter(), 0);
    }
}
