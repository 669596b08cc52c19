//! Epoch-level model selection under the compatibility constraint.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    /// Self-test of this epoch's model on the held-out gallery split.
    pub self_test: f64,
    /// This epoch's queries against the previous model's gallery split.
    pub cross_test: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    /// No epoch beat the previous self-test; the final epoch was kept.
    pub constraint_unsatisfied: bool,
}

/// Among epochs whose cross-test strictly beats `prev_self`, picks the highest
/// self-test (earliest on ties). Falls back to the last epoch when none
/// qualify. Returns `None` for an empty trace.
pub fn model_selection(trace: &[EpochScore], prev_self: f64) -> Option<Selection> {
    let mut tracker = SelectionTracker::new(prev_self);
    for s in trace {
        tracker.observe(s);
    }
    tracker.finish()
}

/// Streaming form of [`model_selection`], so only the current best snapshot
/// needs to be retained during training.
#[derive(Debug, Clone)]
pub struct SelectionTracker {
    prev_self: f64,
    best: Option<EpochScore>,
    last: Option<EpochScore>,
}

impl SelectionTracker {
    pub fn new(prev_self: f64) -> Self {
        SelectionTracker {
            prev_self,
            best: None,
            last: None,
        }
    }

    /// Returns true when `score` becomes the new best feasible epoch.
    pub fn observe(&mut self, score: &EpochScore) -> bool {
        self.last = Some(*score);
        if !(score.cross_test > self.prev_self) {
            return false;
        }
        match self.best {
            Some(b) if score.self_test <= b.self_test => false,
            _ => {
                self.best = Some(*score);
                true
            }
        }
    }

    pub fn has_feasible(&self) -> bool {
        self.best.is_some()
    }

    pub fn finish(&self) -> Option<Selection> {
        match (self.best, self.last) {
            (Some(b), _) => Some(Selection {
                epoch: b.epoch,
                constraint_unsatisfied: false,
            }),
            (None, Some(l)) => Some(Selection {
                epoch: l.epoch,
                constraint_unsatisfied: true,
            }),
            (None, None) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(v: &[(f64, f64)]) -> Vec<EpochScore> {
        v.iter()
            .enumerate()
            .map(|(i, &(s, c))| EpochScore {
                epoch: i + 1,
                self_test: s,
                cross_test: c,
            })
            .collect()
    }

    #[test]
    fn constraint_filters_before_argmax() {
        let sel = model_selection(&trace(&[(0.70, 0.61), (0.72, 0.59)]), 0.60).unwrap();
        assert_eq!(sel.epoch, 1);
        assert!(!sel.constraint_unsatisfied);
    }

    #[test]
    fn all_feasible_is_plain_argmax_with_earliest_tie() {
        let sel = model_selection(&trace(&[(0.5, 0.9), (0.8, 0.9), (0.8, 0.9), (0.6, 0.9)]), 0.1).unwrap();
        assert_eq!(sel.epoch, 2);
    }

    #[test]
    fn none_feasible_falls_back_to_last() {
        let sel = model_selection(&trace(&[(0.9, 0.2), (0.8, 0.3)]), 0.5).unwrap();
        assert_eq!(sel, Selection { epoch: 2, constraint_unsatisfied: true });
        assert!(model_selection(&[], 0.5).is_none());
    }
}
