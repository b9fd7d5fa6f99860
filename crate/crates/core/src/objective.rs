//! Normalized score, penalized loss and the memoized black-box oracle.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::calibration::{score, Anchors, CalibrationSet};
use crate::error::{Error, Result};
use crate::masks::{HeadMask, MaskShape};
use crate::model::ToyModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub alpha: f64,
    pub gamma: f64,
    pub target_ratio: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 100.0, gamma: 0.2, target_ratio: 0.5 }
    }
}

pub fn normalized_score(s: f64, anchors: &Anchors) -> f64 {
    (s - anchors.a) / (anchors.b - anchors.a)
}

/// `-s_hat + alpha * (ratio - target)^2`.
pub fn penalized_loss(s: f64, ratio: f64, target: f64, alpha: f64, anchors: &Anchors) -> f64 {
    -normalized_score(s, anchors) + alpha * (ratio - target).powi(2)
}

/// Ratio penalty measured over a subset of groups only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub groups: Vec<usize>,
    pub target: f64,
}

impl Penalty {
    pub fn global(shape: MaskShape, target: f64) -> Self {
        Self { groups: (0..shape.num_groups()).collect(), target }
    }

    pub fn layers(shape: MaskShape, layers: &[usize], target: f64) -> Self {
        Self { groups: layers.iter().flat_map(|&l| shape.layer_groups(l)).collect(), target }
    }
}

/// Anything that maps a mask to a retrieval score in `[0, 1]`.
pub trait Scorer: Sync {
    fn shape(&self) -> MaskShape;
    fn score(&self, mask: &HeadMask) -> Result<f64>;
}

pub struct ModelScorer<'a> {
    pub model: &'a ToyModel,
    pub set: &'a CalibrationSet,
    pub window: usize,
}

impl Scorer for ModelScorer<'_> {
    fn shape(&self) -> MaskShape {
        self.model.shape()
    }

    fn score(&self, mask: &HeadMask) -> Result<f64> {
        score(self.model, mask, self.set, self.window)
    }
}

impl<F: Fn(&HeadMask) -> f64 + Sync> Scorer for (MaskShape, F) {
    fn shape(&self) -> MaskShape {
        self.0
    }

    fn score(&self, mask: &HeadMask) -> Result<f64> {
        Ok((self.1)(mask))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub index: usize,
    pub hash: String,
    pub mask: String,
    pub ratio: f64,
    pub score: f64,
    pub loss: f64,
}

struct CacheState {
    scores: HashMap<Vec<bool>, usize>,
    ledger: Vec<LedgerEntry>,
}

/// Memoizes scores by canonical mask and keeps an ordered evaluation ledger.
/// Only cache misses count against the budget.
pub struct Oracle<S: Scorer> {
    scorer: S,
    params: LossParams,
    anchors: Anchors,
    budget: Option<usize>,
    state: Mutex<CacheState>,
}

impl<S: Scorer> Oracle<S> {
    /// Evaluates the all-SWA and all-full anchors first; both are recorded in the ledger.
    pub fn new(scorer: S, params: LossParams, budget: Option<usize>) -> Result<Self> {
        let placeholder = Anchors { a: 0.0, b: 1.0, full_score: 1.0 };
        let mut o = Self::with_anchors(scorer, params, placeholder, budget);
        let shape = o.shape();
        let a = o.score(&HeadMask::all_swa(shape))?;
        let f = o.score(&HeadMask::all_full(shape))?;
        o.anchors = Anchors::new(a, f, params.gamma)?;
        let mut st = o.state.lock().expect("oracle lock");
        for e in st.ledger.iter_mut() {
            e.loss = penalized_loss(e.score, e.ratio, params.target_ratio, params.alpha, &o.anchors);
        }
        drop(st);
        Ok(o)
    }

    pub fn with_anchors(scorer: S, params: LossParams, anchors: Anchors, budget: Option<usize>) -> Self {
        Self {
            scorer,
            params,
            anchors,
            budget,
            state: Mutex::new(CacheState { scores: HashMap::new(), ledger: Vec::new() }),
        }
    }

    pub fn shape(&self) -> MaskShape {
        self.scorer.shape()
    }

    pub fn params(&self) -> LossParams {
        self.params
    }

    pub fn anchors(&self) -> Anchors {
        self.anchors
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }

    /// Number of distinct masks scored so far.
    pub fn evals(&self) -> usize {
        self.state.lock().expect("oracle lock").ledger.len()
    }

    pub fn is_cached(&self, mask: &HeadMask) -> bool {
        self.state.lock().expect("oracle lock").scores.contains_key(mask.group_swa())
    }

    /// Raw retrieval score, memoized.
    pub fn score(&self, mask: &HeadMask) -> Result<f64> {
        if mask.shape() != self.shape() {
            return Err(Error::Shape("mask shape does not match oracle".into()));
        }
        {
            let st = self.state.lock().expect("oracle lock");
            if let Some(&i) = st.scores.get(mask.group_swa()) {
                return Ok(st.ledger[i].score);
            }
            if let Some(b) = self.budget {
                if st.ledger.len() >= b {
                    return Err(Error::BudgetExhausted(b));
                }
            }
        }
        let s = self.scorer.score(mask)?;
        let loss = penalized_loss(s, mask.ratio(), self.params.target_ratio, self.params.alpha, &self.anchors);
        let mut st = self.state.lock().expect("oracle lock");
        if let Some(&i) = st.scores.get(mask.group_swa()) {
            return Ok(st.ledger[i].score);
        }
        let index = st.ledger.len();
        st.ledger.push(LedgerEntry { index, hash: mask.hash(), mask: mask.canonical(), ratio: mask.ratio(), score: s, loss });
        st.scores.insert(mask.group_swa().to_vec(), index);
        Ok(s)
    }

    /// Global penalized loss.
    pub fn loss(&self, mask: &HeadMask) -> Result<f64> {
        let s = self.score(mask)?;
        Ok(penalized_loss(s, mask.ratio(), self.params.target_ratio, self.params.alpha, &self.anchors))
    }

    /// Loss with the ratio penalty measured over `penalty.groups` only.
    pub fn restricted_loss(&self, mask: &HeadMask, penalty: &Penalty) -> Result<f64> {
        let s = self.score(mask)?;
        Ok(penalized_loss(s, mask.ratio_over(&penalty.groups), penalty.target, self.params.alpha, &self.anchors))
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.state.lock().expect("oracle lock").ledger.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> MaskShape {
        MaskShape::new(2, 4, 4).unwrap()
    }

    fn anchors() -> Anchors {
        Anchors { a: 0.2, b: 1.2, full_score: 1.0 }
    }

    #[test]
    fn normalized_score_endpoints() {
        let a = anchors();
        assert!((normalized_score(0.2, &a)).abs() < 1e-12);
        assert!((normalized_score(1.2, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_at_target_and_off_target() {
        let a = Anchors { a: 0.0, b: 1.0, full_score: 1.0 };
        assert!((penalized_loss(0.9, 0.5, 0.5, 100.0, &a) + 0.9).abs() < 1e-12);
        assert!((penalized_loss(1.0, 0.6, 0.5, 100.0, &a) - 0.0).abs() < 1e-9);
    }

    #[test]
    fn cache_hits_are_free_and_budget_binds() {
        let scorer = (shape(), |m: &HeadMask| 1.0 - m.ratio());
        let o = Oracle::with_anchors(scorer, LossParams::default(), anchors(), Some(5));
        for g in 0..5 {
            o.score(&HeadMask::from_swa_groups(shape(), &[g]).unwrap()).unwrap();
        }
        o.score(&HeadMask::from_swa_groups(shape(), &[0]).unwrap()).unwrap();
        assert_eq!(o.evals(), 5);
        let err = o.score(&HeadMask::from_swa_groups(shape(), &[5]).unwrap());
        assert!(matches!(err, Err(Error::BudgetExhausted(5))));
    }

    #[test]
    fn anchors_are_first_ledger_entries() {
        let scorer = (shape(), |m: &HeadMask| 1.0 - 0.8 * m.ratio());
        let o = Oracle::new(scorer, LossParams::default(), None).unwrap();
        let l = o.ledger();
        assert_eq!(l.len(), 2);
        assert!((o.anchors().a - 0.2).abs() < 1e-12);
        assert!((o.anchors().b - 1.2).abs() < 1e-12);
        assert!((l[1].loss - (-(1.0 - 0.2) + 100.0 * 0.25)).abs() < 1e-9);
    }

    #[test]
    fn restricted_penalty_ignores_other_groups() {
        let scorer = (shape(), |_: &HeadMask| 0.7);
        let o = Oracle::with_anchors(scorer, LossParams::default(), Anchors { a: 0.0, b: 1.0, full_score: 1.0 }, None);
        let m = HeadMask::from_swa_groups(shape(), &[0, 1, 4, 5, 6, 7]).unwrap();
        let p = Penalty::layers(shape(), &[0], 0.5);
        assert!((o.restricted_loss(&m, &p).unwrap() + 0.7).abs() < 1e-12);
    }
}
