//! Set comparisons between selections: Jaccard distances and turnover.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{HeadMask, MaskShape};

/// SWA groups chosen by one method at one target ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub label: String,
    pub shape: MaskShape,
    pub ratio: f64,
    pub groups: BTreeSet<usize>,
}

impl SelectionSet {
    pub fn from_mask(label: &str, ratio: f64, mask: &HeadMask) -> Self {
        Self { label: label.into(), shape: mask.shape(), ratio, groups: mask.swa_group_indices().into_iter().collect() }
    }

    pub fn to_mask(&self) -> HeadMask {
        HeadMask::from_swa_groups(self.shape, &self.groups.iter().copied().collect::<Vec<_>>()).expect("groups in range")
    }

    /// Flat head indices covered by the selected groups.
    pub fn heads(&self) -> BTreeSet<usize> {
        let s = self.shape;
        self.groups
            .iter()
            .flat_map(|&fg| {
                let (l, g) = s.split_group(fg);
                s.group_heads(g).map(move |h| l * s.heads + h)
            })
            .collect()
    }
}

/// `1 - |A & B| / |A | B|`, zero for two empty sets.
pub fn jaccard_distance<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn distance_matrix(sets: &[SelectionSet]) -> Result<DistanceMatrix> {
    if let Some(s) = sets.iter().find(|s| s.shape != sets[0].shape) {
        return Err(Error::Shape(format!("selection {} has a different shape", s.label)));
    }
    let values = sets.iter().map(|a| sets.iter().map(|b| jaccard_distance(&a.groups, &b.groups)).collect()).collect();
    Ok(DistanceMatrix { labels: sets.iter().map(|s| s.label.clone()).collect(), values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turnover {
    pub rho_small: f64,
    pub rho_large: f64,
    pub t: f64,
    pub t_max: f64,
    pub t_norm: f64,
}

pub fn max_turnover(rho_small: f64, rho_large: f64) -> f64 {
    ((1.0 - rho_large) / rho_small).min(1.0)
}

pub fn turnover_counts(small: &BTreeSet<usize>, large: &BTreeSet<usize>, rho_small: f64, rho_large: f64) -> Result<Turnover> {
    if small.is_empty() {
        return Err(Error::Config("smaller selection is empty".into()));
    }
    if rho_small >= rho_large {
        return Err(Error::Config(format!("turnover needs rho_small < rho_large, got {rho_small} and {rho_large}")));
    }
    let t = small.difference(large).count() as f64 / small.len() as f64;
    let t_max = max_turnover(rho_small, rho_large);
    let t_norm = if t_max > 0.0 { t / t_max } else { 0.0 };
    Ok(Turnover { rho_small, rho_large, t, t_max, t_norm })
}

pub fn turnover(small: &SelectionSet, large: &SelectionSet) -> Result<Turnover> {
    if small.shape != large.shape {
        return Err(Error::Shape("selections have different shapes".into()));
    }
    turnover_counts(&small.groups, &large.groups, small.ratio, large.ratio)
}

/// Turnover for each adjacent pair after sorting by ratio.
pub fn adjacent_turnovers(sets: &[SelectionSet]) -> Result<Vec<Turnover>> {
    let mut sorted: Vec<&SelectionSet> = sets.iter().collect();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    sorted.windows(2).map(|w| turnover(w[0], w[1])).collect()
}

/// Replaces `|D|` random groups of `large` by `D = small \ large`.
pub fn head_swap_experiment(large: &SelectionSet, small: &SelectionSet, seed: u64) -> Result<SelectionSet> {
    if small.shape != large.shape {
        return Err(Error::Shape("selections have different shapes".into()));
    }
    let delta: Vec<usize> = small.groups.difference(&large.groups).copied().collect();
    if delta.is_empty() {
        return Err(Error::Degenerate("smaller selection is nested in the larger one".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed = large.groups.iter().copied().choose_multiple(&mut rng, delta.len());
    let mut groups = large.groups.clone();
    for g in removed {
        groups.remove(&g);
    }
    groups.extend(delta);
    Ok(SelectionSet { label: format!("{}-swapped", large.label), shape: large.shape, ratio: large.ratio, groups })
}
