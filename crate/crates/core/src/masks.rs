//! Head masks with grouped-query coupling.
//!
//! A mask assigns every attention head either full causal attention or a
//! sliding window. Heads sharing a KV group always share the assignment, so
//! masks are stored per (layer, group) and expanded to heads on demand.
//! Indices are 0-based throughout; the flat head index is `layer * H + head`.

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskShape {
    pub layers: usize,
    pub heads: usize,
    pub groups: usize,
}

impl MaskShape {
    pub fn new(layers: usize, heads: usize, groups: usize) -> Result<Self> {
        if layers == 0 || heads == 0 || groups == 0 {
            return Err(Error::Shape("layers, heads and groups must be positive".into()));
        }
        if heads % groups != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide into {groups} KV groups")));
        }
        Ok(Self { layers, heads, groups })
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.groups
    }

    pub fn num_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn num_groups(&self) -> usize {
        self.layers * self.groups
    }

    /// KV group of a head within its layer. Heads are assigned to groups contiguously.
    pub fn group_of_head(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }

    pub fn flat_group(&self, layer: usize, group: usize) -> usize {
        layer * self.groups + group
    }

    /// Inverse of [`MaskShape::flat_group`].
    pub fn split_group(&self, flat: usize) -> (usize, usize) {
        (flat / self.groups, flat % self.groups)
    }

    pub fn layer_groups(&self, layer: usize) -> std::ops::Range<usize> {
        layer * self.groups..(layer + 1) * self.groups
    }

    /// Heads (within the layer) that belong to a group.
    pub fn group_heads(&self, group: usize) -> std::ops::Range<usize> {
        let k = self.heads_per_group();
        group * k..(group + 1) * k
    }
}

/// Per-(layer, group) decision vector used by the search. `true` means SWA.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupVector {
    pub shape: MaskShape,
    pub swa: Vec<bool>,
}

impl GroupVector {
    pub fn all_full(shape: MaskShape) -> Self {
        Self { shape, swa: vec![false; shape.num_groups()] }
    }

    pub fn to_mask(&self) -> HeadMask {
        HeadMask { shape: self.shape, swa: self.swa.clone() }
    }
}

/// Head-level full/SWA assignment. Coupling is enforced by construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct HeadMask {
    shape: MaskShape,
    swa: Vec<bool>,
}

#[derive(Deserialize)]
struct RawMask {
    shape: MaskShape,
    swa: Vec<bool>,
}

impl TryFrom<RawMask> for HeadMask {
    type Error = Error;

    fn try_from(r: RawMask) -> Result<Self> {
        let shape = MaskShape::new(r.shape.layers, r.shape.heads, r.shape.groups)?;
        HeadMask::from_groups(shape, r.swa)
    }
}

impl HeadMask {
    pub fn all_full(shape: MaskShape) -> Self {
        Self { shape, swa: vec![false; shape.num_groups()] }
    }

    pub fn all_swa(shape: MaskShape) -> Self {
        Self { shape, swa: vec![true; shape.num_groups()] }
    }

    pub fn from_groups(shape: MaskShape, swa: Vec<bool>) -> Result<Self> {
        if swa.len() != shape.num_groups() {
            return Err(Error::Shape(format!(
                "group vector has {} entries, expected {}",
                swa.len(),
                shape.num_groups()
            )));
        }
        Ok(Self { shape, swa })
    }

    /// Builds a mask from flat SWA group indices.
    pub fn from_swa_groups(shape: MaskShape, groups: &[usize]) -> Result<Self> {
        let mut swa = vec![false; shape.num_groups()];
        for &g in groups {
            if g >= swa.len() {
                return Err(Error::Shape(format!("group index {g} out of range")));
            }
            swa[g] = true;
        }
        Ok(Self { shape, swa })
    }

    /// Builds a mask from per-head bits (1 = full). Fails if two heads of one
    /// KV group disagree.
    pub fn from_head_bits(shape: MaskShape, bits: &[u8]) -> Result<Self> {
        if bits.len() != shape.num_heads() {
            return Err(Error::Shape(format!(
                "head vector has {} entries, expected {}",
                bits.len(),
                shape.num_heads()
            )));
        }
        let mut swa = vec![false; shape.num_groups()];
        for layer in 0..shape.layers {
            for g in 0..shape.groups {
                let mut vals = shape.group_heads(g).map(|h| bits[layer * shape.heads + h]);
                let first = vals.next().unwrap_or(1);
                if first > 1 || vals.any(|v| v != first) {
                    return Err(Error::Gqa(format!("layer {layer} group {g} mixes full and SWA heads")));
                }
                swa[shape.flat_group(layer, g)] = first == 0;
            }
        }
        Ok(Self { shape, swa })
    }

    pub fn shape(&self) -> MaskShape {
        self.shape
    }

    pub fn group_swa(&self) -> &[bool] {
        &self.swa
    }

    pub fn groups(&self) -> GroupVector {
        GroupVector { shape: self.shape, swa: self.swa.clone() }
    }

    pub fn is_group_swa(&self, layer: usize, group: usize) -> bool {
        self.swa[self.shape.flat_group(layer, group)]
    }

    pub fn is_head_swa(&self, layer: usize, head: usize) -> bool {
        self.is_group_swa(layer, self.shape.group_of_head(head))
    }

    pub fn set_group(&mut self, layer: usize, group: usize, swa: bool) {
        let i = self.shape.flat_group(layer, group);
        self.swa[i] = swa;
    }

    pub fn with_group(&self, layer: usize, group: usize, swa: bool) -> Self {
        let mut m = self.clone();
        m.set_group(layer, group, swa);
        m
    }

    pub fn set_layer(&mut self, layer: usize, swa: bool) {
        for g in self.shape.layer_groups(layer) {
            self.swa[g] = swa;
        }
    }

    /// Expanded head bits, 1 = full attention.
    pub fn head_bits(&self) -> Vec<u8> {
        (0..self.shape.num_heads())
            .map(|i| {
                let (l, h) = (i / self.shape.heads, i % self.shape.heads);
                u8::from(!self.is_head_swa(l, h))
            })
            .collect()
    }

    /// Fraction of heads using SWA.
    pub fn ratio(&self) -> f64 {
        self.num_swa_groups() as f64 / self.swa.len() as f64
    }

    /// SWA ratio restricted to the given flat group indices.
    pub fn ratio_over(&self, groups: &[usize]) -> f64 {
        if groups.is_empty() {
            return 0.0;
        }
        groups.iter().filter(|&&g| self.swa[g]).count() as f64 / groups.len() as f64
    }

    pub fn num_swa_groups(&self) -> usize {
        self.swa.iter().filter(|&&s| s).count()
    }

    pub fn swa_group_indices(&self) -> Vec<usize> {
        (0..self.swa.len()).filter(|&g| self.swa[g]).collect()
    }

    pub fn full_group_indices(&self) -> Vec<usize> {
        (0..self.swa.len()).filter(|&g| !self.swa[g]).collect()
    }

    /// Sorted SWA group indices per layer.
    pub fn swa_lists(&self) -> Vec<Vec<usize>> {
        (0..self.shape.layers)
            .map(|l| (0..self.shape.groups).filter(|&g| self.is_group_swa(l, g)).collect())
            .collect()
    }

    /// Canonical text encoding, e.g. `0:1,3|1:|2:0`.
    pub fn canonical(&self) -> String {
        self.swa_lists()
            .iter()
            .enumerate()
            .map(|(l, gs)| format!("{l}:{}", gs.iter().join(",")))
            .join("|")
    }

    /// Short content hash of the canonical encoding and shape.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}x{}x{}#", self.shape.layers, self.shape.heads, self.shape.groups));
        h.update(self.canonical());
        hex::encode(&h.finalize()[..8])
    }

    /// Total order used to break loss ties deterministically.
    pub fn tie_key(&self) -> &[bool] {
        &self.swa
    }
}

/// Every way to pick `quota` SWA groups out of `free`, in lexicographic order
/// of the chosen index lists.
pub fn enumerate_feasible(free: &[usize], quota: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
    free.iter().copied().combinations(quota)
}

/// Binomial coefficient saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `ceil(x)` that ignores floating noise just above an integer.
pub fn ceil_tol(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> MaskShape {
        MaskShape::new(2, 4, 2).unwrap()
    }

    #[test]
    fn all_full_and_all_swa_ratios() {
        assert_eq!(HeadMask::all_full(shape()).ratio(), 0.0);
        assert_eq!(HeadMask::all_swa(shape()).ratio(), 1.0);
    }

    #[test]
    fn one_group_flip_expands_to_its_heads() {
        let m = HeadMask::all_full(shape()).with_group(0, 1, true);
        assert_eq!(m.ratio(), 0.25);
        assert_eq!(m.head_bits(), vec![1, 1, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn mixed_group_bits_are_rejected() {
        let bits = [1, 0, 1, 1, 1, 1, 1, 1];
        assert!(matches!(HeadMask::from_head_bits(shape(), &bits), Err(Error::Gqa(_))));
    }

    #[test]
    fn head_bits_round_trip() {
        let m = HeadMask::from_swa_groups(shape(), &[1, 2]).unwrap();
        let back = HeadMask::from_head_bits(shape(), &m.head_bits()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.canonical(), "0:1|1:0");
    }

    #[test]
    fn enumeration_counts_and_order() {
        let free: Vec<usize> = (0..4).collect();
        let all: Vec<_> = enumerate_feasible(&free, 2).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[5], vec![2, 3]);
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(50, 25), 126_410_606_437_752);
    }

    #[test]
    fn ceil_tolerates_noise() {
        assert_eq!(ceil_tol(2.0 / 3.0 * 9.0), 6);
        assert_eq!(ceil_tol(0.625 * 4.0), 3);
        assert_eq!(ceil_tol(2.0), 2);
    }
}
