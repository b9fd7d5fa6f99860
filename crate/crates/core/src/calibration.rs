//! Needle-in-a-haystack calibration data and the retrieval score.
//!
//! Each sequence is `BOS filler.. [K1..Kk V1..Vm] filler.. MARKER K1..Kk V1..V(m-1)`.
//! The model must predict `V1..Vm` at the last `m` positions. The needle
//! distance is the lag from the first answer position back to `V1`, which is
//! exactly how far a retrieval head has to look.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::HeadMask;
use crate::model::ToyModel;

/// Half-open token id ranges for each role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub bos: usize,
    pub marker: usize,
    pub filler: [usize; 2],
    pub keys: [usize; 2],
    pub values: [usize; 2],
}

impl VocabLayout {
    /// BOS = 0, marker = 1, then fillers, keys and values in roughly 1:1.2:0.8 proportion.
    pub fn standard(vocab: usize) -> Self {
        let rest = vocab.saturating_sub(2);
        let n_fill = (rest * 10).div_ceil(30).max(1);
        let n_val = (rest * 8 / 30).max(1);
        let f0 = 2;
        let k0 = f0 + n_fill;
        let v0 = vocab - n_val;
        Self { bos: 0, marker: 1, filler: [f0, k0], keys: [k0, v0], values: [v0, vocab] }
    }

    fn range(r: [usize; 2]) -> std::ops::Range<usize> {
        r[0]..r[1]
    }

    pub fn filler_tokens(&self) -> Vec<usize> {
        Self::range(self.filler).collect()
    }

    pub fn key_tokens(&self) -> Vec<usize> {
        Self::range(self.keys).collect()
    }

    pub fn value_tokens(&self) -> Vec<usize> {
        Self::range(self.values).collect()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let ranges = [[self.bos, self.bos + 1], [self.marker, self.marker + 1], self.filler, self.keys, self.values];
        for r in &ranges {
            if r[0] >= r[1] || r[1] > vocab {
                return Err(Error::Config(format!("token range {r:?} empty or outside vocabulary {vocab}")));
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a[0] < b[1] && b[0] < a[1] {
                    return Err(Error::Config(format!("token ranges {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiahSpec {
    pub seq_len: usize,
    pub num_examples: usize,
    pub key_len: usize,
    pub value_len: usize,
    /// Inclusive range of needle distances.
    pub needle_distance: [usize; 2],
    pub vocab: VocabLayout,
    /// Extra needles with different keys placed in the haystack.
    #[serde(default)]
    pub distractors: usize,
    pub seed: u64,
}

/// Which seed stream a set is drawn from. Calibration and evaluation never share examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Calibration,
    Evaluation,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Calibration => 0x6361_6c69,
            Split::Evaluation => 0x6576_616c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `(position, expected token)` pairs.
    pub answers: Vec<(usize, usize)>,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub spec: NiahSpec,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl NiahSpec {
    pub fn max_distance(&self) -> usize {
        self.seq_len.saturating_sub(self.value_len + self.key_len + 1)
    }

    pub fn min_distance(&self) -> usize {
        self.key_len + self.value_len
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        self.vocab.validate(vocab)?;
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::Config("key_len and value_len must be positive".into()));
        }
        if self.num_examples == 0 {
            return Err(Error::Config("num_examples must be positive".into()));
        }
        let [lo, hi] = self.needle_distance;
        if lo > hi || lo < self.min_distance() || hi > self.max_distance() {
            return Err(Error::Config(format!(
                "needle distance range [{lo}, {hi}] infeasible; allowed [{}, {}] for seq_len {}",
                self.min_distance(),
                self.max_distance(),
                self.seq_len
            )));
        }
        if self.vocab.key_tokens().len() < self.key_len.max(2) {
            return Err(Error::Config("key alphabet too small for distinct keys".into()));
        }
        if self.vocab.value_tokens().len() < self.value_len {
            return Err(Error::Config("value alphabet smaller than value_len".into()));
        }
        Ok(())
    }
}

/// Draws a calibration or evaluation set. Pure in `(spec, split)`.
pub fn generate(spec: &NiahSpec, vocab: usize, split: Split) -> Result<CalibrationSet> {
    spec.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let examples = (0..spec.num_examples).map(|_| draw_example(spec, &mut rng)).collect();
    Ok(CalibrationSet { spec: spec.clone(), split, examples })
}

fn draw_example(spec: &NiahSpec, rng: &mut ChaCha8Rng) -> Example {
    let s = spec.seq_len;
    let (kl, vl) = (spec.key_len, spec.value_len);
    let fillers = spec.vocab.filler_tokens();
    let mut key_pool = spec.vocab.key_tokens();
    let mut val_pool = spec.vocab.value_tokens();
    let mut tokens: Vec<usize> = (0..s).map(|_| *fillers.choose(rng).expect("non-empty")).collect();
    tokens[0] = spec.vocab.bos;
    key_pool.shuffle(rng);
    val_pool.shuffle(rng);
    let keys = key_pool[..kl].to_vec();
    let values = val_pool[..vl].to_vec();
    let distance = rng.random_range(spec.needle_distance[0]..=spec.needle_distance[1]);

    let q_start = s - kl - vl;
    let a0 = s - vl;
    let v1 = a0 - distance;
    let n_start = v1 - kl;
    let mut used = vec![false; s];
    for (i, &t) in keys.iter().chain(&values).enumerate() {
        tokens[n_start + i] = t;
        used[n_start + i] = true;
    }
    tokens[q_start] = spec.vocab.marker;
    for (i, &t) in keys.iter().chain(&values[..vl - 1]).enumerate() {
        tokens[q_start + 1 + i] = t;
    }
    used[q_start..].iter_mut().for_each(|u| *u = true);
    used[0] = true;

    let span = kl + vl;
    for _ in 0..spec.distractors {
        let mut dkeys: Vec<usize> = spec.vocab.key_tokens().into_iter().filter(|&k| k != keys[kl - 1]).collect();
        dkeys.shuffle(rng);
        let dvals: Vec<usize> = (0..vl).map(|_| *val_pool.choose(rng).expect("non-empty")).collect();
        for _attempt in 0..64 {
            let p = rng.random_range(1..=q_start - span);
            if used[p..p + span].iter().all(|u| !u) {
                for (i, &t) in dkeys[..kl].iter().chain(&dvals).enumerate() {
                    tokens[p + i] = t;
                    used[p + i] = true;
                }
                break;
            }
        }
    }
    let answers = values.iter().enumerate().map(|(i, &v)| (a0 + i, v)).collect();
    Example { tokens, answers, distance }
}

/// Whether the model predicts every answer token of the example.
pub fn example_correct(model: &ToyModel, mask: &HeadMask, ex: &Example, window: usize) -> Result<bool> {
    let rows: Vec<usize> = ex.answers.iter().map(|a| a.0).collect();
    let pred = model.predict(mask, &ex.tokens, window, &rows)?;
    Ok(pred.iter().zip(&ex.answers).all(|(p, a)| *p == a.1))
}

/// Mean exact-match retrieval accuracy.
pub fn score(model: &ToyModel, mask: &HeadMask, set: &CalibrationSet, window: usize) -> Result<f64> {
    if set.examples.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let hits: Vec<bool> = set
        .examples
        .par_iter()
        .map(|ex| example_correct(model, mask, ex, window))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    /// Score with every head on SWA.
    pub a: f64,
    /// `(1 + gamma)` times the all-full score.
    pub b: f64,
    pub full_score: f64,
}

impl Anchors {
    pub fn new(all_swa: f64, all_full: f64, gamma: f64) -> Result<Self> {
        let b = (1.0 + gamma) * all_full;
        if !(b > all_swa) {
            return Err(Error::DegenerateAnchors { a: all_swa, b });
        }
        Ok(Self { a: all_swa, b, full_score: all_full })
    }
}

pub fn anchors(model: &ToyModel, set: &CalibrationSet, window: usize, gamma: f64) -> Result<Anchors> {
    let shape = model.shape();
    let a = score(model, &HeadMask::all_swa(shape), set, window)?;
    let f = score(model, &HeadMask::all_full(shape), set, window)?;
    Anchors::new(a, f, gamma)
}
