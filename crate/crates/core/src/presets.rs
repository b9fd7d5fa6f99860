//! Ready-made model and calibration configurations.

use crate::calibration::{NiahSpec, VocabLayout};
use crate::model::{ModelSpec, PlantedCircuit};

/// Four layers of eight heads in four KV groups. Layer 0 hosts the
/// previous-token head; six induction heads sit in one, two and three groups
/// of layers 1, 2 and 3.
pub fn standard_toy(seed: u64) -> (ModelSpec, PlantedCircuit) {
    let spec = ModelSpec { layers: 4, heads: 8, kv_groups: 4, head_dim: 34, vocab: 32, max_seq_len: 128, seed };
    let circuit = PlantedCircuit {
        prev_token_heads: vec![[0, 0]],
        induction_heads: vec![[1, 4], [2, 0], [2, 6], [3, 1], [3, 2], [3, 7]],
        ..Default::default()
    };
    (spec, circuit)
}

pub fn standard_calibration(seed: u64, num_examples: usize) -> NiahSpec {
    NiahSpec {
        seq_len: 128,
        num_examples,
        key_len: 2,
        value_len: 1,
        needle_distance: [8, 96],
        vocab: VocabLayout::standard(32),
        distractors: 0,
        seed,
    }
}

/// Two layers, two heads, one head per group: previous-token head in layer 0,
/// induction head in layer 1.
pub fn two_layer_induction(seed: u64) -> (ModelSpec, PlantedCircuit) {
    let spec = ModelSpec { layers: 2, heads: 2, kv_groups: 2, head_dim: 18, vocab: 16, max_seq_len: 64, seed };
    let circuit = PlantedCircuit { prev_token_heads: vec![[0, 0]], induction_heads: vec![[1, 0]], ..Default::default() };
    (spec, circuit)
}
