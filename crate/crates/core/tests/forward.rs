use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swa_hybrid::model::{Capture, Intervention};
use swa_hybrid::presets::standard_toy;
use swa_hybrid::{HeadMask, MaskShape, ModelSpec, ToyModel};

fn small_spec(seed: u64) -> ModelSpec {
    ModelSpec { layers: 3, heads: 4, kv_groups: 2, head_dim: 14, vocab: 12, max_seq_len: 32, seed }
}

fn random_mask(shape: MaskShape, rng: &mut ChaCha8Rng) -> HeadMask {
    HeadMask::from_groups(shape, (0..shape.num_groups()).map(|_| rng.random_bool(0.5)).collect()).unwrap()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn partitioned_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..4 {
        let m = ToyModel::build_random(&small_spec(seed)).unwrap();
        for _ in 0..10 {
            let mask = random_mask(m.shape(), &mut rng);
            let tokens: Vec<usize> = (0..rng.random_range(1..=32)).map(|_| rng.random_range(0..12)).collect();
            let w = rng.random_range(1..10);
            let fast = m.forward(&mask, &tokens, w, Capture::default()).unwrap().logits;
            let slow = m.forward_reference(&mask, &tokens, w).unwrap();
            assert!(max_abs_diff(&fast, &slow) <= 1e-9);
        }
    }
}

#[test]
fn planted_forward_matches_reference() {
    let (spec, c) = standard_toy(2);
    let m = ToyModel::build(&spec, Some(&c)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mask = random_mask(m.shape(), &mut rng);
        let tokens: Vec<usize> = (0..128).map(|_| rng.random_range(0..32)).collect();
        let fast = m.forward(&mask, &tokens, 16, Capture::default()).unwrap().logits;
        let slow = m.forward_reference(&mask, &tokens, 16).unwrap();
        assert!(max_abs_diff(&fast, &slow) <= 1e-9);
    }
}

#[test]
fn restricted_rows_match_full_forward() {
    let (spec, c) = standard_toy(4);
    let m = ToyModel::build(&spec, Some(&c)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mask = random_mask(m.shape(), &mut rng);
    let tokens: Vec<usize> = (0..100).map(|_| rng.random_range(0..32)).collect();
    let full = m.forward(&mask, &tokens, 16, Capture::default()).unwrap().logits;
    let rows = [99, 3, 57];
    let part = m.logits_at(&mask, &tokens, 16, &rows).unwrap();
    for (r, z) in rows.iter().zip(&part) {
        assert!(max_abs_diff(&[full[*r].clone()], &[z.clone()]) <= 1e-12);
    }
}

#[test]
fn wide_window_equals_full_attention() {
    let (spec, c) = standard_toy(7);
    let m = ToyModel::build(&spec, Some(&c)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<usize> = (0..96).map(|_| rng.random_range(0..32)).collect();
    let full = m.forward(&HeadMask::all_full(m.shape()), &tokens, 96, Capture::default()).unwrap().logits;
    for _ in 0..20 {
        let mask = random_mask(m.shape(), &mut rng);
        let w = rng.random_range(96..200);
        let z = m.forward(&mask, &tokens, w, Capture::default()).unwrap().logits;
        assert!(max_abs_diff(&z, &full) <= 1e-5);
    }
}

#[test]
fn swa_rows_ignore_keys_outside_the_window() {
    let (spec, c) = standard_toy(3);
    let m = ToyModel::build(&spec, Some(&c)).unwrap();
    let mask = HeadMask::all_swa(m.shape());
    let fw = m.forward(&mask, &[5; 40], 4, Capture { attention: true, qk: false }).unwrap();
    let att = fw.attention.unwrap();
    for t in 0..40usize {
        let inside: f64 = (t.saturating_sub(3)..=t).map(|j| att.get(2, 1, t, j)).sum();
        assert!((inside - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let eps = 1e-4;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let m = ToyModel::build_random(&small_spec(100 + seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(m.shape(), &mut rng);
        let window = 6;
        let tokens: Vec<usize> = (0..24).map(|_| rng.random_range(0..12)).collect();
        let answers: Vec<(usize, usize)> = [9, 17, 23].iter().map(|&p| (p, rng.random_range(0..12))).collect();
        let g = m.attention_grads(&mask, &tokens, window, &answers).unwrap();
        let base = m.loss(&mask, &tokens, window, &answers, None).unwrap();
        assert!((base - g.loss).abs() < 1e-12);
        let shape = m.shape();
        for _ in 0..20 {
            let layer = rng.random_range(0..shape.layers);
            let head = rng.random_range(0..shape.heads);
            let query: usize = rng.random_range(0..=23);
            let lo = if mask.is_head_swa(layer, head) { (query + 1).saturating_sub(window) } else { 0 };
            let key = rng.random_range(lo..=query);
            let at = |delta: f64| {
                let iv = Intervention { layer, head, query, key, delta };
                m.loss(&mask, &tokens, window, &answers, Some(iv)).unwrap()
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            let an = g.grads.get(layer, head, query, key);
            let rel = (an - fd).abs() / fd.abs().max(1e-6);
            worst = worst.max(rel);
            assert!(rel <= 1e-3, "entry ({layer},{head},{query},{key}): analytic {an}, numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 100);
    eprintln!("worst relative gradient error {worst:.2e}");
}
