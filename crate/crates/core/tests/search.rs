use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use swa_hybrid::calibration::{generate, Split};
use swa_hybrid::objective::{LossParams, ModelScorer, Oracle, Scorer};
use swa_hybrid::optimizer::{solve, swap_search, SearchConfig, SearchProblem};
use swa_hybrid::pipeline::{bosch, stage3, BoschConfig, SubproblemLog};
use swa_hybrid::presets::{standard_calibration, two_layer_induction};
use swa_hybrid::{HeadMask, MaskShape, ToyModel};

/// Pseudo-random score per mask, quantized to sixteenths so that ties occur.
fn hashed_scorer(shape: MaskShape, salt: u64) -> (MaskShape, impl Fn(&HeadMask) -> f64 + Sync) {
    (shape, move |m: &HeadMask| {
        let d = Sha256::digest(format!("{salt}/{}", m.canonical()));
        let base = f64::from(d[0] % 17) / 16.0;
        (base * (1.0 - 0.5 * m.ratio())).max(0.0)
    })
}

/// Independent enumeration of every quota-feasible assignment.
fn exhaustive_min<S: Scorer>(oracle: &Oracle<S>, p: &SearchProblem) -> f64 {
    fn rec<S: Scorer>(o: &Oracle<S>, p: &SearchProblem, i: usize, left: usize, cur: &mut Vec<bool>, best: &mut f64) {
        if cur.len() == p.variables.len() {
            if left == 0 {
                *best = best.min(o.restricted_loss(&p.assemble(cur), &p.penalty).unwrap());
            }
            return;
        }
        if p.variables.len() - i < left {
            return;
        }
        for on in [false, true] {
            if on && left == 0 {
                continue;
            }
            cur.push(on);
            rec(o, p, i + 1, left - usize::from(on), cur, best);
            cur.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(oracle, p, 0, p.quota, &mut Vec::new(), &mut best);
    best
}

fn check_exhaustive_logs<S: Scorer>(oracle: &Oracle<S>, logs: &[SubproblemLog]) -> (usize, usize) {
    let (mut s1, mut s3) = (0, 0);
    for log in logs.iter().filter(|l| l.exhaustive) {
        assert_eq!(log.loss, exhaustive_min(oracle, &log.problem), "{} over layers {:?}", log.stage, log.layers);
        match log.stage.as_str() {
            "stage1" => s1 += 1,
            "stage3" => s3 += 1,
            _ => {}
        }
    }
    (s1, s3)
}

#[test]
fn enumerated_subproblems_hit_the_exhaustive_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut s1, mut s3) = (0, 0);
    for inst in 0..24u64 {
        let layers = rng.random_range(2..=4);
        let groups = [2, 4][rng.random_range(0..2)];
        let shape = MaskShape::new(layers, groups * 2, groups).unwrap();
        let rho = f64::from(rng.random_range(1..=3u32)) / 4.0;
        let params = LossParams { target_ratio: rho, ..Default::default() };
        let oracle = match Oracle::new(hashed_scorer(shape, inst), params, None) {
            Ok(o) => o,
            Err(_) => continue,
        };
        let cfg = BoschConfig { target_ratio: rho, kappa: 40, seed: inst, ..Default::default() };
        let plan = match bosch(&oracle, &cfg) {
            Ok(p) => p,
            Err(e) => panic!("instance {inst}: {e}"),
        };
        let (a, b) = check_exhaustive_logs(&oracle, &plan.logs);
        s1 += a;
        s3 += b;
    }
    assert!(s1 >= 20, "only {s1} exhaustive stage-1 subproblems");
    assert!(s3 >= 5, "only {s3} exhaustive stage-3 buckets");
}

#[test]
fn two_layer_bucket_is_solved_exactly() {
    let shape = MaskShape::new(2, 4, 4).unwrap();
    let oracle = Oracle::new(hashed_scorer(shape, 7), LossParams { target_ratio: 0.25, ..Default::default() }, None).unwrap();
    let cfg = BoschConfig { target_ratio: 0.25, ..Default::default() };
    let (mask, logs) = stage3(&oracle, &[0.25, 0.25], &cfg).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].problem.variables.len(), 8);
    assert_eq!(logs[0].quota, 2);
    assert!(logs[0].exhaustive);
    assert_eq!(logs[0].evals_used, 28);
    assert_eq!(mask.num_swa_groups(), 2);
    check_exhaustive_logs(&oracle, &logs);
}

#[test]
fn stage3_trivial_ratios_need_no_evaluations() {
    let shape = MaskShape::new(3, 4, 2).unwrap();
    let oracle = Oracle::new(hashed_scorer(shape, 1), LossParams::default(), None).unwrap();
    let before = oracle.evals();
    let cfg = BoschConfig::default();
    assert_eq!(stage3(&oracle, &[0.0; 3], &cfg).unwrap().0, HeadMask::all_full(shape));
    assert_eq!(stage3(&oracle, &[1.0; 3], &cfg).unwrap().0, HeadMask::all_swa(shape));
    assert_eq!(oracle.evals(), before);
}

#[test]
fn planted_two_layer_instance_matches_enumeration() {
    let (spec, c) = two_layer_induction(3);
    let m = ToyModel::build(&spec, Some(&c)).unwrap();
    let mut ns = standard_calibration(3, 16);
    ns.seq_len = 64;
    ns.needle_distance = [8, 48];
    ns.vocab = swa_hybrid::calibration::VocabLayout::standard(16);
    let set = generate(&ns, 16, Split::Calibration).unwrap();
    let oracle = Oracle::new(ModelScorer { model: &m, set: &set, window: 8 }, LossParams::default(), None).unwrap();
    let plan = bosch(&oracle, &BoschConfig::default()).unwrap();
    let (s1, _) = check_exhaustive_logs(&oracle, &plan.logs);
    assert_eq!(s1, 2);
    assert!(!plan.mask.group_swa()[2], "induction group converted to SWA");
}

#[test]
fn resumed_search_equals_uninterrupted_search() {
    let shape = MaskShape::new(3, 8, 8).unwrap();
    let oracle = Oracle::new(hashed_scorer(shape, 99), LossParams::default(), None).unwrap();
    let problem = |budget| {
        SearchProblem::over_groups(
            HeadMask::all_full(shape),
            &(0..24).collect::<Vec<_>>(),
            12,
            budget,
            swa_hybrid::objective::Penalty::global(shape, 0.5),
            5,
        )
    };
    let cfg = SearchConfig::default();
    let straight = swap_search(&oracle, &problem(120), &cfg, None).unwrap();
    let first = swap_search(&oracle, &problem(50), &cfg, None).unwrap();
    assert_eq!(first.evals_used, 50);
    let cp = first.checkpoint.clone().unwrap();
    let json = serde_json::to_string(&cp).unwrap();
    let cp = serde_json::from_str(&json).unwrap();
    let resumed = swap_search(&oracle, &problem(120), &cfg, Some(cp)).unwrap();
    assert_eq!(resumed.assignment, straight.assignment);
    assert_eq!(resumed.loss, straight.loss);
    assert_eq!(resumed.trace, straight.trace);
    assert_eq!(resumed.evals_used, straight.evals_used);
}

#[test]
fn search_is_seed_deterministic_and_within_budget() {
    let shape = MaskShape::new(4, 4, 4).unwrap();
    let mut counts = HashMap::new();
    for run in 0..2 {
        let oracle = Oracle::new(hashed_scorer(shape, 3), LossParams::default(), None).unwrap();
        let p = SearchProblem::over_groups(
            HeadMask::all_full(shape),
            &(0..16).collect::<Vec<_>>(),
            8,
            60,
            swa_hybrid::objective::Penalty::global(shape, 0.5),
            17,
        );
        let r = solve(&oracle, &p, &SearchConfig::default()).unwrap();
        assert!(r.evals_used <= 60);
        assert_eq!(r.mask.num_swa_groups(), 8);
        counts.insert(run, (r.assignment, r.trace));
    }
    assert_eq!(counts[&0], counts[&1]);
}
