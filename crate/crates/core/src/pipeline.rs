//! Three-stage hybrid attention search, its ablations, and fixed layer heuristics.
//!
//! Stage 1 localizes layers top-down with a uniform per-layer ratio and
//! records the score after each layer. Stage 2 turns the per-layer score
//! drops into per-layer ratios from a bucket grid that sum to the global
//! head budget. Stage 3 re-solves layers bucket by bucket from a fresh
//! all-full mask, jointly within each bucket.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{ceil_tol, HeadMask, MaskShape};
use crate::objective::{Oracle, Penalty, Scorer};
use crate::optimizer::{solve, split_into_subproblems, SearchConfig, SearchProblem, SearchResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoschConfig {
    pub target_ratio: f64,
    pub kappa: usize,
    pub max_vars: usize,
    pub percentiles: [f64; 2],
    pub buckets: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub search: SearchConfig,
}

impl Default for BoschConfig {
    fn default() -> Self {
        Self {
            target_ratio: 0.5,
            kappa: 100,
            max_vars: 50,
            percentiles: [2.5, 97.5],
            buckets: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 0,
            search: SearchConfig::default(),
        }
    }
}

impl BoschConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!("target ratio {} outside [0, 1]", self.target_ratio)));
        }
        if self.kappa == 0 || self.max_vars == 0 {
            return Err(Error::Config("kappa and max_vars must be positive".into()));
        }
        let [lo, hi] = self.percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!("bad percentiles [{lo}, {hi}]")));
        }
        let b = &self.buckets;
        if b.len() < 2 || b.windows(2).any(|w| w[0] >= w[1]) || b[0] < 0.0 || *b.last().unwrap() > 1.0 {
            return Err(Error::Config("buckets must be strictly increasing within [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stage tag and indices into an independent stream seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubproblemLog {
    pub stage: String,
    pub layers: Vec<usize>,
    pub quota: usize,
    pub budget: usize,
    pub evals_used: usize,
    pub exhaustive: bool,
    pub loss: f64,
    pub score: f64,
    pub trace: Vec<crate::optimizer::TraceEntry>,
    pub problem: SearchProblem,
}

impl SubproblemLog {
    fn from(stage: &str, layers: Vec<usize>, p: &SearchProblem, r: &SearchResult) -> Self {
        Self {
            stage: stage.into(),
            layers,
            quota: p.quota,
            budget: p.budget,
            evals_used: r.evals_used,
            exhaustive: r.exhaustive,
            loss: r.loss,
            score: r.score,
            trace: r.trace.clone(),
            problem: p.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub mask: HeadMask,
    /// Score after committing each layer, indexed by layer.
    pub s_best: Vec<f64>,
    pub s_orig: f64,
    pub logs: Vec<SubproblemLog>,
}

/// Top-down per-layer localization with a uniform ratio.
pub fn stage1<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig) -> Result<Stage1Result> {
    blockwise_stage1(oracle, cfg, 1, "stage1")
}

fn blockwise_stage1<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig, block: usize, tag: &str) -> Result<Stage1Result> {
    cfg.validate()?;
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let shape = oracle.shape();
    let s_orig = oracle.score(&HeadMask::all_full(shape))?;
    let mut mask = HeadMask::all_full(shape);
    let mut s_best = vec![0.0; shape.layers];
    let mut logs = Vec::new();
    let per_layer = ceil_tol(cfg.target_ratio * shape.groups as f64);
    let mut top = shape.layers;
    while top > 0 {
        let bottom = top.saturating_sub(block);
        let layers: Vec<usize> = (bottom..top).collect();
        let groups: Vec<usize> = layers.iter().flat_map(|&l| shape.layer_groups(l)).collect();
        let problem = SearchProblem::over_groups(
            mask.clone(),
            &groups,
            per_layer * layers.len(),
            cfg.kappa * layers.len(),
            Penalty::layers(shape, &layers, cfg.target_ratio),
            derive_seed(cfg.seed, &[1, top as u64 - 1]),
        );
        let r = solve(oracle, &problem, &cfg.search)?;
        mask = r.mask.clone();
        for &l in &layers {
            s_best[l] = r.score;
        }
        logs.push(SubproblemLog::from(tag, layers, &problem, &r));
        top = bottom;
    }
    Ok(Stage1Result { mask, s_best, s_orig, logs })
}

/// Linear-interpolation percentile of unsorted data, `p` in `[0, 100]`.
pub fn percentile(data: &[f64], p: f64) -> f64 {
    let mut x = data.to_vec();
    x.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (pos - lo as f64) * (x[hi] - x[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRatios {
    /// Incremental relative score drop attributed to each layer.
    pub drops: Vec<f64>,
    /// Normalized hardness in `[0, 1]`.
    pub weights: Vec<f64>,
    pub initial_ranks: Vec<usize>,
    pub ranks: Vec<usize>,
    pub ratios: Vec<f64>,
    /// Remaining head gap `rho * N - sum r * H` after reconciliation.
    pub residual: f64,
    pub moves: usize,
}

/// Layers ordered hardest first. Equal weights put deeper layers first, so
/// the shallower of two tied layers counts as easier.
fn hard_order(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(b.cmp(&a)));
    order
}

/// Per-layer ratios from stage-1 scores. Pure in its inputs.
pub fn stage2(s_best: &[f64], s_orig: f64, heads: usize, cfg: &BoschConfig) -> Result<LayerRatios> {
    cfg.validate()?;
    let l_n = s_best.len();
    if l_n == 0 {
        return Err(Error::Config("no layers".into()));
    }
    if !(s_orig > 0.0) {
        return Err(Error::Degenerate(format!("original score {s_orig} is not positive")));
    }
    let delta = |l: usize| if l >= l_n { 0.0 } else { (s_orig - s_best[l]) / s_orig };
    let drops: Vec<f64> = (0..l_n).map(|l| delta(l) - delta(l + 1)).collect();
    let q_lo = percentile(&drops, cfg.percentiles[0]);
    let q_hi = percentile(&drops, cfg.percentiles[1]);
    let weights: Vec<f64> = if q_hi - q_lo > 1e-12 {
        drops.iter().map(|d| (d.clamp(q_lo, q_hi) - q_lo) / (q_hi - q_lo)).collect()
    } else {
        vec![0.0; l_n]
    };
    let hard = hard_order(&weights);
    let easy: Vec<usize> = hard.iter().rev().copied().collect();
    let b = &cfg.buckets;
    let n_b = b.len();
    let mut ranks = vec![0usize; l_n];
    let (base, extra) = (l_n / n_b, l_n % n_b);
    let mut pos = 0;
    for rank in 0..n_b {
        let size = base + usize::from(rank < extra);
        for &l in &hard[pos..pos + size] {
            ranks[l] = rank;
        }
        pos += size;
    }
    let initial_ranks = ranks.clone();
    let h = heads as f64;
    let eps = 1e-9;
    let mut gap = cfg.target_ratio * (l_n * heads) as f64 - ranks.iter().map(|&r| b[r] * h).sum::<f64>();
    let mut moves = 0;
    while gap.abs() > eps {
        let mut moved = false;
        if gap > 0.0 {
            for &l in &easy {
                if ranks[l] + 1 < n_b {
                    let step = h * (b[ranks[l] + 1] - b[ranks[l]]);
                    if step <= gap + eps {
                        ranks[l] += 1;
                        gap -= step;
                        moves += 1;
                        moved = true;
                        if gap.abs() <= eps {
                            break;
                        }
                    }
                }
            }
        } else {
            for &l in &hard {
                if ranks[l] > 0 {
                    let step = h * (b[ranks[l]] - b[ranks[l] - 1]);
                    if step <= -gap + eps {
                        ranks[l] -= 1;
                        gap += step;
                        moves += 1;
                        moved = true;
                        if gap.abs() <= eps {
                            break;
                        }
                    }
                }
            }
        }
        if !moved {
            break;
        }
    }
    if gap.abs() <= eps {
        gap = 0.0;
    }
    let ratios = ranks.iter().map(|&r| b[r]).collect();
    Ok(LayerRatios { drops, weights, initial_ranks, ranks, ratios, residual: gap, moves })
}

/// Bucket-wise joint search from a fresh all-full mask.
pub fn stage3<S: Scorer>(oracle: &Oracle<S>, ratios: &[f64], cfg: &BoschConfig) -> Result<(HeadMask, Vec<SubproblemLog>)> {
    cfg.validate()?;
    let shape = oracle.shape();
    if ratios.len() != shape.layers {
        return Err(Error::Shape(format!("{} ratios for {} layers", ratios.len(), shape.layers)));
    }
    let mut mask = HeadMask::all_full(shape);
    let mut logs = Vec::new();
    let mut levels: Vec<f64> = ratios.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    for (bi, &r) in levels.iter().enumerate() {
        let layers: Vec<usize> = (0..shape.layers).filter(|&l| ratios[l] == r).collect();
        if r >= 1.0 {
            layers.iter().for_each(|&l| mask.set_layer(l, true));
            continue;
        }
        if r <= 0.0 {
            continue;
        }
        let groups: Vec<usize> = layers.iter().flat_map(|&l| shape.layer_groups(l)).collect();
        let quota = layers.len() * ceil_tol(r * shape.groups as f64);
        let budget = cfg.kappa * layers.len();
        let shards = split_into_subproblems(&groups, quota, cfg.max_vars)?;
        let total = groups.len();
        for (si, (gs, q)) in shards.into_iter().enumerate() {
            let problem = SearchProblem::over_groups(
                mask.clone(),
                &gs,
                q,
                (budget * gs.len()).div_ceil(total).max(1),
                Penalty::layers(shape, &layers, r),
                derive_seed(cfg.seed, &[3, bi as u64, si as u64]),
            );
            let res = solve(oracle, &problem, &cfg.search)?;
            mask = res.mask.clone();
            logs.push(SubproblemLog::from("stage3", layers.clone(), &problem, &res));
        }
    }
    Ok((mask, logs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub method: String,
    pub mask: HeadMask,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub s_best: Option<Vec<f64>>,
    pub s_orig: Option<f64>,
    pub stage2: Option<LayerRatios>,
    pub logs: Vec<SubproblemLog>,
    /// Distinct masks scored by the oracle over the whole run, anchors included.
    pub oracle_evals: usize,
}

impl HybridPlan {
    /// A plan with no search metadata.
    pub fn static_plan(method: &str, mask: HeadMask, target: f64) -> Self {
        Self::new(method, mask, target)
    }

    fn new(method: &str, mask: HeadMask, target: f64) -> Self {
        Self {
            method: method.into(),
            achieved_ratio: mask.ratio(),
            mask,
            target_ratio: target,
            s_best: None,
            s_orig: None,
            stage2: None,
            logs: vec![],
            oracle_evals: 0,
        }
    }
}

pub fn bosch<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig) -> Result<HybridPlan> {
    let s1 = stage1(oracle, cfg)?;
    let st2 = stage2(&s1.s_best, s1.s_orig, oracle.shape().heads, cfg)?;
    let (mask, logs3) = stage3(oracle, &st2.ratios, cfg)?;
    let mut plan = HybridPlan::new("bosch", mask, cfg.target_ratio);
    plan.s_best = Some(s1.s_best);
    plan.s_orig = Some(s1.s_orig);
    plan.stage2 = Some(st2);
    plan.logs = s1.logs.into_iter().chain(logs3).collect();
    plan.oracle_evals = oracle.evals();
    Ok(plan)
}

/// Stage 1 alone.
pub fn b_single<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig) -> Result<HybridPlan> {
    let s1 = stage1(oracle, cfg)?;
    let mut plan = HybridPlan::new("b-single", s1.mask, cfg.target_ratio);
    plan.s_best = Some(s1.s_best);
    plan.s_orig = Some(s1.s_orig);
    plan.logs = s1.logs;
    plan.oracle_evals = oracle.evals();
    Ok(plan)
}

/// Stage 1 over blocks of `layers_per_block` consecutive layers solved jointly.
pub fn b_multi<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig, layers_per_block: usize) -> Result<HybridPlan> {
    let s1 = blockwise_stage1(oracle, cfg, layers_per_block, "b-multi")?;
    let mut plan = HybridPlan::new("b-multi", s1.mask, cfg.target_ratio);
    plan.s_best = Some(s1.s_best);
    plan.logs = s1.logs;
    plan.oracle_evals = oracle.evals();
    Ok(plan)
}

/// Whole layers switched to SWA, `ceil(rho * L)` of them, chosen by search.
pub fn b_layer<S: Scorer>(oracle: &Oracle<S>, cfg: &BoschConfig) -> Result<HybridPlan> {
    cfg.validate()?;
    let shape = oracle.shape();
    let quota = ceil_tol(cfg.target_ratio * shape.layers as f64);
    let problem = SearchProblem {
        base: HeadMask::all_full(shape),
        variables: (0..shape.layers).map(|l| shape.layer_groups(l).collect()).collect(),
        quota,
        budget: cfg.kappa * shape.layers,
        penalty: Penalty::global(shape, cfg.target_ratio),
        seed: derive_seed(cfg.seed, &[4]),
    };
    let r = solve(oracle, &problem, &cfg.search)?;
    let mut plan = HybridPlan::new("b-layer", r.mask.clone(), cfg.target_ratio);
    plan.logs = vec![SubproblemLog::from("b-layer", (0..shape.layers).collect(), &problem, &r)];
    plan.oracle_evals = oracle.evals();
    Ok(plan)
}

fn full_layer_count(layers: usize, ratio: f64) -> usize {
    layers - ceil_tol(ratio * layers as f64).min(layers)
}

fn mask_from_full_layers(shape: MaskShape, full: &[usize]) -> HeadMask {
    let mut m = HeadMask::all_swa(shape);
    full.iter().for_each(|&l| m.set_layer(l, false));
    m
}

/// `ceil(rho * L)` layers chosen uniformly at random become SWA.
pub fn rand_layers(shape: MaskShape, ratio: f64, seed: u64) -> HeadMask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5]));
    let mut layers: Vec<usize> = (0..shape.layers).collect();
    layers.shuffle(&mut rng);
    let n_full = full_layer_count(shape.layers, ratio);
    mask_from_full_layers(shape, &layers[..n_full])
}

/// Full-attention layers spread at even intervals starting from the first.
pub fn interleaved(shape: MaskShape, ratio: f64) -> HeadMask {
    let n_full = full_layer_count(shape.layers, ratio);
    let full: Vec<usize> =
        (0..n_full).map(|k| ((k * shape.layers) as f64 / n_full as f64).round() as usize).collect();
    mask_from_full_layers(shape, &full)
}

/// Full-attention layers split between a prefix block, a centred middle
/// block and a suffix block. Remainders go to the prefix, then the suffix.
pub fn begin_middle_end(shape: MaskShape, ratio: f64) -> HeadMask {
    let l_n = shape.layers;
    let n_full = full_layer_count(l_n, ratio);
    let base = n_full / 3;
    let rem = n_full % 3;
    let (pre, mid, suf) = (base + usize::from(rem >= 1), base, base + usize::from(rem >= 2));
    let mut full: Vec<usize> = (0..pre).collect();
    full.extend(l_n - suf..l_n);
    let start = (l_n - mid) / 2;
    full.extend(start..start + mid);
    full.sort();
    full.dedup();
    let mut next = 0;
    while full.len() < n_full {
        if !full.contains(&next) {
            full.push(next);
        }
        next += 1;
    }
    full.sort();
    mask_from_full_layers(shape, &full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_layers(m: &HeadMask) -> Vec<usize> {
        (0..m.shape().layers).filter(|&l| !m.is_group_swa(l, 0)).collect()
    }

    #[test]
    fn interleaved_eight_layers() {
        let s = MaskShape::new(8, 4, 2).unwrap();
        assert_eq!(full_layers(&interleaved(s, 0.5)), vec![0, 2, 4, 6]);
    }

    #[test]
    fn begin_middle_end_nine_layers() {
        let s = MaskShape::new(9, 4, 2).unwrap();
        assert_eq!(full_layers(&begin_middle_end(s, 2.0 / 3.0)), vec![0, 4, 8]);
    }

    #[test]
    fn rand_layers_counts() {
        let s = MaskShape::new(10, 4, 2).unwrap();
        let m = rand_layers(s, 0.7, 3);
        assert_eq!(full_layers(&m).len(), 3);
        assert_eq!(m, rand_layers(s, 0.7, 3));
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let x = [0.0, 0.0, 0.14, 0.28];
        assert!((percentile(&x, 97.5) - (0.14 + 0.925 * 0.14)).abs() < 1e-12);
        assert!((percentile(&x, 2.5)).abs() < 1e-12);
        assert_eq!(percentile(&[3.0], 50.0), 3.0);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[1, 1]));
        assert_ne!(derive_seed(1, &[3, 0, 0]), derive_seed(2, &[3, 0, 0]));
    }

    fn ramp_scores() -> Vec<f64> {
        // per-layer drops 0.01, 0.02, .., 0.08: deeper layers are harder
        let d: Vec<f64> = (1..=8).map(|k| 0.01 * k as f64).collect();
        (0..8).map(|l| 1.0 - d[l..].iter().sum::<f64>()).collect()
    }

    #[test]
    fn stage2_ramp_hand_trace() {
        let cfg = BoschConfig::default();
        let r = stage2(&ramp_scores(), 1.0, 8, &cfg).unwrap();
        assert_eq!(r.initial_ranks, vec![4, 3, 2, 2, 1, 1, 0, 0]);
        assert_eq!(r.ranks, vec![4, 4, 3, 3, 1, 1, 0, 0]);
        assert_eq!(r.ratios, vec![1.0, 1.0, 0.75, 0.75, 0.25, 0.25, 0.0, 0.0]);
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.moves, 3);
        assert!((r.ratios.iter().sum::<f64>() * 8.0 - 32.0).abs() < 1e-12);
    }

    #[test]
    fn stage2_equal_drops_need_no_moves() {
        let cfg = BoschConfig::default();
        let s: Vec<f64> = (0..5).map(|l| 1.0 - 0.05 * (5 - l) as f64).collect();
        let r = stage2(&s, 1.0, 4, &cfg).unwrap();
        assert!(r.weights.iter().all(|&w| w == 0.0));
        assert_eq!(r.initial_ranks, vec![4, 3, 2, 1, 0]);
        assert_eq!((r.moves, r.residual), (0, 0.0));
    }

    #[test]
    fn stage2_rejects_zero_original_score() {
        assert!(stage2(&[0.0; 4], 0.0, 4, &BoschConfig::default()).is_err());
    }

    #[test]
    fn stage2_off_grid_budget_reports_residual() {
        let cfg = BoschConfig { target_ratio: 0.3, ..Default::default() };
        let r = stage2(&ramp_scores(), 1.0, 8, &cfg).unwrap();
        assert!(r.residual.abs() > 0.0 && r.residual.abs() < 8.0 * 0.25);
    }
}
