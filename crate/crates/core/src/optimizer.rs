//! Cardinality-constrained binary search over KV-group assignments.
//!
//! A problem fixes a base mask and a list of free variables. Each variable
//! toggles one or more groups together (a single group, or a whole layer for
//! the layer-level ablation). Exactly `quota` variables are switched to SWA.
//! Small problems are enumerated; larger ones use a seeded swap search.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{binomial, enumerate_feasible, HeadMask};
use crate::objective::{Oracle, Penalty, Scorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchProblem {
    /// Values of every group outside the free variables.
    pub base: HeadMask,
    /// Each entry lists the flat groups one variable controls.
    pub variables: Vec<Vec<usize>>,
    pub quota: usize,
    pub budget: usize,
    pub penalty: Penalty,
    pub seed: u64,
}

impl SearchProblem {
    /// One variable per group.
    pub fn over_groups(base: HeadMask, groups: &[usize], quota: usize, budget: usize, penalty: Penalty, seed: u64) -> Self {
        Self { base, variables: groups.iter().map(|&g| vec![g]).collect(), quota, budget, penalty, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quota > self.variables.len() {
            return Err(Error::Infeasible(format!(
                "quota {} exceeds {} free variables",
                self.quota,
                self.variables.len()
            )));
        }
        if self.budget == 0 {
            return Err(Error::Infeasible("budget must be positive".into()));
        }
        let n = self.base.shape().num_groups();
        let mut seen = HashSet::new();
        for g in self.variables.iter().flatten() {
            if *g >= n || !seen.insert(*g) {
                return Err(Error::Infeasible(format!("group {g} out of range or shared between variables")));
            }
        }
        Ok(())
    }

    /// Mask with exactly the chosen variables on SWA and the others full.
    pub fn assemble(&self, swa: &[bool]) -> HeadMask {
        let mut m = self.base.clone();
        for (vars, &on) in self.variables.iter().zip(swa) {
            for &g in vars {
                let (l, gi) = m.shape().split_group(g);
                m.set_group(l, gi, on);
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Consecutive non-improving evaluations before a random restart.
    /// `None` means `max(10, number of variables)`.
    pub stall_patience: Option<usize>,
    /// Cap on proposals (cache hits included) as a multiple of the budget.
    pub proposal_factor: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { stall_patience: None, proposal_factor: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub hash: String,
    pub loss: f64,
    pub accepted: bool,
}

/// Everything needed to continue a swap search where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub rng: ChaCha8Rng,
    pub incumbent: Vec<bool>,
    pub incumbent_loss: f64,
    pub best: Vec<bool>,
    pub best_loss: f64,
    pub stall: usize,
    pub proposals: usize,
    pub seen: Vec<Vec<bool>>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub mask: HeadMask,
    pub assignment: Vec<bool>,
    pub loss: f64,
    pub score: f64,
    /// Distinct masks evaluated by this search.
    pub evals_used: usize,
    pub exhaustive: bool,
    pub trace: Vec<TraceEntry>,
    pub checkpoint: Option<Checkpoint>,
}

/// `(loss, tie key)` comparison: strictly better, or equal loss with a smaller canonical key.
fn better(loss: f64, mask: &HeadMask, best_loss: f64, best: &HeadMask) -> bool {
    loss < best_loss || (loss == best_loss && mask.tie_key() < best.tie_key())
}

struct Evaluator<'a, S: Scorer> {
    oracle: &'a Oracle<S>,
    problem: &'a SearchProblem,
    seen: HashSet<Vec<bool>>,
    trace: Vec<TraceEntry>,
}

impl<S: Scorer> Evaluator<'_, S> {
    fn budget_left(&self) -> bool {
        self.seen.len() < self.problem.budget
    }

    fn would_cost(&self, mask: &HeadMask) -> bool {
        !self.seen.contains(mask.group_swa())
    }

    fn eval(&mut self, mask: &HeadMask) -> Result<f64> {
        let loss = self.oracle.restricted_loss(mask, &self.problem.penalty)?;
        self.seen.insert(mask.group_swa().to_vec());
        Ok(loss)
    }

    fn record(&mut self, mask: &HeadMask, loss: f64, accepted: bool) {
        let index = self.trace.len();
        self.trace.push(TraceEntry { index, hash: mask.hash(), loss, accepted });
    }
}

/// Enumerates every quota-feasible assignment when that fits the budget,
/// otherwise runs the swap search.
pub fn solve<S: Scorer>(oracle: &Oracle<S>, problem: &SearchProblem, cfg: &SearchConfig) -> Result<SearchResult> {
    problem.validate()?;
    if binomial(problem.variables.len(), problem.quota) <= problem.budget as u128 {
        brute_force(oracle, problem)
    } else {
        swap_search(oracle, problem, cfg, None)
    }
}

pub fn brute_force<S: Scorer>(oracle: &Oracle<S>, problem: &SearchProblem) -> Result<SearchResult> {
    problem.validate()?;
    let n = problem.variables.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut ev = Evaluator { oracle, problem, seen: HashSet::new(), trace: Vec::new() };
    let mut best: Option<(f64, HeadMask, Vec<bool>)> = None;
    for chosen in enumerate_feasible(&idx, problem.quota) {
        let mut swa = vec![false; n];
        chosen.iter().for_each(|&i| swa[i] = true);
        let mask = problem.assemble(&swa);
        let loss = ev.eval(&mask)?;
        let accept = best.as_ref().is_none_or(|(bl, bm, _)| better(loss, &mask, *bl, bm));
        ev.record(&mask, loss, accept);
        if accept {
            best = Some((loss, mask, swa));
        }
    }
    let (loss, mask, assignment) = best.ok_or_else(|| Error::Infeasible("no feasible assignment".into()))?;
    let score = oracle.score(&mask)?;
    Ok(SearchResult {
        mask,
        assignment,
        loss,
        score,
        evals_used: ev.seen.len(),
        exhaustive: true,
        trace: ev.trace,
        checkpoint: None,
    })
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize, quota: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut swa = vec![false; n];
    idx[..quota].iter().for_each(|&i| swa[i] = true);
    swa
}

/// (1+1) swap search: keeps the SWA count fixed, accepts non-worsening swaps
/// and restarts from a fresh random assignment after a stall. Starts from a
/// greedy assignment built from single-variable losses and from a random one.
pub fn swap_search<S: Scorer>(
    oracle: &Oracle<S>,
    problem: &SearchProblem,
    cfg: &SearchConfig,
    resume: Option<Checkpoint>,
) -> Result<SearchResult> {
    problem.validate()?;
    let n = problem.variables.len();
    let quota = problem.quota;
    let patience = cfg.stall_patience.unwrap_or(n.max(10));
    let max_proposals = problem.budget.saturating_mul(cfg.proposal_factor.max(1));
    let mut ev = Evaluator { oracle, problem, seen: HashSet::new(), trace: Vec::new() };

    let mut state = match resume {
        Some(cp) => {
            ev.seen = cp.seen.iter().cloned().collect();
            ev.trace = cp.trace.clone();
            cp
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
            let mut starts = Vec::new();
            // The sweep leaves room for both starting points.
            if quota > 0 && quota < n && n + 2 <= problem.budget {
                let mut single = Vec::with_capacity(n);
                for i in 0..n {
                    let mut swa = vec![false; n];
                    swa[i] = true;
                    let mask = problem.assemble(&swa);
                    let loss = ev.eval(&mask)?;
                    ev.record(&mask, loss, false);
                    single.push((loss, i));
                    if quota == 1 {
                        starts.push(swa);
                    }
                }
                {
                    single.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let mut greedy = vec![false; n];
                    single[..quota].iter().for_each(|&(_, i)| greedy[i] = true);
                    starts.push(greedy);
                }
            }
            starts.push(random_assignment(&mut rng, n, quota));
            let mut inc: Option<(f64, HeadMask, Vec<bool>)> = None;
            for swa in starts {
                let mask = problem.assemble(&swa);
                if ev.would_cost(&mask) && !ev.budget_left() && inc.is_some() {
                    break;
                }
                let loss = ev.eval(&mask)?;
                let accept = inc.as_ref().is_none_or(|(bl, bm, _)| better(loss, &mask, *bl, bm));
                ev.record(&mask, loss, accept);
                if accept {
                    inc = Some((loss, mask, swa));
                }
            }
            let (loss, _, swa) = inc.expect("at least one start");
            Checkpoint {
                rng,
                incumbent: swa.clone(),
                incumbent_loss: loss,
                best: swa,
                best_loss: loss,
                stall: 0,
                proposals: 0,
                seen: vec![],
                trace: vec![],
            }
        }
    };

    let movable = quota > 0 && quota < n;
    while movable && ev.budget_left() && state.proposals < max_proposals {
        if state.stall >= patience {
            let fresh = random_assignment(&mut state.rng, n, quota);
            let mask = problem.assemble(&fresh);
            let loss = ev.eval(&mask)?;
            ev.record(&mask, loss, true);
            if better(loss, &mask, state.best_loss, &problem.assemble(&state.best)) {
                state.best = fresh.clone();
                state.best_loss = loss;
            }
            state.incumbent = fresh;
            state.incumbent_loss = loss;
            state.stall = 0;
            continue;
        }
        state.proposals += 1;
        let on: Vec<usize> = (0..n).filter(|&i| state.incumbent[i]).collect();
        let off: Vec<usize> = (0..n).filter(|&i| !state.incumbent[i]).collect();
        let i = on[state.rng.random_range(0..on.len())];
        let j = off[state.rng.random_range(0..off.len())];
        let mut cand = state.incumbent.clone();
        cand.swap(i, j);
        let mask = problem.assemble(&cand);
        let loss = ev.eval(&mask)?;
        let accepted = loss <= state.incumbent_loss;
        ev.record(&mask, loss, accepted);
        if accepted {
            state.incumbent = cand.clone();
            state.incumbent_loss = loss;
        }
        let best_mask = problem.assemble(&state.best);
        if loss < state.best_loss {
            state.best = cand;
            state.best_loss = loss;
            state.stall = 0;
        } else {
            if better(loss, &mask, state.best_loss, &best_mask) {
                state.best = cand;
            }
            state.stall += 1;
        }
    }

    let mask = problem.assemble(&state.best);
    let score = oracle.score(&mask)?;
    let mut seen: Vec<Vec<bool>> = ev.seen.iter().cloned().collect();
    seen.sort();
    state.seen = seen;
    state.trace = ev.trace.clone();
    Ok(SearchResult {
        assignment: state.best.clone(),
        mask,
        loss: state.best_loss,
        score,
        evals_used: ev.seen.len(),
        exhaustive: false,
        trace: ev.trace,
        checkpoint: Some(state),
    })
}

/// Splits variables into contiguous shards of near-equal size, none larger
/// than `max_vars`, and spreads the quota by largest remainder.
pub fn split_into_subproblems<T: Clone>(vars: &[T], quota: usize, max_vars: usize) -> Result<Vec<(Vec<T>, usize)>> {
    if max_vars == 0 {
        return Err(Error::Config("max_vars must be positive".into()));
    }
    let n = vars.len();
    if quota > n {
        return Err(Error::Infeasible(format!("quota {quota} exceeds {n} variables")));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    let shards = n.div_ceil(max_vars);
    let (base, extra) = (n / shards, n % shards);
    let sizes: Vec<usize> = (0..shards).map(|i| base + usize::from(i < extra)).collect();
    let exact: Vec<f64> = sizes.iter().map(|&s| quota as f64 * s as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = quota - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shards).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    let mut out = Vec::with_capacity(shards);
    let mut off = 0;
    for (s, q) in sizes.into_iter().zip(quotas) {
        out.push((vars[off..off + s].to_vec(), q));
        off += s;
    }
    Ok(out)
}
