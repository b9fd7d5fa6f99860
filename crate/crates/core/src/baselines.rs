//! Static head-locality scorers and rank-and-threshold mask construction.
//!
//! Every scorer runs the unmodified model (all heads full) and produces one
//! score per head. Scores are pooled to KV groups by mean, groups are ordered
//! most-local first in the scorer's direction, and the first `ceil(rho * L * G)`
//! groups become SWA.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationSet, Example};
use crate::error::{Error, Result};
use crate::masks::{ceil_tol, HeadMask, MaskShape};
use crate::model::{AttentionTrace, Capture, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Larger score means more local.
    ConvertHighestFirst,
    /// Smaller score means more local.
    ConvertLowestFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: String,
    pub shape: MaskShape,
    pub direction: Direction,
    /// Flat `layer * H + head`.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(method: &str, shape: MaskShape, direction: Direction, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != shape.num_heads() {
            return Err(Error::Shape(format!("{} scores for {} heads", scores.len(), shape.num_heads())));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!("{method}: non-finite score for head {i}")));
        }
        Ok(Self { method: method.into(), shape, direction, scores })
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.shape.heads + head]
    }

    /// Mean over the heads of each KV group, flat `layer * G + group`.
    pub fn group_scores(&self) -> Vec<f64> {
        let s = self.shape;
        (0..s.num_groups())
            .map(|fg| {
                let (l, g) = s.split_group(fg);
                let heads = s.group_heads(g);
                heads.clone().map(|h| self.get(l, h)).sum::<f64>() / heads.len() as f64
            })
            .collect()
    }

    /// Groups in conversion order, most local first; ties by group index.
    pub fn group_order(&self) -> Vec<usize> {
        let gs = self.group_scores();
        let mut order: Vec<usize> = (0..gs.len()).collect();
        match self.direction {
            Direction::ConvertHighestFirst => order.sort_by(|&a, &b| gs[b].total_cmp(&gs[a]).then(a.cmp(&b))),
            Direction::ConvertLowestFirst => order.sort_by(|&a, &b| gs[a].total_cmp(&gs[b]).then(a.cmp(&b))),
        }
        order
    }

    pub fn select_mask(&self, ratio: f64) -> HeadMask {
        let n = ceil_tol(ratio * self.shape.num_groups() as f64).min(self.shape.num_groups());
        let order = self.group_order();
        HeadMask::from_swa_groups(self.shape, &order[..n]).expect("indices in range")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InductionOffset {
    /// `j = m - 1 - K`.
    BeforeEcho,
    /// `j = m - K + 1`, the token after the earlier occurrence.
    AfterEcho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub window: usize,
    pub proxy_block: usize,
    pub proxy_mass: f64,
    pub proxy_heads: usize,
    /// Defaults to `window / 4` (at least 1).
    pub qada_buffer: Option<usize>,
    /// Defaults to a quarter of the maximum sequence length.
    pub razor_block: Option<usize>,
    pub razor_induction: InductionOffset,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            window: 16,
            proxy_block: 16,
            proxy_mass: 0.9,
            proxy_heads: 1,
            qada_buffer: None,
            razor_block: None,
            razor_induction: InductionOffset::BeforeEcho,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.proxy_block == 0 || self.proxy_heads == 0 {
            return Err(Error::Config("window, proxy block and proxy set size must be positive".into()));
        }
        if !(self.proxy_mass > 0.0 && self.proxy_mass <= 1.0) {
            return Err(Error::Config("proxy mass fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn buffer(&self) -> usize {
        self.qada_buffer.unwrap_or(self.window / 4).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Dcam,
    Apl,
    Proxy,
    Qada,
    Razor,
    Fisher,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Dcam, Method::Apl, Method::Proxy, Method::Qada, Method::Razor, Method::Fisher];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dcam => "dcam",
            Method::Apl => "apl",
            Method::Proxy => "proxy",
            Method::Qada => "qada",
            Method::Razor => "razor",
            Method::Fisher => "fisher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase())
    }
}

pub fn score_heads(method: Method, model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    match method {
        Method::Dcam => dcam(model, set, cfg),
        Method::Apl => apl(model, set, cfg),
        Method::Proxy => proxy(model, set, cfg),
        Method::Qada => qada(model, set, cfg),
        Method::Razor => razor(model, cfg),
        Method::Fisher => fisher(model, set, cfg),
    }
}

fn traces<T: Send>(
    model: &ToyModel,
    set: &CalibrationSet,
    window: usize,
    capture: Capture,
    f: impl Fn(&Example, &crate::model::Forward) -> T + Sync,
) -> Result<Vec<T>> {
    let mask = HeadMask::all_full(model.shape());
    set.examples
        .par_iter()
        .map(|ex| model.forward(&mask, &ex.tokens, window, capture).map(|fw| f(ex, &fw)))
        .collect()
}

fn sum_rows(parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; parts.first().map_or(0, |p| p.len())];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Per-head lag histograms `hist[head][d]` of a per-entry weight.
fn lag_histogram(att: &AttentionTrace, width: usize, weight: impl Fn(usize, usize, usize, usize) -> f64) -> Vec<f64> {
    let t_len = att.seq_len;
    let n = att.layers * att.heads;
    let mut hist = vec![0.0; n * width];
    for l in 0..att.layers {
        for h in 0..att.heads {
            let row = &mut hist[(l * att.heads + h) * width..(l * att.heads + h + 1) * width];
            for t in 0..t_len {
                for j in 0..=t {
                    row[t - j] += weight(l, h, t, j);
                }
            }
        }
    }
    hist
}

/// Fraction of each head's lag histogram at lags `< window`.
pub fn window_mass(hist: &[f64], heads: usize, window: usize, method: &str) -> Result<Vec<f64>> {
    let t_len = hist.len() / heads.max(1);
    let total: f64 = hist.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("{method}: all lag mass is zero")));
    }
    Ok((0..heads)
        .map(|i| {
            let row = &hist[i * t_len..(i + 1) * t_len];
            let tot: f64 = row.iter().sum();
            if tot > 0.0 {
                row[..window.min(t_len)].iter().sum::<f64>() / tot
            } else {
                1.0
            }
        })
        .collect())
}

/// Share of attention mass falling inside the window, per head.
pub fn dcam(model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let capture = Capture { attention: true, qk: false };
    let width = model.spec().max_seq_len;
    let parts = traces(model, set, cfg.window, capture, |_, fw| {
        let att = fw.attention.as_ref().expect("captured");
        lag_histogram(att, width, |l, h, t, j| att.get(l, h, t, j))
    })?;
    let hist = sum_rows(parts);
    let s = window_mass(&hist, model.shape().num_heads(), cfg.window, "dcam")?;
    ScoreTable::new("dcam", model.shape(), Direction::ConvertHighestFirst, s)
}

/// Median lag of the attention peak at the last answer position.
pub fn apl(model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let shape = model.shape();
    let capture = Capture { attention: true, qk: false };
    let lags: Vec<Vec<f64>> = traces(model, set, cfg.window, capture, |ex, fw| {
        let att = fw.attention.as_ref().expect("captured");
        let t_star = ex.answers.iter().map(|a| a.0).max().unwrap_or(ex.tokens.len() - 1);
        (0..shape.num_heads())
            .map(|i| {
                let row = &att.head(i / shape.heads, i % shape.heads)[t_star * att.seq_len..];
                let mut best = 0;
                for j in 0..=t_star {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                (t_star - best) as f64
            })
            .collect()
    })?;
    let s = (0..shape.num_heads())
        .map(|i| {
            let med = median(&lags.iter().map(|v| v[i]).collect::<Vec<_>>());
            1.0 - (med / cfg.window as f64).min(1.0)
        })
        .collect();
    ScoreTable::new("apl", shape, Direction::ConvertHighestFirst, s)
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Blocks needed, ranked by the pooled proxy mass, to cover `frac` of the
/// head's own mass in one row. `pooled` and `own` hold per-block masses.
pub fn blocks_needed(pooled: &[f64], own: &[f64], frac: f64) -> usize {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    let total: f64 = own.iter().sum();
    let target = frac * total - 1e-12;
    let mut acc = 0.0;
    for (m, &b) in order.iter().enumerate() {
        acc += own[b];
        if acc >= target {
            return m + 1;
        }
    }
    pooled.len()
}

fn block_masses(row: &[f64], t: usize, block: usize) -> Vec<f64> {
    let n_b = (t + 1).div_ceil(block);
    (0..n_b).map(|b| row[b * block..((b + 1) * block).min(t + 1)].iter().sum()).collect()
}

/// Fraction of blocks a head needs when blocks are ranked by a per-layer proxy head.
pub fn proxy(model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let shape = model.shape();
    if cfg.proxy_heads > shape.heads {
        return Err(Error::Config("proxy set larger than the number of heads".into()));
    }
    let capture = Capture { attention: true, qk: false };
    let ents = traces(model, set, cfg.window, capture, |_, fw| {
        let att = fw.attention.as_ref().expect("captured");
        let t_len = att.seq_len;
        (0..shape.num_heads())
            .map(|i| {
                let a = att.head(i / shape.heads, i % shape.heads);
                (0..t_len).map(|t| entropy(&a[t * t_len..t * t_len + t + 1])).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    })?;
    let ent = sum_rows(ents);
    let proxies: Vec<Vec<usize>> = (0..shape.layers)
        .map(|l| {
            let mut hs: Vec<usize> = (0..shape.heads).collect();
            hs.sort_by(|&a, &b| ent[l * shape.heads + b].total_cmp(&ent[l * shape.heads + a]).then(a.cmp(&b)));
            hs.truncate(cfg.proxy_heads);
            hs
        })
        .collect();
    let parts = traces(model, set, cfg.window, capture, |_, fw| {
        let att = fw.attention.as_ref().expect("captured");
        let t_len = att.seq_len;
        let mut acc = vec![0.0; shape.num_heads() + 1];
        for t in 0..t_len {
            for l in 0..shape.layers {
                let pooled_row: Vec<f64> = (0..=t)
                    .map(|j| proxies[l].iter().map(|&p| att.get(l, p, t, j)).fold(0.0, f64::max))
                    .collect();
                let pooled = block_masses(&pooled_row, t, cfg.proxy_block);
                for h in 0..shape.heads {
                    let own = block_masses(&att.head(l, h)[t * t_len..], t, cfg.proxy_block);
                    let m = blocks_needed(&pooled, &own, cfg.proxy_mass);
                    acc[l * shape.heads + h] += m as f64 / pooled.len() as f64;
                }
            }
        }
        acc[shape.num_heads()] = t_len as f64;
        acc
    })?;
    let acc = sum_rows(parts);
    let rows = acc[shape.num_heads()];
    let s = acc[..shape.num_heads()].iter().map(|x| x / rows).collect();
    ScoreTable::new("proxy", shape, Direction::ConvertLowestFirst, s)
}

/// Estimated in-window share of softmax mass for one query row.
///
/// `keys` holds `t + 1` key vectors of length `q.len()`. The far mass is
/// approximated from the mean and covariance of the last `buffer` far keys.
pub fn qada_row(q: &[f64], keys: &[f64], t: usize, window: usize, buffer: usize, tau: f64) -> f64 {
    let dk = q.len();
    let dot = |j: usize| -> f64 { (0..dk).map(|c| q[c] * keys[j * dk + c]).sum::<f64>() * tau };
    let lo = t + 1 - window;
    let local: Vec<f64> = (lo..=t).map(dot).collect();
    let far_n = lo;
    let b0 = lo.saturating_sub(buffer);
    let nb = (lo - b0) as f64;
    let mut mu = vec![0.0; dk];
    for j in b0..lo {
        for c in 0..dk {
            mu[c] += keys[j * dk + c] / nb;
        }
    }
    let qmu: f64 = (0..dk).map(|c| q[c] * mu[c]).sum();
    let qsq: f64 = (b0..lo)
        .map(|j| {
            let v: f64 = (0..dk).map(|c| q[c] * (keys[j * dk + c] - mu[c])).sum();
            v * v
        })
        .sum::<f64>()
        / nb;
    let log_global = (far_n as f64).ln() + tau * qmu + 0.5 * tau * tau * qsq;
    let m = local.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_local = m + local.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    1.0 / (1.0 + (log_global - log_local).exp())
}

/// Query-aware estimate of the in-window attention share.
pub fn qada(model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let shape = model.shape();
    let buffer = cfg.buffer();
    let tau = model.tau();
    let w = cfg.window;
    if set.examples.iter().all(|e| e.tokens.len() <= w) {
        return Err(Error::Degenerate(format!("qada: no rows beyond window {w}; use longer calibration sequences")));
    }
    let capture = Capture { attention: false, qk: true };
    let parts = traces(model, set, w, capture, |_, fw| {
        let qk = fw.qk.as_ref().expect("captured");
        let dk = qk.head_dim;
        let t_len = qk.q[0].len() / dk;
        let mut acc = vec![0.0; shape.num_heads() + 1];
        for l in 0..shape.layers {
            for h in 0..shape.heads {
                let q = &qk.q[l * shape.heads + h];
                let k = &qk.k[l * shape.groups + shape.group_of_head(h)];
                for t in w..t_len {
                    acc[l * shape.heads + h] += qada_row(&q[t * dk..(t + 1) * dk], k, t, w, buffer, tau);
                }
            }
        }
        acc[shape.num_heads()] = t_len.saturating_sub(w) as f64;
        acc
    })?;
    let acc = sum_rows(parts);
    let rows = acc[shape.num_heads()];
    let s = acc[..shape.num_heads()].iter().map(|x| x / rows).collect();
    ScoreTable::new("qada", shape, Direction::ConvertHighestFirst, s)
}

/// Repeated random block probe of length `4 K`.
pub fn razor_probe(vocab: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block: Vec<usize> = if k <= vocab {
        let mut all: Vec<usize> = (0..vocab).collect();
        all.shuffle(&mut rng);
        all.truncate(k);
        all
    } else {
        (0..k).map(|_| rng.random_range(0..vocab)).collect()
    };
    block.iter().cycle().take(4 * k).copied().collect()
}

/// Echo and induction statistics on a repeated-block probe, as z-scores across heads.
pub fn razor_from_attention(att: &AttentionTrace, k: usize, offset: InductionOffset) -> Vec<f64> {
    let n = att.layers * att.heads;
    let t_len = att.seq_len;
    let mut echo = vec![0.0; n];
    let mut ind = vec![0.0; n];
    for i in 0..n {
        let (l, h) = (i / att.heads, i % att.heads);
        let ms = k..t_len;
        echo[i] = ms.clone().map(|m| att.get(l, h, m, m - k)).sum::<f64>() / ms.len() as f64;
        let (vals, cnt) = match offset {
            InductionOffset::BeforeEcho => {
                let ms = k + 1..t_len;
                (ms.clone().map(|m| att.get(l, h, m, m - 1 - k)).sum::<f64>(), ms.len())
            }
            InductionOffset::AfterEcho => (ms.clone().map(|m| att.get(l, h, m, m + 1 - k)).sum::<f64>(), ms.len()),
        };
        ind[i] = vals / cnt.max(1) as f64;
    }
    let (ze, zi) = (zscore(&echo), zscore(&ind));
    ze.iter().zip(&zi).map(|(a, b)| a.max(*b)).collect()
}

pub fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

pub fn razor(model: &ToyModel, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let t_max = model.spec().max_seq_len;
    let k = cfg.razor_block.unwrap_or(t_max / 4);
    if k < 2 || 4 * k > t_max {
        return Err(Error::Config(format!("razor block {k} needs 2 <= K and 4K <= {t_max}")));
    }
    let probe = razor_probe(model.spec().vocab, k, cfg.seed);
    let fw = model.forward(&HeadMask::all_full(model.shape()), &probe, cfg.window, Capture { attention: true, qk: false })?;
    let s = razor_from_attention(fw.attention.as_ref().expect("captured"), k, cfg.razor_induction);
    ScoreTable::new("razor", model.shape(), Direction::ConvertLowestFirst, s)
}

/// Lag histogram of squared gradient-times-probability.
pub fn fisher(model: &ToyModel, set: &CalibrationSet, cfg: &BaselineConfig) -> Result<ScoreTable> {
    cfg.validate()?;
    let mask = HeadMask::all_full(model.shape());
    let width = model.spec().max_seq_len;
    let parts: Vec<Vec<f64>> = set
        .examples
        .par_iter()
        .map(|ex| {
            let g = model.attention_grads(&mask, &ex.tokens, cfg.window, &ex.answers)?;
            Ok(lag_histogram(&g.attention, width, |l, h, t, j| {
                (g.grads.get(l, h, t, j) * g.attention.get(l, h, t, j)).powi(2)
            }))
        })
        .collect::<Result<_>>()?;
    let hist = sum_rows(parts);
    let s = window_mass(&hist, model.shape().num_heads(), cfg.window, "fisher")?;
    ScoreTable::new("fisher", model.shape(), Direction::ConvertHighestFirst, s)
}
