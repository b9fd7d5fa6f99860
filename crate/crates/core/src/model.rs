//! Toy decoder-only transformer with an optional planted retrieval circuit.
//!
//! The residual stream is laid out in fixed blocks:
//!
//! | block  | width | written by            | read by                 |
//! |--------|-------|-----------------------|-------------------------|
//! | id     | V     | token embedding       | queries, values         |
//! | pos    | 2F    | positional table      | previous-token keys     |
//! | ramp   | 1     | positional table      | recency keys            |
//! | const  | 1     | positional table      | sink and recency queries|
//! | shift  | V     | previous-token heads  | induction keys          |
//! | out    | V     | induction/noise heads | unembedding             |
//!
//! `F` is the number of binary frequencies `pi / 2^f` needed so that the
//! summed cosine code peaks only at lag zero for every lag below the maximum
//! sequence length. Heads have no MLPs between them; attention outputs are
//! added straight into the residual stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masks::{HeadMask, MaskShape};

fn default_copy_strength() -> f64 {
    8.0
}

fn default_noise_scale() -> f64 {
    1.0
}

fn default_sink() -> Option<usize> {
    Some(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

/// Offsets of the residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub freqs: usize,
    pub pos: usize,
    pub ramp: usize,
    pub konst: usize,
    pub shift: usize,
    pub out: usize,
    pub dim: usize,
}

impl ModelSpec {
    pub fn shape(&self) -> Result<MaskShape> {
        MaskShape::new(self.layers, self.heads, self.kv_groups)
    }

    pub fn pos_freqs(&self) -> usize {
        let mut f = 1;
        while (1usize << f) < self.max_seq_len {
            f += 1;
        }
        f
    }

    pub fn layout(&self) -> Layout {
        let v = self.vocab;
        let freqs = self.pos_freqs();
        let pos = v;
        let ramp = pos + 2 * freqs;
        let konst = ramp + 1;
        let shift = konst + 1;
        let out = shift + v;
        Layout { vocab: v, freqs, pos, ramp, konst, shift, out, dim: out + v }
    }

    pub fn residual_dim(&self) -> usize {
        self.layout().dim
    }

    /// Smallest head dimension that fits the content, sink and recency channels.
    pub fn min_head_dim(&self) -> usize {
        self.vocab.max(2 * self.pos_freqs()) + 2
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.head_dim < self.min_head_dim() {
            return Err(Error::Config(format!(
                "head_dim {} too small to host identity and position channels (need {})",
                self.head_dim,
                self.min_head_dim()
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCircuit {
    /// `[layer, head]` pairs, 0-based.
    pub prev_token_heads: Vec<[usize; 2]>,
    pub induction_heads: Vec<[usize; 2]>,
    #[serde(default = "default_copy_strength")]
    pub copy_strength: f64,
    #[serde(default = "default_sink")]
    pub sink_token: Option<usize>,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

impl Default for PlantedCircuit {
    fn default() -> Self {
        Self {
            prev_token_heads: vec![],
            induction_heads: vec![],
            copy_strength: default_copy_strength(),
            sink_token: default_sink(),
            noise_scale: default_noise_scale(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    PrevToken,
    /// Retrieval head answering for tokens `t` with `t % n_induction == slice`.
    Induction { slice: usize },
    Noise,
}

impl PlantedCircuit {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let shape = spec.shape()?;
        let mut seen = std::collections::HashSet::new();
        for &[l, h] in self.prev_token_heads.iter().chain(&self.induction_heads) {
            if l >= spec.layers || h >= spec.heads {
                return Err(Error::Config(format!("planted head ({l}, {h}) outside model shape")));
            }
            if !seen.insert((l, h)) {
                return Err(Error::Config(format!("planted head ({l}, {h}) listed twice")));
            }
        }
        if !(self.copy_strength > 0.0) {
            return Err(Error::Config("copy_strength must be positive".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if let Some(s) = self.sink_token {
            if s >= spec.vocab {
                return Err(Error::Config(format!("sink token {s} outside vocabulary")));
            }
        }
        if !self.induction_heads.is_empty() {
            if self.prev_token_heads.is_empty() {
                return Err(Error::Config("induction heads need at least one previous-token head".into()));
            }
            let last_prev = self.prev_token_heads.iter().map(|p| p[0]).max().unwrap_or(0);
            let first_ind = self.induction_heads.iter().map(|p| p[0]).min().unwrap_or(0);
            if last_prev >= first_ind {
                return Err(Error::Config(
                    "every previous-token head must sit in a layer before every induction head".into(),
                ));
            }
        }
        for &[l, h] in &self.prev_token_heads {
            let g = shape.group_of_head(h);
            if self.induction_heads.iter().any(|&[l2, h2]| l2 == l && shape.group_of_head(h2) == g) {
                return Err(Error::Config(format!(
                    "layer {l} group {g} mixes previous-token and induction heads"
                )));
            }
        }
        Ok(())
    }

    /// Role of every head, flat `layer * H + head`.
    pub fn roles(&self, shape: MaskShape) -> Vec<HeadRole> {
        let mut roles = vec![HeadRole::Noise; shape.num_heads()];
        for &[l, h] in &self.prev_token_heads {
            roles[l * shape.heads + h] = HeadRole::PrevToken;
        }
        let mut ind = self.induction_heads.clone();
        ind.sort();
        for (slice, &[l, h]) in ind.iter().enumerate() {
            roles[l * shape.heads + h] = HeadRole::Induction { slice };
        }
        roles
    }

    /// Flat group indices hosting at least one induction head. These are the
    /// groups whose heads must see beyond a short window.
    pub fn retrieval_groups(&self, shape: MaskShape) -> Vec<usize> {
        let mut gs: Vec<usize> = self
            .induction_heads
            .iter()
            .map(|&[l, h]| shape.flat_group(l, shape.group_of_head(h)))
            .collect();
        gs.sort();
        gs.dedup();
        gs
    }

    /// Tokens owned by an induction slice.
    pub fn slice_tokens(&self, vocab: usize, slice: usize) -> Vec<usize> {
        let n = self.induction_heads.len().max(1);
        (0..vocab).filter(|&t| Some(t) != self.sink_token && t % n == slice).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// Per head, `D x d_k` row-major.
    pub wq: Vec<Vec<f64>>,
    /// Per KV group, `D x d_k`.
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    /// Per head, `d_k x D`.
    pub wo: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// `V x D`.
    pub embed: Vec<f64>,
    /// `max_seq_len x D`.
    pub pos: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    /// `D x V`.
    pub unembed: Vec<f64>,
}

impl Weights {
    fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.residual_dim();
        let dk = spec.head_dim;
        let layer = LayerWeights {
            wq: vec![vec![0.0; d * dk]; spec.heads],
            wk: vec![vec![0.0; d * dk]; spec.kv_groups],
            wv: vec![vec![0.0; d * dk]; spec.kv_groups],
            wo: vec![vec![0.0; dk * d]; spec.heads],
        };
        Self {
            embed: vec![0.0; spec.vocab * d],
            pos: vec![0.0; spec.max_seq_len * d],
            layers: vec![layer; spec.layers],
            unembed: vec![0.0; d * spec.vocab],
        }
    }

    /// All tensors in canonical order: embed, pos, per layer (wq per head,
    /// wk per group, wv per group, wo per head), unembed.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embed, &self.pos];
        for l in &self.layers {
            out.extend(l.wq.iter().map(|v| v.as_slice()));
            out.extend(l.wk.iter().map(|v| v.as_slice()));
            out.extend(l.wv.iter().map(|v| v.as_slice()));
            out.extend(l.wo.iter().map(|v| v.as_slice()));
        }
        out.push(&self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds weights from a flat parameter vector in canonical order.
    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(spec);
        if flat.len() != w.num_params() {
            return Err(Error::Format(format!(
                "weight payload has {} values, spec needs {}",
                flat.len(),
                w.num_params()
            )));
        }
        let mut off = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        };
        take(&mut w.embed);
        take(&mut w.pos);
        for l in &mut w.layers {
            l.wq.iter_mut().for_each(&mut take);
            l.wk.iter_mut().for_each(&mut take);
            l.wv.iter_mut().for_each(&mut take);
            l.wo.iter_mut().for_each(&mut take);
        }
        take(&mut w.unembed);
        Ok(w)
    }
}

/// Row-sparse matrix: only rows with a nonzero entry, and only their nonzero columns.
#[derive(Clone, Debug)]
struct Sparse {
    rows: Vec<(usize, Vec<(usize, f64)>)>,
}

impl Sparse {
    fn from_dense(w: &[f64], rows: usize, cols: usize) -> Self {
        let rows = (0..rows)
            .filter_map(|r| {
                let ents: Vec<(usize, f64)> =
                    (0..cols).filter(|&c| w[r * cols + c] != 0.0).map(|c| (c, w[r * cols + c])).collect();
                (!ents.is_empty()).then_some((r, ents))
            })
            .collect();
        Self { rows }
    }

    /// `out += x W`.
    #[inline]
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, ents) in &self.rows {
            let xr = x[*r];
            if xr == 0.0 {
                continue;
            }
            for &(c, w) in ents {
                out[c] += xr * w;
            }
        }
    }

    /// `out += W g`.
    #[inline]
    fn mul_t(&self, g: &[f64], out: &mut [f64]) {
        for (r, ents) in &self.rows {
            let mut acc = 0.0;
            for &(c, w) in ents {
                acc += g[c] * w;
            }
            out[*r] += acc;
        }
    }

    fn used_cols(&self, cols: usize) -> Vec<bool> {
        let mut used = vec![false; cols];
        for (_, ents) in &self.rows {
            for &(c, _) in ents {
                used[c] = true;
            }
        }
        used
    }

    fn used_rows(&self, rows: usize) -> Vec<bool> {
        let mut used = vec![false; rows];
        for (r, _) in &self.rows {
            used[*r] = true;
        }
        used
    }
}

#[derive(Clone, Debug)]
struct HeadPlan {
    q: Sparse,
    o: Sparse,
    qk_dims: Vec<usize>,
    v_dims: Vec<usize>,
}

#[derive(Clone, Debug)]
struct GroupPlan {
    k: Sparse,
    v: Sparse,
}

#[derive(Clone, Debug)]
struct LayerPlan {
    heads: Vec<HeadPlan>,
    groups: Vec<GroupPlan>,
    /// Per head: whether any later layer reads a channel this head writes.
    /// Heads that only feed the unembedding are needed at logit rows only.
    feeds_later: Vec<bool>,
}

/// Single attention-probability override, applied after the softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub delta: f64,
}

/// Attention probabilities for every layer and head, `T x T` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub data: Vec<f64>,
}

impl AttentionTrace {
    fn new(layers: usize, heads: usize, seq_len: usize) -> Self {
        Self { layers, heads, seq_len, data: vec![0.0; layers * heads * seq_len * seq_len] }
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.seq_len * self.seq_len;
        let off = (layer * self.heads + head) * n;
        &self.data[off..off + n]
    }

    fn head_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let n = self.seq_len * self.seq_len;
        let off = (layer * self.heads + head) * n;
        &mut self.data[off..off + n]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.head(layer, head)[query * self.seq_len + key]
    }
}

/// Pre-softmax query vectors per head and key vectors per KV group.
#[derive(Clone, Debug)]
pub struct QkTrace {
    pub head_dim: usize,
    pub heads: usize,
    pub groups: usize,
    /// `[layer * H + head]`, each `T x d_k`.
    pub q: Vec<Vec<f64>>,
    /// `[layer * G + group]`, each `T x d_k`.
    pub k: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub attention: bool,
    pub qk: bool,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `T` rows of `V` logits.
    pub logits: Vec<Vec<f64>>,
    pub attention: Option<AttentionTrace>,
    pub qk: Option<QkTrace>,
}

/// Attention probabilities together with `dLoss/dalpha`.
#[derive(Clone, Debug)]
pub struct GradTrace {
    pub attention: AttentionTrace,
    pub grads: AttentionTrace,
    pub loss: f64,
}

struct LayerTape {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

struct RunOpts<'a> {
    /// Rows whose logits are needed; the last layer skips all other rows.
    rows: Option<&'a [usize]>,
    tape: bool,
    capture: Capture,
    reference: bool,
    intervention: Option<Intervention>,
}

struct RunOut {
    logits: Vec<Vec<f64>>,
    attention: Option<AttentionTrace>,
    qk: Option<QkTrace>,
    tape: Vec<LayerTape>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    spec: ModelSpec,
    circuit: Option<PlantedCircuit>,
    weights: Weights,
    plan: Vec<LayerPlan>,
    unembed: Sparse,
    layout: Layout,
    tau: f64,
}

impl ToyModel {
    /// Builds the planted model, or a model with the same residual layout and
    /// only noise heads when `circuit` is `None`.
    pub fn build(spec: &ModelSpec, circuit: Option<&PlantedCircuit>) -> Result<Self> {
        spec.validate()?;
        let default = PlantedCircuit::default();
        let c = circuit.unwrap_or(&default);
        c.validate(spec)?;
        let weights = planted_weights(spec, c);
        Self::from_parts(spec.clone(), circuit.cloned(), weights)
    }

    /// Dense Gaussian weights; every head attends to everything.
    pub fn build_random(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut w = Weights::zeros(spec);
        let d = spec.residual_dim() as f64;
        let dk = spec.head_dim as f64;
        let mut fill = |v: &mut Vec<f64>, sd: f64| {
            let n = Normal::new(0.0, sd).expect("finite sd");
            v.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        fill(&mut w.embed, 1.0);
        fill(&mut w.pos, 0.5);
        for l in &mut w.layers {
            l.wq.iter_mut().for_each(|m| fill(m, 1.5 / d.sqrt()));
            l.wk.iter_mut().for_each(|m| fill(m, 1.5 / d.sqrt()));
            l.wv.iter_mut().for_each(|m| fill(m, 1.0 / d.sqrt()));
            l.wo.iter_mut().for_each(|m| fill(m, 1.0 / dk.sqrt()));
        }
        fill(&mut w.unembed, 1.0 / d.sqrt());
        Self::from_parts(spec.clone(), None, w)
    }

    pub fn from_parts(spec: ModelSpec, circuit: Option<PlantedCircuit>, weights: Weights) -> Result<Self> {
        spec.validate()?;
        let probe = Weights::zeros(&spec);
        if weights.num_params() != probe.num_params() || weights.layers.len() != spec.layers {
            return Err(Error::Shape("weights do not match model spec".into()));
        }
        let layout = spec.layout();
        let d = layout.dim;
        let dk = spec.head_dim;
        let shape = spec.shape()?;
        let plan = weights
            .layers
            .iter()
            .map(|lw| {
                let groups: Vec<GroupPlan> = (0..spec.kv_groups)
                    .map(|g| GroupPlan {
                        k: Sparse::from_dense(&lw.wk[g], d, dk),
                        v: Sparse::from_dense(&lw.wv[g], d, dk),
                    })
                    .collect();
                let heads = (0..spec.heads)
                    .map(|h| {
                        let g = shape.group_of_head(h);
                        let q = Sparse::from_dense(&lw.wq[h], d, dk);
                        let o = Sparse::from_dense(&lw.wo[h], dk, d);
                        let qc = q.used_cols(dk);
                        let kc = groups[g].k.used_cols(dk);
                        let vc = groups[g].v.used_cols(dk);
                        let orows = o.used_rows(dk);
                        HeadPlan {
                            qk_dims: (0..dk).filter(|&i| qc[i] && kc[i]).collect(),
                            v_dims: (0..dk).filter(|&i| vc[i] && orows[i]).collect(),
                            q,
                            o,
                        }
                    })
                    .collect();
                LayerPlan { heads, groups, feeds_later: vec![] }
            })
            .collect::<Vec<_>>();
        let mut plan = plan;
        let mut live = vec![false; d];
        for l in (0..spec.layers).rev() {
            let lp = &mut plan[l];
            lp.feeds_later = lp
                .heads
                .iter()
                .map(|hp| hp.o.used_cols(d).iter().zip(&live).any(|(a, b)| *a && *b))
                .collect();
            for sp in lp.heads.iter().map(|h| &h.q).chain(lp.groups.iter().flat_map(|g| [&g.k, &g.v])) {
                for (r, u) in sp.used_rows(d).into_iter().enumerate() {
                    live[r] |= u;
                }
            }
        }
        let unembed = Sparse::from_dense(&weights.unembed, d, spec.vocab);
        Ok(Self { tau: 1.0 / (dk as f64).sqrt(), spec, circuit, weights, plan, unembed, layout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn circuit(&self) -> Option<&PlantedCircuit> {
        self.circuit.as_ref()
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn shape(&self) -> MaskShape {
        self.spec.shape().expect("validated spec")
    }

    /// Softmax temperature applied to query-key dot products.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn check_inputs(&self, mask: &HeadMask, tokens: &[usize], window: usize) -> Result<()> {
        if mask.shape() != self.shape() {
            return Err(Error::Shape(format!("mask shape {:?} does not match model {:?}", mask.shape(), self.shape())));
        }
        if tokens.is_empty() {
            return Err(Error::Token("empty sequence".into()));
        }
        if tokens.len() > self.spec.max_seq_len {
            return Err(Error::SeqTooLong { len: tokens.len(), max: self.spec.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.spec.vocab) {
            return Err(Error::Token(format!("token {t} outside vocabulary of {}", self.spec.vocab)));
        }
        if window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }

    /// Full forward pass returning logits at every position.
    pub fn forward(&self, mask: &HeadMask, tokens: &[usize], window: usize, capture: Capture) -> Result<Forward> {
        self.check_inputs(mask, tokens, window)?;
        let r = self.run(
            mask,
            tokens,
            window,
            &RunOpts { rows: None, tape: false, capture, reference: false, intervention: None },
        );
        Ok(Forward { logits: r.logits, attention: r.attention, qk: r.qk })
    }

    /// Reference forward that applies a per-head causal mask in natural head
    /// order instead of partitioning heads into full and SWA blocks.
    pub fn forward_reference(&self, mask: &HeadMask, tokens: &[usize], window: usize) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(mask, tokens, window)?;
        let opts = RunOpts { rows: None, tape: false, capture: Capture::default(), reference: true, intervention: None };
        Ok(self.run(mask, tokens, window, &opts).logits)
    }

    /// Logits at the given positions only.
    pub fn logits_at(&self, mask: &HeadMask, tokens: &[usize], window: usize, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.logits_with(mask, tokens, window, rows, None)
    }

    /// Logits at the given positions with one attention probability shifted.
    pub fn logits_with(
        &self,
        mask: &HeadMask,
        tokens: &[usize],
        window: usize,
        rows: &[usize],
        intervention: Option<Intervention>,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(mask, tokens, window)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(Error::Token(format!("row {r} beyond sequence length {}", tokens.len())));
        }
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let opts = RunOpts { rows: Some(&sorted), tape: false, capture: Capture::default(), reference: false, intervention };
        let out = self.run(mask, tokens, window, &opts);
        Ok(rows.iter().map(|r| out.logits[sorted.binary_search(r).expect("row present")].clone()).collect())
    }

    /// Mean cross-entropy over `(position, target)` pairs.
    pub fn loss(
        &self,
        mask: &HeadMask,
        tokens: &[usize],
        window: usize,
        answers: &[(usize, usize)],
        intervention: Option<Intervention>,
    ) -> Result<f64> {
        let rows: Vec<usize> = answers.iter().map(|a| a.0).collect();
        let logits = self.logits_with(mask, tokens, window, &rows, intervention)?;
        Ok(answers.iter().zip(&logits).map(|(a, z)| cross_entropy(z, a.1)).sum::<f64>() / answers.len() as f64)
    }

    /// Attention probabilities and the gradient of the mean answer
    /// cross-entropy with respect to each of them, holding the others fixed.
    pub fn attention_grads(
        &self,
        mask: &HeadMask,
        tokens: &[usize],
        window: usize,
        answers: &[(usize, usize)],
    ) -> Result<GradTrace> {
        self.check_inputs(mask, tokens, window)?;
        if answers.is_empty() {
            return Err(Error::Config("no answer positions".into()));
        }
        if let Some(a) = answers.iter().find(|a| a.0 >= tokens.len() || a.1 >= self.spec.vocab) {
            return Err(Error::Token(format!("answer {a:?} out of range")));
        }
        let capture = Capture { attention: true, qk: false };
        let opts = RunOpts { rows: None, tape: true, capture, reference: false, intervention: None };
        let out = self.run(mask, tokens, window, &opts);
        let attention = out.attention.expect("captured");
        let n = answers.len() as f64;
        let t_len = tokens.len();
        let d = self.layout.dim;
        let v = self.spec.vocab;
        let mut loss = 0.0;
        let mut g_x = vec![0.0; t_len * d];
        for &(row, target) in answers {
            let z = &out.logits[row];
            loss += cross_entropy(z, target) / n;
            let p = softmax(z);
            let dz: Vec<f64> = (0..v).map(|i| (p[i] - f64::from(u8::from(i == target))) / n).collect();
            self.unembed.mul_t(&dz, &mut g_x[row * d..(row + 1) * d]);
        }
        let mut grads = AttentionTrace::new(self.spec.layers, self.spec.heads, t_len);
        for l in (0..self.spec.layers).rev() {
            g_x = self.layer_backward(l, mask, window, &out.tape[l], &attention, &g_x, &mut grads, t_len);
        }
        Ok(GradTrace { attention, grads, loss })
    }

    /// Greedy predictions (argmax, ties to the smallest token id) at `rows`.
    pub fn predict(&self, mask: &HeadMask, tokens: &[usize], window: usize, rows: &[usize]) -> Result<Vec<usize>> {
        Ok(self.logits_at(mask, tokens, window, rows)?.iter().map(|z| argmax(z)).collect())
    }

    fn run(&self, mask: &HeadMask, tokens: &[usize], window: usize, opts: &RunOpts) -> RunOut {
        let t_len = tokens.len();
        let d = self.layout.dim;
        let dk = self.spec.head_dim;
        let shape = self.shape();
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let e = &self.weights.embed[tok * d..(tok + 1) * d];
            let p = &self.weights.pos[t * d..(t + 1) * d];
            for i in 0..d {
                row[i] = e[i] + p[i];
            }
        }
        let mut attention = opts.capture.attention.then(|| AttentionTrace::new(shape.layers, shape.heads, t_len));
        let mut qk = opts.capture.qk.then(|| QkTrace {
            head_dim: dk,
            heads: shape.heads,
            groups: shape.groups,
            q: Vec::with_capacity(shape.num_heads()),
            k: Vec::with_capacity(shape.num_groups()),
        });
        let mut tape = Vec::new();
        let all_rows: Vec<usize> = (0..t_len).collect();
        let restricted = match opts.rows {
            Some(r) if !opts.tape && attention.is_none() && qk.is_none() => Some(r),
            _ => None,
        };
        for l in 0..shape.layers {
            let lp = &self.plan[l];
            let head_rows = |h: usize| -> &[usize] {
                match restricted {
                    Some(r) if !lp.feeds_later[h] => r,
                    _ => &all_rows,
                }
            };
            let order: Vec<usize> = if opts.reference {
                (0..shape.heads).collect()
            } else {
                let (sa, swa): (Vec<usize>, Vec<usize>) = (0..shape.heads).partition(|&h| !mask.is_head_swa(l, h));
                sa.into_iter().chain(swa).collect()
            };
            let kv_len = (0..shape.heads).filter_map(|h| head_rows(h).last()).max().map_or(0, |r| r + 1);
            let mut k = vec![vec![0.0; kv_len * dk]; shape.groups];
            let mut v = vec![vec![0.0; kv_len * dk]; shape.groups];
            for (g, gp) in lp.groups.iter().enumerate() {
                for t in 0..kv_len {
                    gp.k.mul(&x[t * d..(t + 1) * d], &mut k[g][t * dk..(t + 1) * dk]);
                    gp.v.mul(&x[t * d..(t + 1) * d], &mut v[g][t * dk..(t + 1) * dk]);
                }
            }
            let mut qs = vec![Vec::new(); shape.heads];
            let mut concat = vec![0.0; t_len * shape.heads * dk];
            let stride = shape.heads * dk;
            let mut scores = Vec::with_capacity(t_len);
            for (slot, &h) in order.iter().enumerate() {
                let g = shape.group_of_head(h);
                let hp = &lp.heads[h];
                let swa = mask.is_head_swa(l, h);
                let rows = head_rows(h);
                let mut q = vec![0.0; t_len * dk];
                for &t in rows {
                    hp.q.mul(&x[t * d..(t + 1) * d], &mut q[t * dk..(t + 1) * dk]);
                }
                let mut probs = attention.as_mut().map(|a| a.head_mut(l, h));
                for &t in rows {
                    let lo = if swa { (t + 1).saturating_sub(window) } else { 0 };
                    let qt = &q[t * dk..(t + 1) * dk];
                    scores.clear();
                    for j in lo..=t {
                        let kj = &k[g][j * dk..(j + 1) * dk];
                        let mut s = 0.0;
                        for &c in &hp.qk_dims {
                            s += qt[c] * kj[c];
                        }
                        scores.push(s * self.tau);
                    }
                    softmax_in_place(&mut scores);
                    if let Some(iv) = opts.intervention {
                        if iv.layer == l && iv.head == h && iv.query == t && iv.key >= lo && iv.key <= t {
                            scores[iv.key - lo] += iv.delta;
                        }
                    }
                    if let Some(p) = probs.as_deref_mut() {
                        p[t * t_len + lo..=t * t_len + t].copy_from_slice(&scores);
                    }
                    let out = &mut concat[t * stride + slot * dk..t * stride + (slot + 1) * dk];
                    for (a, j) in scores.iter().zip(lo..=t) {
                        let vj = &v[g][j * dk..(j + 1) * dk];
                        for &c in &hp.v_dims {
                            out[c] += a * vj[c];
                        }
                    }
                }
                qs[h] = q;
            }
            if opts.tape {
                tape.push(LayerTape { q: qs.clone(), k: k.clone(), v: v.clone() });
            }
            if let Some(trace) = qk.as_mut() {
                trace.q.extend(qs);
                trace.k.extend(k);
            }
            // Output projection with rows of W_o permuted to match the slot order.
            // Rows a head skipped hold zeros in its slot.
            for &t in &all_rows {
                let (xr, cr) = (&mut x[t * d..(t + 1) * d], &concat[t * stride..(t + 1) * stride]);
                for (slot, &h) in order.iter().enumerate() {
                    lp.heads[h].o.mul(&cr[slot * dk..(slot + 1) * dk], xr);
                }
            }
        }
        let out_rows: &[usize] = restricted.unwrap_or(&all_rows);
        let logits = out_rows
            .iter()
            .map(|&t| {
                let mut z = vec![0.0; self.spec.vocab];
                self.unembed.mul(&x[t * d..(t + 1) * d], &mut z);
                z
            })
            .collect();
        RunOut { logits, attention, qk, tape }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        l: usize,
        mask: &HeadMask,
        window: usize,
        tape: &LayerTape,
        attention: &AttentionTrace,
        g_x: &[f64],
        grads: &mut AttentionTrace,
        t_len: usize,
    ) -> Vec<f64> {
        let d = self.layout.dim;
        let dk = self.spec.head_dim;
        let shape = self.shape();
        let lp = &self.plan[l];
        let mut g_in = g_x.to_vec();
        let mut dk_g = vec![vec![0.0; t_len * dk]; shape.groups];
        let mut dv_g = vec![vec![0.0; t_len * dk]; shape.groups];
        let mut d_o = vec![0.0; dk];
        let mut d_a = Vec::with_capacity(t_len);
        for h in 0..shape.heads {
            let g = shape.group_of_head(h);
            let hp = &lp.heads[h];
            let swa = mask.is_head_swa(l, h);
            let alpha = attention.head(l, h);
            let (k, v, q) = (&tape.k[g], &tape.v[g], &tape.q[h]);
            let mut dq = vec![0.0; dk];
            for t in 0..t_len {
                d_o.iter_mut().for_each(|x| *x = 0.0);
                hp.o.mul_t(&g_x[t * d..(t + 1) * d], &mut d_o);
                let lo = if swa { (t + 1).saturating_sub(window) } else { 0 };
                let arow = &alpha[t * t_len..(t + 1) * t_len];
                d_a.clear();
                let mut dot = 0.0;
                for j in lo..=t {
                    let vj = &v[j * dk..(j + 1) * dk];
                    let mut s = 0.0;
                    for &c in &hp.v_dims {
                        s += d_o[c] * vj[c];
                    }
                    d_a.push(s);
                    dot += arow[j] * s;
                    let dvj = &mut dv_g[g][j * dk..(j + 1) * dk];
                    for &c in &hp.v_dims {
                        dvj[c] += arow[j] * d_o[c];
                    }
                }
                grads.head_mut(l, h)[t * t_len + lo..=t * t_len + t].copy_from_slice(&d_a);
                dq.iter_mut().for_each(|x| *x = 0.0);
                let qt = &q[t * dk..(t + 1) * dk];
                for (i, j) in (lo..=t).enumerate() {
                    let ds = arow[j] * (d_a[i] - dot) * self.tau;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[j * dk..(j + 1) * dk];
                    let dkj = &mut dk_g[g][j * dk..(j + 1) * dk];
                    for &c in &hp.qk_dims {
                        dq[c] += ds * kj[c];
                        dkj[c] += ds * qt[c];
                    }
                }
                hp.q.mul_t(&dq, &mut g_in[t * d..(t + 1) * d]);
            }
        }
        for (g, gp) in lp.groups.iter().enumerate() {
            for t in 0..t_len {
                let row = &mut g_in[t * d..(t + 1) * d];
                gp.k.mul_t(&dk_g[g][t * dk..(t + 1) * dk], row);
                gp.v.mul_t(&dv_g[g][t * dk..(t + 1) * dk], row);
            }
        }
        g_in
    }
}

fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in s.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in s.iter_mut() {
        *x /= z;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut s = z.to_vec();
    softmax_in_place(&mut s);
    s
}

pub fn cross_entropy(z: &[f64], target: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - z[target]
}

/// Index of the maximum; ties go to the smallest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    best
}

fn planted_weights(spec: &ModelSpec, c: &PlantedCircuit) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lay = spec.layout();
    let shape = spec.shape().expect("validated");
    let (d, dk, v, t_max) = (lay.dim, spec.head_dim, spec.vocab, spec.max_seq_len);
    let inv_tau = (dk as f64).sqrt();
    let s = c.copy_strength;
    let sink_dim = dk - 2;
    let ramp_dim = dk - 1;
    let content = v.max(2 * lay.freqs);
    let omega = |f: usize| std::f64::consts::PI / (1u64 << f) as f64;
    let mut w = Weights::zeros(spec);

    for tok in 0..v {
        w.embed[tok * d + tok] = 1.0;
    }
    for t in 0..t_max {
        let row = &mut w.pos[t * d..(t + 1) * d];
        for f in 0..lay.freqs {
            row[lay.pos + 2 * f] = (omega(f) * t as f64).cos();
            row[lay.pos + 2 * f + 1] = (omega(f) * t as f64).sin();
        }
        row[lay.ramp] = t as f64 / t_max as f64;
        row[lay.konst] = 1.0;
    }
    for i in 0..v {
        w.unembed[(lay.out + i) * v + i] = 1.0;
    }

    let roles = c.roles(shape);
    let n_prev = c.prev_token_heads.len().max(1) as f64;
    let noise = c.noise_scale;
    for l in 0..shape.layers {
        let lw = &mut w.layers[l];
        for g in 0..shape.groups {
            let heads: Vec<HeadRole> = shape.group_heads(g).map(|h| roles[l * shape.heads + h]).collect();
            let has_prev = heads.contains(&HeadRole::PrevToken);
            let has_ind = heads.iter().any(|r| matches!(r, HeadRole::Induction { .. }));
            let (wk, wv) = (&mut lw.wk[g], &mut lw.wv[g]);
            for i in 0..v {
                if Some(i) != c.sink_token {
                    wv[i * dk + i] = 1.0;
                }
            }
            wk[lay.ramp * dk + ramp_dim] = 1.0;
            if has_prev {
                for ch in 0..2 * lay.freqs {
                    wk[(lay.pos + ch) * dk + ch] = 1.0;
                }
            }
            if has_ind {
                for i in 0..v {
                    wk[(lay.shift + i) * dk + i] = 1.0;
                }
                if let Some(sink) = c.sink_token {
                    wk[sink * dk + sink_dim] = 1.0;
                }
            }
            if !has_prev && !has_ind {
                let n = Normal::new(0.0, 1.0).expect("finite");
                for _ in 0..4 {
                    let col = rng.random_range(0..content);
                    for i in 0..v {
                        wk[i * dk + col] = n.sample(&mut rng);
                    }
                }
            }
        }
        for h in 0..shape.heads {
            let (wq, wo) = (&mut lw.wq[h], &mut lw.wo[h]);
            match roles[l * shape.heads + h] {
                HeadRole::PrevToken => {
                    // Query is the position code rotated back by one step.
                    for f in 0..lay.freqs {
                        let (cw, sw) = (omega(f).cos() * s * inv_tau, omega(f).sin() * s * inv_tau);
                        let (rc, rs) = (lay.pos + 2 * f, lay.pos + 2 * f + 1);
                        wq[rc * dk + 2 * f] = cw;
                        wq[rs * dk + 2 * f] = sw;
                        wq[rc * dk + 2 * f + 1] = -sw;
                        wq[rs * dk + 2 * f + 1] = cw;
                    }
                    for i in 0..v {
                        wo[i * d + lay.shift + i] = 1.0 / n_prev;
                    }
                }
                HeadRole::Induction { slice } => {
                    for tok in c.slice_tokens(v, slice) {
                        wq[tok * dk + tok] = 2.0 * s * inv_tau;
                    }
                    if c.sink_token.is_some() {
                        wq[lay.konst * dk + sink_dim] = 1.25 * s * inv_tau;
                    }
                    for i in 0..v {
                        wo[i * d + lay.out + i] = s;
                    }
                }
                HeadRole::Noise => {
                    let lambda: f64 = rng.random_range(0.4..1.0);
                    wq[lay.konst * dk + ramp_dim] = lambda * t_max as f64 * inv_tau;
                    if noise > 0.0 {
                        let nq = Normal::new(0.0, 0.3 * noise * inv_tau).expect("finite");
                        for _ in 0..2 {
                            let col = rng.random_range(0..content);
                            for i in 0..v {
                                wq[i * dk + col] = nq.sample(&mut rng);
                            }
                        }
                        let no = Normal::new(0.0, 0.02 * noise * s).expect("finite");
                        for _ in 0..3 {
                            let row = rng.random_range(0..v);
                            for i in 0..v {
                                wo[row * d + lay.out + i] = no.sample(&mut rng);
                            }
                        }
                    }
                }
            }
        }
    }
    w
}
