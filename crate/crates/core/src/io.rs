//! On-disk formats: weight blobs, JSON documents and CSV traces.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{DistanceMatrix, Turnover};
use crate::baselines::ScoreTable;
use crate::calibration::CalibrationSet;
use crate::error::{Error, Result};
use crate::masks::{HeadMask, MaskShape};
use crate::model::{ModelSpec, PlantedCircuit, ToyModel, Weights};
use crate::objective::LedgerEntry;
use crate::pipeline::{HybridPlan, LayerRatios};

pub const WEIGHT_MAGIC: [u8; 4] = *b"SWAH";
pub const WEIGHT_VERSION: u16 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dim16(x: usize, what: &str) -> Result<u16> {
    u16::try_from(x).map_err(|_| Error::Format(format!("{what} = {x} does not fit the weight header")))
}

pub fn encode_weights(spec: &ModelSpec, w: &Weights) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * w.num_params());
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for (x, what) in [
        (spec.layers, "layers"),
        (spec.heads, "heads"),
        (spec.kv_groups, "kv_groups"),
        (spec.head_dim, "head_dim"),
        (spec.vocab, "vocab"),
    ] {
        out.extend_from_slice(&dim16(x, what)?.to_le_bytes());
    }
    for t in w.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(spec: &ModelSpec, bytes: &[u8]) -> Result<Weights> {
    if bytes.len() < 16 || bytes[..4] != WEIGHT_MAGIC {
        return Err(Error::Format("not a weight blob".into()));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    if field(0) != WEIGHT_VERSION as usize {
        return Err(Error::Format(format!("unsupported weight version {}", field(0))));
    }
    let dims = [field(1), field(2), field(3), field(4), field(5)];
    let want = [spec.layers, spec.heads, spec.kv_groups, spec.head_dim, spec.vocab];
    if dims != want {
        return Err(Error::Format(format!("weight header dims {dims:?} do not match spec {want:?}")));
    }
    let payload = &bytes[16..];
    if payload.len() % 8 != 0 {
        return Err(Error::Format("truncated weight payload".into()));
    }
    let flat: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Weights::from_flat(spec, &flat)
}

/// Model spec plus optional planted circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub spec: ModelSpec,
    pub circuit: Option<PlantedCircuit>,
    pub weights_sha256: String,
}

pub fn save_model(model: &ToyModel, dir: &Path) -> Result<ModelManifest> {
    let blob = encode_weights(model.spec(), model.weights())?;
    let manifest = ModelManifest {
        spec: model.spec().clone(),
        circuit: model.circuit().cloned(),
        weights_sha256: sha256_hex(&blob),
    };
    write_bytes(&dir.join("model.bin"), &blob)?;
    write_json(&dir.join("model.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let manifest: ModelManifest = read_json(&dir.join("model.json"))?;
    let blob = fs::read(dir.join("model.bin"))?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(Error::Format("model.bin does not match the manifest hash".into()));
    }
    let w = decode_weights(&manifest.spec, &blob)?;
    ToyModel::from_parts(manifest.spec, manifest.circuit, w)
}

/// Byte-comparable mask document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub model_spec_hash: String,
    pub layers: usize,
    pub heads: usize,
    pub kv_groups: usize,
    /// SWA group indices per layer, ascending.
    pub swa_groups: Vec<Vec<usize>>,
    pub ratio: f64,
}

impl MaskFile {
    pub fn new(mask: &HeadMask, model_spec_hash: &str) -> Self {
        let s = mask.shape();
        Self {
            model_spec_hash: model_spec_hash.into(),
            layers: s.layers,
            heads: s.heads,
            kv_groups: s.groups,
            swa_groups: mask.swa_lists(),
            ratio: mask.ratio(),
        }
    }

    pub fn to_mask(&self) -> Result<HeadMask> {
        let shape = MaskShape::new(self.layers, self.heads, self.kv_groups)?;
        if self.swa_groups.len() != self.layers {
            return Err(Error::Format(format!("{} layer lists for {} layers", self.swa_groups.len(), self.layers)));
        }
        let mut flat = Vec::new();
        for (l, gs) in self.swa_groups.iter().enumerate() {
            for &g in gs {
                if g >= shape.groups {
                    return Err(Error::Gqa(format!("group {g} out of range in layer {l}")));
                }
                flat.push(shape.flat_group(l, g));
            }
        }
        HeadMask::from_swa_groups(shape, &flat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubproblemSummary {
    pub stage: String,
    pub layers: Vec<usize>,
    pub quota: usize,
    pub budget: usize,
    pub evals_used: usize,
    pub exhaustive: bool,
    pub loss: f64,
    pub score: f64,
}

/// Mask plus stage metadata; traces live in separate CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub method: String,
    pub mask: MaskFile,
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub s_best: Option<Vec<f64>>,
    pub s_orig: Option<f64>,
    pub stage2: Option<LayerRatios>,
    pub subproblems: Vec<SubproblemSummary>,
    pub oracle_evals: usize,
}

impl PlanFile {
    pub fn new(plan: &HybridPlan, model_spec_hash: &str) -> Self {
        Self {
            method: plan.method.clone(),
            mask: MaskFile::new(&plan.mask, model_spec_hash),
            target_ratio: plan.target_ratio,
            achieved_ratio: plan.achieved_ratio,
            s_best: plan.s_best.clone(),
            s_orig: plan.s_orig,
            stage2: plan.stage2.clone(),
            subproblems: plan
                .logs
                .iter()
                .map(|l| SubproblemSummary {
                    stage: l.stage.clone(),
                    layers: l.layers.clone(),
                    quota: l.quota,
                    budget: l.budget,
                    evals_used: l.evals_used,
                    exhaustive: l.exhaustive,
                    loss: l.loss,
                    score: l.score,
                })
                .collect(),
            oracle_evals: plan.oracle_evals,
        }
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let bytes = to_json(value)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_calibration(set: &CalibrationSet, path: &Path) -> Result<String> {
    write_json(path, set)
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w).map_err(|e| Error::Format(e.to_string()))?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn ledger_csv(entries: &[LedgerEntry]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["index", "hash", "mask", "ratio", "score", "loss"])?;
        for e in entries {
            w.write_record([
                e.index.to_string(),
                e.hash.clone(),
                e.mask.clone(),
                e.ratio.to_string(),
                e.score.to_string(),
                e.loss.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn read_ledger_csv(bytes: &[u8]) -> Result<Vec<LedgerEntry>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("bad ledger field {i}")))
        };
        out.push(LedgerEntry {
            index: num(0)? as usize,
            hash: rec.get(1).unwrap_or_default().into(),
            mask: rec.get(2).unwrap_or_default().into(),
            ratio: num(3)?,
            score: num(4)?,
            loss: num(5)?,
        });
    }
    Ok(out)
}

pub fn trace_csv(plan: &HybridPlan) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["subproblem", "stage", "index", "hash", "loss", "accepted"])?;
        for (i, log) in plan.logs.iter().enumerate() {
            for t in &log.trace {
                w.write_record([
                    i.to_string(),
                    log.stage.clone(),
                    t.index.to_string(),
                    t.hash.clone(),
                    t.loss.to_string(),
                    t.accepted.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn score_table_csv(t: &ScoreTable) -> Result<Vec<u8>> {
    let s = t.shape;
    let pooled = t.group_scores();
    let order = t.group_order();
    let mut rank = vec![0; order.len()];
    for (r, &g) in order.iter().enumerate() {
        rank[g] = r;
    }
    csv_bytes(|w| {
        w.write_record(["layer", "head", "group", "raw", "pooled", "rank"])?;
        for l in 0..s.layers {
            for h in 0..s.heads {
                let fg = s.flat_group(l, s.group_of_head(h));
                w.write_record([
                    l.to_string(),
                    h.to_string(),
                    s.group_of_head(h).to_string(),
                    t.get(l, h).to_string(),
                    pooled[fg].to_string(),
                    rank[fg].to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn distance_csv(m: &DistanceMatrix) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        let mut header = vec!["method".to_string()];
        header.extend(m.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in m.labels.iter().zip(&m.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

pub fn turnover_csv(rows: &[(String, Turnover)]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["method", "rho_small", "rho_large", "t", "t_max", "t_norm"])?;
        for (method, r) in rows {
            let mut rec = vec![method.clone()];
            rec.extend([r.rho_small, r.rho_large, r.t, r.t_max, r.t_norm].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub plan: String,
    pub method: String,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub ratio: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["plan", "method", "raw_score", "normalized_score", "ratio"])?;
        for r in rows {
            w.write_record([
                r.plan.clone(),
                r.method.clone(),
                r.raw_score.to_string(),
                r.normalized_score.to_string(),
                r.ratio.to_string(),
            ])?;
        }
        Ok(())
    })
}
