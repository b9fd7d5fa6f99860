//! Run configuration and the four artifact-producing commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{adjacent_turnovers, distance_matrix, SelectionSet};
use crate::baselines::{score_heads, BaselineConfig, Method as Baseline};
use crate::calibration::{anchors, generate, score, CalibrationSet, NiahSpec, Split, VocabLayout};
use crate::error::{Error, Result};
use crate::io::{self, EvalRow, MaskFile, PlanFile};
use crate::masks::HeadMask;
use crate::model::{ModelSpec, PlantedCircuit, ToyModel};
use crate::objective::{normalized_score, LossParams, ModelScorer, Oracle};
use crate::pipeline::{self, BoschConfig, HybridPlan};
use crate::presets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Bosch,
    BSingle,
    BMulti,
    BLayer,
    Rand,
    Bme,
    Intr,
    Dcam,
    Apl,
    Proxy,
    Qada,
    Razor,
    Fisher,
}

impl MethodKind {
    pub const ALL: [MethodKind; 13] = [
        MethodKind::Bosch,
        MethodKind::BSingle,
        MethodKind::BMulti,
        MethodKind::BLayer,
        MethodKind::Rand,
        MethodKind::Bme,
        MethodKind::Intr,
        MethodKind::Dcam,
        MethodKind::Apl,
        MethodKind::Proxy,
        MethodKind::Qada,
        MethodKind::Razor,
        MethodKind::Fisher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Bosch => "bosch",
            MethodKind::BSingle => "b-single",
            MethodKind::BMulti => "b-multi",
            MethodKind::BLayer => "b-layer",
            MethodKind::Rand => "rand",
            MethodKind::Bme => "bme",
            MethodKind::Intr => "intr",
            MethodKind::Dcam => "dcam",
            MethodKind::Apl => "apl",
            MethodKind::Proxy => "proxy",
            MethodKind::Qada => "qada",
            MethodKind::Razor => "razor",
            MethodKind::Fisher => "fisher",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    fn baseline(self) -> Option<Baseline> {
        match self {
            MethodKind::Dcam => Some(Baseline::Dcam),
            MethodKind::Apl => Some(Baseline::Apl),
            MethodKind::Proxy => Some(Baseline::Proxy),
            MethodKind::Qada => Some(Baseline::Qada),
            MethodKind::Razor => Some(Baseline::Razor),
            MethodKind::Fisher => Some(Baseline::Fisher),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `standard` or `two-layer`; ignored when `spec` is given.
    pub preset: String,
    pub spec: Option<ModelSpec>,
    pub circuit: Option<PlantedCircuit>,
    /// Build unplanted random weights instead of the circuit.
    pub random: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "standard".into(), spec: None, circuit: None, random: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetConfig {
    pub num_examples: usize,
    pub seq_len: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub needle_distance: [usize; 2],
    pub distractors: usize,
}

impl Default for SetConfig {
    fn default() -> Self {
        Self { num_examples: 64, seq_len: 128, key_len: 2, value_len: 1, needle_distance: [8, 96], distractors: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoschSection {
    pub kappa: usize,
    pub max_vars: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub percentiles: [f64; 2],
    pub buckets: Vec<f64>,
    pub layers_per_block: usize,
}

impl Default for BoschSection {
    fn default() -> Self {
        let b = BoschConfig::default();
        let p = LossParams::default();
        Self {
            kappa: b.kappa,
            max_vars: b.max_vars,
            alpha: p.alpha,
            gamma: p.gamma,
            percentiles: b.percentiles,
            buckets: b.buckets,
            layers_per_block: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: String,
    pub rho: f64,
    pub window: usize,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub calibration: SetConfig,
    pub evaluation: SetConfig,
    pub bosch: BoschSection,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: "bosch".into(),
            rho: 0.625,
            window: 16,
            out: None,
            model: ModelConfig::default(),
            calibration: SetConfig::default(),
            evaluation: SetConfig { num_examples: 128, ..SetConfig::default() },
            bosch: BoschSection::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn model_parts(&self) -> Result<(ModelSpec, Option<PlantedCircuit>)> {
        let (mut spec, circuit) = match (&self.model.spec, self.model.preset.as_str()) {
            (Some(s), _) => (s.clone(), self.model.circuit.clone()),
            (None, "standard") => {
                let (s, c) = presets::standard_toy(self.seed);
                (s, Some(self.model.circuit.clone().unwrap_or(c)))
            }
            (None, "two-layer") => {
                let (s, c) = presets::two_layer_induction(self.seed);
                (s, Some(self.model.circuit.clone().unwrap_or(c)))
            }
            (None, p) => return Err(Error::Config(format!("unknown model preset {p:?}"))),
        };
        if self.model.spec.is_none() {
            spec.seed = self.seed;
        }
        Ok((spec, if self.model.random { None } else { circuit }))
    }

    pub fn niah(&self, set: &SetConfig, vocab: usize) -> NiahSpec {
        NiahSpec {
            seq_len: set.seq_len,
            num_examples: set.num_examples,
            key_len: set.key_len,
            value_len: set.value_len,
            needle_distance: set.needle_distance,
            vocab: VocabLayout::standard(vocab),
            distractors: set.distractors,
            seed: self.seed,
        }
    }

    pub fn method_kind(&self) -> Result<MethodKind> {
        MethodKind::parse(&self.method)
    }

    pub fn bosch_config(&self) -> BoschConfig {
        BoschConfig {
            target_ratio: self.rho,
            kappa: self.bosch.kappa,
            max_vars: self.bosch.max_vars,
            percentiles: self.bosch.percentiles,
            buckets: self.bosch.buckets.clone(),
            seed: self.seed,
            search: Default::default(),
        }
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams { alpha: self.bosch.alpha, gamma: self.bosch.gamma, target_ratio: self.rho }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig { window: self.window, seed: self.seed, ..self.baseline.clone() }
    }

    /// Checks every section before any compute happens.
    pub fn validate(&self) -> Result<()> {
        let kind = self.method_kind()?;
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let (spec, circuit) = self.model_parts()?;
        spec.validate()?;
        if let Some(c) = &circuit {
            c.validate(&spec)?;
        }
        for set in [&self.calibration, &self.evaluation] {
            self.niah(set, spec.vocab).validate(spec.vocab)?;
            if set.seq_len > spec.max_seq_len {
                return Err(Error::SeqTooLong { len: set.seq_len, max: spec.max_seq_len });
            }
        }
        self.bosch_config().validate()?;
        if kind == MethodKind::BMulti && self.bosch.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be positive".into()));
        }
        self.baseline_config().validate()?;
        Ok(())
    }
}

/// A file written by a command together with its content hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Written {
    pub path: PathBuf,
    pub sha256: String,
}

fn emit(out: &mut Vec<Written>, path: PathBuf, bytes: &[u8]) -> Result<()> {
    io::write_bytes(&path, bytes)?;
    out.push(Written { sha256: io::sha256_hex(bytes), path });
    Ok(())
}

/// Builds the model and both example sets and writes them under `dir`.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path) -> Result<Vec<Written>> {
    cfg.validate()?;
    let (spec, circuit) = cfg.model_parts()?;
    let model = match &circuit {
        Some(c) => ToyModel::build(&spec, Some(c))?,
        None => ToyModel::build_random(&spec)?,
    };
    let cal = generate(&cfg.niah(&cfg.calibration, spec.vocab), spec.vocab, Split::Calibration)?;
    let eval = generate(&cfg.niah(&cfg.evaluation, spec.vocab), spec.vocab, Split::Evaluation)?;
    let mut out = Vec::new();
    let blob = io::encode_weights(&spec, model.weights())?;
    let manifest = io::ModelManifest { spec: spec.clone(), circuit, weights_sha256: io::sha256_hex(&blob) };
    emit(&mut out, dir.join("model.bin"), &blob)?;
    emit(&mut out, dir.join("model.json"), &io::to_json(&manifest)?)?;
    emit(&mut out, dir.join("calibration.json"), &io::to_json(&cal)?)?;
    emit(&mut out, dir.join("evaluation.json"), &io::to_json(&eval)?)?;
    Ok(out)
}

fn load_artifacts(dir: &Path) -> Result<(ToyModel, CalibrationSet)> {
    let model = io::load_model(dir).map_err(|e| match e {
        Error::Io(err) => Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}; run `gen` first", dir.display()))),
        other => other,
    })?;
    let set: CalibrationSet = io::read_json(&dir.join("calibration.json"))?;
    Ok((model, set))
}

pub fn plan_stem(method: &str, rho: f64) -> String {
    format!("{method}-rho{rho:.4}")
}

/// Runs one selection method and returns the plan without writing anything.
pub fn run_method(cfg: &RunConfig, model: &ToyModel, set: &CalibrationSet) -> Result<(HybridPlan, Option<Vec<u8>>, Vec<u8>)> {
    let kind = cfg.method_kind()?;
    let shape = model.shape();
    let bcfg = cfg.bosch_config();
    if let Some(b) = kind.baseline() {
        let table = score_heads(b, model, set, &cfg.baseline_config())?;
        let mut plan = HybridPlan::static_plan(kind.name(), table.select_mask(cfg.rho), cfg.rho);
        plan.oracle_evals = 0;
        return Ok((plan, Some(io::score_table_csv(&table)?), io::ledger_csv(&[])?));
    }
    let static_mask = match kind {
        MethodKind::Rand => Some(pipeline::rand_layers(shape, cfg.rho, cfg.seed)),
        MethodKind::Bme => Some(pipeline::begin_middle_end(shape, cfg.rho)),
        MethodKind::Intr => Some(pipeline::interleaved(shape, cfg.rho)),
        _ => None,
    };
    if let Some(mask) = static_mask {
        return Ok((HybridPlan::static_plan(kind.name(), mask, cfg.rho), None, io::ledger_csv(&[])?));
    }
    let oracle = Oracle::new(ModelScorer { model, set, window: cfg.window }, cfg.loss_params(), None)?;
    let plan = match kind {
        MethodKind::Bosch => pipeline::bosch(&oracle, &bcfg)?,
        MethodKind::BSingle => pipeline::b_single(&oracle, &bcfg)?,
        MethodKind::BMulti => pipeline::b_multi(&oracle, &bcfg, cfg.bosch.layers_per_block)?,
        MethodKind::BLayer => pipeline::b_layer(&oracle, &bcfg)?,
        _ => unreachable!("static methods handled above"),
    };
    Ok((plan, None, io::ledger_csv(&oracle.ledger())?))
}

pub fn cmd_search(cfg: &RunConfig, dir: &Path) -> Result<Vec<Written>> {
    cfg.validate()?;
    let (model, set) = load_artifacts(dir)?;
    let kind = cfg.method_kind()?;
    let (plan, table, ledger) = run_method(cfg, &model, &set)?;
    let stem = plan_stem(kind.name(), cfg.rho);
    let hash = model.spec().hash();
    let mut out = Vec::new();
    emit(&mut out, dir.join(format!("{stem}.plan.json")), &io::to_json(&PlanFile::new(&plan, &hash))?)?;
    emit(&mut out, dir.join(format!("{stem}.mask.json")), &io::to_json(&MaskFile::new(&plan.mask, &hash))?)?;
    emit(&mut out, dir.join(format!("{stem}.ledger.csv")), &ledger)?;
    if !plan.logs.is_empty() {
        emit(&mut out, dir.join(format!("{stem}.trace.csv")), &io::trace_csv(&plan)?)?;
    }
    if let Some(t) = table {
        emit(&mut out, dir.join(format!("{stem}.scores.csv")), &t)?;
    }
    Ok(out)
}

fn load_plans(paths: &[PathBuf]) -> Result<Vec<(String, PlanFile)>> {
    if paths.is_empty() {
        return Err(Error::Config("no plan files given".into()));
    }
    let plans: Vec<(String, PlanFile)> = paths
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().trim_end_matches(".plan.json").to_string()).unwrap_or_default();
            io::read_json(p).map(|f| (name, f))
        })
        .collect::<Result<_>>()?;
    let first = &plans[0].1.mask;
    for (name, p) in &plans {
        if (p.mask.layers, p.mask.heads, p.mask.kv_groups) != (first.layers, first.heads, first.kv_groups) {
            return Err(Error::Shape(format!("plan {name} has a different model shape")));
        }
    }
    Ok(plans)
}

/// Scores plans on the held-out evaluation set.
pub fn cmd_eval(cfg: &RunConfig, dir: &Path, plans: &[PathBuf]) -> Result<Vec<Written>> {
    cfg.validate()?;
    let plans = load_plans(plans)?;
    let model = io::load_model(dir)?;
    let eval: CalibrationSet = io::read_json(&dir.join("evaluation.json"))?;
    let anc = anchors(&model, &eval, cfg.window, cfg.bosch.gamma)?;
    let mut rows = Vec::new();
    for (name, p) in &plans {
        let mask = p.mask.to_mask()?;
        if mask.shape() != model.shape() {
            return Err(Error::Shape(format!("plan {name} does not match the model")));
        }
        let raw = score(&model, &mask, &eval, cfg.window)?;
        rows.push(EvalRow {
            plan: name.clone(),
            method: p.method.clone(),
            raw_score: raw,
            normalized_score: normalized_score(raw, &anc),
            ratio: mask.ratio(),
        });
    }
    let mut out = Vec::new();
    emit(&mut out, dir.join("eval.csv"), &io::eval_csv(&rows)?)?;
    Ok(out)
}

/// Jaccard matrix over all plans and turnover between adjacent ratios of each method.
pub fn cmd_analyze(dir: &Path, plans: &[PathBuf]) -> Result<Vec<Written>> {
    let plans = load_plans(plans)?;
    let sets: Vec<SelectionSet> = plans
        .iter()
        .map(|(name, p)| Ok(SelectionSet::from_mask(name, p.target_ratio, &p.mask.to_mask()?)))
        .collect::<Result<_>>()?;
    let matrix = distance_matrix(&sets)?;
    let mut by_method: BTreeMap<&str, Vec<SelectionSet>> = BTreeMap::new();
    for ((_, p), s) in plans.iter().zip(&sets) {
        by_method.entry(p.method.as_str()).or_default().push(s.clone());
    }
    let mut rows = Vec::new();
    for (method, group) in by_method.iter_mut() {
        group.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        group.dedup_by(|a, b| a.ratio == b.ratio);
        rows.extend(adjacent_turnovers(group)?.into_iter().map(|t| (method.to_string(), t)));
    }
    let mut out = Vec::new();
    emit(&mut out, dir.join("distance.csv"), &io::distance_csv(&matrix)?)?;
    emit(&mut out, dir.join("turnover.csv"), &io::turnover_csv(&rows)?)?;
    Ok(out)
}

pub fn all_full_plan_file(model: &ToyModel) -> PlanFile {
    let plan = HybridPlan::static_plan("full", HeadMask::all_full(model.shape()), 0.0);
    PlanFile::new(&plan, &model.spec().hash())
}
