//! Exact-span slot F1, per-slot evaluation and the experiment protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Frame, SchemaRegistry, SlotSchema, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SlotTagger};
use crate::nn::WordEmbeddingTable;
use crate::rng::{hash_str, stream};
use crate::sampler::{select_examples, SamplerConfig, ValuePool};
use crate::trainer::{make_split, train, TrainConfig};

const STREAM_EVAL_EXAMPLES: u64 = 11;
const STREAM_RENAME: u64 = 12;

/// One labelled span of one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanRecord {
    pub frame: usize,
    pub slot: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Harmonic mean with the 0/0 convention.
fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1_of(self.precision(), self.recall())
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub per_slot: BTreeMap<String, Counts>,
    /// Slots that could not be evaluated (no conditioning values).
    pub skipped_slots: Vec<String>,
}

impl EvalReport {
    pub fn total(&self) -> Counts {
        let mut c = Counts::default();
        for v in self.per_slot.values() {
            c.add(v);
        }
        c
    }

    /// Micro-averaged over summed counts.
    pub fn micro_f1(&self) -> f64 {
        self.total().f1()
    }

    pub fn partial(&self) -> bool {
        !self.skipped_slots.is_empty()
    }

    pub fn per_slot_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .per_slot
            .iter()
            .map(|(slot, c)| {
                (
                    slot.clone(),
                    serde_json::json!({
                        "tp": c.tp, "fp": c.fp, "fn": c.fn_,
                        "precision": c.precision(), "recall": c.recall(), "f1": c.f1(),
                    }),
                )
            })
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Exact `(frame, slot, start, end)` matching; duplicates count once.
pub fn slot_f1(gold: &[SpanRecord], predicted: &[SpanRecord]) -> EvalReport {
    let gold: BTreeSet<&SpanRecord> = gold.iter().collect();
    let pred: BTreeSet<&SpanRecord> = predicted.iter().collect();
    let mut per_slot: BTreeMap<String, Counts> = BTreeMap::new();
    for p in &pred {
        let c = per_slot.entry(p.slot.clone()).or_default();
        if gold.contains(p) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for g in gold.difference(&pred) {
        per_slot.entry(g.slot.clone()).or_default().fn_ += 1;
    }
    EvalReport {
        per_slot,
        skipped_slots: Vec::new(),
    }
}

/// Fixed conditioning values for one evaluated slot.
pub fn eval_examples(
    pool: &ValuePool,
    intent: &str,
    slot: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let mut rng = stream(
        seed,
        &[STREAM_EVAL_EXAMPLES, hash_str(intent), hash_str(slot)],
    );
    select_examples(pool.values(intent, slot), slot, k, &mut rng)
}

/// Tags every eval frame for every slot of its intent's schema and scores
/// the result. Slots without conditioning values are skipped and listed.
pub fn evaluate(
    tagger: &dyn SlotTagger,
    eval: &Dataset,
    pool: &ValuePool,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut skipped = BTreeSet::new();
    let mut examples_for: BTreeMap<(String, String), Option<Vec<Vec<String>>>> = BTreeMap::new();
    for (idx, frame) in eval.frames().iter().enumerate() {
        for schema in eval.registry().slots(&frame.intent) {
            let key = (frame.intent.clone(), schema.name.clone());
            let examples = examples_for.entry(key).or_insert_with(|| {
                if !tagger.uses_examples() {
                    return Some(Vec::new());
                }
                eval_examples(pool, &frame.intent, &schema.name, k, seed).ok()
            });
            let Some(examples) = examples else {
                skipped.insert(schema.name.clone());
                continue;
            };
            for (start, end) in frame.spans_of(&schema.name) {
                gold.push(SpanRecord {
                    frame: idx,
                    slot: schema.name.clone(),
                    start,
                    end,
                });
            }
            for (start, end) in tagger.predict(&frame.tokens, schema, examples)? {
                pred.push(SpanRecord {
                    frame: idx,
                    slot: schema.name.clone(),
                    start,
                    end,
                });
            }
        }
    }
    let mut report = slot_f1(&gold, &pred);
    for slot in &skipped {
        log::warn!("slot `{slot}` skipped: no conditioning values");
        report.per_slot.remove(slot);
    }
    report.skipped_slots = skipped.into_iter().collect();
    Ok(report)
}

/// Gold spans of a dataset, for the standalone metric.
pub fn gold_records(frames: &[Frame]) -> Vec<SpanRecord> {
    frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| {
            f.annotations.iter().map(move |a| SpanRecord {
                frame: i,
                slot: a.name.clone(),
                start: a.start,
                end: a.end,
            })
        })
        .collect()
}

/// Copy of `base` with slots renamed per intent. Renamed slots get a
/// description from the new name and up to ten seeded examples drawn from
/// the old schema's examples and the base span values.
pub fn generate_xschema_like(
    base: &Dataset,
    rename_map: &BTreeMap<String, BTreeMap<String, String>>,
    seed: u64,
) -> Result<Dataset> {
    let registry = base.registry();
    for (intent, map) in rename_map {
        if !registry.contains_intent(intent) {
            return Err(Error::Config(format!(
                "rename map names unknown intent `{intent}`"
            )));
        }
        let mut targets = BTreeSet::new();
        for (old, new) in map {
            if registry.get(intent, old).is_none() {
                return Err(Error::Config(format!(
                    "rename map names unknown slot `{intent}/{old}`"
                )));
            }
            if !targets.insert(new) {
                return Err(Error::Config(format!(
                    "two slots of `{intent}` renamed to `{new}`"
                )));
            }
        }
    }
    let renamed = |intent: &str, slot: &str| -> String {
        rename_map
            .get(intent)
            .and_then(|m| m.get(slot))
            .cloned()
            .unwrap_or_else(|| slot.to_string())
    };
    let mut new_registry = SchemaRegistry::new();
    for intent in registry.intents() {
        for schema in registry.slots(intent) {
            let new_name = renamed(intent, &schema.name);
            if new_name == schema.name {
                new_registry.insert(intent, schema.clone())?;
                continue;
            }
            let mut candidates: Vec<Vec<String>> = schema.example_values.clone();
            for frame in base.frames_for(intent) {
                for v in frame.values_of(&schema.name) {
                    let v: Vec<String> = v.iter().map(|t| t.to_lowercase()).collect();
                    if !candidates.contains(&v) {
                        candidates.push(v);
                    }
                }
            }
            let mut rng = stream(
                seed,
                &[STREAM_RENAME, hash_str(intent), hash_str(&new_name)],
            );
            let examples = candidates.choose_multiple(&mut rng, 10).cloned().collect();
            new_registry.insert(intent, SlotSchema::new(&new_name, None, examples)?)?;
        }
    }
    let frames = base
        .frames()
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for a in &mut f.annotations {
                a.name = renamed(&f.intent, &a.name);
            }
            f
        })
        .collect();
    Dataset::new(frames, new_registry, base.split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    LeaveOneIntentOut,
    CrossSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Target intents; empty means every intent.
    pub targets: Vec<String>,
    pub n_target: Vec<usize>,
    /// `K = 0` means the description-only model.
    pub k: Vec<usize>,
    /// Adds description-only cells even if 0 is not in `k`.
    pub include_ct: bool,
    pub folds: usize,
    pub base_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            protocol: Protocol::LeaveOneIntentOut,
            targets: Vec::new(),
            n_target: vec![0],
            k: vec![2],
            include_ct: true,
            folds: 3,
            base_seed: 0,
        }
    }
}

/// Everything a protocol run needs besides the data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub words: WordEmbeddingTable<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub intent: String,
    pub n_target: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub model: String,
    pub fold: usize,
    pub seed: u64,
    pub per_slot: serde_json::Value,
    pub micro_f1: Option<f64>,
    #[serde(default)]
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub intent: String,
    pub n_target: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub model: String,
    pub mean_f1: Option<f64>,
    pub per_fold: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub cells: Vec<Cell>,
    pub summary: Vec<Summary>,
}

pub const MODEL_CT: &str = "ct";
pub const MODEL_EXAMPLES: &str = "examples";

fn fold_seed(base: u64, fold: usize) -> u64 {
    base.wrapping_add(fold as u64)
}

/// One train+evaluate cell; errors are recorded, not propagated.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    exp: &Experiment,
    train_set: &Dataset,
    eval_set: &Dataset,
    intent: &str,
    n_target: usize,
    k: usize,
    fold: usize,
    seed: u64,
) -> Cell {
    let ct = k == 0;
    let model_cfg = ModelConfig {
        use_examples: !ct,
        ..exp.model.clone()
    };
    let sampler = SamplerConfig {
        num_examples: k,
        seed,
        ..exp.sampler.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let outcome = train(
        train_set,
        eval_set,
        &sampler,
        &model_cfg,
        &train_cfg,
        exp.words.clone(),
        None,
    )
    .and_then(|out| {
        let mut pool = ValuePool::build(train_set, eval_set);
        pool.add_registry_examples(train_set.registry());
        pool.add_registry_examples(eval_set.registry());
        evaluate(&out.params, eval_set, &pool, k, seed)
    });
    let (per_slot, micro_f1, partial, error) = match outcome {
        Ok(report) => (
            report.per_slot_json(),
            Some(report.micro_f1()),
            report.partial(),
            None,
        ),
        Err(e) => {
            log::error!("cell {intent} n={n_target} K={k} fold={fold}: {e}");
            (serde_json::json!({}), None, false, Some(e.to_string()))
        }
    };
    Cell {
        intent: intent.to_string(),
        n_target,
        k,
        model: if ct { MODEL_CT } else { MODEL_EXAMPLES }.to_string(),
        fold,
        seed,
        per_slot,
        micro_f1,
        partial,
        error,
    }
}

/// Splits for one `(target, n_target, fold)` under the given protocol.
fn protocol_split(
    dataset: &Dataset,
    renamed: Option<&Dataset>,
    target: &str,
    n_target: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let Some(renamed) = renamed else {
        return make_split(dataset, target, n_target, seed);
    };
    let (target_train, eval) = make_split(renamed, target, n_target, seed)?;
    let mut frames: Vec<Frame> = dataset
        .frames()
        .iter()
        .filter(|f| f.intent != target)
        .cloned()
        .collect();
    frames.extend(target_train.frames_for(target).cloned());
    let mut registry = SchemaRegistry::new();
    for intent in dataset.registry().intents().filter(|i| *i != target) {
        for s in dataset.registry().slots(intent) {
            registry.insert(intent, s.clone())?;
        }
    }
    for s in renamed.registry().slots(target) {
        registry.insert(target, s.clone())?;
    }
    Ok((Dataset::new(frames, registry, Split::Train)?, eval))
}

/// Runs the full grid. Cross-schema mode takes target frames and schemas
/// from `renamed` and everything else from `dataset`.
pub fn run_protocol(
    dataset: &Dataset,
    renamed: Option<&Dataset>,
    cfg: &ProtocolConfig,
    exp: &Experiment,
) -> Result<ProtocolReport> {
    let renamed = match (cfg.protocol, renamed) {
        (Protocol::CrossSchema, None) => {
            return Err(Error::Config(
                "cross-schema protocol needs a renamed evaluation dataset".into(),
            ))
        }
        (Protocol::CrossSchema, Some(r)) => Some(r),
        (Protocol::LeaveOneIntentOut, _) => None,
    };
    let source = renamed.unwrap_or(dataset);
    let targets: Vec<String> = if cfg.targets.is_empty() {
        source.registry().intents().map(str::to_string).collect()
    } else {
        cfg.targets.clone()
    };
    let mut ks = cfg.k.clone();
    if cfg.include_ct && !ks.contains(&0) {
        ks.insert(0, 0);
    }
    let mut cells = Vec::new();
    for target in &targets {
        for &n in &cfg.n_target {
            for fold in 0..cfg.folds {
                let seed = fold_seed(cfg.base_seed, fold);
                match protocol_split(dataset, renamed, target, n, seed) {
                    Ok((train_set, eval_set)) => {
                        for &k in &ks {
                            log::info!("cell {target} n={n} K={k} fold={fold}");
                            cells.push(run_cell(
                                exp, &train_set, &eval_set, target, n, k, fold, seed,
                            ));
                        }
                    }
                    Err(e) => {
                        for &k in &ks {
                            cells.push(Cell {
                                intent: target.clone(),
                                n_target: n,
                                k,
                                model: if k == 0 { MODEL_CT } else { MODEL_EXAMPLES }.into(),
                                fold,
                                seed,
                                per_slot: serde_json::json!({}),
                                micro_f1: None,
                                partial: false,
                                error: Some(e.to_string()),
                            });
                        }
                    }
                }
            }
        }
    }
    let summary = summarize(&cells);
    Ok(ProtocolReport {
        protocol: cfg.protocol,
        cells,
        summary,
    })
}

/// Mean and per-fold F1 per `(intent, n_target, K, model)`.
pub fn summarize(cells: &[Cell]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, usize, usize, String), Vec<(usize, Option<f64>)>> =
        BTreeMap::new();
    for c in cells {
        groups
            .entry((c.intent.clone(), c.n_target, c.k, c.model.clone()))
            .or_default()
            .push((c.fold, c.micro_f1));
    }
    groups
        .into_iter()
        .map(|((intent, n_target, k, model), mut folds)| {
            folds.sort_by_key(|(f, _)| *f);
            let per_fold: Vec<Option<f64>> = folds.into_iter().map(|(_, v)| v).collect();
            let ok: Vec<f64> = per_fold.iter().flatten().copied().collect();
            let mean_f1 = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
            Summary {
                intent,
                n_target,
                k,
                model,
                mean_f1,
                per_fold,
            }
        })
        .collect()
}

fn column_label(k: usize) -> String {
    if k == 0 {
        "CT".to_string()
    } else {
        format!("+{k}Ex")
    }
}

/// Plain-text table: one row per intent plus an average row, one column
/// per `(n_target, K)`; entries are fold-mean F1 in percent.
pub fn render_table(report: &ProtocolReport) -> String {
    let mut columns: Vec<(usize, usize)> =
        report.summary.iter().map(|s| (s.n_target, s.k)).collect();
    columns.sort();
    columns.dedup();
    let mut intents: Vec<&str> = report.summary.iter().map(|s| s.intent.as_str()).collect();
    intents.sort();
    intents.dedup();
    let lookup = |intent: &str, col: (usize, usize)| {
        report
            .summary
            .iter()
            .find(|s| s.intent == intent && (s.n_target, s.k) == col)
            .and_then(|s| s.mean_f1)
    };
    let width = intents.iter().map(|i| i.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "intent");
    for (n, k) in &columns {
        let _ = write!(out, " {:>10}", format!("{n}:{}", column_label(*k)));
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |f| format!("{:.1}", 100.0 * f));
    for intent in &intents {
        let _ = write!(out, "{intent:width$}");
        for col in &columns {
            let _ = write!(out, " {:>10}", fmt(lookup(intent, *col)));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:width$}", "Average");
    for col in &columns {
        let vals: Vec<f64> = intents.iter().filter_map(|i| lookup(i, *col)).collect();
        let avg = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let _ = write!(out, " {:>10}", fmt(avg));
    }
    out.push('\n');
    out
}

/// `intent,n_target,k,f1,folds` rows, one per summary entry; `f1` is the
/// fold mean (empty if every fold failed).
pub fn sweep_csv(report: &ProtocolReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["intent", "n_target", "k", "f1", "folds"])?;
    for s in &report.summary {
        let f1 = s.mean_f1.map_or(String::new(), |v| format!("{v:.6}"));
        w.write_record([
            s.intent.clone(),
            s.n_target.to_string(),
            s.k.to_string(),
            f1,
            s.per_fold.len().to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output of utf-8 fields is utf-8"))
}
