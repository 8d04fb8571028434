use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use slotfill::corpus::{
    load_dataset, tokenize_utterance, Dataset, DatasetFormat, SchemaRegistry, SlotSchema, Split,
};
use slotfill::evaluator::{
    eval_examples, evaluate, generate_xschema_like, gold_records, render_table, run_protocol,
    slot_f1, sweep_csv, EvalReport, Experiment, Protocol,
};
use slotfill::model::{ModelParams, SlotTagger};
use slotfill::sampler::ValuePool;
use slotfill::synthdata::{collision_spec, toy_spec, transfer_spec, SynthSpec};
use slotfill::trainer::{make_split, Trainer, MODEL_FILE};
use slotfill::{Error, Result};

use crate::config::{load_with_schemas, ExperimentConfig};

pub const RESOLVED_CONFIG: &str = "config.json";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    write_stdout(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
}

pub fn convert(
    input: &Path,
    format: DatasetFormat,
    output: &Path,
    schemas_out: Option<&Path>,
) -> Result<()> {
    let data = load_dataset(input, format)?;
    data.save_jsonl(output)?;
    if let Some(path) = schemas_out {
        data.registry().save(path)?;
    }
    log::info!("wrote {} frames to {}", data.len(), output.display());
    Ok(())
}

fn report_json(report: &EvalReport) -> serde_json::Value {
    let total = report.total();
    json!({
        "micro_f1": report.micro_f1(),
        "precision": total.precision(),
        "recall": total.recall(),
        "tp": total.tp, "fp": total.fp, "fn": total.fn_,
        "per_slot": report.per_slot_json(),
        "partial": report.partial(),
        "skipped_slots": report.skipped_slots,
    })
}

pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let data = cfg.dataset()?;
    let (train_set, eval_set) = match &cfg.split.target {
        Some(target) => make_split(&data, target, cfg.split.n_target, cfg.train.seed)?,
        None => (
            data.clone(),
            cfg.eval_dataset()?
                .unwrap_or_else(|| Dataset::empty(Split::Eval)),
        ),
    };
    let words = cfg.embeddings(&[&data, &eval_set])?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    let resolved = json!({
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": {"train": cfg.train.seed, "sampler": cfg.sampler.seed},
        "train_frames": train_set.len(),
        "eval_frames": eval_set.len(),
    });
    write_file(
        &out.join(RESOLVED_CONFIG),
        &serde_json::to_string_pretty(&resolved)?,
    )?;

    let mut trainer = Trainer::new(
        &train_set,
        &eval_set,
        cfg.sampler.clone(),
        cfg.model.clone(),
        cfg.train.clone(),
        words,
    )?
    .with_run_dir(out)?;
    if resume {
        if out.join(MODEL_FILE).exists() {
            trainer = trainer.resume()?;
        } else {
            log::warn!("nothing to resume in {}; starting fresh", out.display());
        }
    }
    let outcome = trainer.run()?;
    print_json(&json!({
        "run_dir": out,
        "steps": cfg.train.total_steps,
        "final_loss": outcome.metrics.last().map(|m| m.loss),
        "best_eval_f1": outcome.best_eval_f1,
    }))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub format: DatasetFormat,
    pub schemas: Option<&'a Path>,
    pub train_dataset: Option<&'a Path>,
    pub k: usize,
    pub seed: u64,
    pub output: Option<&'a Path>,
}

pub fn eval(args: &EvalArgs<'_>) -> Result<()> {
    let params = ModelParams::<f32>::load(args.checkpoint)?;
    let eval_set = load_with_schemas(args.dataset, args.format, args.schemas)?;
    let train_set = match args.train_dataset {
        Some(p) => load_dataset(p, args.format)?,
        None => Dataset::empty(Split::Train),
    };
    let mut pool = ValuePool::build(&train_set, &eval_set);
    pool.add_registry_examples(train_set.registry());
    pool.add_registry_examples(eval_set.registry());
    let report = evaluate(&params, &eval_set, &pool, args.k, args.seed)?;
    let mut value = report_json(&report);
    value["K"] = json!(args.k);
    value["seed"] = json!(args.seed);
    if let Some(path) = args.output {
        write_file(path, &serde_json::to_string_pretty(&value)?)?;
    }
    print_json(&value)
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub text: &'a str,
    pub schemas: Option<&'a Path>,
    pub intent: Option<&'a str>,
    pub slot: Option<&'a str>,
    pub description: Option<&'a str>,
    pub examples: &'a [String],
    pub k: usize,
    pub seed: u64,
}

pub fn predict(args: &PredictArgs<'_>) -> Result<()> {
    let params = ModelParams::<f32>::load(args.checkpoint)?;
    let tokens = tokenize_utterance(args.text);
    let given: Vec<Vec<String>> = args
        .examples
        .iter()
        .map(|e| tokenize_utterance(e))
        .collect();
    let mut targets: Vec<(SlotSchema, Vec<Vec<String>>)> = Vec::new();
    match (args.schemas, args.intent) {
        (Some(path), Some(intent)) => {
            let registry = SchemaRegistry::load(path)?;
            if !registry.contains_intent(intent) {
                return Err(Error::Config(format!(
                    "{} has no intent `{intent}`",
                    path.display()
                )));
            }
            let mut pool = ValuePool::default();
            pool.add_registry_examples(&registry);
            for schema in registry.slots(intent) {
                if args.slot.is_some_and(|s| s != schema.name) {
                    continue;
                }
                let examples = if !given.is_empty() {
                    given.clone()
                } else if params.uses_examples() {
                    eval_examples(&pool, intent, &schema.name, args.k, args.seed)?
                } else {
                    Vec::new()
                };
                targets.push((schema.clone(), examples));
            }
            if targets.is_empty() {
                return Err(Error::Config(format!(
                    "no matching slot in intent `{intent}`"
                )));
            }
        }
        (None, None) => {
            let name = args
                .slot
                .ok_or_else(|| Error::Config("give --slot, or --schemas with --intent".into()))?;
            let description = args.description.map(tokenize_utterance);
            targets.push((SlotSchema::new(name, description, Vec::new())?, given));
        }
        _ => return Err(Error::Config("--schemas and --intent go together".into())),
    }
    let mut spans = Vec::new();
    for (schema, examples) in &targets {
        for (start, end) in params.predict(&tokens, schema, examples)? {
            spans.push(json!({
                "slot": schema.name,
                "start": start,
                "end": end,
                "value": tokens[start..end].join(" "),
            }));
        }
    }
    print_json(&json!({"tokens": tokens, "spans": spans}))
}

pub fn sweep(cfg: &ExperimentConfig, output: Option<&Path>) -> Result<()> {
    let data = cfg.dataset()?;
    let renamed = match cfg.protocol.protocol {
        Protocol::CrossSchema => Some(match cfg.eval_dataset()? {
            Some(d) => d,
            None => generate_xschema_like(&data, &cfg.rename, cfg.protocol.base_seed)?,
        }),
        Protocol::LeaveOneIntentOut => None,
    };
    let mut sources = vec![&data];
    sources.extend(renamed.as_ref());
    let exp = Experiment {
        sampler: cfg.sampler.clone(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        words: cfg.embeddings(&sources)?,
    };
    let report = run_protocol(&data, renamed.as_ref(), &cfg.protocol, &exp)?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_file(
        &out.join("config.json"),
        &serde_json::to_string_pretty(cfg)?,
    )?;
    write_file(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write_file(&out.join("table.txt"), &render_table(&report))?;
    let csv = sweep_csv(&report)?;
    let csv_path: PathBuf = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("sweep.csv"));
    write_file(&csv_path, &csv)?;
    eprint!("{}", render_table(&report));
    write_stdout(&csv)
}

/// Scores predicted frames against gold frames; both files list the same
/// utterances in the same order.
pub fn f1(gold: &Path, pred: &Path, format: DatasetFormat) -> Result<()> {
    let gold = load_dataset(gold, format)?;
    let pred = load_dataset(pred, format)?;
    if gold.len() != pred.len() {
        return Err(Error::Validation(format!(
            "{} gold frames but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.frames().iter().zip(pred.frames()).enumerate() {
        if g.tokens != p.tokens {
            return Err(Error::Validation(format!(
                "frame {i}: gold and predicted tokens differ"
            )));
        }
    }
    let report = slot_f1(&gold_records(gold.frames()), &gold_records(pred.frames()));
    print_json(&report_json(&report))
}

pub fn synth(preset: &str, seed: u64, frames: Option<usize>, out: &Path) -> Result<()> {
    let mut spec: SynthSpec = match preset {
        "toy" => toy_spec(50, seed),
        "transfer" => transfer_spec(seed),
        "collision" => collision_spec(seed),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?;
            let mut spec: SynthSpec = serde_json::from_str(&text)?;
            spec.seed = seed;
            spec
        }
    };
    if let Some(n) = frames {
        spec.frames_per_intent = n;
    }
    let corpus = spec.generate()?;
    corpus.write(out)?;
    write_file(
        &out.join("spec.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    log::info!("wrote {} frames to {}", corpus.dataset.len(), out.display());
    Ok(())
}
