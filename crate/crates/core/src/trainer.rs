//! Training loop and train/eval splitting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, SchemaRegistry, Split, TaggedInstance};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::{ModelConfig, ModelParams};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::{Adam, AdamConfig, Params, WordEmbeddingTable};
use crate::rng::{hash_str, stream};
use crate::sampler::{
    apply_replacement, replacement_rate, sample_instances, select_examples, SamplerConfig,
    ValuePool,
};

const STREAM_EPOCH: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_REPLACE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_SPLIT: u64 = 5;

pub const MODEL_FILE: &str = "model.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// 0 disables periodic checkpoints (the final one is always written
    /// when a run directory is given).
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub log_every: u64,
    /// Return the best-eval snapshot instead of the final parameters.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 5000,
            batch_size: 32,
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
            eval_every: 0,
            log_every: 10,
            keep_best: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub replacement_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<MetricRecord>,
    pub best_eval_f1: Option<f64>,
}

/// One prepared training example.
#[derive(Debug, Clone)]
struct Item {
    instance: TaggedInstance,
    examples: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Position {
    step: u64,
    epoch: u64,
    offset: usize,
}

/// Mutable state of a run. Steps are counted from 1; `step` is the number
/// of updates applied so far.
pub struct Trainer<'a> {
    train: &'a Dataset,
    eval: &'a Dataset,
    pool: ValuePool,
    sampler: SamplerConfig,
    config: TrainConfig,
    params: ModelParams<f32>,
    optimizer: Adam<f32>,
    step: u64,
    epoch: u64,
    offset: usize,
    items: Vec<Item>,
    metrics: Vec<MetricRecord>,
    best: Option<(f64, ModelParams<f32>)>,
    run_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a Dataset,
        eval: &'a Dataset,
        sampler: SamplerConfig,
        model: ModelConfig,
        config: TrainConfig,
        words: WordEmbeddingTable<f32>,
    ) -> Result<Self> {
        sampler.validate()?;
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        let mut pool = ValuePool::build(train, eval);
        pool.add_registry_examples(train.registry());
        pool.add_registry_examples(eval.registry());
        let params = ModelParams::init(model, words, config.seed)?;
        let optimizer = Adam::new(config.adam, &params);
        Ok(Trainer {
            train,
            eval,
            pool,
            sampler,
            config,
            params,
            optimizer,
            step: 0,
            epoch: 0,
            offset: 0,
            items: Vec::new(),
            metrics: Vec::new(),
            best: None,
            run_dir: None,
        })
    }

    /// Checkpoints and metrics go to `dir` (created if missing).
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.run_dir = Some(dir);
        Ok(self)
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn pool(&self) -> &ValuePool {
        &self.pool
    }

    /// Instances of one epoch with freshly drawn examples, shuffled.
    fn build_epoch(&self, epoch: u64) -> Result<Vec<Item>> {
        let k = if self.params.config.use_examples {
            self.sampler.num_examples
        } else {
            0
        };
        let registry = self.train.registry();
        let mut items = Vec::new();
        let mut skipped = 0usize;
        for (idx, frame) in self.train.frames().iter().enumerate() {
            let mut rng = stream(self.sampler.seed, &[STREAM_EPOCH, epoch, idx as u64]);
            for instance in sample_instances(frame, registry, &self.sampler, &mut rng)? {
                let values = self.pool.values(&frame.intent, &instance.schema.name);
                match select_examples(values, &instance.schema.name, k, &mut rng) {
                    Ok(examples) => items.push(Item { instance, examples }),
                    Err(Error::EmptyPool { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        if skipped > 0 {
            log::warn!(
                "epoch {epoch}: skipped {skipped} instances whose slot has no conditioning values"
            );
        }
        if items.is_empty() {
            return Err(Error::Config(
                "sampling produced no training instances".into(),
            ));
        }
        items.shuffle(&mut stream(self.sampler.seed, &[STREAM_SHUFFLE, epoch]));
        Ok(items)
    }

    fn next_batch(&mut self) -> Result<Vec<Item>> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.offset >= self.items.len() {
                if !self.items.is_empty() {
                    self.epoch += 1;
                }
                self.items = self.build_epoch(self.epoch)?;
                self.offset = 0;
            }
            batch.push(self.items[self.offset].clone());
            self.offset += 1;
        }
        Ok(batch)
    }

    /// Rate applied to the batch that becomes update `step` (1-based):
    /// 0 for the first batch, the maximum for the last.
    fn rate_for(&self, step: u64) -> f64 {
        replacement_rate(
            step - 1,
            self.config.total_steps.saturating_sub(1),
            &self.sampler,
        )
    }

    /// Runs one update; returns the mean instance loss of the batch.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let rate = self.rate_for(step);
        let batch = self.next_batch()?;
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for (j, item) in batch.iter().enumerate() {
            let mut rng = stream(self.sampler.seed, &[STREAM_REPLACE, step, j as u64]);
            let (instance, examples) =
                apply_replacement(&item.instance, &item.examples, rate, &mut rng);
            let mut drop_rng = stream(self.config.seed, &[STREAM_DROPOUT, step, j as u64]);
            total += self.params.loss_and_grad(
                &instance.frame_tokens,
                &instance.schema,
                &examples,
                &instance.tags,
                &mut grads,
                Some(&mut drop_rng),
            )?;
        }
        grads.scale(1.0 / batch.len() as f32);
        self.optimizer.step(&mut self.params, &grads)?;
        self.step = step;
        Ok(total / batch.len() as f64)
    }

    /// Trains until `total_steps` updates have been applied.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let total = self.config.total_steps;
        let mut window = Vec::new();
        while self.step < total {
            let loss = self.train_step()?;
            let step = self.step;
            window.push(loss);
            let eval_f1 = if self.config.eval_every > 0
                && (step.is_multiple_of(self.config.eval_every) || step == total)
            {
                Some(self.evaluate_now()?)
            } else {
                None
            };
            if step.is_multiple_of(self.config.log_every.max(1))
                || step == total
                || eval_f1.is_some()
            {
                let record = MetricRecord {
                    step,
                    loss: window.iter().sum::<f64>() / window.len() as f64,
                    replacement_rate: self.rate_for(step),
                    eval_f1,
                };
                window.clear();
                log::info!(
                    "step {step} loss {:.4} rate {:.3}",
                    record.loss,
                    record.replacement_rate
                );
                self.append_metric(record)?;
            }
            if self.config.checkpoint_every > 0
                && step.is_multiple_of(self.config.checkpoint_every)
                && step != total
            {
                self.save_state()?;
            }
        }
        self.save_state()?;
        let best_eval_f1 = self.best.as_ref().map(|(f1, _)| *f1);
        let params = match (self.config.keep_best, self.best) {
            (true, Some((_, best))) => best,
            _ => self.params,
        };
        Ok(TrainOutcome {
            params,
            metrics: self.metrics,
            best_eval_f1,
        })
    }

    fn evaluate_now(&mut self) -> Result<f64> {
        if self.eval.is_empty() {
            return Ok(0.0);
        }
        let report = evaluate(
            &self.params,
            self.eval,
            &self.pool,
            self.sampler.num_examples,
            self.config.seed,
        )?;
        let f1 = report.micro_f1();
        if self.best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            self.best = Some((f1, self.params.clone()));
            if let Some(dir) = &self.run_dir {
                self.params.save(dir.join(BEST_FILE))?;
            }
        }
        Ok(f1)
    }

    fn append_metric(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let path = dir.join(METRICS_FILE);
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(file, "{}", serde_json::to_string(&record)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        self.metrics.push(record);
        Ok(())
    }

    fn save_state(&self) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        self.params.save(dir.join(MODEL_FILE))?;
        let pos = Position {
            step: self.step,
            epoch: self.epoch,
            offset: self.offset,
        };
        write_checkpoint(
            dir.join(OPTIMIZER_FILE),
            serde_json::to_value(&pos)?,
            &self.optimizer.state_arrays(),
        )
    }

    /// Restores parameters, optimizer moments and sampling position from
    /// the run directory, and truncates the metrics log to match.
    pub fn resume(mut self) -> Result<Self> {
        let dir = self
            .run_dir
            .clone()
            .ok_or_else(|| Error::Config("resume needs a run directory".into()))?;
        let params = ModelParams::<f32>::load(dir.join(MODEL_FILE))?;
        if params.config != self.params.config {
            return Err(Error::Config(
                "checkpoint model config differs from the requested one".into(),
            ));
        }
        let (meta, arrays) = read_checkpoint(dir.join(OPTIMIZER_FILE))?;
        let pos: Position = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("bad position: {e}")))?;
        self.optimizer.restore(pos.step, &arrays)?;
        self.params = params;
        self.step = pos.step;
        self.epoch = pos.epoch;
        self.offset = pos.offset;
        self.items = if pos.offset > 0 || pos.step > 0 {
            self.build_epoch(pos.epoch)?
        } else {
            Vec::new()
        };
        let metrics_path = dir.join(METRICS_FILE);
        if metrics_path.exists() {
            let text =
                fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            let mut kept = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let record: MetricRecord = serde_json::from_str(line)?;
                if record.step <= pos.step {
                    kept.push_str(line);
                    kept.push('\n');
                    self.metrics.push(record);
                }
            }
            fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
        }
        log::info!("resumed at step {}", self.step);
        Ok(self)
    }
}

/// Convenience wrapper: build a [`Trainer`] and run it to completion.
pub fn train(
    train: &Dataset,
    eval: &Dataset,
    sampler: &SamplerConfig,
    model: &ModelConfig,
    config: &TrainConfig,
    words: WordEmbeddingTable<f32>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(
        train,
        eval,
        sampler.clone(),
        model.clone(),
        config.clone(),
        words,
    )?;
    if let Some(dir) = run_dir {
        trainer = trainer.with_run_dir(dir)?;
    }
    trainer.run()
}

/// Leave-one-intent-out split: every frame of other intents plus
/// `n_target` (seeded) frames of `target` for training; the remaining
/// target frames for evaluation.
pub fn make_split(
    dataset: &Dataset,
    target: &str,
    n_target: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !dataset.registry().contains_intent(target) {
        return Err(Error::Config(format!("unknown target intent `{target}`")));
    }
    let mut target_frames: Vec<_> = dataset.frames_for(target).cloned().collect();
    if n_target > target_frames.len() {
        return Err(Error::Config(format!(
            "n_target = {n_target} exceeds the {} frames of `{target}`",
            target_frames.len()
        )));
    }
    target_frames.shuffle(&mut stream(seed, &[STREAM_SPLIT, hash_str(target)]));
    let eval_frames = target_frames.split_off(n_target);
    if eval_frames.is_empty() {
        return Err(Error::Config(format!(
            "no `{target}` frames left for evaluation"
        )));
    }
    let mut train_frames: Vec<_> = dataset
        .frames()
        .iter()
        .filter(|f| f.intent != target)
        .cloned()
        .collect();
    train_frames.extend(target_frames);
    let mut eval_registry = SchemaRegistry::new();
    for schema in dataset.registry().slots(target) {
        eval_registry.insert(target, schema.clone())?;
    }
    Ok((
        Dataset::new(train_frames, dataset.registry().clone(), Split::Train)?,
        Dataset::new(eval_frames, eval_registry, Split::Eval)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Frame, SlotSchema, SlotSpan};

    fn toy() -> Dataset {
        let mut frames = Vec::new();
        let mut reg = SchemaRegistry::new();
        for (intent, slot, values) in [
            ("music", "service", ["spotify", "deezer", "pandora"]),
            ("travel", "city", ["paris", "london", "rome"]),
        ] {
            reg.insert(intent, SlotSchema::from_name(slot).unwrap())
                .unwrap();
            reg.insert(intent, SlotSchema::from_name("time").unwrap())
                .unwrap();
            for (i, v) in values.iter().enumerate() {
                frames.push(Frame {
                    intent: intent.into(),
                    tokens: vec![
                        "go".into(),
                        "to".into(),
                        v.to_string(),
                        if i % 2 == 0 {
                            "now".into()
                        } else {
                            "later".into()
                        },
                    ],
                    annotations: vec![
                        SlotSpan {
                            name: slot.into(),
                            start: 2,
                            end: 3,
                        },
                        SlotSpan {
                            name: "time".into(),
                            start: 3,
                            end: 4,
                        },
                    ],
                });
            }
        }
        Dataset::new(frames, reg, Split::Train).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_w: 8,
            d_c: 4,
            d_en: 8,
            char_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn words() -> WordEmbeddingTable<f32> {
        WordEmbeddingTable::random(["go", "to", "now", "later", "paris", "spotify"], 8, 0)
    }

    #[test]
    fn split_sizes() {
        let data = toy();
        let (train, eval) = make_split(&data, "music", 0, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (3, 3));
        let (train, eval) = make_split(&data, "music", 2, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (5, 1));
        assert_eq!(eval.registry().intents().collect::<Vec<_>>(), ["music"]);
        assert!(matches!(
            make_split(&data, "music", 3, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_split(&data, "nope", 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = toy();
        let (train_set, eval) = make_split(&data, "music", 0, 1).unwrap();
        let cfg = TrainConfig {
            total_steps: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(
            &train_set,
            &eval,
            &SamplerConfig::default(),
            &small(),
            &cfg,
            words(),
            None,
        )
        .unwrap();
        let init = ModelParams::init(small(), words(), 5).unwrap();
        assert_eq!(out.params, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn empty_training_data_rejected() {
        let empty = Dataset::empty(Split::Train);
        let r = Trainer::new(
            &empty,
            &empty,
            SamplerConfig::default(),
            small(),
            TrainConfig::default(),
            words(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn seeded_runs_are_identical_and_resume_is_exact() {
        let data = toy();
        let (train_set, eval) = make_split(&data, "music", 1, 1).unwrap();
        let cfg = TrainConfig {
            total_steps: 12,
            batch_size: 4,
            checkpoint_every: 5,
            log_every: 1,
            eval_every: 6,
            seed: 3,
            ..TrainConfig::default()
        };
        let sampler = SamplerConfig {
            num_examples: 1,
            ..SamplerConfig::default()
        };
        let a = train(&train_set, &eval, &sampler, &small(), &cfg, words(), None).unwrap();
        let b = train(&train_set, &eval, &sampler, &small(), &cfg, words(), None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 12);
        assert!(a.metrics[5].eval_f1.is_some());
        assert_eq!(a.metrics[0].replacement_rate, 0.0);
        assert_eq!(a.metrics[11].replacement_rate, 0.3);
        assert!(a
            .metrics
            .windows(2)
            .all(|w| w[0].replacement_rate <= w[1].replacement_rate));

        // Interrupted run: 10 steps with a checkpoint at 5, then resume to 12.
        let dir = tempfile::tempdir().unwrap();
        let first = TrainConfig {
            total_steps: 12,
            ..cfg.clone()
        };
        let mut t = Trainer::new(
            &train_set,
            &eval,
            sampler.clone(),
            small(),
            first.clone(),
            words(),
        )
        .unwrap()
        .with_run_dir(dir.path())
        .unwrap();
        for _ in 0..7 {
            let step = t.step() + 1;
            t.train_step().unwrap();
            if step == 5 {
                t.save_state().unwrap();
            }
        }
        drop(t);
        let resumed = Trainer::new(&train_set, &eval, sampler, small(), first, words())
            .unwrap()
            .with_run_dir(dir.path())
            .unwrap()
            .resume()
            .unwrap();
        assert_eq!(resumed.step(), 5);
        let c = resumed.run().unwrap();
        assert_eq!(c.params, a.params);
        assert!(dir.path().join(MODEL_FILE).exists());
        let logged = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(logged.lines().count(), 7);
    }

    #[test]
    fn nonfinite_gradient_names_the_step() {
        let data = toy();
        let (train_set, eval) = make_split(&data, "music", 0, 1).unwrap();
        let cfg = TrainConfig {
            total_steps: 3,
            batch_size: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(
            &train_set,
            &eval,
            SamplerConfig::default(),
            small(),
            cfg,
            words(),
        )
        .unwrap();
        t.train_step().unwrap();
        t.params.classifier.b[0] = f32::NAN;
        match t.train_step() {
            Err(Error::NonFiniteGradient { step, .. }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
