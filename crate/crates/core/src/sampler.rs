//! Instance generation: positive/negative pairing, conditioning-value
//! selection and the `<VAL>` replacement schedule.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{frame_to_instance, Dataset, Frame, SchemaRegistry, TaggedInstance};
use crate::error::{Error, Result};
use crate::nn::VAL_TOKEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub negative_ratio: usize,
    pub num_examples: usize,
    pub replacement_rate_max: f64,
    pub negatives_for_empty_frames: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            negative_ratio: 3,
            num_examples: 2,
            replacement_rate_max: 0.3,
            negatives_for_empty_frames: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replacement_rate_max) {
            return Err(Error::Config(format!(
                "replacement_rate_max must be in [0, 1], got {}",
                self.replacement_rate_max
            )));
        }
        Ok(())
    }
}

fn normalize_value(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Conditioning values per `(intent, slot)`, with every value that occurs
/// as a gold span in the evaluation data removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValuePool {
    values: BTreeMap<(String, String), Vec<Vec<String>>>,
    excluded: BTreeSet<Vec<String>>,
}

impl ValuePool {
    /// Distinct train-span values per slot, minus all eval-span values.
    /// Values are compared case-insensitively.
    pub fn build(train: &Dataset, eval: &Dataset) -> Self {
        let excluded: BTreeSet<Vec<String>> = eval
            .frames()
            .iter()
            .flat_map(|f| {
                f.annotations
                    .iter()
                    .map(move |a| normalize_value(&f.tokens[a.start..a.end]))
            })
            .collect();
        let mut pool = ValuePool {
            values: BTreeMap::new(),
            excluded,
        };
        for (intent, schema) in train.registry().iter() {
            pool.values
                .entry((intent.to_string(), schema.name.clone()))
                .or_default();
        }
        for frame in train.frames() {
            for ann in &frame.annotations {
                pool.add(&frame.intent, &ann.name, &frame.tokens[ann.start..ann.end]);
            }
        }
        pool
    }

    /// Adds the example values declared in `registry` (subject to the same
    /// exclusion set).
    pub fn add_registry_examples(&mut self, registry: &SchemaRegistry) {
        for (intent, schema) in registry.iter() {
            self.values
                .entry((intent.to_string(), schema.name.clone()))
                .or_default();
            for value in &schema.example_values {
                self.add(intent, &schema.name, value);
            }
        }
    }

    /// Inserts one value unless it is excluded or already present.
    pub fn add(&mut self, intent: &str, slot: &str, value: &[String]) {
        let value = normalize_value(value);
        if value.is_empty() || self.excluded.contains(&value) {
            return;
        }
        let entry = self
            .values
            .entry((intent.to_string(), slot.to_string()))
            .or_default();
        if !entry.contains(&value) {
            entry.push(value);
        }
    }

    pub fn values(&self, intent: &str, slot: &str) -> &[Vec<String>] {
        self.values
            .get(&(intent.to_string(), slot.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn excluded(&self) -> &BTreeSet<Vec<String>> {
        &self.excluded
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[Vec<String>])> {
        self.values
            .iter()
            .map(|((i, s), v)| (i.as_str(), s.as_str(), v.as_slice()))
    }

    /// `(intent, slot)` keys with no values.
    pub fn empty_slots(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Positive instance per annotated slot; `negative_ratio` negatives per
/// positive drawn without replacement from the intent's absent slots.
pub fn sample_instances<R: Rng + ?Sized>(
    frame: &Frame,
    registry: &SchemaRegistry,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<TaggedInstance>> {
    let slots = registry.slots(&frame.intent);
    if slots.is_empty() {
        return Err(Error::InvalidSchema(format!(
            "intent `{}` has no slots",
            frame.intent
        )));
    }
    let mut present: Vec<&str> = Vec::new();
    for ann in &frame.annotations {
        if !present.contains(&ann.name.as_str()) {
            present.push(&ann.name);
        }
    }
    let absent: Vec<_> = slots
        .iter()
        .filter(|s| !present.contains(&s.name.as_str()))
        .collect();
    let mut out = Vec::new();
    for name in &present {
        let schema = registry
            .get(&frame.intent, name)
            .ok_or_else(|| Error::SchemaMismatch {
                intent: frame.intent.clone(),
                slot: name.to_string(),
            })?;
        out.push(frame_to_instance(frame, schema, registry)?);
        for neg in absent.choose_multiple(rng, cfg.negative_ratio) {
            out.push(frame_to_instance(frame, neg, registry)?);
        }
    }
    if present.is_empty() && cfg.negatives_for_empty_frames {
        for neg in absent.choose_multiple(rng, cfg.negative_ratio) {
            out.push(frame_to_instance(frame, neg, registry)?);
        }
    }
    Ok(out)
}

/// `k` values from `values`: without replacement when possible, otherwise
/// with replacement.
pub fn select_examples<R: Rng + ?Sized>(
    values: &[Vec<String>],
    slot: &str,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if values.is_empty() {
        return Err(Error::EmptyPool {
            slot: slot.to_string(),
        });
    }
    if values.len() >= k {
        Ok(values.choose_multiple(rng, k).cloned().collect())
    } else {
        Ok((0..k)
            .map(|_| values.choose(rng).expect("non-empty").clone())
            .collect())
    }
}

/// Linear ramp from 0 at step 0 to `replacement_rate_max` at `total_steps`.
pub fn replacement_rate(step: u64, total_steps: u64, cfg: &SamplerConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    if step > total_steps {
        log::warn!("step {step} past schedule end {total_steps}; clamping");
        return cfg.replacement_rate_max;
    }
    cfg.replacement_rate_max * step as f64 / total_steps as f64
}

/// Independently replaces each gold-span token and each example token by
/// `<VAL>` with probability `rate`. Tags are untouched.
pub fn apply_replacement<R: Rng + ?Sized>(
    instance: &TaggedInstance,
    examples: &[Vec<String>],
    rate: f64,
    rng: &mut R,
) -> (TaggedInstance, Vec<Vec<String>>) {
    let rate = rate.clamp(0.0, 1.0);
    let mut inst = instance.clone();
    if rate == 0.0 {
        return (inst, examples.to_vec());
    }
    for (start, end) in instance.spans() {
        for tok in &mut inst.frame_tokens[start..end] {
            if rng.gen_bool(rate) {
                *tok = VAL_TOKEN.to_string();
            }
        }
    }
    let examples = examples
        .iter()
        .map(|value| {
            value
                .iter()
                .map(|t| {
                    if rng.gen_bool(rate) {
                        VAL_TOKEN.to_string()
                    } else {
                        t.clone()
                    }
                })
                .collect()
        })
        .collect();
    (inst, examples)
}
