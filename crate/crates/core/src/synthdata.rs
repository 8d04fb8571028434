//! Template-based synthetic corpora with a matching embedding table.
//!
//! Every lexicon gets a random centroid; its words are noisy copies of the
//! centroid, so values of one lexicon are close in embedding space while
//! filler words are unrelated. Description words lean towards the centroid
//! of the lexicon they describe by `description_affinity`. Open lexicons are
//! random alphanumeric strings with no table entry.
//!
//! Each lexicon is split into a training and a held-out share. Intents
//! marked `held_out` draw from the held-out share; everyone else, and all
//! registry examples, use the training share.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Frame, SchemaRegistry, SlotSchema, SlotSpan, Split};
use crate::error::{Error, Result};
use crate::nn::WordEmbeddingTable;
use crate::rng::{hash_str, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconKind {
    /// At most ten single-word values.
    Closed,
    /// `modifier head` pairs.
    Compositional,
    /// Random alphanumeric strings.
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconSpec {
    pub name: String,
    pub kind: LexiconKind,
    /// Number of values (closed, open) or of modifiers and heads each
    /// (compositional).
    pub size: usize,
    /// Fraction of values reserved for held-out intents.
    #[serde(default = "default_held_out_share")]
    pub held_out_share: f64,
}

fn default_held_out_share() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSlot {
    pub name: String,
    pub lexicon: String,
    /// Defaults to the tokenized slot name.
    #[serde(default)]
    pub description: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthIntent {
    pub name: String,
    pub slots: Vec<SynthSlot>,
    #[serde(default)]
    pub held_out: bool,
    /// Strings with `{slot}` holes; generated when empty.
    #[serde(default)]
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub lexicons: Vec<LexiconSpec>,
    pub intents: Vec<SynthIntent>,
    pub frames_per_intent: usize,
    #[serde(default = "default_templates")]
    pub templates_per_intent: usize,
    #[serde(default = "default_dim")]
    pub d_w: usize,
    #[serde(default = "default_affinity")]
    pub description_affinity: f64,
    #[serde(default = "default_noise")]
    pub value_noise: f64,
    #[serde(default = "default_examples")]
    pub registry_examples: usize,
    pub seed: u64,
}

fn default_templates() -> usize {
    6
}
fn default_dim() -> usize {
    128
}
fn default_affinity() -> f64 {
    0.3
}
fn default_noise() -> f64 {
    0.5
}
fn default_examples() -> usize {
    10
}

/// Generated corpus plus the values behind it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub embeddings: WordEmbeddingTable<f32>,
    /// Per lexicon: (training share, held-out share).
    pub values: BTreeMap<String, (Vec<Vec<String>>, Vec<Vec<String>>)>,
}

impl SynthCorpus {
    /// Writes `data.jsonl`, `schemas.json` and `embeddings.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.save_jsonl(dir.join("data.jsonl"))?;
        self.dataset.registry().save(dir.join("schemas.json"))?;
        self.embeddings.save(dir.join("embeddings.txt"))
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if rng.gen_bool(0.5) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

fn open_word<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(5..9);
    let mut w: String = (0..len)
        .map(|_| *ALNUM.choose(rng).unwrap() as char)
        .collect();
    w.replace_range(0..1, &rng.gen_range(0..10).to_string());
    w
}

/// Draws words not yet in `used`.
struct WordSource<'a, R> {
    rng: R,
    used: &'a mut BTreeSet<String>,
}

impl<R: Rng> WordSource<'_, R> {
    fn fresh(&mut self, open: bool) -> String {
        loop {
            let w = if open {
                open_word(&mut self.rng)
            } else {
                let syl = self.rng.gen_range(2..4);
                pseudo_word(&mut self.rng, syl)
            };
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    let v = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0f64..1.0));
    let n: f64 = v.dot(&v).sqrt().max(1e-12);
    v / n
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(1e-12);
    v / n
}

fn split_values(values: Vec<Vec<String>>, share: f64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let held = ((values.len() as f64) * share).round() as usize;
    let held = held.clamp(1, values.len().saturating_sub(1).max(1));
    let mut values = values;
    let held_out = values.split_off(values.len() - held);
    (values, held_out)
}

fn generate_templates<R: Rng>(
    intent: &SynthIntent,
    count: usize,
    fillers: &[String],
    rng: &mut R,
) -> Vec<String> {
    (0..count)
        .map(|i| {
            let mut slots: Vec<&str> = intent.slots.iter().map(|s| s.name.as_str()).collect();
            slots.shuffle(rng);
            // Later templates may leave out slots, so some frames lack them.
            let keep = if i < 2 || slots.len() == 1 {
                slots.len()
            } else {
                rng.gen_range(1..=slots.len())
            };
            slots.truncate(keep);
            let mut parts: Vec<String> = (0..rng.gen_range(1..3))
                .map(|_| fillers.choose(rng).unwrap().clone())
                .collect();
            for slot in slots {
                parts.push(format!("{{{slot}}}"));
                for _ in 0..rng.gen_range(1..3) {
                    parts.push(fillers.choose(rng).unwrap().clone());
                }
            }
            parts.join(" ")
        })
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for lex in &self.lexicons {
            if !names.insert(lex.name.as_str()) {
                return Err(Error::Config(format!("duplicate lexicon `{}`", lex.name)));
            }
            if lex.size == 0 {
                return Err(Error::Config(format!("lexicon `{}` is empty", lex.name)));
            }
            if lex.kind == LexiconKind::Closed && lex.size > 10 {
                return Err(Error::Config(format!(
                    "closed lexicon `{}` has more than 10 values",
                    lex.name
                )));
            }
            if !(0.0..1.0).contains(&lex.held_out_share) {
                return Err(Error::Config(format!(
                    "lexicon `{}`: held_out_share must be in [0, 1)",
                    lex.name
                )));
            }
        }
        if self.intents.is_empty() {
            return Err(Error::Config("no intents".into()));
        }
        for intent in &self.intents {
            if intent.slots.is_empty() {
                return Err(Error::Config(format!(
                    "intent `{}` has no slots",
                    intent.name
                )));
            }
            for slot in &intent.slots {
                if !names.contains(slot.lexicon.as_str()) {
                    return Err(Error::Config(format!(
                        "slot `{}` uses unknown lexicon `{}`",
                        slot.name, slot.lexicon
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        let mut used = BTreeSet::new();
        let mut words = WordSource {
            rng: stream(self.seed, &[1]),
            used: &mut used,
        };
        let mut vectors: BTreeMap<String, Array1<f64>> = BTreeMap::new();
        let mut vec_rng = stream(self.seed, &[2]);
        let dim = self.d_w;

        let mut values = BTreeMap::new();
        let mut centroids = BTreeMap::new();
        for lex in &self.lexicons {
            let centroid = random_unit(dim, &mut vec_rng);
            let mut noisy = |w: &str, rng: &mut rand_chacha::ChaCha8Rng| {
                let noise = random_unit(dim, rng) * self.value_noise;
                vectors.insert(w.to_string(), normalized(&centroid + &noise));
            };
            let all: Vec<Vec<String>> = match lex.kind {
                LexiconKind::Closed => (0..lex.size)
                    .map(|_| {
                        let w = words.fresh(false);
                        noisy(&w, &mut vec_rng);
                        vec![w]
                    })
                    .collect(),
                LexiconKind::Compositional => {
                    let mods: Vec<String> = (0..lex.size).map(|_| words.fresh(false)).collect();
                    let heads: Vec<String> = (0..lex.size).map(|_| words.fresh(false)).collect();
                    for w in mods.iter().chain(&heads) {
                        noisy(w, &mut vec_rng);
                    }
                    let mut pairs: Vec<Vec<String>> = mods
                        .iter()
                        .flat_map(|m| heads.iter().map(move |h| vec![m.clone(), h.clone()]))
                        .collect();
                    pairs.shuffle(&mut words.rng);
                    pairs
                }
                LexiconKind::Open => (0..lex.size).map(|_| vec![words.fresh(true)]).collect(),
            };
            values.insert(lex.name.clone(), split_values(all, lex.held_out_share));
            centroids.insert(lex.name.clone(), centroid);
        }

        let fillers: Vec<String> = (0..40).map(|_| words.fresh(false)).collect();
        for w in &fillers {
            vectors.insert(w.clone(), random_unit(dim, &mut vec_rng));
        }

        let mut registry = SchemaRegistry::new();
        for intent in &self.intents {
            for slot in &intent.slots {
                let (train_values, _) = &values[&slot.lexicon];
                let mut ex_rng = stream(
                    self.seed,
                    &[3, hash_str(&intent.name), hash_str(&slot.name)],
                );
                let examples: Vec<Vec<String>> = train_values
                    .choose_multiple(&mut ex_rng, self.registry_examples)
                    .cloned()
                    .collect();
                let schema = SlotSchema::new(&slot.name, slot.description.clone(), examples)?;
                let a = self.description_affinity;
                for tok in &schema.description_tokens {
                    if !vectors.contains_key(tok) {
                        let noise = random_unit(dim, &mut vec_rng);
                        vectors.insert(
                            tok.clone(),
                            normalized(
                                &centroids[&slot.lexicon] * a + noise * (1.0 - a * a).sqrt(),
                            ),
                        );
                    }
                }
                registry.insert(&intent.name, schema)?;
            }
        }

        let mut frames = Vec::new();
        for intent in &self.intents {
            let mut rng = stream(self.seed, &[4, hash_str(&intent.name)]);
            let templates = if intent.templates.is_empty() {
                generate_templates(intent, self.templates_per_intent, &fillers, &mut rng)
            } else {
                intent.templates.clone()
            };
            let lex_of: BTreeMap<&str, &str> = intent
                .slots
                .iter()
                .map(|s| (s.name.as_str(), s.lexicon.as_str()))
                .collect();
            for _ in 0..self.frames_per_intent {
                let template = templates.choose(&mut rng).expect("at least one template");
                let mut tokens = Vec::new();
                let mut annotations = Vec::new();
                for part in template.split_whitespace() {
                    if let Some(slot) = part.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                        let lex = lex_of.get(slot).ok_or_else(|| {
                            Error::Config(format!(
                                "template of `{}` names unknown slot `{slot}`",
                                intent.name
                            ))
                        })?;
                        let (train_values, held) = &values[*lex];
                        let pool = if intent.held_out { held } else { train_values };
                        let value = pool.choose(&mut rng).expect("non-empty share");
                        let start = tokens.len();
                        tokens.extend(value.iter().cloned());
                        annotations.push(SlotSpan {
                            name: slot.to_string(),
                            start,
                            end: tokens.len(),
                        });
                    } else {
                        tokens.push(part.to_string());
                    }
                }
                frames.push(Frame {
                    intent: intent.name.clone(),
                    tokens,
                    annotations,
                });
            }
        }

        let rows = vectors.into_iter().map(|(w, v)| (w, v.to_vec())).collect();
        let embeddings = WordEmbeddingTable::from_rows(rows, dim, self.seed)?;
        let dataset = Dataset::new(frames, registry, Split::Train)?;
        Ok(SynthCorpus {
            dataset,
            embeddings,
            values,
        })
    }
}

fn lexicon(name: &str, kind: LexiconKind, size: usize) -> LexiconSpec {
    LexiconSpec {
        name: name.into(),
        kind,
        size,
        held_out_share: default_held_out_share(),
    }
}

fn slot(name: &str, lexicon: &str) -> SynthSlot {
    SynthSlot {
        name: name.into(),
        lexicon: lexicon.into(),
        description: None,
    }
}

fn intent(name: &str, slots: Vec<SynthSlot>, held_out: bool) -> SynthIntent {
    SynthIntent {
        name: name.into(),
        slots,
        held_out,
        templates: Vec::new(),
    }
}

/// Two intents, four slots, `frames` frames in total.
pub fn toy_spec(frames: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        lexicons: vec![
            lexicon("city", LexiconKind::Closed, 8),
            lexicon("day", LexiconKind::Closed, 7),
            lexicon("dish", LexiconKind::Compositional, 4),
            lexicon("code", LexiconKind::Open, 40),
        ],
        intents: vec![
            intent(
                "book_trip",
                vec![slot("to_city", "city"), slot("travel_day", "day")],
                false,
            ),
            intent(
                "order_food",
                vec![slot("dish", "dish"), slot("promo_code", "code")],
                false,
            ),
        ],
        frames_per_intent: frames.div_ceil(2),
        templates_per_intent: 4,
        d_w: default_dim(),
        description_affinity: default_affinity(),
        value_noise: default_noise(),
        registry_examples: default_examples(),
        seed,
    }
}

/// Held-out target intent `find_route` shares the closed `travel_day` slot
/// with a training intent (disjoint values); its other slots reuse the
/// training lexicons under new names. Training intents reuse slot names
/// across lexicons, so descriptions alone do not identify a value type.
pub fn transfer_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        lexicons: vec![
            lexicon("city", LexiconKind::Closed, 10),
            lexicon("day", LexiconKind::Closed, 10),
            lexicon("food", LexiconKind::Closed, 10),
            lexicon("band", LexiconKind::Compositional, 4),
        ],
        intents: vec![
            intent(
                "book_trip",
                vec![
                    slot("place", "city"),
                    slot("travel_day", "day"),
                    slot("item", "food"),
                ],
                false,
            ),
            intent(
                "order_food",
                vec![
                    slot("item", "food"),
                    slot("place", "band"),
                    slot("when", "day"),
                ],
                false,
            ),
            intent(
                "play_music",
                vec![
                    slot("item", "band"),
                    slot("place", "city"),
                    slot("when", "day"),
                ],
                false,
            ),
            intent(
                "find_route",
                vec![
                    slot("travel_day", "day"),
                    slot("spot", "city"),
                    slot("thing", "food"),
                ],
                true,
            ),
        ],
        frames_per_intent: 60,
        templates_per_intent: 6,
        d_w: default_dim(),
        description_affinity: 0.2,
        value_noise: default_noise(),
        registry_examples: default_examples(),
        seed,
    }
}

/// Held-out target intent whose slot names collide with training slots of
/// a different lexicon (`depart` is a city in training, a day in the
/// target; `arrive` the other way round).
pub fn collision_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        lexicons: vec![
            lexicon("city", LexiconKind::Closed, 10),
            lexicon("day", LexiconKind::Closed, 10),
            lexicon("food", LexiconKind::Closed, 10),
            lexicon("band", LexiconKind::Compositional, 4),
        ],
        intents: vec![
            intent(
                "book_flight",
                vec![
                    slot("depart", "city"),
                    slot("arrive", "day"),
                    slot("meal", "food"),
                ],
                false,
            ),
            intent(
                "book_bus",
                vec![
                    slot("depart", "day"),
                    slot("arrive", "city"),
                    slot("meal", "band"),
                ],
                false,
            ),
            intent(
                "plan_gig",
                vec![
                    slot("meal", "food"),
                    slot("depart", "band"),
                    slot("arrive", "city"),
                ],
                false,
            ),
            intent(
                "book_train",
                vec![
                    slot("depart", "day"),
                    slot("arrive", "food"),
                    slot("meal", "city"),
                ],
                true,
            ),
        ],
        frames_per_intent: 60,
        templates_per_intent: 6,
        d_w: default_dim(),
        description_affinity: 0.0,
        value_noise: default_noise(),
        registry_examples: default_examples(),
        seed,
    }
}
