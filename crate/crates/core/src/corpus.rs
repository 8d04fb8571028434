//! Utterances, slot schemas, annotated frames and dataset I/O.
//!
//! Spans are token-aligned with an exclusive end. A [`Dataset`] always
//! carries a [`SchemaRegistry`] and every frame is validated against it on
//! construction, so downstream code can assume well-formed annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token IOB label. The discriminant is the class index used by the
/// classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Tag {
        Tag::ALL[idx]
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::O => "O",
            Tag::B => "B",
            Tag::I => "I",
        };
        f.write_str(s)
    }
}

/// Builds the IOB sequence of length `len` for a set of `(start, end)` spans.
pub fn tags_from_spans(len: usize, spans: &[(usize, usize)]) -> Vec<Tag> {
    let mut tags = vec![Tag::O; len];
    for &(start, end) in spans {
        tags[start] = Tag::B;
        for tag in &mut tags[start + 1..end] {
            *tag = Tag::I;
        }
    }
    tags
}

/// Extracts maximal `B I*` runs as `(start, end)` spans. A stray `I` (at
/// position 0 or after `O`) opens a new span, following the conlleval
/// repair convention.
pub fn spans_from_tags(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {
                if let Some(start) = open.take() {
                    spans.push((start, i));
                }
            }
            Tag::B => {
                if let Some(start) = open.replace(i) {
                    spans.push((start, i));
                }
            }
            Tag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
        }
    }
    if let Some(start) = open {
        spans.push((start, tags.len()));
    }
    spans
}

/// True when no `I` starts the sequence or follows an `O`.
pub fn is_legal_iob(tags: &[Tag]) -> bool {
    let mut prev = Tag::O;
    for &tag in tags {
        if tag == Tag::I && prev == Tag::O {
            return false;
        }
        prev = tag;
    }
    true
}

/// Splits a slot identifier at snake_case and camelCase boundaries and
/// lowercases the pieces: `partySizeNumber` becomes `party size number`.
pub fn tokenize_slot_name(name: &str) -> Result<Vec<String>> {
    if name.is_empty() {
        return Err(Error::InvalidSchema("empty slot name".into()));
    }
    if let Some(bad) = name
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || *c == '_'))
    {
        return Err(Error::InvalidSchema(format!(
            "slot name `{name}` contains `{bad}`; expected an ASCII identifier"
        )));
    }
    let chars: Vec<char> = name.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        if c.is_ascii_uppercase() && !current.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
            // "sizeNumber" -> size|Number, "HTTPServer" -> HTTP|Server
            if prev.is_ascii_lowercase()
                || prev.is_ascii_digit()
                || (prev.is_ascii_uppercase() && next_lower)
            {
                tokens.push(std::mem::take(&mut current));
            }
        }
        current.push(c.to_ascii_lowercase());
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(Error::InvalidSchema(format!(
            "slot name `{name}` has no letters"
        )));
    }
    Ok(tokens)
}

/// Whitespace tokenization for raw utterance text; punctuation stays
/// attached to its word.
pub fn tokenize_utterance(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// A slot as seen by the tagger: its name, description tokens and a few
/// example values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub name: String,
    pub description_tokens: Vec<String>,
    pub example_values: Vec<Vec<String>>,
}

impl SlotSchema {
    /// Builds a schema whose description is the tokenized slot name.
    pub fn from_name(name: &str) -> Result<Self> {
        Self::new(name, None, Vec::new())
    }

    pub fn new(
        name: &str,
        description: Option<Vec<String>>,
        examples: Vec<Vec<String>>,
    ) -> Result<Self> {
        let description_tokens = match description {
            Some(tokens) => tokens.into_iter().map(|t| t.to_lowercase()).collect(),
            None => tokenize_slot_name(name)?,
        };
        if description_tokens.is_empty() || description_tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidSchema(format!(
                "slot `{name}` needs at least one non-empty description token"
            )));
        }
        let mut example_values: Vec<Vec<String>> = Vec::with_capacity(examples.len());
        for value in examples {
            if value.is_empty() || value.iter().any(|t| t.is_empty()) {
                return Err(Error::InvalidSchema(format!(
                    "slot `{name}` has an empty example value"
                )));
            }
            if !example_values.contains(&value) {
                example_values.push(value);
            }
        }
        Ok(SlotSchema {
            name: name.to_string(),
            description_tokens,
            example_values,
        })
    }
}

/// An annotated slot occurrence, `[start, end)` in token positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub intent: String,
    pub tokens: Vec<String>,
    #[serde(rename = "slots", default)]
    pub annotations: Vec<SlotSpan>,
}

impl Frame {
    /// Spans annotated for `slot`, sorted by start.
    pub fn spans_of(&self, slot: &str) -> Vec<(usize, usize)> {
        self.annotations
            .iter()
            .filter(|s| s.name == slot)
            .map(|s| (s.start, s.end))
            .collect()
    }

    /// The token sequences of every span annotated for `slot`.
    pub fn values_of<'a>(&'a self, slot: &'a str) -> impl Iterator<Item = &'a [String]> + 'a {
        self.annotations
            .iter()
            .filter(move |s| s.name == slot)
            .map(move |s| &self.tokens[s.start..s.end])
    }

    fn normalize(&mut self) {
        self.annotations.sort_by_key(|s| (s.start, s.end));
    }

    fn check_spans(&self) -> Result<()> {
        let len = self.tokens.len();
        if len == 0 {
            return Err(Error::Validation(format!(
                "frame for `{}` has no tokens",
                self.intent
            )));
        }
        if let Some(tok) = self
            .tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::Validation(format!("malformed token {tok:?}")));
        }
        let mut last_end = 0;
        for span in &self.annotations {
            if span.start >= span.end || span.end > len {
                return Err(Error::Validation(format!(
                    "span ({}, {}) for `{}` is out of range for {} tokens",
                    span.start, span.end, span.name, len
                )));
            }
            if span.start < last_end {
                return Err(Error::Validation(format!(
                    "overlapping spans at token {} in {:?}",
                    span.start,
                    self.tokens.join(" ")
                )));
            }
            last_end = span.end;
        }
        Ok(())
    }
}

/// One training or evaluation unit: an utterance tagged for a single slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedInstance {
    pub frame_tokens: Vec<String>,
    pub schema: SlotSchema,
    pub tags: Vec<Tag>,
    pub is_positive: bool,
}

impl TaggedInstance {
    pub fn spans(&self) -> Vec<(usize, usize)> {
        spans_from_tags(&self.tags)
    }
}

/// Derives the IOB targets of `frame` for the slot `schema`, which must be
/// registered for the frame's intent.
pub fn frame_to_instance(
    frame: &Frame,
    schema: &SlotSchema,
    registry: &SchemaRegistry,
) -> Result<TaggedInstance> {
    if registry.get(&frame.intent, &schema.name).is_none() {
        return Err(Error::SchemaMismatch {
            intent: frame.intent.clone(),
            slot: schema.name.clone(),
        });
    }
    let tags = tags_from_spans(frame.tokens.len(), &frame.spans_of(&schema.name));
    let is_positive = tags.contains(&Tag::B);
    Ok(TaggedInstance {
        frame_tokens: frame.tokens.clone(),
        schema: schema.clone(),
        tags,
        is_positive,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSlotEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<Vec<String>>,
    #[serde(default)]
    examples: Vec<Vec<String>>,
}

/// Slot schemas per intent, in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaRegistry {
    intents: BTreeMap<String, Vec<SlotSchema>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, intent: &str, schema: SlotSchema) -> Result<()> {
        let slots = self.intents.entry(intent.to_string()).or_default();
        if slots.iter().any(|s| s.name == schema.name) {
            return Err(Error::InvalidSchema(format!(
                "slot `{}` declared twice for intent `{intent}`",
                schema.name
            )));
        }
        slots.push(schema);
        Ok(())
    }

    /// Replaces (or appends) the schema with the same name.
    pub fn upsert(&mut self, intent: &str, schema: SlotSchema) {
        let slots = self.intents.entry(intent.to_string()).or_default();
        match slots.iter_mut().find(|s| s.name == schema.name) {
            Some(existing) => *existing = schema,
            None => slots.push(schema),
        }
    }

    pub fn get(&self, intent: &str, slot: &str) -> Option<&SlotSchema> {
        self.intents.get(intent)?.iter().find(|s| s.name == slot)
    }

    pub fn slots(&self, intent: &str) -> &[SlotSchema] {
        self.intents.get(intent).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn intents(&self) -> impl Iterator<Item = &str> {
        self.intents.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SlotSchema)> {
        self.intents
            .iter()
            .flat_map(|(intent, slots)| slots.iter().map(move |s| (intent.as_str(), s)))
    }

    pub fn contains_intent(&self, intent: &str) -> bool {
        self.intents.contains_key(intent)
    }

    /// Merges `other` into `self`; intents present in both must not declare
    /// the same slot twice.
    pub fn merge(&mut self, other: &SchemaRegistry) -> Result<()> {
        for (intent, schema) in other.iter() {
            if self.get(intent, &schema.name) != Some(schema) {
                self.insert(intent, schema.clone())?;
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<RawSlotEntry>> = serde_json::from_str(text)?;
        let mut registry = SchemaRegistry::new();
        for (intent, entries) in raw {
            registry.intents.entry(intent.clone()).or_default();
            for entry in entries {
                let schema = SlotSchema::new(&entry.name, entry.description, entry.examples)?;
                registry.insert(&intent, schema)?;
            }
        }
        Ok(registry)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Json(err) => Error::Format {
                path: path.display().to_string(),
                line: err.line(),
                message: err.to_string(),
            },
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        let raw: BTreeMap<&str, Vec<RawSlotEntry>> = self
            .intents
            .iter()
            .map(|(intent, slots)| {
                let entries = slots
                    .iter()
                    .map(|s| RawSlotEntry {
                        name: s.name.clone(),
                        description: Some(s.description_tokens.clone()),
                        examples: s.example_values.clone(),
                    })
                    .collect();
                (intent.as_str(), entries)
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("registry serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Registry listing every slot name annotated in `frames`, with
    /// descriptions derived from the names.
    pub fn infer(frames: &[Frame]) -> Result<Self> {
        let mut names: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for frame in frames {
            let entry = names.entry(frame.intent.as_str()).or_default();
            for span in &frame.annotations {
                entry.insert(span.name.as_str());
            }
        }
        let mut registry = SchemaRegistry::new();
        for (intent, slots) in names {
            registry.intents.entry(intent.to_string()).or_default();
            for slot in slots {
                registry.insert(intent, SlotSchema::from_name(slot)?)?;
            }
        }
        Ok(registry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

/// Input formats understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// JSON Lines, one frame per line.
    Native,
    /// The public SNIPS benchmark JSON (`{intent: [{"data": [chunk, ...]}]}`),
    /// either a single file or a directory of such files.
    SnipsPublic,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(DatasetFormat::Native),
            "snips-public" | "snips" => Ok(DatasetFormat::SnipsPublic),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Validated frames together with the schema registry they resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    frames: Vec<Frame>,
    registry: SchemaRegistry,
    pub split: Split,
}

impl Dataset {
    pub fn new(mut frames: Vec<Frame>, registry: SchemaRegistry, split: Split) -> Result<Self> {
        for frame in &mut frames {
            frame.normalize();
            frame.check_spans()?;
            if !registry.contains_intent(&frame.intent) {
                return Err(Error::Validation(format!(
                    "intent `{}` has no schema registry entry",
                    frame.intent
                )));
            }
            for span in &frame.annotations {
                if registry.get(&frame.intent, &span.name).is_none() {
                    return Err(Error::SchemaMismatch {
                        intent: frame.intent.clone(),
                        slot: span.name.clone(),
                    });
                }
            }
        }
        Ok(Dataset {
            frames,
            registry,
            split,
        })
    }

    /// Dataset whose registry is inferred from the annotations.
    pub fn from_frames(frames: Vec<Frame>, split: Split) -> Result<Self> {
        let registry = SchemaRegistry::infer(&frames)?;
        Self::new(frames, registry, split)
    }

    pub fn empty(split: Split) -> Self {
        Dataset {
            frames: Vec::new(),
            registry: SchemaRegistry::new(),
            split,
        }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn registry(&self) -> &SchemaRegistry {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intents(&self) -> Vec<&str> {
        self.registry.intents().collect()
    }

    pub fn frames_for<'a>(&'a self, intent: &'a str) -> impl Iterator<Item = &'a Frame> + 'a {
        self.frames.iter().filter(move |f| f.intent == intent)
    }

    /// Swaps in a new registry (e.g. one carrying descriptions and examples)
    /// and revalidates.
    pub fn with_registry(self, registry: SchemaRegistry) -> Result<Self> {
        Dataset::new(self.frames, registry, self.split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for frame in &self.frames {
            out.push_str(&serde_json::to_string(frame).expect("frame serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Loads a dataset and infers its registry from the annotations. Use
/// [`Dataset::with_registry`] to attach an explicit schema file.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let frames = match format {
        DatasetFormat::Native => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_jsonl(&text, &path.display().to_string())?
        }
        DatasetFormat::SnipsPublic => {
            if path.is_dir() {
                let mut files: Vec<_> = fs::read_dir(path)
                    .map_err(|e| Error::io(path, e))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
                    .collect();
                files.sort();
                let mut frames = Vec::new();
                for file in files {
                    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
                    frames.extend(parse_snips(&text, &file.display().to_string())?);
                }
                frames
            } else {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_snips(&text, &path.display().to_string())?
            }
        }
    };
    Dataset::from_frames(frames, Split::Train)
}

/// Parses native JSON Lines; blank lines are skipped.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(line).map_err(|e| Error::Format {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

#[derive(Debug, Deserialize)]
struct SnipsChunk {
    text: String,
    #[serde(default)]
    entity: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SnipsEntry {
    Wrapped { data: Vec<SnipsChunk> },
    Bare(Vec<SnipsChunk>),
}

fn parse_snips(text: &str, origin: &str) -> Result<Vec<Frame>> {
    let raw: BTreeMap<String, Vec<SnipsEntry>> =
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut frames = Vec::new();
    for (intent, entries) in raw {
        for entry in entries {
            let chunks = match entry {
                SnipsEntry::Wrapped { data } => data,
                SnipsEntry::Bare(chunks) => chunks,
            };
            frames.push(snips_chunks_to_frame(&intent, &chunks)?);
        }
    }
    Ok(frames)
}

fn snips_chunks_to_frame(intent: &str, chunks: &[SnipsChunk]) -> Result<Frame> {
    let mut tokens: Vec<String> = Vec::new();
    let mut annotations = Vec::new();
    for chunk in chunks {
        let start = tokens.len();
        tokens.extend(chunk.text.split_whitespace().map(str::to_string));
        if let Some(entity) = &chunk.entity {
            if tokens.len() == start {
                return Err(Error::Validation(format!(
                    "entity `{entity}` in intent `{intent}` has an empty text chunk"
                )));
            }
            annotations.push(SlotSpan {
                name: entity.clone(),
                start,
                end: tokens.len(),
            });
        }
    }
    Ok(Frame {
        intent: intent.to_string(),
        tokens,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn slot_name_tokenization() {
        assert_eq!(
            tokenize_slot_name("partySizeNumber").unwrap(),
            ["party", "size", "number"]
        );
        assert_eq!(tokenize_slot_name("from").unwrap(), ["from"]);
        assert_eq!(tokenize_slot_name("check_in").unwrap(), ["check", "in"]);
        assert_eq!(
            tokenize_slot_name("objectPartOfSeriesType").unwrap(),
            ["object", "part", "of", "series", "type"]
        );
        assert_eq!(
            tokenize_slot_name("HTTPServer").unwrap(),
            ["http", "server"]
        );
        assert!(matches!(
            tokenize_slot_name(""),
            Err(Error::InvalidSchema(_))
        ));
        assert!(matches!(
            tokenize_slot_name("a-b"),
            Err(Error::InvalidSchema(_))
        ));
    }

    #[test]
    fn play_music_instances() {
        let mut registry = SchemaRegistry::new();
        registry
            .insert("PlayMusic", SlotSchema::from_name("service").unwrap())
            .unwrap();
        registry
            .insert("PlayMusic", SlotSchema::from_name("timeRange").unwrap())
            .unwrap();
        let frame = Frame {
            intent: "PlayMusic".into(),
            tokens: toks("Play Imagine on iHeart Radio"),
            annotations: vec![SlotSpan {
                name: "service".into(),
                start: 3,
                end: 5,
            }],
        };
        let service = registry.get("PlayMusic", "service").unwrap();
        let inst = frame_to_instance(&frame, service, &registry).unwrap();
        assert_eq!(inst.tags, [Tag::O, Tag::O, Tag::O, Tag::B, Tag::I]);
        assert!(inst.is_positive);

        let time = registry.get("PlayMusic", "timeRange").unwrap();
        let neg = frame_to_instance(&frame, time, &registry).unwrap();
        assert_eq!(neg.tags, [Tag::O; 5]);
        assert!(!neg.is_positive);

        let stranger = SlotSchema::from_name("cuisine").unwrap();
        assert!(matches!(
            frame_to_instance(&frame, &stranger, &registry),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn single_token_span() {
        let frame = Frame {
            intent: "x".into(),
            tokens: toks("a"),
            annotations: vec![SlotSpan {
                name: "s".into(),
                start: 0,
                end: 1,
            }],
        };
        let ds = Dataset::from_frames(vec![frame.clone()], Split::Train).unwrap();
        let schema = ds.registry().get("x", "s").unwrap();
        let inst = frame_to_instance(&frame, schema, ds.registry()).unwrap();
        assert_eq!(inst.tags, [Tag::B]);
    }

    #[test]
    fn span_repair() {
        use Tag::*;
        assert_eq!(spans_from_tags(&[O, O, O, B, I]), [(3, 5)]);
        assert_eq!(spans_from_tags(&[O, O, O, O, O]), []);
        assert_eq!(spans_from_tags(&[I, O, B]), [(0, 1), (2, 3)]);
        assert_eq!(spans_from_tags(&[B, B, I]), [(0, 1), (1, 3)]);
        assert!(!is_legal_iob(&[I, O]));
        assert!(!is_legal_iob(&[B, O, I]));
        assert!(is_legal_iob(&[B, I, O, B]));
    }

    #[test]
    fn native_line_parses() {
        let line = r#"{"intent":"PlayMusic","tokens":["Play","Imagine"],"slots":[{"name":"track","start":1,"end":2}]}"#;
        let frames = parse_jsonl(line, "inline").unwrap();
        let ds = Dataset::from_frames(frames, Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.frames()[0].annotations.len(), 1);
        assert_eq!(ds.frames()[0].spans_of("track"), [(1, 2)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"intent\":\"a\",\"tokens\":[\"x\"],\"slots\":[]}\n{broken\n";
        match parse_jsonl(text, "f.jsonl") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_overlap_rejected() {
        let bad = Frame {
            intent: "a".into(),
            tokens: toks("x y"),
            annotations: vec![SlotSpan {
                name: "s".into(),
                start: 1,
                end: 3,
            }],
        };
        assert!(matches!(
            Dataset::from_frames(vec![bad], Split::Train),
            Err(Error::Validation(_))
        ));
        let overlap = Frame {
            intent: "a".into(),
            tokens: toks("x y z"),
            annotations: vec![
                SlotSpan {
                    name: "s".into(),
                    start: 0,
                    end: 2,
                },
                SlotSpan {
                    name: "t".into(),
                    start: 1,
                    end: 3,
                },
            ],
        };
        assert!(matches!(
            Dataset::from_frames(vec![overlap], Split::Train),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn snips_chunks() {
        let text = r#"{"PlayMusic":[{"data":[{"text":"Play "},{"text":"Imagine","entity":"track"}]},
                                   [{"text":"play "},{"text":"iHeart Radio","entity":"service"},{"text":" now"}]]}"#;
        let frames = parse_snips(text, "inline").unwrap();
        assert_eq!(frames[0].tokens, ["Play", "Imagine"]);
        assert_eq!(frames[0].spans_of("track"), [(1, 2)]);
        assert_eq!(frames[1].tokens, ["play", "iHeart", "Radio", "now"]);
        assert_eq!(frames[1].spans_of("service"), [(1, 3)]);
    }

    #[test]
    fn registry_json_defaults_description() {
        let json = r#"{"GetWeather":[{"name":"timeRange","examples":[["tomorrow"],["next","week"],["tomorrow"]]}]}"#;
        let reg = SchemaRegistry::from_json_str(json).unwrap();
        let slot = reg.get("GetWeather", "timeRange").unwrap();
        assert_eq!(slot.description_tokens, ["time", "range"]);
        assert_eq!(slot.example_values.len(), 2);
        let again = SchemaRegistry::from_json_str(&reg.to_json_string()).unwrap();
        assert_eq!(again, reg);
    }

    #[test]
    fn unknown_slot_in_registry_rejected() {
        let mut registry = SchemaRegistry::new();
        registry
            .insert("a", SlotSchema::from_name("s").unwrap())
            .unwrap();
        let frame = Frame {
            intent: "a".into(),
            tokens: toks("x"),
            annotations: vec![SlotSpan {
                name: "t".into(),
                start: 0,
                end: 1,
            }],
        };
        assert!(matches!(
            Dataset::new(vec![frame], registry, Split::Train),
            Err(Error::SchemaMismatch { .. })
        ));
    }
}
