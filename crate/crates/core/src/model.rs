//! The conditional slot tagger.
//!
//! ```text
//! u_i   = [word(tok_i) ; charcnn(tok_i)]
//! H     = BiGRU(u_1..u_T)
//! d     = mean(description token embeddings)
//! e_k   = mean(token embeddings of example k)
//! a_i   = softmax_k(h_iᵀ W_a e_k),   c_i = Σ_k a_ik e_k
//! X     = BiLSTM([h_i ; d ; c_i])
//! y_i   = softmax(W_t x_i + b_t)
//! ```
//!
//! Either conditioning input can be switched off; a disabled input is left
//! out of the tagger input rather than zero-filled, so the description-only
//! variant is a strictly smaller network.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{spans_from_tags, SlotSchema, Tag};
use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, NamedArray};
use crate::nn::classifier::NUM_TAGS;
use crate::nn::embedding::{embed_token, embed_token_backward, TokenCache};
use crate::nn::rnn::BiRnnCache;
use crate::nn::{
    join, mean_pool, Attention, BiRnn, CharCnn, Classifier, GruCell, LstmCell, Params, Real,
    WordEmbeddingTable,
};

/// Smallest probability admitted into the log-loss.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// How many gold-label probabilities have been clamped to [`PROB_FLOOR`]
/// by [`loss`] in this process.
pub fn clamped_probabilities() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_examples: bool,
    pub use_description: bool,
    pub d_w: usize,
    pub d_c: usize,
    pub d_en: usize,
    pub char_dim: usize,
    pub char_width: usize,
    pub dropout: f64,
    pub init_scale: f64,
    pub trainable_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_examples: true,
            use_description: true,
            d_w: 128,
            d_c: 32,
            d_en: 128,
            char_dim: 16,
            char_width: 3,
            dropout: 0.0,
            init_scale: 0.1,
            trainable_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// Description-only variant (the concept-tagger baseline).
    pub fn description_only() -> Self {
        ModelConfig {
            use_examples: false,
            ..Self::default()
        }
    }

    pub fn d_wc(&self) -> usize {
        self.d_w + self.d_c
    }

    pub fn tagger_input_dim(&self) -> usize {
        self.d_en
            + usize::from(self.use_description) * self.d_wc()
            + usize::from(self.use_examples) * self.d_wc()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_examples && !self.use_description {
            return Err(Error::Config(
                "at least one of use_examples/use_description must be set".into(),
            ));
        }
        if self.d_en == 0 || !self.d_en.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_en must be even and positive, got {}",
                self.d_en
            )));
        }
        if self.d_w == 0 || self.d_c == 0 || self.char_dim == 0 || self.char_width == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars for a word table of `vocab` rows
    /// (excluding the OOV row).
    pub fn num_trainable(&self, vocab: usize) -> usize {
        let (dw, dc, den, wc) = (self.d_w, self.d_c, self.d_en, self.d_wc());
        let h = den / 2;
        let words = dw
            + if self.trainable_embeddings {
                (vocab + 1) * dw
            } else {
                0
            };
        let chars = crate::nn::embedding::CHAR_VOCAB * self.char_dim
            + dc * (self.char_width * self.char_dim + 1)
            + dc * (self.char_width * dc + 1);
        let gru = 2 * (3 * h * wc + 2 * h * h + h * h + 3 * h);
        let lstm = 2 * (4 * h * self.tagger_input_dim() + 4 * h * h + 4 * h);
        let attention = if self.use_examples { den * wc } else { 0 };
        words + chars + gru + lstm + attention + NUM_TAGS * den + NUM_TAGS
    }
}

/// All arrays of the tagger. Gradients use the same type (see
/// [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub words: WordEmbeddingTable<T>,
    pub chars: CharCnn<T>,
    pub encoder: BiRnn<GruCell<T>>,
    pub attention: Option<Attention<T>>,
    pub tagger: BiRnn<LstmCell<T>>,
    pub classifier: Classifier<T>,
}

impl<T: Real> Params<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.words.visit(&join(prefix, "words"), out);
        self.chars.visit(&join(prefix, "chars"), out);
        self.encoder.visit(&join(prefix, "encoder"), out);
        if let Some(att) = &self.attention {
            att.visit(&join(prefix, "attention"), out);
        }
        self.tagger.visit(&join(prefix, "tagger"), out);
        self.classifier.visit(&join(prefix, "classifier"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.words.visit_mut(&join(prefix, "words"), out);
        self.chars.visit_mut(&join(prefix, "chars"), out);
        self.encoder.visit_mut(&join(prefix, "encoder"), out);
        if let Some(att) = &mut self.attention {
            att.visit_mut(&join(prefix, "attention"), out);
        }
        self.tagger.visit_mut(&join(prefix, "tagger"), out);
        self.classifier.visit_mut(&join(prefix, "classifier"), out);
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T: Real> {
    utterance: Vec<TokenCache<T>>,
    encoder: BiRnnCache<GruCell<T>>,
    encoded: Array2<T>,
    description: Vec<TokenCache<T>>,
    examples: Vec<Vec<TokenCache<T>>>,
    attention: Option<AttentionCache<T>>,
    dropout_mask: Option<Array2<T>>,
    tagger: BiRnnCache<LstmCell<T>>,
    tagged: Array2<T>,
    probs: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs(&self) -> &Array2<T> {
        &self.probs
    }

    /// Attention weights over the (canonically ordered) examples, one row
    /// per utterance token.
    pub fn attention_weights(&self) -> Option<&Array2<T>> {
        self.attention.as_ref().map(|c| c.weights())
    }
}

/// Sorted copy of `items`: conditioning sets are multisets, and a fixed
/// summation order makes the forward pass exactly order-invariant.
fn canonical<S: Ord + Clone>(items: &[S]) -> Vec<S> {
    let mut v = items.to_vec();
    v.sort();
    v
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters around the given word table; every trainable array
    /// is drawn from `uniform(-init_scale, init_scale)`.
    pub fn init(config: ModelConfig, mut words: WordEmbeddingTable<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if words.dim() != config.d_w {
            return Err(Error::Config(format!(
                "word table has dimension {}, config expects d_w = {}",
                words.dim(),
                config.d_w
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.init_scale;
        words.trainable = config.trainable_embeddings;
        words.val_row = Array1::from_shape_fn(config.d_w, |_| T::lit(rng.gen_range(-scale..scale)));
        let wc = config.d_wc();
        let chars = CharCnn::new(
            config.char_dim,
            config.d_c,
            config.char_width,
            scale,
            &mut rng,
        );
        let encoder = BiRnn::gru(wc, config.d_en, scale, &mut rng);
        let attention = config
            .use_examples
            .then(|| Attention::new(config.d_en, wc, scale, &mut rng));
        let tagger = BiRnn::lstm(config.tagger_input_dim(), config.d_en, scale, &mut rng);
        let classifier = Classifier::new(config.d_en, scale, &mut rng);
        Ok(ModelParams {
            config,
            words,
            chars,
            encoder,
            attention,
            tagger,
            classifier,
        })
    }

    /// Zero-valued gradient buffer with the same trainable layout.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            words: self.words.zeros_like(),
            chars: self.chars.zeros_like(),
            encoder: self.encoder.zeros_like(),
            attention: self.attention.as_ref().map(Attention::zeros_like),
            tagger: self.tagger.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Converts element type, e.g. to `f64` for gradient checks.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(self.config.clone(), self.words.cast(), 0)
            .expect("config already validated");
        out.words.matrix = self.words.matrix.mapv(|v| U::lit(v.as_f64()));
        for ((_, mut dst), (_, src)) in out.arrays_mut().into_iter().zip(self.arrays()) {
            dst.zip_mut_with(&src, |d, s| *d = U::lit(s.as_f64()));
        }
        out
    }

    fn embed_all(&self, tokens: &[String]) -> Result<(Array2<T>, Vec<TokenCache<T>>)> {
        let mut rows = Array2::zeros((tokens.len(), self.config.d_wc()));
        let mut caches = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let (v, c) = embed_token(&self.words, &self.chars, tok)?;
            rows.row_mut(i).assign(&v);
            caches.push(c);
        }
        Ok((rows, caches))
    }

    /// Per-token tag distributions for `tokens` conditioned on `schema` and
    /// `examples`. Dropout is applied only when `train_rng` is given.
    pub fn forward(
        &self,
        tokens: &[String],
        schema: &SlotSchema,
        examples: &[Vec<String>],
        train_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::EmptyInput("utterance"));
        }
        if cfg.use_examples && examples.is_empty() {
            return Err(Error::EmptyExamples);
        }
        if cfg.use_description && schema.description_tokens.is_empty() {
            return Err(Error::EmptyDescription);
        }
        let (utt, utt_caches) = self.embed_all(tokens)?;
        let (encoded, enc_cache) = self.encoder.forward(utt.view())?;
        let len = tokens.len();
        let mut parts: Vec<Array2<T>> = vec![encoded.clone()];

        let mut desc_caches = Vec::new();
        if cfg.use_description {
            let (desc, caches) = self.embed_all(&canonical(&schema.description_tokens))?;
            let pooled = mean_pool(desc.view())?;
            parts.push(
                pooled
                    .broadcast((len, cfg.d_wc()))
                    .expect("broadcast row")
                    .to_owned(),
            );
            desc_caches = caches;
        }

        let mut ex_caches = Vec::new();
        let mut att_cache = None;
        if let Some(attention) = self.attention.as_ref().filter(|_| cfg.use_examples) {
            let examples = canonical(examples);
            let mut pooled = Array2::zeros((examples.len(), cfg.d_wc()));
            for (k, value) in examples.iter().enumerate() {
                if value.is_empty() {
                    return Err(Error::EmptyInput("example value"));
                }
                let (emb, caches) = self.embed_all(value)?;
                pooled.row_mut(k).assign(&mean_pool(emb.view())?);
                ex_caches.push(caches);
            }
            let (context, cache) = attention.forward(encoded.view(), pooled.view())?;
            parts.push(context);
            att_cache = Some(cache);
        }

        let views: Vec<ArrayView2<'_, T>> = parts.iter().map(|p| p.view()).collect();
        let mut tagger_in = concatenate(Axis(1), &views).expect("equal row counts");
        let dropout_mask = match train_rng {
            Some(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 - cfg.dropout;
                let scale = T::lit(1.0 / keep);
                let mask = Array2::from_shape_fn(tagger_in.raw_dim(), |_| {
                    if rng.gen_bool(keep) {
                        scale
                    } else {
                        T::zero()
                    }
                });
                tagger_in *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let (tagged, tag_cache) = self.tagger.forward(tagger_in.view())?;
        let probs = self.classifier.forward(tagged.view())?;
        let cache = ForwardCache {
            utterance: utt_caches,
            encoder: enc_cache,
            encoded,
            description: desc_caches,
            examples: ex_caches,
            attention: att_cache,
            dropout_mask,
            tagger: tag_cache,
            tagged,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Gradient of the token-averaged cross-entropy against `tags`,
    /// accumulated into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, tags: &[Tag], grads: &mut Self) -> Result<()> {
        let cfg = &self.config;
        let len = cache.probs.nrows();
        if tags.len() != len {
            return Err(Error::Shape(format!(
                "{} tags for {} tokens",
                tags.len(),
                len
            )));
        }
        let inv_len = T::lit(1.0 / len as f64);
        let mut d_logits = cache.probs.clone();
        for (i, tag) in tags.iter().enumerate() {
            d_logits[[i, tag.index()]] -= T::one();
        }
        d_logits.mapv_inplace(|v| v * inv_len);

        let d_tagged =
            self.classifier
                .backward(cache.tagged.view(), d_logits.view(), &mut grads.classifier);
        let mut d_in = self
            .tagger
            .backward(&cache.tagger, d_tagged.view(), &mut grads.tagger);
        if let Some(mask) = &cache.dropout_mask {
            d_in *= mask;
        }

        let wc = cfg.d_wc();
        let mut d_encoded = d_in.slice(s![.., ..cfg.d_en]).to_owned();
        let mut offset = cfg.d_en;
        if cfg.use_description {
            let d_desc = d_in.slice(s![.., offset..offset + wc]).sum_axis(Axis(0));
            let share = d_desc.mapv(|v| v * T::lit(1.0 / cache.description.len() as f64));
            for tc in &cache.description {
                embed_token_backward(
                    &self.words,
                    &self.chars,
                    tc,
                    share.view(),
                    &mut grads.words,
                    &mut grads.chars,
                );
            }
            offset += wc;
        }
        if let (Some(attention), Some(att_cache)) = (&self.attention, &cache.attention) {
            let d_context = d_in.slice(s![.., offset..offset + wc]);
            let grad_att = grads
                .attention
                .as_mut()
                .expect("gradient layout matches parameters");
            let (d_queries, d_pooled) = attention.backward(att_cache, d_context, grad_att);
            d_encoded += &d_queries;
            for (k, caches) in cache.examples.iter().enumerate() {
                let share = d_pooled
                    .row(k)
                    .mapv(|v| v * T::lit(1.0 / caches.len() as f64));
                for tc in caches {
                    embed_token_backward(
                        &self.words,
                        &self.chars,
                        tc,
                        share.view(),
                        &mut grads.words,
                        &mut grads.chars,
                    );
                }
            }
        }

        let d_utt = self
            .encoder
            .backward(&cache.encoder, d_encoded.view(), &mut grads.encoder);
        for (tc, row) in cache.utterance.iter().zip(d_utt.outer_iter()) {
            embed_token_backward(
                &self.words,
                &self.chars,
                tc,
                row,
                &mut grads.words,
                &mut grads.chars,
            );
        }
        debug_assert_eq!(cache.encoded.nrows(), len);
        Ok(())
    }

    /// Forward, loss and backward for one instance; returns the loss.
    pub fn loss_and_grad(
        &self,
        tokens: &[String],
        schema: &SlotSchema,
        examples: &[Vec<String>],
        tags: &[Tag],
        grads: &mut Self,
        train_rng: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let (probs, cache) = self.forward(tokens, schema, examples, train_rng)?;
        let value = loss(probs.view(), tags)?;
        self.backward(&cache, tags, grads)?;
        Ok(value)
    }

    /// Decoded spans for one utterance.
    pub fn predict_spans(
        &self,
        tokens: &[String],
        schema: &SlotSchema,
        examples: &[Vec<String>],
    ) -> Result<Vec<(usize, usize)>> {
        let (probs, _) = self.forward(tokens, schema, examples, None)?;
        Ok(decode(probs.view()))
    }

    fn checkpoint_arrays(&self) -> Vec<NamedArray> {
        let mut arrays = Vec::new();
        if !self.words.trainable {
            arrays.push(NamedArray::from_view(
                "words.matrix",
                self.words.matrix.view().into_dyn(),
            ));
        }
        arrays.extend(
            self.arrays()
                .into_iter()
                .map(|(name, view)| NamedArray::from_view(name, view)),
        );
        arrays
    }

    /// Writes parameters, vocabulary and config to one checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "slot-tagger",
            "config": self.config,
            "vocabulary": self.words.words(),
        });
        write_checkpoint(path, meta, &self.checkpoint_arrays())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, arrays) = read_checkpoint(path.as_ref())?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let words: Vec<String> = serde_json::from_value(meta["vocabulary"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
        let matrix_entry = arrays
            .iter()
            .find(|a| a.name == "words.matrix")
            .ok_or_else(|| Error::Checkpoint("missing words.matrix".into()))?;
        let matrix = matrix_entry
            .to_array::<T>()
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("words.matrix: {e}")))?;
        let table = WordEmbeddingTable::from_parts(
            words,
            matrix,
            Array1::zeros(config.d_w),
            config.trainable_embeddings,
        )?;
        let trainable = config.trainable_embeddings;
        let mut params = ModelParams::init(config, table, 0)?;
        let mut expected = params.arrays_mut();
        let stored: Vec<&NamedArray> = arrays
            .iter()
            .filter(|a| trainable || a.name != "words.matrix")
            .collect();
        if stored.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} trainable arrays, model expects {}",
                stored.len(),
                expected.len()
            )));
        }
        for ((name, dst), src) in expected.iter_mut().zip(stored) {
            if *name != src.name || dst.shape() != src.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` {:?} does not match `{name}` {:?}",
                    src.name,
                    src.shape,
                    dst.shape()
                )));
            }
            dst.assign(&src.to_array::<T>());
        }
        Ok(params)
    }
}

/// `-(1/T) Σ_i log p_i[tag_i]`, with probabilities floored at
/// [`PROB_FLOOR`].
pub fn loss<T: Real>(probs: ArrayView2<'_, T>, tags: &[Tag]) -> Result<f64> {
    if probs.nrows() != tags.len() {
        return Err(Error::Shape(format!(
            "{} distributions for {} tags",
            probs.nrows(),
            tags.len()
        )));
    }
    if tags.is_empty() {
        return Err(Error::EmptyInput("loss"));
    }
    let mut total = 0.0;
    for (row, tag) in probs.outer_iter().zip(tags) {
        let mut p = row[tag.index()].as_f64();
        if p < PROB_FLOOR {
            CLAMPED.fetch_add(1, Ordering::Relaxed);
            log::warn!("clamping gold-label probability {p:e}");
            p = PROB_FLOOR;
        }
        total -= p.ln();
    }
    Ok(total / tags.len() as f64)
}

/// Per-token arg max, then maximal `B I*` runs (stray `I` opens a span).
pub fn decode<T: Real>(probs: ArrayView2<'_, T>) -> Vec<(usize, usize)> {
    let tags: Vec<Tag> = probs
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            Tag::from_index(best)
        })
        .collect();
    spans_from_tags(&tags)
}

/// Anything that can tag an utterance for one slot; lets evaluation run
/// against stubs as well as trained models.
pub trait SlotTagger {
    fn uses_examples(&self) -> bool;
    fn predict(
        &self,
        tokens: &[String],
        schema: &SlotSchema,
        examples: &[Vec<String>],
    ) -> Result<Vec<(usize, usize)>>;
}

impl<T: Real> SlotTagger for ModelParams<T> {
    fn uses_examples(&self) -> bool {
        self.config.use_examples
    }

    fn predict(
        &self,
        tokens: &[String],
        schema: &SlotSchema,
        examples: &[Vec<String>],
    ) -> Result<Vec<(usize, usize)>> {
        self.predict_spans(tokens, schema, examples)
    }
}
