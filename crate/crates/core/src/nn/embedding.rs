//! Token embeddings: a word table (fixed by default) concatenated with a
//! trainable byte-level character CNN.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{
    concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{join, uniform_array1, uniform_array2, Params, Real};
use crate::error::{Error, Result};

/// Reserved symbol that replaces slot-value tokens during training.
pub const VAL_TOKEN: &str = "<VAL>";

/// Byte vocabulary plus one opaque symbol for [`VAL_TOKEN`].
pub const CHAR_VOCAB: usize = 257;
const VAL_CHAR: usize = 256;

fn is_val(token: &str) -> bool {
    token.eq_ignore_ascii_case(VAL_TOKEN)
}

#[derive(Debug, Clone, PartialEq)]
struct Vocab {
    index: HashMap<String, usize>,
    words: Vec<String>,
}

/// Word vectors with an out-of-vocabulary row and a trainable row for
/// [`VAL_TOKEN`]. The main matrix only receives gradients when `trainable`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable<T> {
    vocab: Arc<Vocab>,
    /// One row per word, followed by the OOV row.
    pub matrix: Array2<T>,
    pub val_row: Array1<T>,
    pub trainable: bool,
}

/// Which row a token resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordRef {
    Row(usize),
    Val,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl<T: Real> WordEmbeddingTable<T> {
    /// Builds a table from `(word, vector)` rows. Lookup is by lowercased
    /// word; the first row wins when two words collide after lowercasing.
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>, dim: usize, seed: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(rows.len());
        let mut words = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity((rows.len() + 1) * dim);
        for (word, vector) in rows {
            if vector.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding for `{word}` has {} components, expected {dim}",
                    vector.len()
                )));
            }
            let key = word.to_lowercase();
            if index.contains_key(&key) {
                continue;
            }
            index.insert(key, words.len());
            words.push(word);
            data.extend(vector.into_iter().map(T::lit));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00_0f_0f_0f);
        data.extend(unit_vector(dim, &mut rng).into_iter().map(T::lit));
        let matrix = Array2::from_shape_vec((words.len() + 1, dim), data).expect("row-major table");
        Ok(WordEmbeddingTable {
            vocab: Arc::new(Vocab { index, words }),
            matrix,
            val_row: Array1::zeros(dim),
            trainable: false,
        })
    }

    /// Seeded table of random unit vectors, one per distinct lowercased word.
    /// Stands in for a pretrained table when none is supplied.
    pub fn random<'a>(words: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut unique: Vec<String> = words
            .into_iter()
            .map(str::to_lowercase)
            .filter(|w| !is_val(w))
            .collect();
        unique.sort();
        unique.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = unique
            .into_iter()
            .map(|w| (w, unit_vector(dim, &mut rng)))
            .collect();
        Self::from_rows(rows, dim, seed).expect("dimensions agree")
    }

    /// Reads the text format: a `V d` header, then `word v1 ... vd` per line.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let format_err = |line: usize, message: String| Error::Format {
            path: origin.clone(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| format_err(1, "missing header".into()))?;
        let mut head = header.split_whitespace().map(str::parse::<usize>);
        let (count, dim) = match (head.next(), head.next(), head.next()) {
            (Some(Ok(v)), Some(Ok(d)), None) if d > 0 => (v, d),
            _ => {
                return Err(format_err(
                    1,
                    format!("expected `V d_w` header, got {header:?}"),
                ))
            }
        };
        let mut rows = Vec::with_capacity(count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line").to_string();
            let vector = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(idx + 1, e.to_string()))?;
            if vector.len() != dim {
                return Err(format_err(
                    idx + 1,
                    format!("expected {dim} components, got {}", vector.len()),
                ));
            }
            rows.push((word, vector));
        }
        if rows.len() != count {
            log::warn!(
                "{origin}: header announces {count} words, found {}",
                rows.len()
            );
        }
        Self::from_rows(rows, dim, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{} {}\n", self.vocab.words.len(), self.dim());
        for (i, word) in self.vocab.words.iter().enumerate() {
            out.push_str(word);
            for v in self.matrix.row(i) {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn words(&self) -> &[String] {
        &self.vocab.words
    }

    pub fn oov_row(&self) -> usize {
        self.matrix.nrows() - 1
    }

    pub fn lookup(&self, token: &str) -> WordRef {
        if is_val(token) {
            return WordRef::Val;
        }
        let key = token.to_lowercase();
        WordRef::Row(
            self.vocab
                .index
                .get(&key)
                .copied()
                .unwrap_or_else(|| self.oov_row()),
        )
    }

    pub fn vector(&self, word: WordRef) -> ArrayView1<'_, T> {
        match word {
            WordRef::Row(i) => self.matrix.row(i),
            WordRef::Val => self.val_row.view(),
        }
    }

    pub fn accumulate(&self, grads: &mut Self, word: WordRef, d: ArrayView1<'_, T>) {
        match word {
            WordRef::Val => grads.val_row += &d,
            WordRef::Row(i) if self.trainable => {
                let mut row = grads.matrix.row_mut(i);
                row += &d;
            }
            WordRef::Row(_) => {}
        }
    }

    /// Gradient buffer. A fixed table gets an empty matrix.
    pub fn zeros_like(&self) -> Self {
        let rows = if self.trainable {
            self.matrix.nrows()
        } else {
            0
        };
        WordEmbeddingTable {
            vocab: Arc::clone(&self.vocab),
            matrix: Array2::zeros((rows, self.dim())),
            val_row: Array1::zeros(self.dim()),
            trainable: self.trainable,
        }
    }

    /// Rebuilds a table around checkpointed arrays.
    pub fn from_parts(
        words: Vec<String>,
        matrix: Array2<T>,
        val_row: Array1<T>,
        trainable: bool,
    ) -> Result<Self> {
        if matrix.nrows() != words.len() + 1 || val_row.len() != matrix.ncols() {
            return Err(Error::Shape(
                "word table does not match its vocabulary".into(),
            ));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_lowercase(), i))
            .rev()
            .collect();
        Ok(WordEmbeddingTable {
            vocab: Arc::new(Vocab { index, words }),
            matrix,
            val_row,
            trainable,
        })
    }

    pub fn cast<U: Real>(&self) -> WordEmbeddingTable<U> {
        WordEmbeddingTable {
            vocab: Arc::clone(&self.vocab),
            matrix: self.matrix.mapv(|v| U::lit(v.as_f64())),
            val_row: self.val_row.mapv(|v| U::lit(v.as_f64())),
            trainable: self.trainable,
        }
    }
}

impl<T: Real> Params<T> for WordEmbeddingTable<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        if self.trainable {
            out.push((join(prefix, "matrix"), self.matrix.view().into_dyn()));
        }
        out.push((join(prefix, "val_row"), self.val_row.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        if self.trainable {
            out.push((join(prefix, "matrix"), self.matrix.view_mut().into_dyn()));
        }
        out.push((join(prefix, "val_row"), self.val_row.view_mut().into_dyn()));
    }
}

/// Character embeddings followed by two valid-mode convolutions with ReLU
/// and max-over-time pooling. Each convolution left-pads its input with
/// zeros up to the filter width, so every token yields `channels` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCnn<T> {
    pub char_emb: Array2<T>,
    pub conv1_w: Array2<T>,
    pub conv1_b: Array1<T>,
    pub conv2_w: Array2<T>,
    pub conv2_b: Array1<T>,
    pub width: usize,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    pad: usize,
    patches: Array2<T>,
    pre: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct CharCache<T> {
    ids: Vec<usize>,
    conv1: ConvCache<T>,
    conv2: ConvCache<T>,
    argmax: Vec<usize>,
}

fn conv_forward<T: Real>(
    input: ArrayView2<'_, T>,
    w: &Array2<T>,
    b: &Array1<T>,
    width: usize,
) -> (Array2<T>, ConvCache<T>) {
    let cin = input.ncols();
    let pad = width.saturating_sub(input.nrows());
    let len = input.nrows() + pad;
    let out_len = len + 1 - width;
    let mut patches = Array2::zeros((out_len, width * cin));
    for t in 0..out_len {
        for j in 0..width {
            let src = t + j;
            if src >= pad {
                patches
                    .slice_mut(s![t, j * cin..(j + 1) * cin])
                    .assign(&input.row(src - pad));
            }
        }
    }
    let pre = patches.dot(&w.t()) + b;
    let out = pre.mapv(|v| v.max(T::zero()));
    (out, ConvCache { pad, patches, pre })
}

fn conv_backward<T: Real>(
    cache: &ConvCache<T>,
    d_out: ArrayView2<'_, T>,
    w: &Array2<T>,
    gw: &mut Array2<T>,
    gb: &mut Array1<T>,
    in_len: usize,
    width: usize,
) -> Array2<T> {
    let mut d_pre = d_out.to_owned();
    d_pre.zip_mut_with(&cache.pre, |d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    general_mat_mul(T::one(), &d_pre.t(), &cache.patches, T::one(), gw);
    *gb += &d_pre.sum_axis(Axis(0));
    let d_patches = d_pre.dot(w);
    let cin = w.ncols() / width;
    let mut d_in = Array2::zeros((in_len, cin));
    for t in 0..d_patches.nrows() {
        for j in 0..width {
            let src = t + j;
            if src >= cache.pad {
                let mut row = d_in.row_mut(src - cache.pad);
                row += &d_patches.slice(s![t, j * cin..(j + 1) * cin]);
            }
        }
    }
    d_in
}

impl<T: Real> CharCnn<T> {
    pub fn new<R: Rng>(
        char_dim: usize,
        channels: usize,
        width: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        CharCnn {
            char_emb: uniform_array2(CHAR_VOCAB, char_dim, init_scale, rng),
            conv1_w: uniform_array2(channels, width * char_dim, init_scale, rng),
            conv1_b: uniform_array1(channels, init_scale, rng),
            conv2_w: uniform_array2(channels, width * channels, init_scale, rng),
            conv2_b: uniform_array1(channels, init_scale, rng),
            width,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.conv2_b.len()
    }

    pub fn zeros_like(&self) -> Self {
        CharCnn {
            char_emb: Array2::zeros(self.char_emb.raw_dim()),
            conv1_w: Array2::zeros(self.conv1_w.raw_dim()),
            conv1_b: Array1::zeros(self.conv1_b.raw_dim()),
            conv2_w: Array2::zeros(self.conv2_w.raw_dim()),
            conv2_b: Array1::zeros(self.conv2_b.raw_dim()),
            width: self.width,
        }
    }

    pub fn char_ids(token: &str) -> Vec<usize> {
        if is_val(token) {
            vec![VAL_CHAR]
        } else {
            token.to_lowercase().bytes().map(usize::from).collect()
        }
    }

    pub fn forward(&self, token: &str) -> Result<(Array1<T>, CharCache<T>)> {
        if token.is_empty() {
            return Err(Error::InvalidToken(token.to_string()));
        }
        let ids = Self::char_ids(token);
        let chars = self.char_emb.select(Axis(0), &ids);
        let (h1, conv1) = conv_forward(chars.view(), &self.conv1_w, &self.conv1_b, self.width);
        let (h2, conv2) = conv_forward(h1.view(), &self.conv2_w, &self.conv2_b, self.width);
        let channels = self.output_dim();
        let mut out = Array1::zeros(channels);
        let mut argmax = vec![0; channels];
        for c in 0..channels {
            let col = h2.column(c);
            let mut best = 0;
            for t in 1..col.len() {
                if col[t] > col[best] {
                    best = t;
                }
            }
            argmax[c] = best;
            out[c] = col[best];
        }
        Ok((
            out,
            CharCache {
                ids,
                conv1,
                conv2,
                argmax,
            },
        ))
    }

    pub fn backward(&self, cache: &CharCache<T>, d_out: ArrayView1<'_, T>, grads: &mut Self) {
        let h2_len = cache.conv2.pre.nrows();
        let mut d_h2 = Array2::zeros((h2_len, self.output_dim()));
        for (c, &t) in cache.argmax.iter().enumerate() {
            d_h2[[t, c]] = d_out[c];
        }
        let h1_len = cache.conv1.pre.nrows();
        let d_h1 = conv_backward(
            &cache.conv2,
            d_h2.view(),
            &self.conv2_w,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
            h1_len,
            self.width,
        );
        let d_chars = conv_backward(
            &cache.conv1,
            d_h1.view(),
            &self.conv1_w,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
            cache.ids.len(),
            self.width,
        );
        for (row, &id) in d_chars.outer_iter().zip(&cache.ids) {
            let mut dst = grads.char_emb.row_mut(id);
            dst += &row;
        }
    }

    pub fn cast<U: Real>(&self) -> CharCnn<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.as_f64()));
        CharCnn {
            char_emb: c2(&self.char_emb),
            conv1_w: c2(&self.conv1_w),
            conv1_b: c1(&self.conv1_b),
            conv2_w: c2(&self.conv2_w),
            conv2_b: c1(&self.conv2_b),
            width: self.width,
        }
    }
}

impl<T: Real> Params<T> for CharCnn<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "char_emb"), self.char_emb.view().into_dyn()));
        out.push((join(prefix, "conv1_w"), self.conv1_w.view().into_dyn()));
        out.push((join(prefix, "conv1_b"), self.conv1_b.view().into_dyn()));
        out.push((join(prefix, "conv2_w"), self.conv2_w.view().into_dyn()));
        out.push((join(prefix, "conv2_b"), self.conv2_b.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((
            join(prefix, "char_emb"),
            self.char_emb.view_mut().into_dyn(),
        ));
        out.push((join(prefix, "conv1_w"), self.conv1_w.view_mut().into_dyn()));
        out.push((join(prefix, "conv1_b"), self.conv1_b.view_mut().into_dyn()));
        out.push((join(prefix, "conv2_w"), self.conv2_w.view_mut().into_dyn()));
        out.push((join(prefix, "conv2_b"), self.conv2_b.view_mut().into_dyn()));
    }
}

/// Cache of one [`embed_token`] call.
#[derive(Debug, Clone)]
pub struct TokenCache<T> {
    word: WordRef,
    chars: CharCache<T>,
}

/// Word vector concatenated with the character-CNN encoding.
pub fn embed_token<T: Real>(
    words: &WordEmbeddingTable<T>,
    chars: &CharCnn<T>,
    token: &str,
) -> Result<(Array1<T>, TokenCache<T>)> {
    if token.is_empty() {
        return Err(Error::InvalidToken(token.to_string()));
    }
    let word = words.lookup(token);
    let (char_vec, char_cache) = chars.forward(token)?;
    let out = concatenate(Axis(0), &[words.vector(word), char_vec.view()]).expect("1-d concat");
    Ok((
        out,
        TokenCache {
            word,
            chars: char_cache,
        },
    ))
}

pub fn embed_token_backward<T: Real>(
    words: &WordEmbeddingTable<T>,
    chars: &CharCnn<T>,
    cache: &TokenCache<T>,
    d_out: ArrayView1<'_, T>,
    word_grads: &mut WordEmbeddingTable<T>,
    char_grads: &mut CharCnn<T>,
) {
    let dw = words.dim();
    words.accumulate(word_grads, cache.word, d_out.slice(s![..dw]));
    chars.backward(&cache.chars, d_out.slice(s![dw..]), char_grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;

    fn tables() -> (WordEmbeddingTable<f64>, CharCnn<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut words = WordEmbeddingTable::random(["play", "radio", "imagine"], 128, 1);
        words.val_row = uniform_array1(128, 0.1, &mut rng);
        let chars = CharCnn::new(16, 32, 3, 0.1, &mut rng);
        (words, chars)
    }

    #[test]
    fn embedding_shapes_and_oov() {
        let (words, chars) = tables();
        let (known, _) = embed_token(&words, &chars, "Play").unwrap();
        assert_eq!(known.len(), 160);
        let (unk1, _) = embed_token(&words, &chars, "zzz").unwrap();
        let (unk2, _) = embed_token(&words, &chars, "qqqq").unwrap();
        assert_eq!(unk1.slice(s![..128]), words.matrix.row(words.oov_row()));
        assert_eq!(unk1.slice(s![..128]), unk2.slice(s![..128]));
        assert_ne!(unk1.slice(s![128..]), unk2.slice(s![128..]));
        let (val, _) = embed_token(&words, &chars, VAL_TOKEN).unwrap();
        assert_eq!(val.slice(s![..128]), words.val_row);
        assert_eq!(CharCnn::<f64>::char_ids(VAL_TOKEN), [VAL_CHAR]);
        assert!(matches!(
            embed_token(&words, &chars, ""),
            Err(Error::InvalidToken(_))
        ));
    }

    #[test]
    fn char_cnn_dimension_is_fixed() {
        let (_, chars) = tables();
        for token in ["a", "ab", "abc", "abcdefghijklmnopqrstuvwxyz"] {
            assert_eq!(chars.forward(token).unwrap().0.len(), 32);
        }
    }

    #[test]
    fn char_cnn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cnn = CharCnn::<f64>::new(3, 4, 3, 0.5, &mut rng);
        let weights = uniform_array1::<f64, _>(4, 1.0, &mut rng);
        for token in ["x", "ab", "hello"] {
            let (_, cache) = cnn.forward(token).unwrap();
            let mut grads = cnn.zeros_like();
            cnn.backward(&cache, weights.view(), &mut grads);
            check_params(
                &cnn,
                &grads,
                |c| c.forward(token).unwrap().0.dot(&weights),
                1e-6,
                1e-4,
            );
        }
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "2 3\nfoo 1 0 0\nBar 0 1 0.5\n").unwrap();
        let table = WordEmbeddingTable::<f32>::load(&path, 0).unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(
            table.vector(table.lookup("bar")).to_vec(),
            vec![0.0, 1.0, 0.5]
        );
        assert_eq!(table.lookup("baz"), WordRef::Row(table.oov_row()));
        table.save(dir.path().join("again.txt")).unwrap();
        let again = WordEmbeddingTable::<f32>::load(dir.path().join("again.txt"), 0).unwrap();
        assert_eq!(again.matrix, table.matrix);

        fs::write(&path, "1 3\nfoo 1 0\n").unwrap();
        assert!(matches!(
            WordEmbeddingTable::<f32>::load(&path, 0),
            Err(Error::Format { line: 2, .. })
        ));
    }
}
