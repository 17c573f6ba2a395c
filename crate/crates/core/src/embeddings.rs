//! Token embeddings: word-level tables restricted to a vocabulary, and
//! FastText-style subword composition over hashed character trigrams.
//!
//! Both kinds reduce to the same model input: every token maps to a small
//! list of matrix rows whose sum is the token vector. A word-level token is
//! one row; a subword token is either its direct frequent-word row or the
//! rows of its n-gram buckets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Vocabulary, OOV_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const NGRAM_LENGTH: usize = 3;
pub const DEFAULT_BUCKETS: usize = 2_000_000;
pub const DEFAULT_FREQUENT_WORDS: usize = 10_000;
pub const INIT_RANGE: f32 = 0.01;

const CACHE_MAGIC: &[u8; 8] = b"RRLEMB01";

/// Bytes needed to hold `terms × dim` 32-bit values.
pub fn memory_footprint(terms: u64, dim: u64) -> u64 {
    terms * dim * 4
}

fn uniform_matrix(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Tensor::from_fn(&[rows, dim], |_| rng.random_range(-INIT_RANGE..=INIT_RANGE));
    m.row_mut(PAD_ID as usize).fill(0.0);
    m
}

/// Dense `|vocabulary| × dim` table. Row 0 (PAD) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub found: usize,
    pub missing: usize,
    pub duplicates: usize,
    pub header_skipped: bool,
}

impl EmbeddingTable {
    /// Seeded uniform rows in `[-0.01, 0.01]`, PAD zeroed.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Result<Self> {
        if rows < 2 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding table needs >= 2 rows and dim >= 1, got {rows}x{dim}"
            )));
        }
        Ok(EmbeddingTable {
            matrix: uniform_matrix(rows, dim, seed),
        })
    }

    pub fn from_matrix(matrix: Tensor<f32>) -> Result<Self> {
        let (rows, _) = matrix.dims2()?;
        if rows < 2 {
            return Err(Error::Shape("embedding table needs PAD and OOV rows".into()));
        }
        if matrix.row(PAD_ID as usize).iter().any(|&v| v != 0.0) {
            return Err(Error::Invariant("PAD embedding row must be zero".into()));
        }
        Ok(EmbeddingTable { matrix })
    }

    /// Reads `term v1 … vdim` lines for the terms of `vocab`. Terms missing
    /// from the file keep a seeded random row; a leading `count dim` header
    /// is skipped; duplicate terms keep their first vector.
    pub fn load_pretrained(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<(Self, LoadReport)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_pretrained(BufReader::new(file), path, vocab, dim, seed)
    }

    pub fn read_pretrained<R: BufRead>(
        reader: R,
        path: &Path,
        vocab: &Vocabulary,
        dim: usize,
        seed: u64,
    ) -> Result<(Self, LoadReport)> {
        let mut table = Self::random(vocab.len(), dim, seed)?;
        let mut filled = vec![false; vocab.len()];
        let mut report = LoadReport::default();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(term) = fields.next() else {
                continue;
            };
            let values: Vec<&str> = fields.collect();
            if line_no == 1 && values.len() == 1 && term.parse::<u64>().is_ok() && values[0].parse::<u64>().is_ok() {
                report.header_skipped = true;
                continue;
            }
            if values.len() != dim {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            let Some(id) = vocab.id(term) else {
                continue;
            };
            if filled[id as usize] {
                report.duplicates += 1;
                tracing::warn!(term, line = line_no, "duplicate pretrained vector ignored");
                continue;
            }
            let row = table.matrix.row_mut(id as usize);
            for (slot, v) in row.iter_mut().zip(&values) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad number `{v}`")))?;
            }
            filled[id as usize] = true;
            report.found += 1;
        }
        report.missing = vocab.term_count() - report.found;
        Ok((table, report))
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn row(&self, id: u32) -> &[f32] {
        self.matrix.row(id as usize)
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor<f32> {
        self.matrix
    }

    pub fn footprint_bytes(&self) -> u64 {
        memory_footprint(self.rows() as u64, self.dim() as u64)
    }

    /// Binary cache: magic, u32 dim, u64 rows, then little-endian f32 rows.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            out.write_all(CACHE_MAGIC)?;
            out.write_all(&(self.dim() as u32).to_le_bytes())?;
            out.write_all(&(self.rows() as u64).to_le_bytes())?;
            for v in self.matrix.data() {
                out.write_all(&v.to_le_bytes())?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Invariant(format!("{}: not an embedding cache", path.display())));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        file.read_exact(&mut b4).map_err(io)?;
        file.read_exact(&mut b8).map_err(io)?;
        let (dim, rows) = (u32::from_le_bytes(b4) as usize, u64::from_le_bytes(b8) as usize);
        let mut raw = vec![0u8; rows * dim * 4];
        file.read_exact(&mut raw).map_err(io)?;
        if file.read(&mut b4).map_err(io)? != 0 {
            return Err(Error::Invariant(format!("{}: trailing bytes in embedding cache", path.display())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::from_matrix(Tensor::new(&[rows, dim], data)?)
    }
}

// ---------------------------------------------------------------------------
// Subwords

/// Character trigrams of `<word>`, in order. One-character words give the
/// single trigram `<w>`.
pub fn subword_ngrams(word: &str) -> Result<Vec<String>> {
    if word.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty word".into()));
    }
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(word.chars())
        .chain(std::iter::once('>'))
        .collect();
    Ok(wrapped
        .windows(NGRAM_LENGTH)
        .map(|w| w.iter().collect())
        .collect())
}

/// 32-bit FNV-1a over the UTF-8 bytes.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| (h ^ u32::from(b)).wrapping_mul(0x0100_0193))
}

/// Bucket of an n-gram in `[0, buckets)`.
pub fn hash_ngram(ngram: &str, buckets: usize) -> usize {
    fnv1a32(ngram.as_bytes()) as usize % buckets
}

/// Word-to-row mapping of a subword model.
///
/// Matrix rows: 0 is PAD, `1..=F` the frequent words (direct vectors), then
/// the `B` n-gram buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordLayout {
    buckets: usize,
    frequent: HashMap<String, u32>,
    frequent_words: Vec<String>,
}

impl SubwordLayout {
    pub fn new(frequent_words: Vec<String>, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::InvalidArgument("bucket count must be >= 1".into()));
        }
        let mut frequent = HashMap::with_capacity(frequent_words.len());
        for (i, w) in frequent_words.iter().enumerate() {
            if frequent.insert(w.clone(), i as u32 + 1).is_some() {
                return Err(Error::DuplicateId(w.clone()));
            }
        }
        Ok(SubwordLayout {
            buckets,
            frequent,
            frequent_words,
        })
    }

    /// The `count` most frequent collection terms get direct vectors.
    pub fn from_vocabulary(vocab: &Vocabulary, count: usize, buckets: usize) -> Result<Self> {
        let words = vocab
            .frequencies()
            .ranked()
            .into_iter()
            .take(count)
            .map(|(t, _)| t.to_string())
            .collect();
        Self::new(words, buckets)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn frequent_words(&self) -> &[String] {
        &self.frequent_words
    }

    pub fn rows(&self) -> usize {
        1 + self.frequent_words.len() + self.buckets
    }

    pub fn bucket_row(&self, bucket: usize) -> u32 {
        (1 + self.frequent_words.len() + bucket) as u32
    }

    pub fn frequent_row(&self, word: &str) -> Option<u32> {
        self.frequent.get(word).copied()
    }

    /// Matrix rows whose sum is the vector of `word`.
    pub fn word_rows(&self, word: &str) -> Result<Vec<u32>> {
        if let Some(row) = self.frequent_row(word) {
            return Ok(vec![row]);
        }
        Ok(subword_ngrams(word)?
            .iter()
            .map(|g| self.bucket_row(hash_ngram(g, self.buckets)))
            .collect())
    }
}

/// Subword embedding model: frequent-word vectors plus n-gram buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordEmbedder {
    layout: SubwordLayout,
    matrix: Tensor<f32>,
}

impl SubwordEmbedder {
    pub fn random(layout: SubwordLayout, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be >= 1".into()));
        }
        let matrix = uniform_matrix(layout.rows(), dim, seed);
        Ok(SubwordEmbedder { layout, matrix })
    }

    pub fn from_matrix(layout: SubwordLayout, matrix: Tensor<f32>) -> Result<Self> {
        let (rows, _) = matrix.dims2()?;
        if rows != layout.rows() {
            return Err(Error::Shape(format!("layout needs {} rows, matrix has {rows}", layout.rows())));
        }
        Ok(SubwordEmbedder { layout, matrix })
    }

    /// Copies direct vectors for frequent words from a pretrained text file.
    pub fn load_frequent_vectors(&mut self, path: &Path) -> Result<LoadReport> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let dim = self.dim();
        let mut report = LoadReport::default();
        let mut filled = vec![false; self.layout.frequent_words.len() + 1];
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(term) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            if idx == 0 && values.len() == 1 {
                report.header_skipped = true;
                continue;
            }
            if values.len() != dim {
                return Err(Error::parse(path, idx + 1, format!("expected {dim} values, found {}", values.len())));
            }
            let Some(row) = self.layout.frequent_row(term) else { continue };
            if std::mem::replace(&mut filled[row as usize], true) {
                report.duplicates += 1;
                continue;
            }
            for (slot, v) in self.matrix.row_mut(row as usize).iter_mut().zip(&values) {
                *slot = v.parse().map_err(|_| Error::parse(path, idx + 1, format!("bad number `{v}`")))?;
            }
            report.found += 1;
        }
        report.missing = self.layout.frequent_words.len() - report.found;
        Ok(report)
    }

    pub fn layout(&self) -> &SubwordLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Tensor<f32> {
        self.matrix
    }

    pub fn bucket_vector(&self, bucket: usize) -> &[f32] {
        self.matrix.row(self.layout.bucket_row(bucket) as usize)
    }

    pub fn direct_vector(&self, word: &str) -> Option<&[f32]> {
        self.layout.frequent_row(word).map(|r| self.matrix.row(r as usize))
    }

    /// Direct vector for frequent words, otherwise the sum of the word's
    /// n-gram bucket vectors.
    pub fn compose_word_vector(&self, word: &str) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.dim()];
        for row in self.layout.word_rows(word)? {
            for (o, &v) in out.iter_mut().zip(self.matrix.row(row as usize)) {
                *o += v;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Model input

/// Tokens of one text as lists of embedding-matrix rows (CSR layout).
/// A token whose only row is PAD is a padding position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedText {
    offsets: Vec<usize>,
    rows: Vec<u32>,
}

impl EncodedText {
    pub fn new() -> Self {
        EncodedText {
            offsets: vec![0],
            rows: Vec::new(),
        }
    }

    /// One row per token, as produced by a word-level vocabulary.
    pub fn from_ids(ids: &[u32]) -> Self {
        let mut text = Self::new();
        ids.iter().for_each(|&id| text.push(&[id]));
        text
    }

    pub fn push(&mut self, rows: &[u32]) {
        assert!(!rows.is_empty(), "a token needs at least one row");
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.rows.extend_from_slice(rows);
        self.offsets.push(self.rows.len());
    }

    pub fn push_pad(&mut self) {
        self.push(&[PAD_ID]);
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_rows(&self, i: usize) -> &[u32] {
        &self.rows[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.token_rows(i) == [PAD_ID]
    }

    /// `true` for real tokens, `false` for padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| !self.is_pad(i)).collect()
    }

    pub fn real_tokens(&self) -> usize {
        (0..self.len()).filter(|&i| !self.is_pad(i)).count()
    }

    /// Copy with only the non-PAD positions, order kept.
    pub fn without_padding(&self) -> EncodedText {
        let mut out = EncodedText::new();
        (0..self.len())
            .filter(|&i| !self.is_pad(i))
            .for_each(|i| out.push(self.token_rows(i)));
        out
    }

    /// The first `max_len` tokens.
    pub fn truncated(&self, max_len: usize) -> EncodedText {
        if self.len() <= max_len {
            return self.clone();
        }
        let end = self.offsets[max_len];
        EncodedText {
            offsets: self.offsets[..=max_len].to_vec(),
            rows: self.rows[..end].to_vec(),
        }
    }

    pub fn max_row(&self) -> Option<u32> {
        self.rows.iter().copied().max()
    }
}

/// Maps normalized tokens to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Featurizer {
    Word(Vocabulary),
    Subword(SubwordLayout),
}

impl Featurizer {
    /// Rows of the embedding matrix this featurizer indexes into.
    pub fn rows(&self) -> usize {
        match self {
            Featurizer::Word(v) => v.len(),
            Featurizer::Subword(l) => l.rows(),
        }
    }

    /// Encodes at most `max_len` tokens; longer inputs are truncated.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> EncodedText {
        let mut out = EncodedText::new();
        for t in tokens.iter().take(max_len) {
            let t = t.as_ref();
            match self {
                Featurizer::Word(v) => out.push(&[v.id_or_oov(t)]),
                Featurizer::Subword(l) => match l.word_rows(t) {
                    Ok(rows) => out.push(&rows),
                    // empty strings never come out of the tokenizer
                    Err(_) => out.push(&[OOV_ID.min(l.rows() as u32 - 1)]),
                },
            }
        }
        out
    }
}
