//! Tokens, vocabularies, corpora and embedding matrices.
//!
//! Everything here is immutable once built and can be shared freely across
//! threads. File formats:
//!
//! * vocabulary: one `<rendered-token>\t<frequency>` entry per line, id order;
//! * embeddings: a `<V> <d>` header followed by `V` lines of
//!   `<rendered-token> <f1> ... <fd>`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::segmentation::SegmentationModel;

/// Marker prepended to the rendered form of word-internal tokens.
pub const CONTINUATION_MARKER: &str = "##";

/// A subword unit.
///
/// Identity includes the continuation flag, so `er` and `##er` are different
/// tokens. Ordering is by surface first, with the word-initial variant sorting
/// before the continuation variant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    surface: String,
    continuation: bool,
}

impl Token {
    pub fn new(surface: impl Into<String>, continuation: bool) -> Result<Self> {
        let surface = surface.into();
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return Err(Error::InvalidToken(surface));
        }
        Ok(Self {
            surface,
            continuation,
        })
    }

    /// Word-initial token. Panics on an invalid surface; meant for literals.
    pub fn word(surface: &str) -> Self {
        Self::new(surface, false).expect("valid token surface")
    }

    /// Word-internal token. Panics on an invalid surface; meant for literals.
    pub fn cont(surface: &str) -> Self {
        Self::new(surface, true).expect("valid token surface")
    }

    /// Parses a rendered token; a leading `##` followed by at least one
    /// character marks a continuation token.
    pub fn parse(rendered: &str) -> Result<Self> {
        match rendered.strip_prefix(CONTINUATION_MARKER) {
            Some(rest) if !rest.is_empty() => Self::new(rest, true),
            _ => Self::new(rendered, false),
        }
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn is_continuation(&self) -> bool {
        self.continuation
    }

    pub fn char_len(&self) -> usize {
        self.surface.chars().count()
    }

    pub fn rendered(&self) -> String {
        self.to_string()
    }

    pub fn with_continuation(&self, continuation: bool) -> Self {
        Self {
            surface: self.surface.clone(),
            continuation,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.continuation {
            f.write_str(CONTINUATION_MARKER)?;
        }
        f.write_str(&self.surface)
    }
}

/// Ordered token set with frequencies and a dense id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    freqs: Vec<u64>,
    ids: HashMap<Token, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary keeping the given order as the id order.
    pub fn from_ordered(entries: impl IntoIterator<Item = (Token, u64)>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        let mut ids = HashMap::new();
        for (token, freq) in entries {
            if ids.contains_key(&token) {
                return Err(Error::DuplicateToken(token.rendered()));
            }
            ids.insert(token.clone(), tokens.len());
            tokens.push(token);
            freqs.push(freq);
        }
        Ok(Self { tokens, freqs, ids })
    }

    /// Builds a vocabulary sorted by descending frequency, ties broken by
    /// token order.
    pub fn from_counts(counts: impl IntoIterator<Item = (Token, u64)>) -> Result<Self> {
        let mut entries: Vec<(Token, u64)> = counts.into_iter().collect();
        entries.sort_by(|(ta, fa), (tb, fb)| fb.cmp(fa).then_with(|| ta.cmp(tb)));
        Self::from_ordered(entries)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &Token) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Token, u64)> + '_ {
        self.tokens
            .iter()
            .zip(&self.freqs)
            .enumerate()
            .map(|(id, (t, &f))| (id, t, f))
    }

    /// Serialized file contents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (_, token, freq) in self.iter() {
            out.push_str(&format!("{token}\t{freq}\n"));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let (rendered, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, lineno, "expected <token>\\t<frequency>"))?;
            let token = Token::parse(rendered)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            let freq = freq
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::parse(origin, lineno, format!("bad frequency: {e}")))?;
            entries.push((token, freq));
        }
        Self::from_ordered(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Builds the vocabulary of tokens `segmenter` emits on `corpus`, with
/// observed frequencies.
pub fn build_vocabulary(corpus: &Corpus, segmenter: &SegmentationModel) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<Token, u64> = HashMap::new();
    for (word, freq) in corpus.word_counts() {
        for token in segmenter.segment_word(&word) {
            *counts.entry(token).or_default() += freq;
        }
    }
    Vocabulary::from_counts(counts)
}

/// A `V x d` matrix whose rows are aligned to a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: Arc<Vocabulary>,
    rows: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Arc<Vocabulary>, rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                found: rows.nrows(),
            });
        }
        if rows.ncols() == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            let row = pos / rows.ncols();
            return Err(Error::Config(format!(
                "non-finite value in row {row} ({})",
                vocab.token(row)
            )));
        }
        Ok(Self { vocab, rows })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub(crate) fn rows_mut(&mut self) -> &mut Array2<f64> {
        &mut self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.rows.row(id)
    }

    pub fn row_of(&self, token: &Token) -> Option<ArrayView1<'_, f64>> {
        self.vocab.id(token).map(|id| self.rows.row(id))
    }

    /// Reorders rows to follow `vocab`'s id order. Every token of `vocab`
    /// must be present.
    pub fn align_to(&self, vocab: Arc<Vocabulary>) -> Result<Self> {
        let mut rows = Array2::zeros((vocab.len(), self.dim()));
        for (id, token, _) in vocab.iter() {
            let src = self
                .row_of(token)
                .ok_or_else(|| Error::UnknownToken(token.rendered()))?;
            rows.row_mut(id).assign(&src);
        }
        Self::new(vocab, rows)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (id, token, _) in self.vocab.iter() {
            write!(out, "{token}")?;
            for v in self.rows.row(id) {
                write!(out, " {}", format_float(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing <V> <d> header"))?;
        let mut fields = header.split_whitespace();
        let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
            (Some(v), Some(d), None) => {
                let v = v.parse::<usize>();
                let d = d.parse::<usize>();
                match (v, d) {
                    (Ok(v), Ok(d)) if d > 0 => (v, d),
                    _ => return Err(Error::parse(origin, 1, "malformed <V> <d> header")),
                }
            }
            _ => return Err(Error::parse(origin, 1, "malformed <V> <d> header")),
        };

        let mut tokens = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let rendered = fields.next().unwrap_or_default();
            let token =
                Token::parse(rendered).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            let before = values.len();
            for field in fields {
                let v = parse_float(field)
                    .ok_or_else(|| Error::parse(origin, lineno, format!("bad float {field:?}")))?;
                values.push(v);
            }
            let found = values.len() - before;
            if found != dim {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected {dim} values, found {found}"),
                ));
            }
            tokens.push((token, 0));
        }
        if tokens.len() != count {
            return Err(Error::parse(
                origin,
                1,
                format!("header declares {count} rows, found {}", tokens.len()),
            ));
        }
        let vocab = Vocabulary::from_ordered(tokens)?;
        let rows = Array2::from_shape_vec((count, dim), values)
            .expect("row count and dimension checked above");
        Self::new(Arc::new(vocab), rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

/// Nine significant digits, scientific notation.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub(crate) fn parse_float(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Whitespace-tokenized sentences, NFC-normalized on ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<Vec<String>>,
}

impl Corpus {
    /// Blank lines are dropped, so no sentence is empty.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let sentences = lines
            .into_iter()
            .map(|line| {
                line.nfc()
                    .collect::<String>()
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .filter(|words| !words.is_empty())
            .collect();
        Self { sentences }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_lines(text.lines())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_text(&fs::read_to_string(path)?))
    }

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sentence in &self.sentences {
            out.push_str(&sentence.join(" "));
            out.push('\n');
        }
        out
    }

    /// Word frequency table, sorted by word for deterministic iteration.
    pub fn word_counts(&self) -> Vec<(String, u64)> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for word in self.sentences.iter().flatten() {
            *counts.entry(word.as_str()).or_default() += 1;
        }
        let mut counts: Vec<(String, u64)> =
            counts.into_iter().map(|(w, c)| (w.to_owned(), c)).collect();
        counts.sort();
        counts
    }

    pub fn split_at(&self, mid: usize) -> (Corpus, Corpus) {
        let mid = mid.min(self.sentences.len());
        (
            Corpus {
                sentences: self.sentences[..mid].to_vec(),
            },
            Corpus {
                sentences: self.sentences[mid..].to_vec(),
            },
        )
    }
}

impl FromIterator<Vec<String>> for Corpus {
    fn from_iter<I: IntoIterator<Item = Vec<String>>>(iter: I) -> Self {
        Self {
            sentences: iter.into_iter().filter(|s| !s.is_empty()).collect(),
        }
    }
}
