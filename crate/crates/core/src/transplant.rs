//! Building a target-vocabulary embedding matrix from a source matrix: shared
//! tokens are copied, unseen tokens are generated from their similar sets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::generators::{fallback_row, generate, GeneratorParams};
use crate::lexicon::{EmbeddingMatrix, Token, Vocabulary};
use crate::morphset::SimilarSetBuilder;
use crate::rng;
use crate::segmentation::SegmentationModel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MismatchReport {
    pub shared: usize,
    pub unseen: usize,
    /// Unseen target tokens in target id order.
    pub unseen_tokens: Vec<Token>,
}

impl fmt::Display for MismatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shared: {}", self.shared)?;
        writeln!(f, "unseen: {}", self.unseen)
    }
}

/// Splits target tokens into those present in the source vocabulary and
/// those absent from it.
pub fn mismatch_report(source: &Vocabulary, target: &Vocabulary) -> MismatchReport {
    let unseen_tokens: Vec<Token> = target
        .tokens()
        .iter()
        .filter(|t| !source.contains(t))
        .cloned()
        .collect();
    MismatchReport {
        shared: target.len() - unseen_tokens.len(),
        unseen: unseen_tokens.len(),
        unseen_tokens,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Copied,
    Generated,
    Fallback,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Copied => "copied",
            Provenance::Generated => "generated",
            Provenance::Fallback => "fallback",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copied" => Ok(Provenance::Copied),
            "generated" => Ok(Provenance::Generated),
            "fallback" => Ok(Provenance::Fallback),
            other => Err(Error::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Deterministic per-token row for tokens whose similar set is empty.
pub fn fallback_embedding(token: &Token, dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = rng::derived(seed, 0xFA11, rng::key_of(&token.rendered()));
    fallback_row(dim, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transplanted {
    pub embedding: EmbeddingMatrix,
    /// One entry per target id.
    pub provenance: Vec<Provenance>,
}

impl Transplanted {
    pub fn count(&self, kind: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == kind).count()
    }

    /// `<token>\t<copied|generated|fallback>` per target token.
    pub fn provenance_text(&self) -> String {
        let vocab = self.embedding.vocab();
        let mut out = String::new();
        for (id, p) in self.provenance.iter().enumerate() {
            out.push_str(&format!("{}\t{p}\n", vocab.token(id)));
        }
        out
    }

    pub fn save_provenance(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.provenance_text())?;
        Ok(())
    }
}

/// Parses a provenance file into `(token, provenance)` pairs.
pub fn parse_provenance(text: &str, origin: &Path) -> Result<Vec<(Token, Provenance)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |m: String| Error::parse(origin, i + 1, m);
            let (tok, kind) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected <token>\\t<provenance>".into()))?;
            Ok((
                Token::parse(tok).map_err(|e| bad(e.to_string()))?,
                kind.parse().map_err(|e: Error| bad(e.to_string()))?,
            ))
        })
        .collect()
}

/// Target embedding matrix over `target`. `source` must be aligned to the
/// vocabulary `segmenter` was used with.
pub fn transplant(
    source: &EmbeddingMatrix,
    segmenter: &SegmentationModel,
    target: Arc<Vocabulary>,
    generator: &GeneratorParams,
    fallback_seed: u64,
) -> Result<Transplanted> {
    if generator.dim() != source.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            found: generator.dim(),
        });
    }
    let source_vocab = source.vocab();
    let builder = SimilarSetBuilder::new(segmenter, source_vocab);
    let mut rows = Array2::zeros((target.len(), source.dim()));
    let mut provenance = Vec::with_capacity(target.len());
    for (id, token, _) in target.iter() {
        let mut row = rows.row_mut(id);
        if let Some(src) = source.row_of(token) {
            row.assign(&src);
            provenance.push(Provenance::Copied);
            continue;
        }
        let set = builder.similar_set(token);
        if set.is_empty() {
            row.assign(&fallback_embedding(token, source.dim(), fallback_seed));
            provenance.push(Provenance::Fallback);
        } else {
            row.assign(&generate(&set, source, generator)?);
            provenance.push(Provenance::Generated);
        }
    }
    Ok(Transplanted {
        embedding: EmbeddingMatrix::new(target, rows)?,
        provenance,
    })
}
