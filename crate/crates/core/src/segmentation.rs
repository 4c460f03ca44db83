//! Byte-pair-encoding style subword segmentation over characters.
//!
//! Word-internal pieces carry the continuation flag instead of an end-of-word
//! symbol. Merges are applied greedily: the adjacent pair with the lowest
//! rank is merged at its leftmost occurrence until no ranked pair remains.
//! Learning maintains every word type in exactly that fixpoint state, so a
//! learned model reproduces the training-time segmentation of its training
//! words.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexicon::{Corpus, Token};

/// First line of a merges file.
pub const MERGES_HEADER: &str = "#version vocab-bridge-bpe-1";

type SymbolId = u32;

#[derive(Debug, Clone, Default)]
pub struct SegmentationModel {
    merges: Vec<(Token, Token)>,
    symbols: Vec<Token>,
    symbol_ids: HashMap<Token, SymbolId>,
    /// (left, right) -> (rank, merged symbol)
    ranks: HashMap<(SymbolId, SymbolId), (usize, SymbolId)>,
}

impl PartialEq for SegmentationModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl Eq for SegmentationModel {}

/// Tokens of a sentence plus, for every source word, its token index range.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segmented {
    pub tokens: Vec<Token>,
    pub spans: Vec<Range<usize>>,
}

impl Segmented {
    pub fn word_count(&self) -> usize {
        self.spans.len()
    }

    /// Marker-stripped surface of every word.
    pub fn words(&self) -> Vec<String> {
        self.spans
            .iter()
            .map(|span| {
                self.tokens[span.clone()]
                    .iter()
                    .map(Token::surface)
                    .collect::<String>()
            })
            .collect()
    }

    pub fn rendered(&self) -> String {
        self.tokens
            .iter()
            .map(Token::rendered)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Splits a surface into character tokens, the first one carrying
/// `continuation`.
pub fn char_tokens(surface: &str, continuation: bool) -> Vec<Token> {
    surface
        .chars()
        .enumerate()
        .map(|(i, c)| {
            Token::new(c.to_string(), continuation || i > 0).expect("single non-space char")
        })
        .collect()
}

impl SegmentationModel {
    /// A model without merges: character-level segmentation.
    pub fn character_level() -> Self {
        Self::default()
    }

    pub fn from_merges(merges: impl IntoIterator<Item = (Token, Token)>) -> Result<Self> {
        let mut model = Self::default();
        for (left, right) in merges {
            model.push_merge(left, right)?;
        }
        Ok(model)
    }

    pub fn merges(&self) -> &[(Token, Token)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merge_rank(&self, left: &Token, right: &Token) -> Option<usize> {
        let l = *self.symbol_ids.get(left)?;
        let r = *self.symbol_ids.get(right)?;
        self.ranks.get(&(l, r)).map(|&(rank, _)| rank)
    }

    /// The model made of the first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_merges(self.merges.iter().take(n).cloned())
            .expect("prefix of a valid merge list is valid")
    }

    fn intern(&mut self, token: Token) -> SymbolId {
        if let Some(&id) = self.symbol_ids.get(&token) {
            return id;
        }
        let id = self.symbols.len() as SymbolId;
        self.symbols.push(token.clone());
        self.symbol_ids.insert(token, id);
        id
    }

    fn push_merge(&mut self, left: Token, right: Token) -> Result<SymbolId> {
        if !right.is_continuation() {
            return Err(Error::Config(format!(
                "merge ({left}, {right}): right side must be a continuation token"
            )));
        }
        let merged = Token::new(
            format!("{}{}", left.surface(), right.surface()),
            left.is_continuation(),
        )?;
        let l = self.intern(left.clone());
        let r = self.intern(right.clone());
        let m = self.intern(merged);
        if self.ranks.contains_key(&(l, r)) {
            return Err(Error::Config(format!("duplicate merge ({left}, {right})")));
        }
        self.ranks.insert((l, r), (self.merges.len(), m));
        self.merges.push((left, right));
        Ok(m)
    }

    /// Maps characters to symbol ids; characters outside the symbol table get
    /// ids past its end and take part in no merge.
    fn symbolize(&self, surface: &str, continuation: bool, extra: &mut Vec<Token>) -> Vec<SymbolId> {
        char_tokens(surface, continuation)
            .into_iter()
            .map(|t| match self.symbol_ids.get(&t) {
                Some(&id) => id,
                None => {
                    extra.push(t);
                    (self.symbols.len() + extra.len() - 1) as SymbolId
                }
            })
            .collect()
    }

    fn apply(&self, symbols: &mut Vec<SymbolId>) {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(rank, m)| (rank, i, m)))
                .min();
            let Some((_, pos, merged)) = best else {
                break;
            };
            symbols[pos] = merged;
            symbols.remove(pos + 1);
        }
    }

    fn resolve(&self, ids: &[SymbolId], extra: &[Token]) -> Vec<Token> {
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id < self.symbols.len() {
                    self.symbols[id].clone()
                } else {
                    extra[id - self.symbols.len()].clone()
                }
            })
            .collect()
    }

    /// Segments a surface whose first piece carries `continuation`.
    pub fn segment_piece(&self, surface: &str, continuation: bool) -> Vec<Token> {
        let mut extra = Vec::new();
        let mut ids = self.symbolize(surface, continuation, &mut extra);
        self.apply(&mut ids);
        self.resolve(&ids, &extra)
    }

    /// Segments a whole word: the first piece is word-initial, all others are
    /// continuation pieces.
    pub fn segment_word(&self, word: &str) -> Vec<Token> {
        self.segment_piece(word, false)
    }

    pub fn segment_words<S: AsRef<str>>(&self, words: &[S]) -> Segmented {
        let mut out = Segmented::default();
        for word in words {
            let start = out.tokens.len();
            out.tokens.extend(self.segment_word(word.as_ref()));
            out.spans.push(start..out.tokens.len());
        }
        out
    }

    pub fn segment_sentence(&self, sentence: &str) -> Segmented {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        self.segment_words(&words)
    }

    /// Segments every sentence, memoizing per word type.
    pub fn segment_corpus(&self, corpus: &Corpus) -> Vec<Segmented> {
        let mut cache: HashMap<&str, Vec<Token>> = HashMap::new();
        corpus
            .sentences()
            .iter()
            .map(|sentence| {
                let mut out = Segmented::default();
                for word in sentence {
                    let pieces = cache
                        .entry(word.as_str())
                        .or_insert_with(|| self.segment_word(word));
                    let start = out.tokens.len();
                    out.tokens.extend(pieces.iter().cloned());
                    out.spans.push(start..out.tokens.len());
                }
                out
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MERGES_HEADER);
        out.push('\n');
        for (left, right) in &self.merges {
            out.push_str(&format!("{left} {right}\n"));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim_end() == MERGES_HEADER => {}
            _ => return Err(Error::parse(origin, 1, format!("expected {MERGES_HEADER:?}"))),
        }
        let mut model = Self::default();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let (left, right) = match (fields.next(), fields.next(), fields.next()) {
                (Some(l), Some(r), None) => (l, r),
                _ => return Err(Error::parse(origin, lineno, "expected <left> <right>")),
            };
            let left = Token::parse(left).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            let right =
                Token::parse(right).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            model
                .push_merge(left, right)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        }
        Ok(model)
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

/// Learns up to `num_merges` merges from the word-frequency table of `corpus`.
///
/// Each step merges the most frequent adjacent pair; ties go to the smallest
/// `(left, right)` under token order. Learning stops early once no pair
/// occurs at least twice.
pub fn learn_bpe(corpus: &Corpus, num_merges: usize) -> Result<SegmentationModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = SegmentationModel::default();
    let mut words: Vec<(Vec<SymbolId>, u64)> = corpus
        .word_counts()
        .into_iter()
        .map(|(word, freq)| {
            let ids = char_tokens(&word, false)
                .into_iter()
                .map(|t| model.intern(t))
                .collect();
            (ids, freq)
        })
        .collect();

    let mut counts: HashMap<(SymbolId, SymbolId), u64> = HashMap::new();
    for (ids, freq) in &words {
        for w in ids.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += freq;
        }
    }

    for _ in 0..num_merges {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&model.symbols[pa.0 as usize], &model.symbols[pa.1 as usize]);
                    let kb = (&model.symbols[pb.0 as usize], &model.symbols[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&pair, _)| pair);
        let Some((l, r)) = best else {
            break;
        };
        let left = model.symbols[l as usize].clone();
        let right = model.symbols[r as usize].clone();
        model.push_merge(left, right)?;

        for (ids, freq) in words.iter_mut() {
            if !ids.windows(2).any(|w| w[0] == l && w[1] == r) {
                continue;
            }
            for w in ids.windows(2) {
                let c = counts.get_mut(&(w[0], w[1])).expect("pair counted");
                *c -= *freq;
                if *c == 0 {
                    counts.remove(&(w[0], w[1]));
                }
            }
            model.apply(ids);
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += *freq;
            }
        }
    }
    Ok(model)
}
