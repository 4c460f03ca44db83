//! Morphologically similar token sets.
//!
//! For a query token `w`, the similar set holds its subwords (the pieces the
//! source segmenter cuts it into) and its hyperwords (source tokens whose
//! surface strictly contains `w`'s surface), each tagged with one of six
//! positional relations.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::lexicon::{Token, Vocabulary};
use crate::segmentation::{char_tokens, SegmentationModel};

pub const DEFAULT_MAX_HYPERWORDS: usize = 64;
pub const DEFAULT_INDEX_MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    SubwordPrefix,
    SubwordInfix,
    SubwordSuffix,
    HyperPrefix,
    HyperInfix,
    HyperSuffix,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::SubwordPrefix,
        Relation::SubwordInfix,
        Relation::SubwordSuffix,
        Relation::HyperPrefix,
        Relation::HyperInfix,
        Relation::HyperSuffix,
    ];

    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::SubwordPrefix => "SubwordPrefix",
            Relation::SubwordInfix => "SubwordInfix",
            Relation::SubwordSuffix => "SubwordSuffix",
            Relation::HyperPrefix => "HyperPrefix",
            Relation::HyperInfix => "HyperInfix",
            Relation::HyperSuffix => "HyperSuffix",
        }
    }

    fn subword_at(position: usize, count: usize) -> Self {
        if position == 0 {
            Relation::SubwordPrefix
        } else if position + 1 == count {
            Relation::SubwordSuffix
        } else {
            Relation::SubwordInfix
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarEntry {
    pub token: Token,
    /// Id of `token` in the source vocabulary.
    pub id: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarSet {
    pub query: Token,
    pub entries: Vec<SimilarEntry>,
}

impl SimilarSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Debug dump, one `<query>\t<entry>\t<relation>` line per entry.
    pub fn dump(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", self.query, e.token, e.relation))
            .collect()
    }
}

/// Maps every surface substring of up to `max_len` characters to the ids of
/// the vocabulary tokens containing it.
#[derive(Debug, Clone)]
pub struct SubstringIndex {
    max_len: usize,
    surfaces: Vec<String>,
    postings: HashMap<String, Vec<u32>>,
}

impl SubstringIndex {
    pub fn build(vocab: &Vocabulary, max_len: usize) -> Self {
        let mut postings: HashMap<String, Vec<u32>> = HashMap::new();
        let mut seen = HashSet::new();
        for (id, token, _) in vocab.iter() {
            let surface = token.surface();
            let bounds: Vec<usize> = surface
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(surface.len()))
                .collect();
            seen.clear();
            for start in 0..bounds.len() - 1 {
                let end_max = (start + max_len).min(bounds.len() - 1);
                for end in start + 1..=end_max {
                    let sub = &surface[bounds[start]..bounds[end]];
                    if seen.insert(sub) {
                        postings.entry(sub.to_owned()).or_default().push(id as u32);
                    }
                }
            }
        }
        Self {
            max_len,
            surfaces: vocab.tokens().iter().map(|t| t.surface().to_owned()).collect(),
            postings,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Ids (ascending) of tokens whose surface contains `needle`. Needles
    /// longer than `max_len` characters fall back to a linear scan.
    pub fn lookup(&self, needle: &str) -> Vec<usize> {
        if needle.chars().count() <= self.max_len {
            self.postings
                .get(needle)
                .map(|ids| ids.iter().map(|&id| id as usize).collect())
                .unwrap_or_default()
        } else {
            self.surfaces
                .iter()
                .enumerate()
                .filter(|(_, s)| s.contains(needle))
                .map(|(id, _)| id)
                .collect()
        }
    }
}

/// Position of `query` inside `host`, or `None` when the pair is
/// incompatible under the continuation rules.
///
/// A word-initial query only matches at the start of a word-initial host. A
/// continuation query never matches at position 0 of a word-initial host.
/// The first admissible occurrence decides the relation.
pub fn hyper_relation(query: &Token, host: &Token) -> Option<Relation> {
    let needle = query.surface();
    let hay = host.surface();
    if hay.len() <= needle.len() {
        return None;
    }
    let pos = if query.is_continuation() {
        hay.char_indices()
            .map(|(i, _)| i)
            .filter(|&i| i > 0 || host.is_continuation())
            .find(|&i| hay[i..].starts_with(needle))?
    } else {
        if host.is_continuation() || !hay.starts_with(needle) {
            return None;
        }
        0
    };
    Some(if pos == 0 {
        Relation::HyperPrefix
    } else if pos + needle.len() == hay.len() {
        Relation::HyperSuffix
    } else {
        Relation::HyperInfix
    })
}

/// Builds similar sets against one source vocabulary and segmenter.
pub struct SimilarSetBuilder<'a> {
    segmenter: &'a SegmentationModel,
    vocab: &'a Vocabulary,
    index: SubstringIndex,
    max_hyperwords: usize,
}

impl<'a> SimilarSetBuilder<'a> {
    pub fn new(segmenter: &'a SegmentationModel, vocab: &'a Vocabulary) -> Self {
        Self::with_limits(segmenter, vocab, DEFAULT_MAX_HYPERWORDS, DEFAULT_INDEX_MAX_LEN)
    }

    pub fn with_limits(
        segmenter: &'a SegmentationModel,
        vocab: &'a Vocabulary,
        max_hyperwords: usize,
        index_max_len: usize,
    ) -> Self {
        Self {
            segmenter,
            vocab,
            index: SubstringIndex::build(vocab, index_max_len),
            max_hyperwords,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn index(&self) -> &SubstringIndex {
        &self.index
    }

    /// Pieces of `w` under the source segmenter, positions tagged; pieces
    /// missing from the source vocabulary are dropped.
    pub fn subwords_of(&self, w: &Token) -> Vec<SimilarEntry> {
        let pieces = self.segmenter.segment_piece(w.surface(), w.is_continuation());
        if pieces.len() < 2 {
            return Vec::new();
        }
        let count = pieces.len();
        let entries = pieces.into_iter().enumerate().filter_map(|(pos, token)| {
            let id = self.vocab.id(&token)?;
            Some(SimilarEntry {
                token,
                id,
                relation: Relation::subword_at(pos, count),
            })
        });
        dedup(entries)
    }

    /// Source tokens strictly containing `w`, capped at the most frequent
    /// `max_hyperwords`.
    pub fn hyperwords_of(&self, w: &Token) -> Vec<SimilarEntry> {
        let mut found: Vec<SimilarEntry> = self
            .index
            .lookup(w.surface())
            .into_iter()
            .filter_map(|id| {
                let host = self.vocab.token(id);
                hyper_relation(w, host).map(|relation| SimilarEntry {
                    token: host.clone(),
                    id,
                    relation,
                })
            })
            .collect();
        found.sort_by(|a, b| {
            self.vocab
                .freq(b.id)
                .cmp(&self.vocab.freq(a.id))
                .then(a.id.cmp(&b.id))
        });
        found.truncate(self.max_hyperwords);
        found
    }

    /// Subwords plus hyperwords; if both are empty, the characters of `w`
    /// that exist in the source vocabulary. May still be empty.
    pub fn similar_set(&self, w: &Token) -> SimilarSet {
        let mut entries = dedup(
            self.subwords_of(w)
                .into_iter()
                .chain(self.hyperwords_of(w))
                .filter(|e| &e.token != w),
        );
        if entries.is_empty() {
            let chars = char_tokens(w.surface(), w.is_continuation());
            let count = chars.len();
            entries = dedup(
                chars
                    .into_iter()
                    .enumerate()
                    .filter(|(_, t)| t != w)
                    .filter_map(|(pos, token)| {
                        let id = self.vocab.id(&token)?;
                        Some(SimilarEntry {
                            token,
                            id,
                            relation: Relation::subword_at(pos, count),
                        })
                    }),
            );
        }
        SimilarSet {
            query: w.clone(),
            entries,
        }
    }
}

fn dedup(entries: impl IntoIterator<Item = SimilarEntry>) -> Vec<SimilarEntry> {
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .filter(|e| seen.insert((e.id, e.relation)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_ordered(
            tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (Token::parse(t).unwrap(), (tokens.len() - i) as u64)),
        )
        .unwrap()
    }

    fn motor_model() -> SegmentationModel {
        let pairs = [
            ("m", "##o"),
            ("mo", "##t"),
            ("mot", "##o"),
            ("moto", "##r"),
            ("##c", "##y"),
            ("##cy", "##c"),
            ("##cyc", "##l"),
            ("##cycl", "##e"),
        ];
        SegmentationModel::from_merges(
            pairs
                .iter()
                .map(|(l, r)| (Token::parse(l).unwrap(), Token::parse(r).unwrap())),
        )
        .unwrap()
    }

    fn pairs(entries: &[SimilarEntry]) -> Vec<(String, Relation)> {
        entries
            .iter()
            .map(|e| (e.token.rendered(), e.relation))
            .collect()
    }

    #[test]
    fn motorcycle_subwords() {
        let seg = motor_model();
        let v = vocab(&["motor", "##cycle", "bike"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let subs = b.subwords_of(&Token::word("motorcycle"));
        assert_eq!(
            pairs(&subs),
            [
                ("motor".into(), Relation::SubwordPrefix),
                ("##cycle".into(), Relation::SubwordSuffix)
            ]
        );
    }

    #[test]
    fn three_pieces_have_one_infix() {
        let seg = SegmentationModel::character_level();
        let v = vocab(&["a", "##b", "##c"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let subs = b.subwords_of(&Token::word("abc"));
        let infix = subs.iter().filter(|e| e.relation == Relation::SubwordInfix).count();
        assert_eq!(infix, 1);
        let two = b.subwords_of(&Token::word("ab"));
        assert!(two.iter().all(|e| e.relation != Relation::SubwordInfix));
    }

    #[test]
    fn single_piece_has_no_subwords() {
        let seg = motor_model();
        let v = vocab(&["motor"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        assert!(b.subwords_of(&Token::word("motor")).is_empty());
    }

    #[test]
    fn er_hyperwords() {
        let seg = SegmentationModel::character_level();
        let v = vocab(&["worker", "writer", "singer", "er", "erase", "##ers", "sing"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let hypers = b.hyperwords_of(&Token::cont("er"));
        assert_eq!(
            pairs(&hypers),
            [
                ("worker".into(), Relation::HyperSuffix),
                ("writer".into(), Relation::HyperSuffix),
                ("singer".into(), Relation::HyperSuffix),
                ("##ers".into(), Relation::HyperPrefix),
            ]
        );
        // word-initial "er" only matches word-initial hosts at their start
        let hypers = b.hyperwords_of(&Token::word("er"));
        assert_eq!(pairs(&hypers), [("erase".into(), Relation::HyperPrefix)]);
    }

    #[test]
    fn first_admissible_occurrence_decides() {
        // "##ab" inside "abxab": position 0 is inadmissible for a word-initial host
        assert_eq!(
            hyper_relation(&Token::cont("ab"), &Token::word("abxab")),
            Some(Relation::HyperSuffix)
        );
        assert_eq!(
            hyper_relation(&Token::cont("ab"), &Token::cont("abxab")),
            Some(Relation::HyperPrefix)
        );
        assert_eq!(
            hyper_relation(&Token::cont("a"), &Token::word("bac")),
            Some(Relation::HyperInfix)
        );
        assert_eq!(hyper_relation(&Token::cont("ab"), &Token::word("abc")), None);
        assert_eq!(hyper_relation(&Token::word("ab"), &Token::cont("abc")), None);
        assert_eq!(hyper_relation(&Token::word("ab"), &Token::word("ab")), None);
    }

    #[test]
    fn overlong_query_has_no_hyperwords() {
        let seg = SegmentationModel::character_level();
        let v = vocab(&["ab", "abc"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        assert!(b.hyperwords_of(&Token::word("abcdefgh")).is_empty());
    }

    #[test]
    fn hyperword_cap_prefers_frequent_tokens() {
        let seg = SegmentationModel::character_level();
        let v = Vocabulary::from_ordered([
            (Token::word("xa"), 1),
            (Token::word("xb"), 5),
            (Token::word("xc"), 3),
        ])
        .unwrap();
        let b = SimilarSetBuilder::with_limits(&seg, &v, 2, 12);
        let hypers = b.hyperwords_of(&Token::word("x"));
        assert_eq!(
            pairs(&hypers),
            [
                ("xb".into(), Relation::HyperPrefix),
                ("xc".into(), Relation::HyperPrefix)
            ]
        );
    }

    #[test]
    fn long_needles_use_linear_scan() {
        let v = vocab(&["abcdef", "xabcdefx", "abc"]);
        let index = SubstringIndex::build(&v, 3);
        assert_eq!(index.lookup("abcdef"), vec![0, 1]);
        assert_eq!(index.lookup("abc"), vec![0, 1, 2]);
        assert!(index.lookup("zz").is_empty());
    }

    #[test]
    fn similar_set_combines_both_sources() {
        let seg = motor_model();
        let v = vocab(&["motor", "##cycle", "motorcycles", "##cycles"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let set = b.similar_set(&Token::word("motorcycle"));
        assert_eq!(
            pairs(&set.entries),
            [
                ("motor".into(), Relation::SubwordPrefix),
                ("##cycle".into(), Relation::SubwordSuffix),
                ("motorcycles".into(), Relation::HyperPrefix),
            ]
        );
        assert!(set.entries.iter().all(|e| v.contains(&e.token)));
        assert_eq!(set.dump().lines().next(), Some("motorcycle\tmotor\tSubwordPrefix"));
    }

    #[test]
    fn character_fallback_and_empty_set() {
        let seg = SegmentationModel::character_level();
        let v = vocab(&["q", "##u"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        // pieces are single characters; segmentation already finds them
        let set = b.similar_set(&Token::word("qu"));
        assert_eq!(set.len(), 2);

        let letters: Vec<String> = ('a'..='y')
            .flat_map(|c| [c.to_string(), format!("##{c}")])
            .collect();
        let refs: Vec<&str> = letters.iter().map(String::as_str).collect();
        let v = vocab(&refs);
        let b = SimilarSetBuilder::new(&seg, &v);
        assert!(b.similar_set(&Token::word("zzzz")).is_empty());
    }

    #[test]
    fn fallback_uses_characters_when_segmenter_merges_them_away() {
        // segmenter merges "ab" but the source vocabulary only holds characters
        let seg =
            SegmentationModel::from_merges([(Token::word("a"), Token::cont("b"))]).unwrap();
        let v = vocab(&["a", "##b"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let set = b.similar_set(&Token::word("ab"));
        assert_eq!(
            pairs(&set.entries),
            [
                ("a".into(), Relation::SubwordPrefix),
                ("##b".into(), Relation::SubwordSuffix)
            ]
        );
    }

    #[test]
    fn query_never_in_its_own_set() {
        let seg = SegmentationModel::character_level();
        let v = vocab(&["ab", "a", "##b", "abab"]);
        let b = SimilarSetBuilder::new(&seg, &v);
        let q = Token::word("ab");
        let set = b.similar_set(&q);
        assert!(set.entries.iter().all(|e| e.token != q));
        assert!(!set.is_empty());
    }
}
