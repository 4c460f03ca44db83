//! Simulated unseen tokens: random merges of consecutive pieces within a word
//! and random splits of single tokens.

use rand::seq::index::sample;
use rand::Rng;

use crate::lexicon::{Token, Vocabulary};
use crate::segmentation::{SegmentationModel, Segmented};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_merge: f64,
    pub p_split: f64,
    pub max_pieces: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_merge: 0.15,
            p_split: 0.15,
            max_pieces: 3,
        }
    }
}

impl AugmentConfig {
    /// No edits at all.
    pub fn disabled() -> Self {
        Self {
            p_merge: 0.0,
            p_split: 0.0,
            ..Self::default()
        }
    }
}

/// A sentence under the vanilla segmentation and after random edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPair {
    pub s_p: Segmented,
    pub s_prime: Segmented,
    /// Sorted positions in `s_prime` whose tokens are not in the vocabulary.
    pub unseen: Vec<usize>,
}

/// Concatenates a run of tokens; the result keeps the first token's flag.
pub fn merge_run(run: &[Token]) -> Token {
    let surface: String = run.iter().map(Token::surface).collect();
    Token::new(surface, run[0].is_continuation()).expect("non-empty run")
}

/// Cuts `token` at the given sorted, distinct, interior character offsets.
pub fn split_token(token: &Token, cuts: &[usize]) -> Vec<Token> {
    let chars: Vec<char> = token.surface().chars().collect();
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(chars.len());
    bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let surface: String = chars[w[0]..w[1]].iter().collect();
            let cont = i > 0 || token.is_continuation();
            Token::new(surface, cont).expect("non-empty piece")
        })
        .collect()
}

/// With probability `p_merge` per word of at least two pieces, joins a
/// uniformly chosen run of 2 or more consecutive pieces of that word.
pub fn random_merge(input: &Segmented, rng: &mut impl Rng, p_merge: f64) -> Segmented {
    let mut out = Segmented::default();
    for span in &input.spans {
        let pieces = &input.tokens[span.clone()];
        let start = out.tokens.len();
        let n = pieces.len();
        if n >= 2 && rng.random::<f64>() < p_merge {
            let len = rng.random_range(2..=n);
            let at = rng.random_range(0..=n - len);
            out.tokens.extend_from_slice(&pieces[..at]);
            out.tokens.push(merge_run(&pieces[at..at + len]));
            out.tokens.extend_from_slice(&pieces[at + len..]);
        } else {
            out.tokens.extend_from_slice(pieces);
        }
        out.spans.push(start..out.tokens.len());
    }
    out
}

/// With probability `p_split` per token of two or more characters, cuts it
/// into between 2 and `max_pieces` pieces at distinct uniform positions.
pub fn random_split(input: &Segmented, rng: &mut impl Rng, p_split: f64, max_pieces: usize) -> Segmented {
    assert!(max_pieces >= 2, "max_pieces must be at least 2");
    let mut out = Segmented::default();
    for span in &input.spans {
        let start = out.tokens.len();
        for token in &input.tokens[span.clone()] {
            let len = token.char_len();
            if len >= 2 && rng.random::<f64>() < p_split {
                let pieces = rng.random_range(2..=max_pieces.min(len));
                let mut cuts: Vec<usize> = sample(rng, len - 1, pieces - 1)
                    .into_iter()
                    .map(|c| c + 1)
                    .collect();
                cuts.sort_unstable();
                out.tokens.extend(split_token(token, &cuts));
            } else {
                out.tokens.push(token.clone());
            }
        }
        out.spans.push(start..out.tokens.len());
    }
    out
}

/// Positions of `tokens` not present in `vocab`.
pub fn unseen_positions(tokens: &[Token], vocab: &Vocabulary) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !vocab.contains(t))
        .map(|(i, _)| i)
        .collect()
}

/// Edits an already segmented sentence: merges first, then splits.
pub fn augment(s_p: &Segmented, vocab: &Vocabulary, rng: &mut impl Rng, config: &AugmentConfig) -> AugmentedPair {
    let merged = random_merge(s_p, rng, config.p_merge);
    let s_prime = random_split(&merged, rng, config.p_split, config.max_pieces);
    let unseen = unseen_positions(&s_prime.tokens, vocab);
    AugmentedPair {
        s_p: s_p.clone(),
        s_prime,
        unseen,
    }
}

pub fn make_pair<S: AsRef<str>>(
    sentence: &[S],
    segmenter: &SegmentationModel,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
    config: &AugmentConfig,
) -> AugmentedPair {
    augment(&segmenter.segment_words(sentence), vocab, rng, config)
}

/// Two lines per pair: rendered `s_p`, then rendered `s_prime`.
pub fn pair_dump<'a>(pairs: impl IntoIterator<Item = &'a AugmentedPair>) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&pair.s_p.rendered());
        out.push('\n');
        out.push_str(&pair.s_prime.rendered());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn seg(tokens: &[&str], spans: &[std::ops::Range<usize>]) -> Segmented {
        Segmented {
            tokens: tokens.iter().map(|t| Token::parse(t).unwrap()).collect(),
            spans: spans.to_vec(),
        }
    }

    #[test]
    fn merging_a_whole_word() {
        let s = seg(&["ima", "##gine"], &[0..2]);
        let out = random_merge(&s, &mut rng::seeded(0), 1.0);
        assert_eq!(out.rendered(), "imagine");
        assert_eq!(out.spans, vec![0..1]);
        assert_eq!(merge_run(&s.tokens), Token::word("imagine"));
        assert_eq!(merge_run(&s.tokens[1..]), Token::cont("gine"));
    }

    #[test]
    fn splitting_into_two() {
        let pieces = split_token(&Token::word("nothing"), &[4]);
        assert_eq!(pieces, vec![Token::word("noth"), Token::cont("ing")]);
        let pieces = split_token(&Token::cont("cycle"), &[1, 3]);
        assert_eq!(pieces, vec![Token::cont("c"), Token::cont("yc"), Token::cont("le")]);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = seg(&["ima", "##gine", "nothing", "a"], &[0..2, 2..3, 3..4]);
        let mut r = rng::seeded(1);
        assert_eq!(random_merge(&s, &mut r, 0.0), s);
        assert_eq!(random_split(&s, &mut r, 0.0, 3), s);
    }

    #[test]
    fn single_characters_never_split() {
        let s = seg(&["a", "##b", "c"], &[0..2, 2..3]);
        let mut r = rng::seeded(2);
        for _ in 0..100 {
            assert_eq!(random_split(&s, &mut r, 1.0, 5), s);
        }
    }

    #[test]
    fn split_piece_counts_stay_in_range() {
        let s = seg(&["abcdefgh"], &[0..1]);
        let mut r = rng::seeded(3);
        let mut seen = [false; 4];
        for _ in 0..500 {
            let out = random_split(&s, &mut r, 1.0, 3);
            assert!((2..=3).contains(&out.tokens.len()));
            seen[out.tokens.len()] = true;
            assert_eq!(out.words(), vec!["abcdefgh".to_string()]);
        }
        assert!(seen[2] && seen[3]);
    }

    #[test]
    fn merge_and_split_in_one_sentence() {
        let vocab = Vocabulary::from_ordered(
            ["ima", "##gine", "nothing", "i", "can"]
                .iter()
                .map(|t| (Token::parse(t).unwrap(), 1)),
        )
        .unwrap();
        let s_p = seg(&["i", "can", "ima", "##gine", "nothing"], &[0..1, 1..2, 2..4, 4..5]);
        let config = AugmentConfig {
            p_merge: 1.0,
            p_split: 0.0,
            max_pieces: 2,
        };
        let merged = augment(&s_p, &vocab, &mut rng::seeded(0), &config);
        assert_eq!(merged.s_prime.rendered(), "i can imagine nothing");
        let mut tokens = merged.s_prime.tokens[..3].to_vec();
        tokens.extend(split_token(&Token::word("nothing"), &[4]));
        assert_eq!(
            unseen_positions(&tokens, &vocab),
            vec![2, 3, 4],
            "imagine, noth, ##ing are all outside the vocabulary"
        );
    }

    #[test]
    fn disabled_config_leaves_pair_equal() {
        let vocab = Vocabulary::from_ordered([(Token::word("ab"), 1)]).unwrap();
        let seg_model = SegmentationModel::from_merges([(Token::word("a"), Token::cont("b"))]).unwrap();
        let pair = make_pair(
            &["ab", "ab"],
            &seg_model,
            &vocab,
            &mut rng::seeded(0),
            &AugmentConfig::disabled(),
        );
        assert_eq!(pair.s_p, pair.s_prime);
        assert!(pair.unseen.is_empty());
        assert_eq!(pair_dump([&pair]), "ab ab\nab ab\n");
    }
}
