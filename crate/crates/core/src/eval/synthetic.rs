//! A synthetic upstream/downstream corpus pair with a vocabulary shift.
//!
//! Content words are topic stems, optionally compounded with a second stem of
//! the same topic, optionally followed by a role suffix. Both domains draw
//! compounds from a Zipf law, but with reversed rank orders, so compounds
//! that are frequent downstream (and become single tokens under a downstream
//! segmenter) are rare upstream and get split there.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lexicon::Corpus;
use crate::rng;

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const SUFFIXES: &[&str] = &["an", "et", "ir", "os", "ul", "em"];
const FUNCTION_WORDS: &[&str] = &["ta", "le", "po", "mi", "ru", "ne", "so", "ka"];

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftConfig {
    pub topics: usize,
    pub stems_per_topic: usize,
    pub upstream_sentences: usize,
    pub downstream_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    /// Probability that a content word is a compound, per domain.
    pub upstream_compound_rate: f64,
    pub downstream_compound_rate: f64,
    /// Probability that a content word carries its role suffix.
    pub suffix_rate: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            stems_per_topic: 6,
            upstream_sentences: 20_000,
            downstream_sentences: 5_000,
            min_words: 6,
            max_words: 14,
            zipf_exponent: 1.1,
            upstream_compound_rate: 0.3,
            downstream_compound_rate: 0.6,
            suffix_rate: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftBenchmark {
    pub upstream: Corpus,
    pub downstream: Corpus,
    /// `stems[topic]` lists that topic's stems.
    pub stems: Vec<Vec<String>>,
}

fn make_stems(count: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = String::new();
        for _ in 0..2 {
            s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
            s.push(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if !FUNCTION_WORDS.contains(&s.as_str()) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

struct Domain {
    compound_rate: f64,
    /// Per topic: compound roots in this domain's rank order.
    ranked: Vec<Vec<String>>,
    zipf: WeightedIndex<f64>,
}

impl Domain {
    fn sentence(&self, stems: &[Vec<String>], config: &ShiftConfig, rng: &mut impl Rng) -> String {
        let topic = rng.random_range(0..stems.len());
        let words = rng.random_range(config.min_words..=config.max_words);
        let mut out = Vec::with_capacity(words);
        for i in 0..words {
            if i % 2 == 0 {
                out.push(FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())].to_string());
                continue;
            }
            let mut word = if rng.random::<f64>() < self.compound_rate {
                self.ranked[topic][self.zipf.sample(rng)].clone()
            } else {
                stems[topic][rng.random_range(0..stems[topic].len())].clone()
            };
            if rng.random::<f64>() < config.suffix_rate {
                word.push_str(SUFFIXES[(i / 2) % SUFFIXES.len()]);
            }
            out.push(word);
        }
        out.join(" ")
    }
}

pub fn synthetic_shift(config: &ShiftConfig) -> Result<ShiftBenchmark> {
    if config.topics == 0 || config.stems_per_topic < 2 {
        return Err(Error::Config("need at least one topic and two stems per topic".into()));
    }
    if config.min_words == 0 || config.min_words > config.max_words {
        return Err(Error::Config("invalid sentence length range".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let all = make_stems(config.topics * config.stems_per_topic, &mut rng);
    let stems: Vec<Vec<String>> = all
        .chunks(config.stems_per_topic)
        .map(|c| c.to_vec())
        .collect();
    let compounds: Vec<Vec<String>> = stems
        .iter()
        .map(|topic| {
            let mut list = Vec::new();
            for a in topic {
                for b in topic {
                    if a != b {
                        list.push(format!("{a}{b}"));
                    }
                }
            }
            list
        })
        .collect();
    let n = compounds[0].len();
    let weights: Vec<f64> = (0..n)
        .map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");

    // Upstream ranks follow a fixed shuffle; downstream reverses it.
    let upstream_ranked: Vec<Vec<String>> = compounds
        .iter()
        .map(|list| {
            let mut l = list.clone();
            rand::seq::SliceRandom::shuffle(l.as_mut_slice(), &mut rng);
            l
        })
        .collect();
    let downstream_ranked: Vec<Vec<String>> = upstream_ranked
        .iter()
        .map(|l| l.iter().rev().cloned().collect())
        .collect();

    let up = Domain {
        compound_rate: config.upstream_compound_rate,
        ranked: upstream_ranked,
        zipf: zipf.clone(),
    };
    let down = Domain {
        compound_rate: config.downstream_compound_rate,
        ranked: downstream_ranked,
        zipf,
    };
    let mut up_rng = rng::derived(config.seed, 1, 0);
    let upstream: Vec<String> = (0..config.upstream_sentences)
        .map(|_| up.sentence(&stems, config, &mut up_rng))
        .collect();
    let mut down_rng = rng::derived(config.seed, 2, 0);
    let downstream: Vec<String> = (0..config.downstream_sentences)
        .map(|_| down.sentence(&stems, config, &mut down_rng))
        .collect();
    Ok(ShiftBenchmark {
        upstream: Corpus::from_lines(upstream.iter().map(String::as_str)),
        downstream: Corpus::from_lines(downstream.iter().map(String::as_str)),
        stems,
    })
}
