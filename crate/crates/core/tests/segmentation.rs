use proptest::prelude::*;
use sha2::{Digest, Sha256};

use vocab_bridge::{build_vocabulary, learn_bpe, Corpus, SegmentationModel};

fn word() -> impl Strategy<Value = String> {
    "[abcdeé]{1,8}"
}

fn corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(word(), 1..6), 1..25)
}

fn to_corpus(sentences: &[Vec<String>]) -> Corpus {
    let lines: Vec<String> = sentences.iter().map(|s| s.join(" ")).collect();
    Corpus::from_lines(lines.iter().map(String::as_str))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pieces_concatenate_to_the_word(sentences in corpus(), merges in 0usize..60) {
        let corpus = to_corpus(&sentences);
        let model = learn_bpe(&corpus, merges).unwrap();
        for sentence in corpus.sentences() {
            for w in sentence {
                let pieces = model.segment_word(w);
                let joined: String = pieces.iter().map(|t| t.surface()).collect();
                prop_assert_eq!(&joined, w);
                for (i, p) in pieces.iter().enumerate() {
                    prop_assert_eq!(p.is_continuation(), i > 0);
                }
            }
        }
    }

    #[test]
    fn more_merges_never_lengthen_training_words(sentences in corpus(), merges in 1usize..60, cut in 0usize..60) {
        let corpus = to_corpus(&sentences);
        let full = learn_bpe(&corpus, merges).unwrap();
        let prefix = full.truncated(cut.min(full.num_merges()));
        for sentence in corpus.sentences() {
            for w in sentence {
                prop_assert!(full.segment_word(w).len() <= prefix.segment_word(w).len(), "{}", w);
            }
        }
    }

    #[test]
    fn learning_is_deterministic(sentences in corpus(), merges in 0usize..40) {
        let corpus = to_corpus(&sentences);
        let a = learn_bpe(&corpus, merges).unwrap();
        let b = learn_bpe(&corpus, merges).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        let hash = |m: &SegmentationModel| hex::encode(Sha256::digest(build_vocabulary(&corpus, m).unwrap().to_text()));
        prop_assert_eq!(hash(&a), hash(&b));
        for sentence in corpus.sentences() {
            prop_assert_eq!(a.segment_words(sentence), b.segment_words(sentence));
        }
    }

    #[test]
    fn merges_file_round_trips(sentences in corpus(), merges in 0usize..40) {
        let model = learn_bpe(&to_corpus(&sentences), merges).unwrap();
        let parsed = SegmentationModel::parse(&model.to_text(), std::path::Path::new("merges.txt")).unwrap();
        prop_assert_eq!(parsed.to_text(), model.to_text());
    }
}

#[test]
fn vocabulary_covers_every_segmented_token() {
    let corpus = Corpus::from_text("motor cycle motorcycle\nmotorcycles ride\nride motor\n");
    let model = learn_bpe(&corpus, 12).unwrap();
    let vocab = build_vocabulary(&corpus, &model).unwrap();
    for s in model.segment_corpus(&corpus) {
        assert!(s.tokens.iter().all(|t| vocab.contains(t)));
    }
}

#[test]
fn saved_model_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::from_text("aaab aaab ab\nba ab aaab\n");
    let model = learn_bpe(&corpus, 3).unwrap();
    let path = dir.path().join("merges.txt");
    model.save(&path).unwrap();
    let loaded = SegmentationModel::load(&path).unwrap();
    assert_eq!(loaded.merges(), model.merges());
    assert_eq!(loaded.segment_word("aaab"), model.segment_word("aaab"));
}
