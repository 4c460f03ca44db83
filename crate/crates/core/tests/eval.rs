mod common;

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vocab_bridge::eval::{
    downstream_probe, nearest_neighbors, probe_table, random_init, seq_length_sweep, sweep_table, ProbeConfig,
    ProbeInit,
};
use vocab_bridge::{Corpus, EmbeddingMatrix, Error, Token, Vocabulary};

use common::{schedule, small};

fn probe_config(steps: usize) -> ProbeConfig {
    ProbeConfig {
        steps,
        batch_size: 4,
        schedule: schedule(1e-3, steps.max(1)),
        heldout: 40,
        seed: 5,
    }
}

#[test]
fn identical_inits_give_identical_curves() {
    let s = small(8, 10);
    let e = s.model.embedding().clone();
    let inits = vec![
        ProbeInit { name: "a".into(), embedding: e.clone() },
        ProbeInit { name: "b".into(), embedding: e },
    ];
    let curves = downstream_probe(&s.model, &inits, &s.sentences, &probe_config(3)).unwrap();
    assert_eq!(curves[0].initial_loss, curves[1].initial_loss);
    assert_eq!(curves[0].final_loss, curves[1].final_loss);
    assert!(curves[0].final_loss.is_some());
    assert_eq!(curves[0].backbone_hash, curves[1].backbone_hash);
    assert_eq!(probe_table(&curves).to_tsv().lines().count(), 3);
}

#[test]
fn inits_over_different_vocabularies_are_rejected() {
    let s = small(8, 2);
    let e = s.model.embedding().clone();
    let other_vocab = Arc::new(Vocabulary::from_ordered([(Token::word("x"), 1)]).unwrap());
    let other = EmbeddingMatrix::new(other_vocab, Array2::zeros((1, 8))).unwrap();
    let inits = vec![
        ProbeInit { name: "a".into(), embedding: e },
        ProbeInit { name: "b".into(), embedding: other },
    ];
    assert!(matches!(
        downstream_probe(&s.model, &inits, &s.sentences, &probe_config(0)),
        Err(Error::VocabMismatch(_))
    ));
}

#[test]
fn pretrained_rows_beat_scrambled_rows_in_domain() {
    let s = small(16, 200);
    let exact = s.model.embedding().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut order: Vec<usize> = (0..exact.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let scrambled = EmbeddingMatrix::new(exact.vocab().clone(), exact.rows().select(ndarray::Axis(0), &order)).unwrap();
    let inits = vec![
        ProbeInit { name: "exact".into(), embedding: exact },
        ProbeInit { name: "scrambled".into(), embedding: scrambled },
    ];
    let curves = downstream_probe(&s.model, &inits, &s.sentences, &probe_config(0)).unwrap();
    assert!(curves[0].initial_loss < curves[1].initial_loss);
    assert!(curves.iter().all(|c| c.final_loss.is_none()));
}

#[test]
fn random_init_only_replaces_unseen_rows() {
    let s = small(8, 2);
    let source = s.model.embedding();
    let target = Arc::new(
        Vocabulary::from_ordered([(source.vocab().token(0).clone(), 3), (Token::word("unseenword"), 2)]).unwrap(),
    );
    let r = random_init(source, target, 1).unwrap();
    assert_eq!(r.row(0), source.row(0));
    assert!(r.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn neighbors_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 60;
    let vocab = Arc::new(Vocabulary::from_ordered((0..n).map(|i| (Token::word(&format!("w{i}")), 100 - i as u64))).unwrap());
    let rows = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
    let e = EmbeddingMatrix::new(vocab.clone(), rows.clone()).unwrap();
    for q in [0, 17, 59] {
        let got = nearest_neighbors(&e, vocab.token(q), 7).unwrap();
        let norm = |i: usize| rows.row(i).dot(&rows.row(i)).sqrt();
        let mut brute: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| (i, rows.row(i).dot(&rows.row(q)) / (norm(i) * norm(q))))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for ((token, sim), (id, expected)) in got.iter().zip(&brute) {
            assert_eq!(token, vocab.token(*id));
            assert!((sim - expected).abs() < 1e-12);
        }
    }
    assert!(nearest_neighbors(&e, &Token::word("absent"), 3).is_err());
}

#[test]
fn sweep_has_one_row_per_merge_count() {
    let corpus = Corpus::from_text("lower lowest newer newest\nwider widest lower\n");
    let rows = seq_length_sweep(&corpus, &[0, 2, 8, 30]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[1].mean_tokens <= w[0].mean_tokens));
    let table = sweep_table(&rows).to_tsv();
    assert_eq!(table.lines().count(), 5);
}
