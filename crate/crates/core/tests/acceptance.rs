//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vocab_bridge::augment::{augment, AugmentConfig};
use vocab_bridge::distill::{train_generator, truncate_pair, PairContext, TrainConfig};
use vocab_bridge::eval::{
    convergence_table, probe_table, run_benchmark, seq_length_sweep, synthetic_shift, BenchmarkConfig,
    ShiftConfig,
};
use vocab_bridge::generators::{generate, GeneratorKind, GeneratorParams};
use vocab_bridge::morphset::{hyper_relation, Relation, SimilarEntry, SimilarSet, SimilarSetBuilder};
use vocab_bridge::neural::{pretrain, EncoderConfig, LrSchedule, PretrainConfig, PretrainedModel};
use vocab_bridge::transplant::{mismatch_report, transplant};
use vocab_bridge::{build_vocabulary, learn_bpe, Corpus, EmbeddingMatrix, SegmentationModel, Token, Vocabulary};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_table(vocab: Arc<Vocabulary>, dim: usize, r: &mut impl Rng) -> EmbeddingMatrix {
    let rows = Array2::from_shape_fn((vocab.len(), dim), |_| r.random_range(-1.0..1.0));
    EmbeddingMatrix::new(vocab, rows).unwrap()
}

fn numbered_vocab(n: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_ordered((0..n).map(|i| (Token::word(&format!("t{i}")), (n - i) as u64))).unwrap())
}

fn reduction_chain() -> Outcome {
    let dim = 16;
    let mut r = rng(1);
    let vocab = numbered_vocab(300);
    let table = random_table(vocab.clone(), dim, &mut r);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let size = r.random_range(1..=12);
        let entries = (0..size)
            .map(|_| {
                let id = r.random_range(0..vocab.len());
                SimilarEntry {
                    token: vocab.token(id).clone(),
                    id,
                    relation: Relation::ALL[r.random_range(0..Relation::COUNT)],
                }
            })
            .collect();
        let set = SimilarSet {
            query: Token::word("query"),
            entries,
        };
        let avg = generate(&set, &table, &GeneratorParams::zeros(GeneratorKind::Avg, dim)).unwrap();
        for verbatim in [true, false] {
            let att = generate(&set, &table, &GeneratorParams::zeros(GeneratorKind::Att, dim).with_prefactor(verbatim)).unwrap();
            let patt = generate(&set, &table, &GeneratorParams::zeros(GeneratorKind::Patt, dim).with_prefactor(verbatim)).unwrap();
            worst = worst.max((&att - &patt).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
            if !verbatim {
                worst = worst.max((&att - &avg).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
            }
        }
    }
    check(worst < 1e-12, format!("max abs diff {worst:.3e} over 1000 sets"))
}

fn verbatim_prefactor() -> Outcome {
    let vocab = Arc::new(Vocabulary::from_ordered([(Token::word("a"), 2), (Token::word("b"), 1)]).unwrap());
    let table = EmbeddingMatrix::new(vocab.clone(), array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let set = SimilarSet {
        query: Token::word("ab"),
        entries: (0..2)
            .map(|id| SimilarEntry {
                token: vocab.token(id).clone(),
                id,
                relation: Relation::SubwordPrefix,
            })
            .collect(),
    };
    let on = generate(&set, &table, &GeneratorParams::zeros(GeneratorKind::Att, 2)).unwrap();
    let off = generate(&set, &table, &GeneratorParams::zeros(GeneratorKind::Att, 2).with_prefactor(false)).unwrap();
    let close = |v: &ndarray::Array1<f64>, x: f64| v.iter().all(|c| (c - x).abs() < 1e-15);
    check(
        close(&on, 0.25) && close(&off, 0.5),
        format!("prefactor on {on}, off {off}"),
    )
}

/// A small corpus, BPE model and briefly pretrained encoder shared by the
/// training-related checks.
struct Fixture {
    seg: SegmentationModel,
    sentences: Vec<vocab_bridge::Segmented>,
    model: PretrainedModel,
}

fn fixture(dim: usize) -> Fixture {
    let data = synthetic_shift(&ShiftConfig {
        upstream_sentences: 400,
        downstream_sentences: 10,
        ..ShiftConfig::default()
    })
    .unwrap();
    let seg = learn_bpe(&data.upstream, 80).unwrap();
    let vocab = Arc::new(build_vocabulary(&data.upstream, &seg).unwrap());
    let sentences = seg.segment_corpus(&data.upstream);
    let encoder = EncoderConfig {
        dim,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 2 * dim,
        max_seq_len: 64,
        ..EncoderConfig::default()
    };
    let config = PretrainConfig {
        steps: 40,
        batch_size: 8,
        schedule: LrSchedule {
            peak: 3e-3,
            warmup_steps: 5,
            total_steps: 40,
            final_fraction: 0.1,
        },
        ..PretrainConfig::default()
    };
    let (model, _) = pretrain(&sentences, vocab, encoder, &config).unwrap();
    Fixture { seg, sentences, model }
}

fn gradient_check(fx: &Fixture) -> Outcome {
    let started = Instant::now();
    let model = &fx.model;
    let builder = SimilarSetBuilder::new(&fx.seg, model.vocab());
    let mut r = rng(3);
    let aug = AugmentConfig {
        p_merge: 0.5,
        p_split: 0.5,
        max_pieces: 3,
    };
    let h = 1e-5;
    let (mut instances, mut worst) = (0usize, 0.0f64);
    while instances < 120 {
        let s = &fx.sentences[r.random_range(0..fx.sentences.len())];
        let Some(pair) = truncate_pair(augment(s, model.vocab(), &mut r, &aug), 64) else {
            continue;
        };
        let generated = pair
            .unseen
            .iter()
            .any(|&p| !builder.similar_set(&pair.s_prime.tokens[p]).is_empty());
        if !generated {
            continue;
        }
        let kind = if instances % 2 == 0 { GeneratorKind::Att } else { GeneratorKind::Patt };
        let mut params = GeneratorParams::zeros(kind, model.dim()).with_prefactor(instances % 4 < 2);
        params.weights_mut().mapv_inplace(|_| r.random_range(-1.0..1.0));
        let lambda = r.random_range(0.1..2.0);
        let mask_seed = r.random::<u64>();
        let mut ctx = PairContext::new(model, &fx.seg, 0);

        let mut analytic = Array2::zeros(params.weights().raw_dim());
        ctx.pair_loss(&params, &pair, lambda, mask_seed, Some(&mut analytic)).unwrap();
        let mut numeric = Array2::<f64>::zeros(params.weights().raw_dim());
        for idx in 0..params.weights().len() {
            let (i, j) = (idx / model.dim(), idx % model.dim());
            let mut eval = |delta: f64| {
                let mut p = params.clone();
                p.weights_mut()[[i, j]] += delta;
                let (lp, ld) = ctx.pair_loss(&p, &pair, lambda, mask_seed, None).unwrap();
                lp + lambda * ld
            };
            numeric[[i, j]] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
        instances += 1;
    }
    let elapsed = started.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{instances} instances, worst relative error {worst:.3e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn kd_zero(fx: &Fixture) -> Outcome {
    let config = TrainConfig {
        steps: 20,
        batch_size: 8,
        augment: AugmentConfig::disabled(),
        schedule: LrSchedule {
            peak: 1e-2,
            warmup_steps: 2,
            total_steps: 20,
            final_fraction: 0.1,
        },
        ..TrainConfig::default()
    };
    let outcome = train_generator(&fx.model, &fx.seg, &fx.sentences, &config).map_err(|e| e.to_string())?;
    let nonzero = outcome.curve.iter().filter(|r| r.l_d != 0.0).count();
    check(
        nonzero == 0,
        format!("{} batches, {nonzero} with nonzero distillation loss", outcome.curve.len()),
    )
}

fn frozen_backbone(fx: &Fixture) -> Outcome {
    let before = fx.model.clone();
    let hash = fx.model.backbone_hash();
    let config = TrainConfig {
        steps: 500,
        batch_size: 4,
        schedule: LrSchedule {
            peak: 1e-2,
            warmup_steps: 20,
            total_steps: 500,
            final_fraction: 0.1,
        },
        ..TrainConfig::default()
    };
    let outcome = train_generator(&fx.model, &fx.seg, &fx.sentences, &config).map_err(|e| e.to_string())?;
    let same = fx.model.backbone_params() == before.backbone_params()
        && fx.model.embedding().rows() == before.embedding().rows()
        && fx.model.output_bias() == before.output_bias()
        && fx.model.backbone_hash() == hash;
    let moved = outcome.params.weights() != GeneratorParams::init(config.kind, fx.model.dim(), config.seed).weights();
    check(
        same && moved,
        format!("500 steps; encoder unchanged: {same}; generator moved: {moved}"),
    )
}

fn augmentation_safety() -> Outcome {
    let mut r = rng(5);
    let alphabet: Vec<char> = "abcdeéfgklmnoprstu".chars().collect();
    let word = |r: &mut ChaCha8Rng| -> String {
        (0..r.random_range(1..=9)).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect()
    };
    let lines: Vec<String> = (0..10_000)
        .map(|_| (0..r.random_range(1..=12)).map(|_| word(&mut r)).collect::<Vec<_>>().join(" "))
        .collect();
    let corpus = Corpus::from_lines(lines.iter().map(String::as_str));
    let seg = learn_bpe(&corpus.split_at(2000).0, 150).unwrap();
    let vocab = build_vocabulary(&corpus, &seg).unwrap();
    let config = AugmentConfig {
        p_merge: 0.4,
        p_split: 0.4,
        max_pieces: 4,
    };
    let mut failures = 0usize;
    let mut unseen_total = 0usize;
    for sentence in corpus.sentences() {
        let s_p = seg.segment_words(sentence);
        let pair = augment(&s_p, &vocab, &mut r, &config);
        let words_ok = pair.s_prime.spans.len() == sentence.len()
            && pair.s_prime.spans.iter().zip(sentence).all(|(span, w)| {
                let pieces = &pair.s_prime.tokens[span.clone()];
                let stream: String = pieces.iter().map(|t| t.surface()).collect();
                let flags_ok = pieces
                    .iter()
                    .enumerate()
                    .all(|(i, t)| t.is_continuation() == (i > 0));
                stream == *w && flags_ok
            });
        let listed: Vec<usize> = (0..pair.s_prime.tokens.len())
            .filter(|&i| !vocab.contains(&pair.s_prime.tokens[i]))
            .collect();
        let unseen_ok = pair.unseen == listed;
        unseen_total += pair.unseen.len();
        if !(words_ok && unseen_ok) {
            failures += 1;
        }
    }
    check(
        failures == 0 && unseen_total > 0,
        format!("10000 sentences, {unseen_total} unseen tokens, {failures} violations"),
    )
}

fn naive_hyperwords(vocab: &Vocabulary, w: &Token, cap: usize) -> Vec<(usize, Relation)> {
    let mut found: Vec<(usize, Relation)> = vocab
        .iter()
        .filter(|(_, host, _)| host.surface().contains(w.surface()))
        .filter_map(|(id, host, _)| hyper_relation(w, host).map(|rel| (id, rel)))
        .collect();
    found.sort_by(|a, b| vocab.freq(b.0).cmp(&vocab.freq(a.0)).then(a.0.cmp(&b.0)));
    found.truncate(cap);
    found
}

fn morphset_oracle() -> Outcome {
    let seg = SegmentationModel::character_level();
    let letters: Vec<char> = "abcdefgh".chars().collect();
    let mut r = rng(7);
    let (mut queries, mut mismatches) = (0usize, 0usize);
    for _ in 0..50 {
        let mut seen = std::collections::HashSet::new();
        let mut tokens = Vec::with_capacity(5000);
        while tokens.len() < 5000 {
            let surface: String = (0..r.random_range(1..=9)).map(|_| letters[r.random_range(0..letters.len())]).collect();
            let token = Token::new(surface, r.random_bool(0.4)).unwrap();
            if seen.insert(token.clone()) {
                tokens.push((token, r.random_range(1..1000u64)));
            }
        }
        let vocab = Vocabulary::from_counts(tokens).unwrap();
        let builder = SimilarSetBuilder::new(&seg, &vocab);
        for _ in 0..40 {
            let query = if r.random_bool(0.5) {
                let host = vocab.token(r.random_range(0..vocab.len())).surface().to_string();
                let chars: Vec<char> = host.chars().collect();
                let a = r.random_range(0..chars.len());
                let b = r.random_range(a + 1..=chars.len());
                Token::new(chars[a..b].iter().collect::<String>(), r.random_bool(0.5)).unwrap()
            } else {
                let s: String = (0..r.random_range(1..=4)).map(|_| letters[r.random_range(0..letters.len())]).collect();
                Token::new(s, r.random_bool(0.5)).unwrap()
            };
            let fast: Vec<(usize, Relation)> = builder.hyperwords_of(&query).iter().map(|e| (e.id, e.relation)).collect();
            let index_ids = builder.index().lookup(query.surface());
            let scan_ids: Vec<usize> = (0..vocab.len()).filter(|&i| vocab.token(i).surface().contains(query.surface())).collect();
            queries += 1;
            if fast != naive_hyperwords(&vocab, &query, 64) || index_ids != scan_ids {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("50 vocabularies x 5000 tokens, {queries} queries, {mismatches} mismatches"),
    )
}

fn granularity() -> Outcome {
    let data = synthetic_shift(&ShiftConfig::default()).map_err(|e| e.to_string())?;
    let rows = seq_length_sweep(&data.upstream, &[0, 5000]).map_err(|e| e.to_string())?;
    let (a, b) = (rows[0].mean_tokens, rows[1].mean_tokens);
    check(b < a, format!("mean tokens/sentence {a:.3} at 0 merges, {b:.3} at 5000"))
}

fn transplant_identity(fx: &Fixture) -> Outcome {
    let source = fx.model.embedding();
    let vocab = source.vocab().clone();
    let mut params = GeneratorParams::init(GeneratorKind::Patt, source.dim(), 1);
    params.weights_mut().mapv_inplace(|v| v * 100.0);
    let result = transplant(source, &fx.seg, vocab.clone(), &params, 0).map_err(|e| e.to_string())?;
    let bitwise = result
        .embedding
        .rows()
        .iter()
        .zip(source.rows().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let report = mismatch_report(&vocab, &vocab);
    check(
        bitwise && report.unseen == 0 && report.shared == vocab.len(),
        format!("{} rows bitwise equal: {bitwise}; unseen {}", vocab.len(), report.unseen),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };

    report("generator reduction chain", reduction_chain());
    report("verbatim attention prefactor", verbatim_prefactor());
    let fx = fixture(16);
    report("generator gradient check", gradient_check(&fx));
    report("distillation zero without augmentation", kd_zero(&fx));
    report("frozen encoder during generator training", frozen_backbone(&fx));
    report("augmentation safety", augmentation_safety());
    report("substring index vs naive scan", morphset_oracle());
    report("granularity shortens sequences", granularity());
    report("transplant identity", transplant_identity(&fx));

    let started = Instant::now();
    match run_benchmark(&BenchmarkConfig::default(), &mut |msg| eprintln!("  {msg}")) {
        Ok(bench) => {
            let elapsed = started.elapsed();
            print!("{}", probe_table(&bench.probes).to_tsv());
            print!("{}", convergence_table(&bench.convergence).to_tsv());
            let loss = |name: &str| bench.probe(name).map_or(f64::NAN, |p| p.initial_loss);
            let (patt, avg, random) = (loss("patt"), loss("avg"), loss("random"));
            let gain = (random - patt) / random;
            report(
                "directional transfer benefit",
                check(
                    patt <= avg && avg <= random && gain >= 0.02 && elapsed < Duration::from_secs(30 * 60),
                    format!(
                        "initial loss patt {patt:.4} <= avg {avg:.4} <= random {random:.4}; patt gain {:.1}%; {:.0}s",
                        100.0 * gain,
                        elapsed.as_secs_f64()
                    ),
                ),
            );
            let first = bench.convergence.first().map_or(f64::NAN, |c| c.1);
            let last = bench.convergence.last().map_or(f64::NAN, |c| c.1);
            report(
                "generator convergence",
                check(
                    last <= first && bench.convergence.len() >= 2,
                    format!("probe loss {first:.4} at step 0, {last:.4} at final checkpoint"),
                ),
            );
        }
        Err(e) => {
            report("directional transfer benefit", Err(e.to_string()));
            report("generator convergence", Err("benchmark did not run".into()));
        }
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
