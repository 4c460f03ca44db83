//! Experiments: segmentation granularity sweeps, downstream probes comparing
//! embedding initializations, generator convergence, and nearest neighbours.

mod benchmark;
mod synthetic;

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::generators::GeneratorParams;
use crate::lexicon::{format_float, Corpus, EmbeddingMatrix, Token, Vocabulary};
use crate::neural::{heldout_loss, sentence_ids, LrSchedule, MaskedInput, MlmTrainer, PretrainedModel};
use crate::rng;
use crate::segmentation::{learn_bpe, SegmentationModel, Segmented};
use crate::transplant::transplant;

pub use benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport};
pub use synthetic::{synthetic_shift, ShiftBenchmark, ShiftConfig};

/// A tab-separated table with a header row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub merges: usize,
    pub vocab_size: usize,
    pub mean_tokens: f64,
}

/// Mean tokens per sentence of `corpus` under BPE models with each of
/// `merge_counts` merges, all learned on `corpus`.
pub fn seq_length_sweep(corpus: &Corpus, merge_counts: &[usize]) -> Result<Vec<SweepRow>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if merge_counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("merge counts must be ascending".into()));
    }
    let full = learn_bpe(corpus, merge_counts.last().copied().unwrap_or(0))?;
    merge_counts
        .iter()
        .map(|&m| {
            let seg = full.truncated(m);
            let segmented = seg.segment_corpus(corpus);
            let total: usize = segmented.iter().map(|s| s.tokens.len()).sum();
            let vocab = crate::lexicon::build_vocabulary(corpus, &seg)?;
            Ok(SweepRow {
                merges: m,
                vocab_size: vocab.len(),
                mean_tokens: total as f64 / corpus.len() as f64,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["merges", "vocab_size", "mean_tokens_per_sentence"]);
    for r in rows {
        t.push(vec![
            r.merges.to_string(),
            r.vocab_size.to_string(),
            format!("{:.4}", r.mean_tokens),
        ]);
    }
    t
}

/// The `k` tokens most cosine-similar to `token`, excluding itself; ties go
/// to the lower id.
pub fn nearest_neighbors(e: &EmbeddingMatrix, token: &Token, k: usize) -> Result<Vec<(Token, f64)>> {
    let vocab = e.vocab();
    let query = vocab
        .id(token)
        .ok_or_else(|| Error::UnknownToken(token.rendered()))?;
    if k >= vocab.len() {
        return Err(Error::Config(format!(
            "k = {k} must be smaller than the vocabulary size {}",
            vocab.len()
        )));
    }
    let norm = |v: ndarray::ArrayView1<'_, f64>| v.dot(&v).sqrt();
    let q = e.row(query);
    let qn = norm(q);
    let mut scored: Vec<(usize, f64)> = (0..vocab.len())
        .filter(|&id| id != query)
        .map(|id| {
            let r = e.row(id);
            let denom = qn * norm(r);
            let sim = if denom > 0.0 { q.dot(&r) / denom } else { 0.0 };
            (id, sim)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(id, s)| (vocab.token(id).clone(), s))
        .collect())
}

/// Target matrix with shared rows copied from `source` and every other row
/// drawn from a Gaussian matching the spread of the source table.
pub fn random_init(source: &EmbeddingMatrix, target: Arc<Vocabulary>, seed: u64) -> Result<EmbeddingMatrix> {
    let values = source.rows();
    let n = values.len() as f64;
    let mean = values.sum() / n;
    let std = (values.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
    let normal = Normal::new(0.0, std.max(1e-12)).expect("valid std");
    let mut rng = rng::seeded(seed);
    let mut rows = Array2::zeros((target.len(), source.dim()));
    for (id, token, _) in target.iter() {
        match source.row_of(token) {
            Some(r) => rows.row_mut(id).assign(&r),
            None => rows
                .row_mut(id)
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng)),
        }
    }
    EmbeddingMatrix::new(target, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Finetuning steps after the initial measurement; 0 measures only.
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Number of trailing sentences held out for loss measurement.
    pub heldout: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 16,
            schedule: LrSchedule {
                peak: 1e-3,
                warmup_steps: 10,
                total_steps: 100,
                final_fraction: 0.1,
            },
            heldout: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInit {
    pub name: String,
    pub embedding: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCurve {
    pub name: String,
    pub initial_loss: f64,
    /// Held-out loss after `steps` finetuning steps, if any were run.
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub backbone_hash: String,
}

/// Output bias over `target`: source biases for shared tokens, the mean
/// source bias otherwise.
pub fn transfer_output_bias(pretrained: &PretrainedModel, target: &Vocabulary) -> Array1<f64> {
    let source = pretrained.vocab();
    let bias = pretrained.output_bias();
    let mean = bias.mean().unwrap_or(0.0);
    Array1::from_iter(
        target
            .tokens()
            .iter()
            .map(|t| source.id(t).map_or(mean, |id| bias[id])),
    )
}

/// Measures, and optionally finetunes, the pretrained backbone with each
/// candidate embedding table on `downstream` (segmented with the target
/// segmenter). All runs share seeds, so only the initialization differs.
pub fn downstream_probe(
    pretrained: &PretrainedModel,
    inits: &[ProbeInit],
    downstream: &[Segmented],
    config: &ProbeConfig,
) -> Result<Vec<ProbeCurve>> {
    let Some(first) = inits.first() else {
        return Ok(Vec::new());
    };
    let target = first.embedding.vocab().clone();
    for init in inits {
        if init.embedding.vocab().tokens() != target.tokens() {
            return Err(Error::VocabMismatch(format!(
                "init {:?} uses a different vocabulary than {:?}",
                init.name, first.name
            )));
        }
        if init.embedding.dim() != pretrained.dim() {
            return Err(Error::DimensionMismatch {
                expected: pretrained.dim(),
                found: init.embedding.dim(),
            });
        }
    }
    let ids = sentence_ids(downstream, &target, pretrained.config().max_seq_len)?;
    if ids.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let held = config.heldout.clamp(1, ids.len() - 1);
    let (train, eval) = ids.split_at(ids.len() - held);
    let bias = transfer_output_bias(pretrained, &target);
    let eval_seed = config.seed ^ 0x9E0B;

    let mut curves = Vec::with_capacity(inits.len());
    for init in inits {
        let model = pretrained.with_embedding(init.embedding.clone(), bias.clone())?;
        let backbone_hash = model.backbone_hash();
        let initial_loss = heldout_loss(&model, eval, eval_seed)?;
        let final_loss = if config.steps > 0 {
            let mut trainer = MlmTrainer::new(model, config.schedule);
            let mut rng = rng::seeded(config.seed);
            for _ in 0..config.steps {
                let batch: Vec<MaskedInput> = (0..config.batch_size)
                    .map(|_| {
                        let s = &train[rand::Rng::random_range(&mut rng, 0..train.len())];
                        trainer.model().mask_ids(s, &mut rng)
                    })
                    .collect();
                trainer.step(&batch)?;
            }
            Some(heldout_loss(trainer.model(), eval, eval_seed)?)
        } else {
            None
        };
        curves.push(ProbeCurve {
            name: init.name.clone(),
            initial_loss,
            final_loss,
            steps: config.steps,
            backbone_hash,
        });
    }
    Ok(curves)
}

pub fn probe_table(curves: &[ProbeCurve]) -> Table {
    let mut t = Table::new(&["init", "initial_loss", "steps", "final_loss"]);
    for c in curves {
        t.push(vec![
            c.name.clone(),
            format_float(c.initial_loss),
            c.steps.to_string(),
            c.final_loss.map_or_else(|| "-".to_string(), format_float),
        ]);
    }
    t
}

/// Transplants with each generator checkpoint and reports the probe's
/// initial held-out loss, in checkpoint order.
pub fn convergence_curve(
    pretrained: &PretrainedModel,
    segmenter: &SegmentationModel,
    target: Arc<Vocabulary>,
    checkpoints: &[(usize, GeneratorParams)],
    downstream: &[Segmented],
    config: &ProbeConfig,
    fallback_seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let config = ProbeConfig {
        steps: 0,
        ..config.clone()
    };
    let mut out = Vec::with_capacity(checkpoints.len());
    for (step, params) in checkpoints {
        let t = transplant(pretrained.embedding(), segmenter, target.clone(), params, fallback_seed)?;
        let init = ProbeInit {
            name: format!("step{step}"),
            embedding: t.embedding,
        };
        let curve = downstream_probe(pretrained, &[init], downstream, &config)?;
        out.push((*step, curve[0].initial_loss));
    }
    Ok(out)
}

pub fn convergence_table(curve: &[(usize, f64)]) -> Table {
    let mut t = Table::new(&["generator_steps", "probe_loss"]);
    for (step, loss) in curve {
        t.push(vec![step.to_string(), format_float(*loss)]);
    }
    t
}

pub fn neighbors_text(neighbors: &[(Token, f64)]) -> String {
    let mut out = String::new();
    for (token, sim) in neighbors {
        let _ = writeln!(out, "{token}\t{sim:.6}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(tokens: &[&str]) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_ordered(tokens.iter().map(|t| (Token::parse(t).unwrap(), 1))).unwrap())
    }

    #[test]
    fn neighbors_rank_and_exclude_self() {
        let e = EmbeddingMatrix::new(
            vocab(&["a", "b", "c", "d"]),
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
        )
        .unwrap();
        let n = nearest_neighbors(&e, &Token::word("a"), 2).unwrap();
        assert_eq!(n[0].0, Token::word("c"));
        assert!((n[0].1 - 1.0).abs() < 1e-15);
        assert_eq!(n[1].0, Token::word("d"));
        assert!(nearest_neighbors(&e, &Token::word("z"), 1).is_err());
        assert!(nearest_neighbors(&e, &Token::word("a"), 4).is_err());
    }

    #[test]
    fn neighbor_ties_break_by_id() {
        let e = EmbeddingMatrix::new(
            vocab(&["q", "x", "y", "z"]),
            array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let n = nearest_neighbors(&e, &Token::word("q"), 3).unwrap();
        let names: Vec<String> = n.iter().map(|(t, _)| t.rendered()).collect();
        assert_eq!(names, ["x", "y", "z"]);
    }

    #[test]
    fn sweep_saturates_on_single_letters() {
        let corpus = Corpus::from_text("a b c\nb c a\n");
        let rows = seq_length_sweep(&corpus, &[0, 10, 100]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mean_tokens == 3.0));
        assert!(seq_length_sweep(&corpus, &[5, 1]).is_err());
    }

    #[test]
    fn sweep_is_non_increasing() {
        let corpus = Corpus::from_text("lower lowest newer newest\nwidest wider low new\n");
        let rows = seq_length_sweep(&corpus, &[0, 2, 5, 10, 40]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].mean_tokens <= w[0].mean_tokens));
        assert!(rows[4].mean_tokens < rows[0].mean_tokens);
        assert!(sweep_table(&rows).to_tsv().starts_with("merges\tvocab_size"));
    }

    #[test]
    fn random_init_copies_shared_rows() {
        let src = EmbeddingMatrix::new(vocab(&["a", "b"]), array![[1.0, -1.0], [0.5, 0.25]]).unwrap();
        let out = random_init(&src, vocab(&["b", "n"]), 0).unwrap();
        assert_eq!(out.row(0), src.row(1));
        assert!(out.row(1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn table_format() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x".into()]);
        assert_eq!(t.to_tsv(), "a\tb\n1\tx\n");
    }
}
