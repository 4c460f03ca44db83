//! Generator training against a frozen encoder: masked-token loss on the
//! edited sentence plus a weighted distillation term pulling each word's
//! representation toward its representation under the vanilla segmentation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::augment::{augment, AugmentConfig, AugmentedPair};
use crate::error::{Error, Result};
use crate::generators::{self, GeneratorKind, GeneratorParams};
use crate::lexicon::Token;
use crate::morphset::{SimilarSet, SimilarSetBuilder};
use crate::neural::{clip_global_norm, Adam, LrSchedule, PretrainedModel, RowSource};
use crate::rng;
use crate::segmentation::{SegmentationModel, Segmented};
use crate::transplant::fallback_embedding;

/// Mean of the hidden rows over `span`.
pub fn word_repr(hidden: ArrayView2<'_, f64>, span: Range<usize>) -> Result<Array1<f64>> {
    if span.is_empty() {
        return Err(Error::EmptySpan);
    }
    if span.end > hidden.nrows() {
        return Err(Error::Overlength {
            len: span.end,
            max: hidden.nrows(),
        });
    }
    let len = span.len() as f64;
    Ok(hidden.slice(ndarray::s![span, ..]).sum_axis(Axis(0)) / len)
}

/// Mean over words of the squared distance between word representations.
pub fn kd_loss(
    hidden_p: ArrayView2<'_, f64>,
    spans_p: &[Range<usize>],
    hidden_prime: ArrayView2<'_, f64>,
    spans_prime: &[Range<usize>],
) -> Result<f64> {
    Ok(kd_loss_grad(hidden_p, spans_p, hidden_prime, spans_prime)?.0)
}

/// The distillation loss and its gradient w.r.t. `hidden_prime`.
pub fn kd_loss_grad(
    hidden_p: ArrayView2<'_, f64>,
    spans_p: &[Range<usize>],
    hidden_prime: ArrayView2<'_, f64>,
    spans_prime: &[Range<usize>],
) -> Result<(f64, Array2<f64>)> {
    if spans_p.len() != spans_prime.len() {
        return Err(Error::WordCountMismatch {
            left: spans_p.len(),
            right: spans_prime.len(),
        });
    }
    let mut grad = Array2::zeros(hidden_prime.raw_dim());
    if spans_p.is_empty() {
        return Ok((0.0, grad));
    }
    let words = spans_p.len() as f64;
    let mut loss = 0.0;
    for (sp, sq) in spans_p.iter().zip(spans_prime) {
        let diff = word_repr(hidden_prime, sq.clone())? - word_repr(hidden_p, sp.clone())?;
        loss += diff.dot(&diff);
        let row_grad = diff * (2.0 / (words * sq.len() as f64));
        for r in sq.clone() {
            let mut g = grad.row_mut(r);
            g += &row_grad;
        }
    }
    Ok((loss / words, grad))
}

pub fn total_loss(l_p: f64, l_d: f64, lambda: f64) -> f64 {
    l_p + lambda * l_d
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub seed: u64,
    pub kind: GeneratorKind,
    pub verbatim_prefactor: bool,
    pub augment: AugmentConfig,
    /// Extra checkpoint interval in steps; 0 keeps only the first and last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            steps: 500,
            batch_size: 16,
            schedule: LrSchedule {
                peak: 1e-2,
                warmup_steps: 50,
                total_steps: 500,
                final_fraction: 0.1,
            },
            clip_norm: 1.0,
            seed: 0,
            kind: GeneratorKind::Patt,
            verbatim_prefactor: true,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a finite non-negative number".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.augment.max_pieces < 2 {
            return Err(Error::Config("max_pieces must be at least 2".into()));
        }
        if self.kind == GeneratorKind::Avg {
            return Err(Error::NonTrainable);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_p: f64,
    pub l_d: f64,
    pub total: f64,
}

/// `<step>\t<L_p>\t<L_d>\t<L_total>` per record.
pub fn loss_curve_text(records: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.step, r.l_p, r.l_d, r.total);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: GeneratorParams,
    pub curve: Vec<LossRecord>,
    /// `(steps taken, parameters)`, starting at 0 and ending at the final step.
    pub checkpoints: Vec<(usize, GeneratorParams)>,
}

/// Per-position row assignment for an edited sentence.
enum Routed {
    Table(usize),
    Generated,
    Fallback(Array1<f64>),
}

/// Similar sets and fallback rows for tokens routed to the generator.
pub struct PairContext<'a> {
    model: &'a PretrainedModel,
    builder: SimilarSetBuilder<'a>,
    sets: HashMap<Token, SimilarSet>,
    fallbacks: HashMap<Token, Array1<f64>>,
    seed: u64,
}

impl<'a> PairContext<'a> {
    pub fn new(model: &'a PretrainedModel, segmenter: &'a SegmentationModel, seed: u64) -> Self {
        Self {
            model,
            builder: SimilarSetBuilder::new(segmenter, model.vocab()),
            sets: HashMap::new(),
            fallbacks: HashMap::new(),
            seed,
        }
    }

    fn route(&mut self, tokens: &[Token]) -> Vec<Routed> {
        let vocab = self.model.vocab().clone();
        let dim = self.model.dim();
        let mut routed = Vec::with_capacity(tokens.len());
        for token in tokens {
            if let Some(id) = vocab.id(token) {
                routed.push(Routed::Table(id));
                continue;
            }
            let builder = &self.builder;
            let set = self
                .sets
                .entry(token.clone())
                .or_insert_with(|| builder.similar_set(token));
            if set.is_empty() {
                let seed = self.seed;
                let row = self
                    .fallbacks
                    .entry(token.clone())
                    .or_insert_with(|| fallback_embedding(token, dim, seed))
                    .clone();
                routed.push(Routed::Fallback(row));
            } else {
                routed.push(Routed::Generated);
            }
        }
        routed
    }

    /// Combined loss `(L_p, L_d)` for one pair; the masking draw is fixed by
    /// `mask_seed`. Generator gradients of `L_p + lambda * L_d` are added to
    /// `grad` when given.
    pub fn pair_loss(
        &mut self,
        params: &GeneratorParams,
        pair: &AugmentedPair,
        lambda: f64,
        mask_seed: u64,
        grad: Option<&mut Array2<f64>>,
    ) -> Result<(f64, f64)> {
        let model = self.model;
        let table = model.embedding();
        let tokens = &pair.s_prime.tokens;
        let routed = self.route(tokens);

        let mut rows = Array2::zeros((tokens.len(), model.dim()));
        let mut generated: Vec<(usize, &SimilarSet)> = Vec::new();
        for (pos, r) in routed.iter().enumerate() {
            match r {
                Routed::Table(id) => rows.row_mut(pos).assign(&table.row(*id)),
                Routed::Fallback(row) => rows.row_mut(pos).assign(row),
                Routed::Generated => {
                    let set = &self.sets[&tokens[pos]];
                    rows.row_mut(pos)
                        .assign(&generators::generate(set, table, params)?);
                    generated.push((pos, set));
                }
            }
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let want_grad = grad.is_some() && !generated.is_empty();
        let mut d_rows = Array2::<f64>::zeros(rows.raw_dim());

        // Masked-token loss on the edited sentence; unseen tokens are context only.
        let targets: Vec<Option<usize>> = routed
            .iter()
            .map(|r| match r {
                Routed::Table(id) => Some(*id),
                _ => None,
            })
            .collect();
        let sources = vec![RowSource::External; tokens.len()];
        let mut l_p = 0.0;
        if let Some(masked) =
            model.mask_inputs(rows.clone(), sources, &targets, &mut rng::seeded(mask_seed))
        {
            let cache = model.forward_cached(masked.rows.view(), &positions)?;
            let (loss, d_hidden) =
                model.mlm_head(&cache.hidden, &masked.positions, &masked.targets, None)?;
            l_p = loss;
            if want_grad {
                d_rows += &model.backward(&cache, &d_hidden, None);
            }
        }

        // Distillation between unmasked forwards.
        let p_ids: Vec<usize> = pair
            .s_p
            .tokens
            .iter()
            .map(|t| {
                model
                    .vocab()
                    .id(t)
                    .ok_or_else(|| Error::UnknownToken(t.rendered()))
            })
            .collect::<Result<_>>()?;
        let hidden_p = model.forward_ids(&p_ids)?;
        let cache = model.forward_cached(rows.view(), &positions)?;
        let (l_d, d_hidden) =
            kd_loss_grad(hidden_p.view(), &pair.s_p.spans, cache.hidden.view(), &pair.s_prime.spans)?;
        if want_grad && lambda != 0.0 {
            d_rows.scaled_add(lambda, &model.backward(&cache, &d_hidden, None));
        }

        if let Some(grad) = grad {
            for (pos, set) in generated {
                let g = generators::backward(set, table, params, &d_rows.row(pos).to_owned())?;
                *grad += &g.params;
            }
        }
        Ok((l_p, l_d))
    }
}

/// Keeps the longest word prefix for which both sides fit in `max_len`
/// tokens. Returns `None` if not even one word fits.
pub fn truncate_pair(pair: AugmentedPair, max_len: usize) -> Option<AugmentedPair> {
    let fits = |k: usize| pair.s_p.spans[k].end <= max_len && pair.s_prime.spans[k].end <= max_len;
    let keep = (0..pair.s_p.spans.len()).take_while(|&k| fits(k)).count();
    if keep == 0 {
        return None;
    }
    if keep == pair.s_p.spans.len() {
        return Some(pair);
    }
    let cut = |s: &Segmented| Segmented {
        tokens: s.tokens[..s.spans[keep - 1].end].to_vec(),
        spans: s.spans[..keep].to_vec(),
    };
    let s_prime = cut(&pair.s_prime);
    let unseen = pair
        .unseen
        .iter()
        .copied()
        .filter(|&p| p < s_prime.tokens.len())
        .collect();
    Some(AugmentedPair {
        s_p: cut(&pair.s_p),
        s_prime,
        unseen,
    })
}

/// Trains generator parameters with the encoder held fixed.
pub fn train_generator(
    model: &PretrainedModel,
    segmenter: &SegmentationModel,
    sentences: &[Segmented],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sentences: Vec<&Segmented> = sentences.iter().filter(|s| !s.tokens.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = model.vocab();
    let mut params = GeneratorParams::init(config.kind, model.dim(), config.seed)
        .with_prefactor(config.verbatim_prefactor);
    let mut ctx = PairContext::new(model, segmenter, config.seed);
    let mut adam = Adam::new(params.weights().len());
    let mut rng = rng::seeded(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    let mut checkpoints = vec![(0, params.clone())];

    for step in 0..config.steps {
        let mut grad = Array2::zeros(params.weights().raw_dim());
        let (mut sum_p, mut sum_d, mut used) = (0.0, 0.0, 0usize);
        for _ in 0..config.batch_size {
            let s_p = sentences[rng.random_range(0..sentences.len())];
            let pair = augment(s_p, vocab, &mut rng, &config.augment);
            let Some(pair) = truncate_pair(pair, model.config().max_seq_len) else {
                continue;
            };
            let mask_seed = rng.random::<u64>();
            let (l_p, l_d) = ctx.pair_loss(&params, &pair, config.lambda, mask_seed, Some(&mut grad))?;
            sum_p += l_p;
            sum_d += l_d;
            used += 1;
        }
        if used == 0 {
            return Err(Error::Config(format!(
                "no sentence fits max_seq_len {}",
                model.config().max_seq_len
            )));
        }
        let n = used as f64;
        let (l_p, l_d) = (sum_p / n, sum_d / n);
        let total = total_loss(l_p, l_d, config.lambda);
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("L_p {l_p}, L_d {l_d}"),
            });
        }
        curve.push(LossRecord { step, l_p, l_d, total });

        grad /= n;
        clip_global_norm(&mut [grad.as_slice_mut().expect("standard layout")], config.clip_norm);
        let lr = config.schedule.at(step);
        adam.step(
            params.weights_mut().as_slice_mut().expect("standard layout"),
            grad.as_slice().expect("standard layout"),
            lr,
        );
        if params.weights().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "non-finite generator parameter".into(),
            });
        }
        let taken = step + 1;
        if taken == config.steps || (config.checkpoint_every > 0 && taken % config.checkpoint_every == 0) {
            checkpoints.push((taken, params.clone()));
        }
    }
    Ok(TrainOutcome {
        params,
        curve,
        checkpoints,
    })
}
