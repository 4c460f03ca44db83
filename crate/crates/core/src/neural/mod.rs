//! A compact pre-norm transformer encoder trained as a masked language model.
//!
//! It plays the pretrained backbone: it owns the source embedding table
//! (tied between input and output), produces final-layer hidden states for
//! distillation, and supplies the masked-token loss. Inputs are embedding
//! rows rather than ids so generated embeddings can be injected anywhere.
//!
//! Everything runs in `f64` with hand-written backward passes.

mod checkpoint;
mod layers;
pub mod optim;

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexicon::{EmbeddingMatrix, Vocabulary};
use crate::rng::{self, Rng};
use crate::segmentation::Segmented;

use layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, log_sum_exp, sinusoidal_positions,
    softmax_rows, softmax_rows_backward, NormCache,
};
pub use optim::{clip_global_norm, Adam, LrSchedule};

const POSITION_SCALE: f64 = 0.1;
const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            mask_fraction: 0.15,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::Config("mask_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// A named region of the flat backbone parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn mat<'a>(&self, v: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &v[self.range()]).expect("slot shape")
    }

    fn mat_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut v[self.range()]).expect("slot shape")
    }

    fn vec<'a>(&self, v: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&v[self.range()])
    }

    fn vec_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut v[self.range()])
    }

    pub(crate) fn shape(&self) -> Vec<usize> {
        if self.rows == 1 {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    attn_gain: Slot,
    attn_bias: Slot,
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ffn_gain: Slot,
    ffn_bias: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    mask_row: Slot,
    layers: Vec<LayerSlots>,
    final_gain: Slot,
    final_bias: Slot,
    names: Vec<(String, Slot)>,
    total: usize,
}

impl Layout {
    fn new(config: &EncoderConfig) -> Self {
        let d = config.dim;
        let f = config.ffn_dim;
        let mut names = Vec::new();
        let mut total = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot {
                offset: total,
                rows,
                cols,
            };
            total += rows * cols;
            names.push((name, s));
            s
        };
        let mask_row = slot("mask_row".into(), 1, d);
        let layers = (0..config.num_layers)
            .map(|l| LayerSlots {
                attn_gain: slot(format!("layer{l}.attn_norm.gain"), 1, d),
                attn_bias: slot(format!("layer{l}.attn_norm.bias"), 1, d),
                wq: slot(format!("layer{l}.attn.wq"), d, d),
                bq: slot(format!("layer{l}.attn.bq"), 1, d),
                wk: slot(format!("layer{l}.attn.wk"), d, d),
                bk: slot(format!("layer{l}.attn.bk"), 1, d),
                wv: slot(format!("layer{l}.attn.wv"), d, d),
                bv: slot(format!("layer{l}.attn.bv"), 1, d),
                wo: slot(format!("layer{l}.attn.wo"), d, d),
                bo: slot(format!("layer{l}.attn.bo"), 1, d),
                ffn_gain: slot(format!("layer{l}.ffn_norm.gain"), 1, d),
                ffn_bias: slot(format!("layer{l}.ffn_norm.bias"), 1, d),
                w1: slot(format!("layer{l}.ffn.w1"), d, f),
                b1: slot(format!("layer{l}.ffn.b1"), 1, f),
                w2: slot(format!("layer{l}.ffn.w2"), f, d),
                b2: slot(format!("layer{l}.ffn.b2"), 1, d),
            })
            .collect();
        let final_gain = slot("final_norm.gain".into(), 1, d);
        let final_bias = slot("final_norm.bias".into(), 1, d);
        Self {
            mask_row,
            layers,
            final_gain,
            final_bias,
            names,
            total,
        }
    }

    pub(crate) fn names(&self) -> &[(String, Slot)] {
        &self.names
    }
}

/// Where an input row came from, for routing its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    Table(usize),
    Mask,
    External,
}

/// Input rows with MLM corruption applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub rows: Array2<f64>,
    pub sources: Vec<RowSource>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Gradients with the same structure as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<f64>,
    pub embedding: Array2<f64>,
    pub output_bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &PretrainedModel) -> Self {
        Self {
            backbone: vec![0.0; model.backbone.len()],
            embedding: Array2::zeros(model.embedding.rows().raw_dim()),
            output_bias: Array1::zeros(model.output_bias.len()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.backbone.iter_mut().for_each(|v| *v *= factor);
        self.embedding *= factor;
        self.output_bias *= factor;
    }

    /// Routes input-row gradients to the table rows or mask row they came from.
    pub(crate) fn scatter_inputs(&mut self, layout: &Layout, sources: &[RowSource], d_inputs: &Array2<f64>) {
        for (source, grad) in sources.iter().zip(d_inputs.rows()) {
            match *source {
                RowSource::Table(id) => {
                    let mut row = self.embedding.row_mut(id);
                    row += &grad;
                }
                RowSource::Mask => {
                    let mut row = layout.mask_row.vec_mut(&mut self.backbone);
                    row += &grad;
                }
                RowSource::External => {}
            }
        }
    }
}

/// Mutable views of a norm's gain and bias gradients, which occupy adjacent
/// slots.
fn norm_grads(
    grads: Option<&mut Vec<f64>>,
    gain: Slot,
    bias: Slot,
) -> Option<(ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>)> {
    let buf = grads?;
    debug_assert_eq!(gain.offset + gain.len(), bias.offset);
    let (g, b) = buf[gain.offset..bias.offset + bias.len()].split_at_mut(gain.len());
    Some((ArrayViewMut1::from(g), ArrayViewMut1::from(b)))
}

struct LayerCache {
    norm1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    norm2: NormCache,
    b: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    pub hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedModel {
    config: EncoderConfig,
    layout: Layout,
    embedding: EmbeddingMatrix,
    output_bias: Array1<f64>,
    backbone: Vec<f64>,
    positions: Array2<f64>,
}

impl PretrainedModel {
    /// Randomly initialized model over `vocab`.
    pub fn init(vocab: Arc<Vocabulary>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let layout = Layout::new(&config);
        let mut rng = rng::seeded(config.seed);
        let d = config.dim;

        let emb_normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        let rows = Array2::from_shape_fn((vocab.len(), d), |_| emb_normal.sample(&mut rng));
        let embedding = EmbeddingMatrix::new(vocab, rows)?;

        let mut backbone = vec![0.0; layout.total];
        let mut fill = |slot: Slot, std: f64, rng: &mut Rng| {
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in &mut backbone[slot.range()] {
                *v = normal.sample(rng);
            }
        };
        let depth_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        fill(layout.mask_row, EMBEDDING_INIT_STD, &mut rng);
        for l in &layout.layers {
            let std_d = 1.0 / (d as f64).sqrt();
            let std_f = 1.0 / (config.ffn_dim as f64).sqrt();
            fill(l.wq, std_d, &mut rng);
            fill(l.wk, std_d, &mut rng);
            fill(l.wv, std_d, &mut rng);
            fill(l.wo, std_d * depth_scale, &mut rng);
            fill(l.w1, std_d, &mut rng);
            fill(l.w2, std_f * depth_scale, &mut rng);
        }
        for l in &layout.layers {
            backbone[l.attn_gain.range()].fill(1.0);
            backbone[l.ffn_gain.range()].fill(1.0);
        }
        backbone[layout.final_gain.range()].fill(1.0);

        let output_bias = Array1::zeros(embedding.len());
        let positions = sinusoidal_positions(config.max_seq_len, d, POSITION_SCALE);
        Ok(Self {
            config,
            layout,
            embedding,
            output_bias,
            backbone,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        self.embedding.vocab()
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    pub fn output_bias(&self) -> &Array1<f64> {
        &self.output_bias
    }

    /// Flat vector of every non-embedding parameter.
    pub fn backbone_params(&self) -> &[f64] {
        &self.backbone
    }

    pub fn mask_row(&self) -> ArrayView1<'_, f64> {
        self.layout.mask_row.vec(&self.backbone)
    }

    /// Same backbone over a different vocabulary (embedding table plus
    /// output bias).
    pub fn with_embedding(&self, embedding: EmbeddingMatrix, output_bias: Array1<f64>) -> Result<Self> {
        if embedding.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: embedding.dim(),
            });
        }
        if output_bias.len() != embedding.len() {
            return Err(Error::DimensionMismatch {
                expected: embedding.len(),
                found: output_bias.len(),
            });
        }
        Ok(Self {
            embedding,
            output_bias,
            ..self.clone()
        })
    }

    /// SHA-256 over everything except the embedding table and output bias.
    pub fn backbone_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.backbone {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn embed_ids(&self, ids: &[usize]) -> Array2<f64> {
        self.embedding.rows().select(Axis(0), ids)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_seq_len {
            return Err(Error::Overlength {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, inputs: ArrayView2<'_, f64>, positions: &[usize]) -> Result<ForwardCache> {
        let n = inputs.nrows();
        self.check_len(n)?;
        if inputs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: inputs.ncols(),
            });
        }
        if positions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: positions.len(),
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Overlength {
                len: p + 1,
                max: self.config.max_seq_len,
            });
        }
        let p = &self.backbone;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = inputs.to_owned() + &self.positions.select(Axis(0), positions);
        let mut caches = Vec::with_capacity(self.layout.layers.len());
        for l in &self.layout.layers {
            let (a, norm1) = layer_norm(&x, l.attn_gain.vec(p), l.attn_bias.vec(p));
            let q = a.dot(&l.wq.mat(p)) + &l.bq.vec(p);
            let k = a.dot(&l.wk.mat(p)) + &l.bk.vec(p);
            let v = a.dot(&l.wv.mat(p)) + &l.bv.vec(p);
            let mut ctx = Array2::zeros((n, self.dim()));
            let mut probs = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            x = x + ctx.dot(&l.wo.mat(p)) + &l.bo.vec(p);

            let (b, norm2) = layer_norm(&x, l.ffn_gain.vec(p), l.ffn_bias.vec(p));
            let pre = b.dot(&l.w1.mat(p)) + &l.b1.vec(p);
            let act = pre.mapv(gelu);
            x = x + act.dot(&l.w2.mat(p)) + &l.b2.vec(p);
            caches.push(LayerCache {
                norm1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                norm2,
                b,
                pre,
                act,
            });
        }
        let (hidden, final_norm) =
            layer_norm(&x, self.layout.final_gain.vec(p), self.layout.final_bias.vec(p));
        Ok(ForwardCache {
            layers: caches,
            final_norm,
            hidden,
        })
    }

    /// Final-layer hidden states for the given input rows.
    pub fn forward_hidden(&self, inputs: ArrayView2<'_, f64>, positions: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs, positions)?.hidden)
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.forward_hidden(self.embed_ids(ids).view(), &positions)
    }

    /// Gradient of the loss w.r.t. the input rows, given its gradient w.r.t.
    /// the final hidden states. Parameter gradients are accumulated into
    /// `grads` when provided.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_hidden: &Array2<f64>,
        mut grads: Option<&mut Vec<f64>>,
    ) -> Array2<f64> {
        let p = &self.backbone;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = &self.layout;

        let mut dx = layer_norm_backward(
            d_hidden,
            &cache.final_norm,
            lay.final_gain.vec(p),
            norm_grads(grads.as_deref_mut(), lay.final_gain, lay.final_bias),
        );

        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block
            let d_ffn_out = &dx;
            if let Some(g) = grads.as_deref_mut() {
                let mut w2 = l.w2.mat_mut(g);
                w2 += &c.act.t().dot(d_ffn_out);
                let mut b2 = l.b2.vec_mut(g);
                b2 += &d_ffn_out.sum_axis(Axis(0));
            }
            let d_act = d_ffn_out.dot(&l.w2.mat(p).t());
            let d_pre = d_act * &c.pre.mapv(gelu_grad);
            if let Some(g) = grads.as_deref_mut() {
                let mut w1 = l.w1.mat_mut(g);
                w1 += &c.b.t().dot(&d_pre);
                let mut b1 = l.b1.vec_mut(g);
                b1 += &d_pre.sum_axis(Axis(0));
            }
            let d_b = d_pre.dot(&l.w1.mat(p).t());
            dx = dx.clone()
                + layer_norm_backward(
                    &d_b,
                    &c.norm2,
                    l.ffn_gain.vec(p),
                    norm_grads(grads.as_deref_mut(), l.ffn_gain, l.ffn_bias),
                );

            // attention block
            if let Some(g) = grads.as_deref_mut() {
                let mut wo = l.wo.mat_mut(g);
                wo += &c.ctx.t().dot(&dx);
                let mut bo = l.bo.vec_mut(g);
                bo += &dx.sum_axis(Axis(0));
            }
            let d_ctx = dx.dot(&l.wo.mat(p).t());
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for (h, probs) in c.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let d_ctx_h = d_ctx.slice(cols).to_owned();
                let d_probs = d_ctx_h.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
                let d_scores = softmax_rows_backward(probs.view(), &d_probs) * scale;
                dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&d_scores.t().dot(&c.q.slice(cols)));
            }
            if let Some(g) = grads.as_deref_mut() {
                for (w, b, d) in [(l.wq, l.bq, &dq), (l.wk, l.bk, &dk), (l.wv, l.bv, &dv)] {
                    let mut wm = w.mat_mut(g);
                    wm += &c.a.t().dot(d);
                    let mut bm = b.vec_mut(g);
                    bm += &d.sum_axis(Axis(0));
                }
            }
            let d_a = dq.dot(&l.wq.mat(p).t()) + dk.dot(&l.wk.mat(p).t()) + dv.dot(&l.wv.mat(p).t());
            dx = dx.clone()
                + layer_norm_backward(
                    &d_a,
                    &c.norm1,
                    l.attn_gain.vec(p),
                    norm_grads(grads.as_deref_mut(), l.attn_gain, l.attn_bias),
                );
        }
        dx
    }

    /// Output logits over the vocabulary for each row of `hidden`.
    pub fn logits(&self, hidden: ArrayView2<'_, f64>) -> Array2<f64> {
        hidden.dot(&self.embedding.rows().t()) + &self.output_bias
    }

    /// Mean cross-entropy over the masked positions, plus its gradient
    /// w.r.t. the hidden states. Output-side gradients go to `grads`.
    pub(crate) fn mlm_head(
        &self,
        hidden: &Array2<f64>,
        mask_positions: &[usize],
        targets: &[usize],
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, Array2<f64>)> {
        if mask_positions.is_empty() {
            return Err(Error::Config("no masked positions".into()));
        }
        if mask_positions.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: mask_positions.len(),
                found: targets.len(),
            });
        }
        let vocab_size = self.embedding.len();
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TargetOutOfVocab { id, size: vocab_size });
        }
        if let Some(&pos) = mask_positions.iter().find(|&&m| m >= hidden.nrows()) {
            return Err(Error::Overlength {
                len: pos + 1,
                max: hidden.nrows(),
            });
        }
        let picked = hidden.select(Axis(0), mask_positions);
        let mut logits = self.logits(picked.view());
        let count = mask_positions.len() as f64;
        let mut loss = 0.0;
        for (row, &t) in logits.rows().into_iter().zip(targets) {
            loss += log_sum_exp(row) - row[t];
        }
        loss /= count;

        softmax_rows(&mut logits);
        let mut d_logits = logits;
        for (mut row, &t) in d_logits.rows_mut().into_iter().zip(targets) {
            row[t] -= 1.0;
            row /= count;
        }
        let d_picked = d_logits.dot(self.embedding.rows());
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        for (&pos, g) in mask_positions.iter().zip(d_picked.rows()) {
            let mut row = d_hidden.row_mut(pos);
            row += &g;
        }
        if let Some(g) = grads {
            g.embedding += &d_logits.t().dot(&picked);
            g.output_bias += &d_logits.sum_axis(Axis(0));
        }
        Ok((loss, d_hidden))
    }

    /// Masked-token loss for input rows fed at positions `0..n`.
    pub fn mlm_loss(&self, inputs: ArrayView2<'_, f64>, mask_positions: &[usize], targets: &[usize]) -> Result<f64> {
        let positions: Vec<usize> = (0..inputs.nrows()).collect();
        let hidden = self.forward_hidden(inputs, &positions)?;
        Ok(self.mlm_head(&hidden, mask_positions, targets, None)?.0)
    }

    /// Applies MLM corruption. `targets[i]` is the id to predict at position
    /// `i`, or `None` when the position may not be masked. Returns `None`
    /// when no position is eligible.
    pub fn mask_inputs(
        &self,
        mut rows: Array2<f64>,
        mut sources: Vec<RowSource>,
        targets: &[Option<usize>],
        rng: &mut impl rand::Rng,
    ) -> Option<MaskedInput> {
        let eligible: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if eligible.is_empty() {
            return None;
        }
        let mut chosen: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < self.config.mask_fraction)
            .collect();
        if chosen.is_empty() {
            chosen.push(eligible[rng.random_range(0..eligible.len())]);
        }
        for &pos in &chosen {
            let r: f64 = rng.random();
            if r < 0.8 {
                rows.row_mut(pos).assign(&self.mask_row());
                sources[pos] = RowSource::Mask;
            } else if r < 0.9 {
                let id = rng.random_range(0..self.embedding.len());
                rows.row_mut(pos).assign(&self.embedding.row(id));
                sources[pos] = RowSource::Table(id);
            }
        }
        let out_targets = chosen.iter().map(|&p| targets[p].expect("eligible")).collect();
        Some(MaskedInput {
            rows,
            sources,
            positions: chosen,
            targets: out_targets,
        })
    }

    /// Masks an id sequence for pretraining.
    pub fn mask_ids(&self, ids: &[usize], rng: &mut impl rand::Rng) -> MaskedInput {
        let rows = self.embed_ids(ids);
        let sources = ids.iter().map(|&id| RowSource::Table(id)).collect();
        let targets: Vec<Option<usize>> = ids.iter().map(|&id| Some(id)).collect();
        self.mask_inputs(rows, sources, &targets, rng)
            .expect("non-empty id sequence")
    }

    /// Loss and full parameter gradients for one masked example.
    pub fn example_gradients(&self, input: &MaskedInput, grads: &mut Gradients) -> Result<f64> {
        let positions: Vec<usize> = (0..input.rows.nrows()).collect();
        let cache = self.forward_cached(input.rows.view(), &positions)?;
        let (loss, d_hidden) = self.mlm_head(&cache.hidden, &input.positions, &input.targets, Some(grads))?;
        let d_inputs = self.backward(&cache, &d_hidden, Some(&mut grads.backbone));
        grads.scatter_inputs(&self.layout, &input.sources, &d_inputs);
        Ok(loss)
    }

    fn apply_update(&mut self, opt: &mut ModelOptimizer, grads: &Gradients, lr: f64) {
        opt.backbone.step(&mut self.backbone, &grads.backbone, lr);
        let emb = self
            .embedding
            .rows_mut()
            .as_slice_mut()
            .expect("standard layout");
        opt.embedding.step(emb, grads.embedding.as_slice().expect("standard layout"), lr);
        opt.output_bias.step(
            self.output_bias.as_slice_mut().expect("contiguous"),
            grads.output_bias.as_slice().expect("contiguous"),
            lr,
        );
    }

    fn all_finite(&self) -> bool {
        self.backbone.iter().all(|v| v.is_finite())
            && self.embedding.rows().iter().all(|v| v.is_finite())
            && self.output_bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct ModelOptimizer {
    backbone: Adam,
    embedding: Adam,
    output_bias: Adam,
}

impl ModelOptimizer {
    fn new(model: &PretrainedModel) -> Self {
        Self {
            backbone: Adam::new(model.backbone.len()),
            embedding: Adam::new(model.embedding.rows().len()),
            output_bias: Adam::new(model.output_bias.len()),
        }
    }
}

/// Masked-LM trainer. With `frozen` set, steps compute losses but leave every
/// parameter untouched.
pub struct MlmTrainer {
    model: PretrainedModel,
    opt: ModelOptimizer,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub frozen: bool,
    step: usize,
}

impl MlmTrainer {
    pub fn new(model: PretrainedModel, schedule: LrSchedule) -> Self {
        let opt = ModelOptimizer::new(&model);
        Self {
            model,
            opt,
            schedule,
            clip_norm: 1.0,
            frozen: false,
            step: 0,
        }
    }

    pub fn model(&self) -> &PretrainedModel {
        &self.model
    }

    pub fn into_model(self) -> PretrainedModel {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimization step on a batch of masked examples; returns the mean
    /// batch loss.
    pub fn step(&mut self, batch: &[MaskedInput]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut grads = Gradients::zeros_like(&self.model);
        let mut total = 0.0;
        for example in batch {
            total += self.model.example_gradients(example, &mut grads)?;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss {loss}"),
            });
        }
        grads.scale(1.0 / batch.len() as f64);
        if !self.frozen {
            clip_global_norm(
                &mut [
                    &mut grads.backbone,
                    grads.embedding.as_slice_mut().expect("standard layout"),
                    grads.output_bias.as_slice_mut().expect("contiguous"),
                ],
                self.clip_norm,
            );
            let lr = self.schedule.at(self.step);
            self.model.apply_update(&mut self.opt, &grads, lr);
            if !self.model.all_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: "non-finite parameter after update".into(),
                });
            }
        }
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Fraction of sentences held out for evaluation.
    pub heldout_fraction: f64,
    pub max_heldout: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            schedule: LrSchedule {
                peak: 2e-3,
                warmup_steps: 200,
                total_steps: 2000,
                final_fraction: 0.1,
            },
            clip_norm: 1.0,
            heldout_fraction: 0.05,
            max_heldout: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// `(step, mean batch loss)` for every step.
    pub train_curve: Vec<(usize, f64)>,
}

/// Looks up token ids of segmented sentences, truncated to `max_len`.
pub fn sentence_ids(sentences: &[Segmented], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<usize>>> {
    sentences
        .iter()
        .filter(|s| !s.tokens.is_empty())
        .map(|s| {
            s.tokens
                .iter()
                .take(max_len)
                .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.rendered())))
                .collect()
        })
        .collect()
}

/// Mean MLM loss over `sentences` with masks fixed by `seed`.
pub fn heldout_loss(model: &PretrainedModel, sentences: &[Vec<usize>], seed: u64) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for (i, ids) in sentences.iter().enumerate() {
        let mut rng = rng::derived(seed, 0xE7A1, i as u64);
        let masked = model.mask_ids(ids, &mut rng);
        total += model.mlm_loss(masked.rows.view(), &masked.positions, &masked.targets)?;
    }
    Ok(total / sentences.len() as f64)
}

/// Splits off a held-out tail; a single-sentence corpus is its own held-out
/// set.
pub(crate) fn split_heldout(ids: &[Vec<usize>], fraction: f64, max: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    if ids.len() < 2 {
        return (ids.to_vec(), ids.to_vec());
    }
    let held = ((ids.len() as f64 * fraction).ceil() as usize).clamp(1, max.max(1)).min(ids.len() - 1);
    let (train, heldout) = ids.split_at(ids.len() - held);
    (train.to_vec(), heldout.to_vec())
}

/// Trains a fresh model on the segmented corpus.
pub fn pretrain(
    sentences: &[Segmented],
    vocab: Arc<Vocabulary>,
    encoder: EncoderConfig,
    config: &PretrainConfig,
) -> Result<(PretrainedModel, PretrainReport)> {
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be positive".into()));
    }
    let ids = sentence_ids(sentences, &vocab, encoder.max_seq_len)?;
    if ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train, heldout) = split_heldout(&ids, config.heldout_fraction, config.max_heldout);
    let model = PretrainedModel::init(vocab, encoder)?;
    let eval_seed = config.seed ^ 0x5EED;
    let initial_heldout_loss = heldout_loss(&model, &heldout, eval_seed)?;

    let mut trainer = MlmTrainer::new(model, config.schedule);
    trainer.clip_norm = config.clip_norm;
    let mut rng = rng::seeded(config.seed);
    let mut train_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<MaskedInput> = (0..config.batch_size)
            .map(|_| {
                let ids = &train[rng.random_range(0..train.len())];
                trainer.model().mask_ids(ids, &mut rng)
            })
            .collect();
        let loss = trainer.step(&batch)?;
        train_curve.push((step, loss));
    }
    let model = trainer.into_model();
    let final_heldout_loss = heldout_loss(&model, &heldout, eval_seed)?;
    Ok((
        model,
        PretrainReport {
            initial_heldout_loss,
            final_heldout_loss,
            train_curve,
        },
    ))
}

pub use checkpoint::CHECKPOINT_HEADER;
