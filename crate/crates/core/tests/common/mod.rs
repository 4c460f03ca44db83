#![allow(dead_code)]

use std::sync::Arc;

use vocab_bridge::eval::{synthetic_shift, ShiftBenchmark, ShiftConfig};
use vocab_bridge::neural::{pretrain, EncoderConfig, LrSchedule, PretrainConfig, PretrainedModel};
use vocab_bridge::{build_vocabulary, learn_bpe, SegmentationModel, Segmented, Vocabulary};

pub struct Small {
    pub data: ShiftBenchmark,
    pub seg: SegmentationModel,
    pub vocab: Arc<Vocabulary>,
    pub sentences: Vec<Segmented>,
    pub model: PretrainedModel,
}

pub fn tiny_encoder(dim: usize) -> EncoderConfig {
    EncoderConfig {
        dim,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 2 * dim,
        max_seq_len: 64,
        ..EncoderConfig::default()
    }
}

pub fn schedule(peak: f64, steps: usize) -> LrSchedule {
    LrSchedule {
        peak,
        warmup_steps: (steps / 10).max(1).min(steps),
        total_steps: steps,
        final_fraction: 0.1,
    }
}

/// Synthetic upstream corpus, an 80-merge BPE model and a briefly
/// pretrained d=`dim` encoder.
pub fn small(dim: usize, pretrain_steps: usize) -> Small {
    let data = synthetic_shift(&ShiftConfig {
        upstream_sentences: 400,
        downstream_sentences: 200,
        ..ShiftConfig::default()
    })
    .unwrap();
    let seg = learn_bpe(&data.upstream, 80).unwrap();
    let vocab = Arc::new(build_vocabulary(&data.upstream, &seg).unwrap());
    let sentences = seg.segment_corpus(&data.upstream);
    let config = PretrainConfig {
        steps: pretrain_steps,
        batch_size: 8,
        schedule: schedule(3e-3, pretrain_steps),
        ..PretrainConfig::default()
    };
    let (model, _) = pretrain(&sentences, vocab.clone(), tiny_encoder(dim), &config).unwrap();
    Small {
        data,
        seg,
        vocab,
        sentences,
        model,
    }
}
