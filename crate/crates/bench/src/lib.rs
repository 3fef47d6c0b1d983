//! Fixtures shared by the benchmarks in `benches/`.

use gatelora::corpus::{generate_corpus, mix_seed, CorpusConfig, N_ASPECTS};
use gatelora::model::ParamGroup;
use gatelora::trainer::{AdamW, LoopConfig};
use gatelora::{AdapterConfig, Corpus, Model, ModelConfig, Tensor};

/// Deterministic matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| (mix_seed(&[seed, i as u64]) >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

pub struct Fixture {
    pub corpus: Corpus,
    pub model: Model,
    pub trainable: Vec<bool>,
    pub opt: AdamW,
    pub cfg: LoopConfig,
}

/// Toy-size corpus and a gated model (n = 4, r = 4) on an untrained base.
pub fn fixture() -> Fixture {
    let corpus = generate_corpus(&CorpusConfig {
        train_per_aspect: vec![32; N_ASPECTS],
        ..Default::default()
    })
    .expect("default corpus");
    let base = Model::new_base(
        ModelConfig {
            vocab_size: corpus.vocab.len(),
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 48,
        },
        1,
    )
    .expect("valid config");
    let model = base
        .with_adapters(
            AdapterConfig {
                n_loras: 4,
                rank: 4,
                alpha: 8.0,
                ..Default::default()
            },
            2,
        )
        .expect("valid adapters");
    let trainable: Vec<bool> = model.params.iter().map(|p| p.group != ParamGroup::Base).collect();
    let sizes: Vec<usize> = model
        .params
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p.tensor.numel())
        .collect();
    let cfg = LoopConfig {
        lr: 3e-3,
        epochs: 1,
        batch_size: 32,
        weight_decay: 0.01,
        grad_clip: 1.0,
        dropout: 0.1,
        loss: Default::default(),
        seed: 0,
    };
    Fixture {
        corpus,
        opt: AdamW::new(cfg.lr, cfg.weight_decay, &sizes),
        model,
        trainable,
        cfg,
    }
}
