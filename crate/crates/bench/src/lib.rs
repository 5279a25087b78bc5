//! Fixtures shared by the benchmarks and the scaling test.

use qosnet_core::synthetic::learnability_corpus;
use qosnet_core::templater::build_examples;
use qosnet_core::{EncoderConfig, FusionConfig, HeadKind, QosModel, TokenSequence, Tokenizer};

/// A model over the synthetic corpus vocabulary with `num_layers` blocks.
pub fn model(num_layers: usize, block_size: usize) -> QosModel {
    let corpus = learnability_corpus(32, 16, 0.02, 42);
    let examples = build_examples(&corpus.records, &corpus.users, &corpus.services).expect("synthetic ids resolve");
    let tokenizer = Tokenizer::build(examples.iter().map(|e| e.feature.as_str()), None);
    let encoder = EncoderConfig {
        num_layers,
        block_size,
        ..Default::default()
    };
    let fusion = FusionConfig {
        top_k: num_layers,
        ..Default::default()
    };
    QosModel::new(tokenizer, encoder, fusion, HeadKind::MultiPool).expect("valid fixture config")
}

/// A sequence with every position filled by a real token.
pub fn full_sequence(model: &QosModel) -> TokenSequence {
    let block = model.backbone.config().block_size;
    let vocab = model.tokenizer.tokens().len() as u32;
    TokenSequence {
        ids: (0..block as u32).map(|i| 5 + i % (vocab - 5)).collect(),
        mask: vec![1; block],
    }
}

/// A templated example encoded at the model's block size.
pub fn feature_sequence(model: &QosModel) -> TokenSequence {
    let corpus = learnability_corpus(2, 2, 0.02, 42);
    let examples = build_examples(&corpus.records, &corpus.users, &corpus.services).expect("synthetic ids resolve");
    model.sequence(&examples[0]).expect("fixture fits the block")
}
