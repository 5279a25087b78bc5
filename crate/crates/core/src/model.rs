//! Tokenizer + encoder + head, wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneCache, EncoderConfig, Mode, TinyBackbone};
use crate::error::Result;
use crate::fusion::{FusionConfig, GaussianPrediction, Head, HeadCache, HeadKind, TargetScaling};
use crate::params::Grads;
use crate::stats::mix_seed;
use crate::templater::FeatureExample;
use crate::tokenizer::{assemble_sequence, TextTokenizer, TokenSequence, Tokenizer};
use crate::uncertainty::StochasticRegressor;

#[derive(Debug, Clone)]
pub struct QosModel {
    pub tokenizer: Tokenizer,
    pub backbone: TinyBackbone,
    pub head: Head,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    head: HeadCache,
}

impl QosModel {
    /// Fresh model; `encoder.vocab_size` is taken from the tokenizer.
    pub fn new(tokenizer: Tokenizer, mut encoder: EncoderConfig, fusion: FusionConfig, kind: HeadKind) -> Result<Self> {
        encoder.vocab_size = tokenizer.vocab_size();
        let backbone = TinyBackbone::new(encoder.clone())?;
        let head = Head::new(
            kind,
            fusion,
            encoder.hidden_dim,
            encoder.num_layers,
            mix_seed(encoder.seed, &[0x4EAD]),
        )?;
        Ok(QosModel {
            tokenizer,
            backbone,
            head,
        })
    }

    pub fn set_scaling(&mut self, scaling: TargetScaling) {
        self.head.scaling = scaling;
    }

    pub fn sequence(&self, example: &FeatureExample) -> Result<TokenSequence> {
        let (user, service) = example.parts();
        assemble_sequence(user, service, &self.tokenizer, self.backbone.config().block_size)
    }

    pub fn forward(
        &self,
        seq: &TokenSequence,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(GaussianPrediction, ForwardCache)> {
        let (states, backbone) = self.backbone.forward_prefix(seq, mode, rng)?;
        let views: Vec<_> = states.iter().map(|s| s.view()).collect();
        let keep = vec![true; seq.real_len()];
        let (pred, head) = self.head.forward(&views, &keep, mode, rng)?;
        Ok((pred, ForwardCache { backbone, head }))
    }

    /// Gradients of `d_mu * mu + d_log_var * log_var` accumulated into the
    /// backbone and head buffers.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_mu: f64,
        d_log_var: f64,
        backbone_grads: &mut Grads,
        head_grads: &mut Grads,
    ) {
        let d_states = self.head.backward(&cache.head, d_mu, d_log_var, head_grads);
        self.backbone.backward(&cache.backbone, &d_states, backbone_grads);
    }

    pub fn predict_deterministic(&self, seq: &TokenSequence) -> Result<GaussianPrediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(seq, Mode::EvalDeterministic, &mut rng)?.0)
    }
}

impl StochasticRegressor for QosModel {
    fn sample(&self, seq: &TokenSequence, mode: Mode, seed: u64) -> Result<GaussianPrediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.forward(seq, mode, &mut rng)?.0)
    }
}
