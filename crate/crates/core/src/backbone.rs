//! Transformer encoder exposing every block output.
//!
//! [`TinyBackbone`] is a small pre-LayerNorm encoder trained from scratch:
//! token + learned position embeddings followed by `num_layers` blocks of
//! multi-head self-attention and a GELU feed-forward network (width `4d`),
//! each wrapped in a residual connection with dropout on the branch output.
//! Other encoders can be plugged in through the [`Backbone`] trait.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, dropout_mask, gelu, gelu_grad, AttentionCache, LayerNorm, LayerNormCache, Linear, SelfAttention,
};
use crate::params::{Grads, Init, ParamGroup, ParamId, ParamStore};
use crate::stats::mix_seed;
use crate::tokenizer::TokenSequence;

pub const FFN_MULTIPLIER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub block_size: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            block_size: 128,
            vocab_size: 0,
            dropout_p: 0.1,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers < 1 {
            return fail("encoder needs at least one layer".into());
        }
        if self.hidden_dim < 8 {
            return fail(format!("hidden_dim {} < 8", self.hidden_dim));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.block_size < 8 {
            return fail(format!("block_size {} < 8", self.block_size));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    EvalDeterministic,
    EvalMc,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        !matches!(self, Mode::EvalDeterministic)
    }
}

/// Per-block outputs, embedding output excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub states: Vec<Array2<f64>>,
    pub mask: Vec<u8>,
}

impl LayerStates {
    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.states.iter().map(|s| s.view()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub block_size: usize,
}

/// Plug-in contract for encoders: sequence in, per-layer states out.
pub trait Backbone {
    fn descriptor(&self) -> BackboneDescriptor;

    /// `stream` selects the dropout RNG stream so concurrent MC calls stay
    /// reproducible; it is ignored in [`Mode::EvalDeterministic`].
    fn encode(&self, seq: &TokenSequence, mode: Mode, stream: u64) -> Result<LayerStates>;
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    drop_attn: Option<Array2<f64>>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct BackboneCache {
    ids: Vec<u32>,
    drop_embed: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
pub struct TinyBackbone {
    config: EncoderConfig,
    pub params: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
}

impl TinyBackbone {
    /// Randomly initialized under `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let token_embedding = params.add(
            "embedding.token",
            ParamGroup::Embedding,
            (config.vocab_size, d),
            Init::Normal(0.1),
            &mut rng,
        );
        let position_embedding = params.add(
            "embedding.position",
            ParamGroup::Embedding,
            (config.block_size, d),
            Init::Normal(0.1),
            &mut rng,
        );
        let blocks = (0..config.num_layers)
            .map(|i| {
                let g = ParamGroup::Layer(i);
                let name = format!("layer{i}");
                Block {
                    ln1: LayerNorm::new(&mut params, &format!("{name}.ln_attn"), d, &mut rng),
                    attn: SelfAttention::new(&mut params, &format!("{name}.attn"), g, d, config.num_heads, &mut rng),
                    ln2: LayerNorm::new(&mut params, &format!("{name}.ln_ffn"), d, &mut rng),
                    ff_in: Linear::new(
                        &mut params,
                        &format!("{name}.ffn_in"),
                        g,
                        (d, FFN_MULTIPLIER * d),
                        &mut rng,
                    ),
                    ff_out: Linear::new(
                        &mut params,
                        &format!("{name}.ffn_out"),
                        g,
                        (FFN_MULTIPLIER * d, d),
                        &mut rng,
                    ),
                }
            })
            .collect();
        Ok(TinyBackbone {
            config,
            params,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    /// Rebuilds the layout for `config` and installs `data` as the weights.
    pub fn from_weights(config: EncoderConfig, data: Vec<f64>) -> Result<Self> {
        let mut bb = Self::new(config)?;
        if data.len() != bb.params.len() {
            return Err(Error::Checkpoint(format!(
                "backbone expects {} weights, found {}",
                bb.params.len(),
                data.len()
            )));
        }
        bb.params.data = data;
        Ok(bb)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.block_size {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds block size {}",
                ids.len(),
                self.config.block_size
            )));
        }
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(bad) => Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Forward pass over `ids` (length <= block size). Positions with
    /// `key_mask[j] == false` are invisible to attention.
    pub fn forward(
        &self,
        ids: &[u32],
        key_mask: &[bool],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Array2<f64>>, BackboneCache)> {
        self.check_ids(ids)?;
        let p = &self.params;
        let n = ids.len();
        let d = self.config.hidden_dim;
        let drop = self.config.dropout_p;
        let active = mode.dropout_active();

        let tok = p.view(self.token_embedding);
        let mut x = p.view(self.position_embedding).slice(s![..n, ..]).to_owned();
        for (mut row, &id) in x.outer_iter_mut().zip(ids) {
            row += &tok.row(id as usize);
        }
        let drop_embed = dropout_mask((n, d), drop, active, rng);
        x = apply_mask(x, &drop_embed);

        let mut states = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = b.ln1.forward(p, x.view());
            let (a, attn) = b.attn.forward(p, h1.view(), key_mask);
            let drop_attn = dropout_mask((n, d), drop, active, rng);
            let x1 = x + apply_mask(a, &drop_attn);
            let (h2, ln2) = b.ln2.forward(p, x1.view());
            let pre_act = b.ff_in.forward(p, h2.view());
            let act = pre_act.mapv(gelu);
            let f = b.ff_out.forward(p, act.view());
            let drop_ffn = dropout_mask((n, d), drop, active, rng);
            let out = x1 + apply_mask(f, &drop_ffn);
            states.push(out.clone());
            caches.push(BlockCache {
                ln1,
                attn,
                drop_attn,
                ln2,
                h2,
                pre_act,
                act,
                drop_ffn,
            });
            x = out;
        }
        if let Some(bad) = states.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::numeric(format!("encoder layer {bad}"), "non-finite activation"));
        }
        Ok((
            states,
            BackboneCache {
                ids: ids.to_vec(),
                drop_embed,
                blocks: caches,
            },
        ))
    }

    /// Back-propagates gradients given w.r.t. each block output.
    /// `d_states[i]` may be `None` when layer `i` does not feed the loss directly.
    pub fn backward(&self, cache: &BackboneCache, d_states: &[Option<Array2<f64>>], grads: &mut Grads) {
        let p = &self.params;
        let n = cache.ids.len();
        let d = self.config.hidden_dim;
        let mut dx: Array2<f64> = Array2::zeros((n, d));
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some(ds) = &d_states[i] {
                dx += ds;
            }
            let dout = dx;
            let df = apply_mask(dout.clone(), &c.drop_ffn);
            let dact = b.ff_out.backward(p, grads, c.act.view(), df.view());
            let dpre = dact * &c.pre_act.mapv(gelu_grad);
            let dh2 = b.ff_in.backward(p, grads, c.h2.view(), dpre.view());
            let dx1 = dout + b.ln2.backward(p, grads, &c.ln2, dh2.view());
            let da = apply_mask(dx1.clone(), &c.drop_attn);
            let dh1 = b.attn.backward(p, grads, &c.attn, da.view());
            dx = dx1 + b.ln1.backward(p, grads, &c.ln1, dh1.view());
        }
        let de = apply_mask(dx, &cache.drop_embed);
        {
            let mut gt = grads.get_mut(p, self.token_embedding);
            for (row, &id) in de.outer_iter().zip(&cache.ids) {
                let mut r = gt.row_mut(id as usize);
                r += &row;
            }
        }
        let mut gp = grads.get_mut(p, self.position_embedding);
        let mut head = gp.slice_mut(s![..n, ..]);
        head += &de;
    }

    /// Encodes only the real-token prefix of `seq`. Unmasked outputs are
    /// identical to a full-block pass since padding is never attended to.
    pub fn forward_prefix(
        &self,
        seq: &TokenSequence,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Array2<f64>>, BackboneCache)> {
        let ids = seq.real_ids();
        if ids.is_empty() {
            return Err(Error::Input("sequence has no real tokens".into()));
        }
        self.forward(ids, &vec![true; ids.len()], mode, rng)
    }
}

impl Backbone for TinyBackbone {
    fn descriptor(&self) -> BackboneDescriptor {
        BackboneDescriptor {
            num_layers: self.config.num_layers,
            hidden_dim: self.config.hidden_dim,
            block_size: self.config.block_size,
        }
    }

    fn encode(&self, seq: &TokenSequence, mode: Mode, stream: u64) -> Result<LayerStates> {
        if seq.ids.len() != self.config.block_size || seq.mask.len() != seq.ids.len() {
            return Err(Error::Input(format!(
                "sequence length {} does not match block size {}",
                seq.ids.len(),
                self.config.block_size
            )));
        }
        let key_mask: Vec<bool> = seq.mask.iter().map(|&m| m == 1).collect();
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::Input("sequence has no real tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, &[stream]));
        let (states, _) = self.forward(&seq.ids, &key_mask, mode, &mut rng)?;
        Ok(LayerStates {
            states,
            mask: seq.mask.clone(),
        })
    }
}
