//! Top-K layer fusion, multi-pooling and the Gaussian regression head.
//!
//! The sequence vector is `mean + max + attention` over the unmasked rows of
//! the averaged top-K block outputs. Attention pooling scores each token with
//! a learned query, `q . h_i / sqrt(d)`, softmaxed over unmasked tokens. A
//! two-layer GELU MLP maps the vector to `(mu, log_var)`.
//!
//! [`HeadKind::Cls`] is the ablation head: the last layer's first-position
//! vector goes straight into the same MLP.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::nn::{apply_mask, dropout_mask, gelu, gelu_grad, masked_softmax, Linear};
use crate::params::{Grads, Init, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
    Attention,
}

pub const ALL_POOLINGS: [Pooling; 3] = [Pooling::Mean, Pooling::Max, Pooling::Attention];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Top-K fusion + multi-pooling.
    MultiPool,
    /// First-position vector of the last layer only.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub top_k: usize,
    pub pooling: Vec<Pooling>,
    /// MLP width; 0 means "same as the encoder hidden size".
    pub head_hidden: usize,
    pub dropout_p: f64,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            top_k: 4,
            pooling: ALL_POOLINGS.to_vec(),
            head_hidden: 0,
            dropout_p: 0.1,
            log_var_min: -10.0,
            log_var_max: 10.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.top_k < 1 || self.top_k > num_layers {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={num_layers}",
                self.top_k
            )));
        }
        if self.pooling.is_empty() {
            return Err(Error::Config("at least one pooling strategy is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.log_var_min < self.log_var_max) {
            return Err(Error::Config("log_var_min must be below log_var_max".into()));
        }
        Ok(())
    }

    fn uses(&self, p: Pooling) -> bool {
        self.pooling.contains(&p)
    }
}

/// Affine map from the network's standardized output to target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        TargetScaling { shift: 0.0, scale: 1.0 }
    }
}

impl TargetScaling {
    /// Mean and standard deviation of `targets` (scale floored at 1e-6).
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::default();
        }
        let n = targets.len() as f64;
        let shift = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - shift).powi(2)).sum::<f64>() / n;
        TargetScaling {
            shift,
            scale: var.sqrt().max(1e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub log_var: f64,
}

impl GaussianPrediction {
    pub fn var(&self) -> f64 {
        self.log_var.exp()
    }
}

/// Elementwise mean of the last `k` layer matrices.
pub fn fuse_layers(states: &[ArrayView2<f64>], k: usize) -> Result<Array2<f64>> {
    let n = states.len();
    if k < 1 || k > n {
        return Err(Error::Config(format!("cannot fuse top {k} of {n} layers")));
    }
    let mut out = states[n - k].to_owned();
    for s in &states[n - k + 1..] {
        out += s;
    }
    if k > 1 {
        out /= k as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    fused: Array2<f64>,
    keep: Vec<bool>,
    count: usize,
    argmax: Option<Vec<usize>>,
    attn: Option<Array1<f64>>,
    use_mean: bool,
}

/// Sums the enabled pooled vectors over the rows where `keep` is true.
pub fn multi_pool(
    fused: ArrayView2<f64>,
    keep: &[bool],
    pooling: &[Pooling],
    query: Option<ArrayView1<f64>>,
) -> Result<(Array1<f64>, PoolCache)> {
    let (n, d) = fused.dim();
    if keep.len() != n {
        return Err(Error::Input(format!("mask length {} != {n} tokens", keep.len())));
    }
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::Input("cannot pool a fully masked sequence".into()));
    }
    let rows = || fused.outer_iter().zip(keep).filter(|(_, &k)| k).map(|(r, _)| r);
    let mut v = Array1::zeros(d);
    let use_mean = pooling.contains(&Pooling::Mean);
    if use_mean {
        let mut acc = Array1::<f64>::zeros(d);
        for r in rows() {
            acc += &r;
        }
        v += &(acc / count as f64);
    }
    let argmax = if pooling.contains(&Pooling::Max) {
        let mut best = vec![usize::MAX; d];
        for (i, r) in fused.outer_iter().enumerate().filter(|(i, _)| keep[*i]) {
            for j in 0..d {
                if best[j] == usize::MAX || r[j] > fused[[best[j], j]] {
                    best[j] = i;
                }
            }
        }
        for (j, &i) in best.iter().enumerate() {
            v[j] += fused[[i, j]];
        }
        Some(best)
    } else {
        None
    };
    let attn = if pooling.contains(&Pooling::Attention) {
        let q = query.ok_or_else(|| Error::Config("attention pooling needs a query vector".into()))?;
        let scores = fused.dot(&q) / (d as f64).sqrt();
        let probs = masked_softmax(scores.view(), keep);
        v += &probs.dot(&fused);
        Some(probs)
    } else {
        None
    };
    Ok((
        v,
        PoolCache {
            fused: fused.to_owned(),
            keep: keep.to_vec(),
            count,
            argmax,
            attn,
            use_mean,
        },
    ))
}

/// Returns d(fused) and, when attention pooling is on, d(query).
pub fn multi_pool_backward(
    cache: &PoolCache,
    query: Option<ArrayView1<f64>>,
    dv: ArrayView1<f64>,
) -> (Array2<f64>, Option<Array1<f64>>) {
    let (n, d) = cache.fused.dim();
    let mut dfused = Array2::zeros((n, d));
    if cache.use_mean {
        let share = &dv / cache.count as f64;
        for (mut row, _) in dfused.outer_iter_mut().zip(&cache.keep).filter(|(_, &k)| k) {
            row += &share;
        }
    }
    if let Some(best) = &cache.argmax {
        for (j, &i) in best.iter().enumerate() {
            dfused[[i, j]] += dv[j];
        }
    }
    let mut dq = None;
    if let (Some(probs), Some(q)) = (&cache.attn, query) {
        let scale = 1.0 / (d as f64).sqrt();
        // d/dh_i of sum_i p_i h_i, then through the softmax scores.
        let dp = cache.fused.dot(&dv);
        let inner = probs.dot(&dp);
        let ds = probs * &(dp - inner);
        let mut grad_q = Array1::zeros(d);
        for (i, mut row) in dfused.outer_iter_mut().enumerate() {
            if !cache.keep[i] {
                continue;
            }
            row.scaled_add(probs[i], &dv);
            row.scaled_add(ds[i] * scale, &q);
            grad_q.scaled_add(ds[i] * scale, &cache.fused.row(i));
        }
        dq = Some(grad_q);
    }
    (dfused, dq)
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    drop_in: Option<Array2<f64>>,
    pre_act: Array2<f64>,
    hidden: Array2<f64>,
    drop_hidden: Option<Array2<f64>>,
    clamped: bool,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    n_layers: usize,
    n_tokens: usize,
    pool: Option<PoolCache>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct Head {
    kind: HeadKind,
    config: FusionConfig,
    dim: usize,
    pub scaling: TargetScaling,
    pub params: ParamStore,
    query: Option<ParamId>,
    hidden: Linear,
    output: Linear,
}

impl Head {
    pub fn new(kind: HeadKind, config: FusionConfig, dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        if kind == HeadKind::MultiPool {
            config.validate(num_layers)?;
        } else if !(0.0..1.0).contains(&config.dropout_p) {
            return Err(Error::Config(format!(
                "head dropout {} outside [0, 1)",
                config.dropout_p
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let width = if config.head_hidden == 0 {
            dim
        } else {
            config.head_hidden
        };
        let query = (kind == HeadKind::MultiPool && config.uses(Pooling::Attention)).then(|| {
            params.add(
                "head.attention_query",
                ParamGroup::Head,
                (1, dim),
                Init::Normal(1.0 / (dim as f64).sqrt()),
                &mut rng,
            )
        });
        let hidden = Linear::new(&mut params, "head.hidden", ParamGroup::Head, (dim, width), &mut rng);
        let output = Linear::new(&mut params, "head.output", ParamGroup::Head, (width, 2), &mut rng);
        Ok(Head {
            kind,
            config,
            dim,
            scaling: TargetScaling::default(),
            params,
            query,
            hidden,
            output,
        })
    }

    pub fn from_weights(
        kind: HeadKind,
        config: FusionConfig,
        dim: usize,
        num_layers: usize,
        scaling: TargetScaling,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut head = Self::new(kind, config, dim, num_layers, 0)?;
        if data.len() != head.params.len() {
            return Err(Error::Checkpoint(format!(
                "head expects {} weights, found {}",
                head.params.len(),
                data.len()
            )));
        }
        head.params.data = data;
        head.scaling = scaling;
        Ok(head)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn hidden_layer(&self) -> Linear {
        self.hidden
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    fn query_view(&self) -> Option<ArrayView1<'_, f64>> {
        self.query.map(|q| self.params.view(q).index_axis_move(Axis(0), 0))
    }

    /// MLP from a sequence vector to `(mu, log_var)`.
    pub fn regress(
        &self,
        v: ArrayView1<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(GaussianPrediction, MlpCache)> {
        if v.len() != self.dim {
            return Err(Error::Input(format!(
                "sequence vector has {} dims, head expects {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("head.input", "non-finite sequence vector"));
        }
        let p = &self.params;
        let active = mode.dropout_active();
        let rate = self.config.dropout_p;
        let input = v.to_owned().insert_axis(Axis(0));
        let drop_in = dropout_mask(input.dim(), rate, active, rng);
        let x = apply_mask(input.clone(), &drop_in);
        let pre_act = self.hidden.forward(p, x.view());
        if pre_act.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("head.hidden", "non-finite activation"));
        }
        let act = pre_act.mapv(gelu);
        let drop_hidden = dropout_mask(act.dim(), rate, active, rng);
        let hidden = apply_mask(act, &drop_hidden);
        let out = self.output.forward(p, hidden.view());
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("head.output", "non-finite activation"));
        }
        let mu = self.scaling.shift + self.scaling.scale * out[[0, 0]];
        let raw = out[[0, 1]] + 2.0 * self.scaling.scale.ln();
        let log_var = raw.clamp(self.config.log_var_min, self.config.log_var_max);
        Ok((
            GaussianPrediction { mu, log_var },
            MlpCache {
                input,
                drop_in,
                pre_act,
                hidden,
                drop_hidden,
                clamped: log_var != raw,
            },
        ))
    }

    /// Accumulates MLP gradients and returns d(sequence vector).
    pub fn regress_backward(&self, c: &MlpCache, d_mu: f64, d_log_var: f64, grads: &mut Grads) -> Array1<f64> {
        let p = &self.params;
        let d_lv = if c.clamped { 0.0 } else { d_log_var };
        let d_out = ndarray::arr2(&[[d_mu * self.scaling.scale, d_lv]]);
        let d_hidden = self.output.backward(p, grads, c.hidden.view(), d_out.view());
        let d_act = apply_mask(d_hidden, &c.drop_hidden);
        let d_pre = d_act * &c.pre_act.mapv(gelu_grad);
        let x = apply_mask(c.input.clone(), &c.drop_in);
        let dx = self.hidden.backward(p, grads, x.view(), d_pre.view());
        apply_mask(dx, &c.drop_in).index_axis_move(Axis(0), 0)
    }

    /// Full head over per-layer states; `keep` marks real tokens.
    pub fn forward(
        &self,
        states: &[ArrayView2<f64>],
        keep: &[bool],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(GaussianPrediction, HeadCache)> {
        if states.is_empty() {
            return Err(Error::Input("no layer states".into()));
        }
        match self.kind {
            HeadKind::MultiPool => {
                let fused = fuse_layers(states, self.config.top_k)?;
                let (v, pool) = multi_pool(fused.view(), keep, &self.config.pooling, self.query_view())?;
                let (pred, mlp) = self.regress(v.view(), mode, rng)?;
                Ok((
                    pred,
                    HeadCache {
                        n_layers: states.len(),
                        n_tokens: states[0].nrows(),
                        pool: Some(pool),
                        mlp,
                    },
                ))
            }
            HeadKind::Cls => {
                if !keep.first().copied().unwrap_or(false) {
                    return Err(Error::Input("first position is masked".into()));
                }
                let last = states[states.len() - 1];
                let (pred, mlp) = self.regress(last.row(0), mode, rng)?;
                Ok((
                    pred,
                    HeadCache {
                        n_layers: states.len(),
                        n_tokens: states[0].nrows(),
                        pool: None,
                        mlp,
                    },
                ))
            }
        }
    }

    /// Returns gradients w.r.t. each layer state (`None` for layers the head
    /// does not read).
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_mu: f64,
        d_log_var: f64,
        grads: &mut Grads,
    ) -> Vec<Option<Array2<f64>>> {
        let dv = self.regress_backward(&cache.mlp, d_mu, d_log_var, grads);
        let n_layers = cache.n_layers;
        let mut out = vec![None; n_layers];
        match (&cache.pool, self.kind) {
            (Some(pool), HeadKind::MultiPool) => {
                let (dfused, dq) = multi_pool_backward(pool, self.query_view(), dv.view());
                if let (Some(dq), Some(q)) = (dq, self.query) {
                    let mut g = grads.get_mut(&self.params, q);
                    let mut row = g.row_mut(0);
                    row += &dq;
                }
                let k = self.config.top_k;
                let share = dfused / k as f64;
                for slot in &mut out[n_layers - k..] {
                    *slot = Some(share.clone());
                }
            }
            _ => {
                // Only row 0 of the last layer was read.
                let mut d = Array2::zeros((cache.n_tokens, self.dim));
                d.row_mut(0).assign(&dv);
                out[n_layers - 1] = Some(d);
            }
        }
        out
    }
}
