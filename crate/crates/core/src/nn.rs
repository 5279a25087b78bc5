//! Layers with explicit forward caches and hand-written backward passes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::params::{Grads, Init, ParamGroup, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights `in x out` drawn from N(0, 1/in), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        (fan_in, fan_out): (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add(
                format!("{name}.weight"),
                group,
                (fan_in, fan_out),
                Init::Normal(std),
                rng,
            ),
            b: store.add(format!("{name}.bias"), group, (1, fan_out), Init::Zeros, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&p.view(self.w)) + p.view(self.b)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        g.get_mut(p, self.w).scaled_add(1.0, &x.t().dot(&dy));
        g.get_mut(p, self.b)
            .scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        dy.dot(&p.view(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamGroup::LayerNorm,
                (1, dim),
                Init::Ones,
                rng,
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamGroup::LayerNorm,
                (1, dim),
                Init::Zeros,
                rng,
            ),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &p.view(self.gamma) + p.view(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LayerNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        g.get_mut(p, self.gamma)
            .scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
        g.get_mut(p, self.beta)
            .scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dxhat = &dy * &p.view(self.gamma);
        let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let inner = dxhat * d - sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        inner * (&cache.inv_std / d).view().insert_axis(Axis(1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Inverted-dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask(shape: (usize, usize), p: f64, active: bool, rng: &mut impl Rng) -> Option<Array2<f64>> {
    if !active || p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

pub fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

pub fn apply_mask_view(x: ArrayView2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => &x * m,
        None => x.to_owned(),
    }
}

/// Softmax over the entries where `keep` is true; the rest get probability 0.
pub fn masked_softmax(scores: ArrayView1<f64>, keep: &[bool]) -> Array1<f64> {
    let mut out = scores.to_owned();
    softmax_in_place(out.as_slice_mut().expect("owned array is contiguous"), keep);
    out
}

fn softmax_in_place(row: &mut [f64], keep: &[bool]) {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .fold(f64::NEG_INFINITY, |m, (&s, _)| m.max(s));
    let mut total = 0.0;
    for (v, &k) in row.iter_mut().zip(keep) {
        *v = if k { (*v - max).exp() } else { 0.0 };
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Row-wise [`masked_softmax`] over a contiguous matrix, in place.
pub fn masked_softmax_rows(scores: &mut Array2<f64>, keep: &[bool]) {
    let n = scores.ncols();
    let data = scores.as_slice_mut().expect("score matrix is contiguous");
    for row in data.chunks_exact_mut(n) {
        softmax_in_place(row, keep);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `n x n` probability matrix per head.
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.query"), group, (dim, dim), rng),
            k: Linear::new(store, &format!("{name}.key"), group, (dim, dim), rng),
            v: Linear::new(store, &format!("{name}.value"), group, (dim, dim), rng),
            o: Linear::new(store, &format!("{name}.output"), group, (dim, dim), rng),
            heads,
        }
    }

    /// `key_mask[j] == false` hides position `j` from every query.
    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>, key_mask: &[bool]) -> (Array2<f64>, AttentionCache) {
        let (n, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, x);
        let k = self.k.forward(p, x);
        let v = self.v.forward(p, x);
        let mut context = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut prob = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax_rows(&mut prob, key_mask);
            context.slice_mut(cols).assign(&prob.dot(&v.slice(cols)));
            probs.push(prob);
        }
        let y = self.o.forward(p, context.view());
        (
            y,
            AttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &AttentionCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let (n, d) = c.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dcontext = self.o.backward(p, g, c.context.view(), dy);
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for (h, prob) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx = dcontext.slice(cols);
            dv.slice_mut(cols).assign(&prob.t().dot(&dctx));
            let dprob = dctx.dot(&c.v.slice(cols).t());
            let row_dot = (&dprob * prob).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (dprob - row_dot) * prob * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        let x = c.x.view();
        self.q.backward(p, g, x, dq.view()) + self.k.backward(p, g, x, dk.view()) + self.v.backward(p, g, x, dv.view())
    }
}
