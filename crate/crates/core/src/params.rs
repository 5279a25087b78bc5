//! Flat parameter storage with named, grouped matrix slices.
//!
//! Every trainable tensor is a row-major `rows x cols` window into a single
//! `Vec<f64>`. Gradients, optimizer moments and checkpoints all share that
//! layout, which keeps clipping, freezing and finite-difference checks simple.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Unfreezing unit a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    LayerNorm,
    /// Zero-based encoder block index.
    Layer(usize),
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    pub data: Vec<f64>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: (usize, usize),
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let offset = self.data.len();
        let n = shape.0 * shape.1;
        match init {
            Init::Zeros => self.data.resize(offset + n, 0.0),
            Init::Ones => self.data.resize(offset + n, 1.0),
            Init::Normal(std) => self
                .data
                .extend((0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal))),
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            rows: shape.0,
            cols: shape.1,
            offset,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self, id: ParamId) -> ArrayView2<'_, f64> {
        view(&self.entries[id.0], &self.data)
    }

    pub fn view_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = &self.entries[id.0];
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.data[e.range()]).expect("layout")
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: vec![0.0; self.data.len()],
        }
    }

    /// Indices of the parameter entries in `group`.
    pub fn group_entries(&self, group: ParamGroup) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(move |e| e.group == group)
    }
}

fn view<'a>(e: &ParamEntry, data: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((e.rows, e.cols), &data[e.range()]).expect("layout")
}

/// Gradient buffer with the same layout as the store it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<f64>,
}

impl Grads {
    pub fn get_mut<'a>(&'a mut self, store: &ParamStore, id: ParamId) -> ArrayViewMut2<'a, f64> {
        let e = store.entry(id);
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.data[e.range()]).expect("layout")
    }

    pub fn get<'a>(&'a self, store: &ParamStore, id: ParamId) -> ArrayView2<'a, f64> {
        view(store.entry(id), &self.data)
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum()
    }
}
