//! Named parameter tensors and matching gradient buffers.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Mat;

pub type ParamId = usize;

/// How a freshly declared tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl Parameters {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic parameter declaration: tensors are created in call order
/// and filled from one seeded stream.
pub struct ParamBuilder {
    params: Parameters,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Parameters::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let m = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::from_vec(rows, cols, vec![1.0; rows * cols]),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect())
            }
        };
        self.params.add(name, m)
    }

    pub fn finish(self) -> Parameters {
        self.params
    }
}

/// Gradient buffers shaped like a [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(p: &Parameters) -> Self {
        Self {
            tensors: p.tensors().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    /// Zeroes every tensor whose id is not in `keep`.
    pub fn retain(&mut self, keep: &[ParamId]) {
        let keep: std::collections::HashSet<ParamId> = keep.iter().copied().collect();
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if !keep.contains(&i) {
                t.fill(0.0);
            }
        }
    }
}
