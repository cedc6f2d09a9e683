//! Counter-based seeded randomness.
//!
//! Streams are keyed by `(seed, stream_id)` so independent parts of the
//! pipeline draw from disjoint, order-independent sequences. Stream ids are
//! derived from string labels with FNV-1a, which is stable across platforms.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// FNV-1a hash of a label, used as a stream id.
pub fn stream_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Reproducible random stream keyed by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream named by a label; equal labels yield equal streams.
    pub fn labeled(seed: u64, label: &str) -> Self {
        Self::new(seed, stream_id(label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// `k` distinct indices from [0, n), order deterministic.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Deterministic reparameterized sample given explicit noise:
/// `mu + exp(log_var / 2) * eps`, element-wise.
pub fn reparam_with_noise(mu: &DenseArray, log_var: &DenseArray, eps: &[f64]) -> Result<DenseArray> {
    if !mu.same_dims(log_var) || eps.len() != mu.len() {
        return Err(Error::DimMismatch(format!(
            "reparam: mu dims {:?}, log_var dims {:?}, eps len {}",
            mu.dims(),
            log_var.dims(),
            eps.len()
        )));
    }
    let data: Vec<f64> = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    DenseArray::from_vec(mu.dims().to_vec(), data)
}

/// Reparameterized Gaussian sample `z ~ N(mu, exp(log_var) I)`.
pub fn reparam_sample(rng: &mut RngStream, mu: &DenseArray, log_var: &DenseArray) -> Result<DenseArray> {
    if !mu.same_dims(log_var) {
        return Err(Error::DimMismatch(format!(
            "reparam_sample: mu dims {:?} vs log_var dims {:?}",
            mu.dims(),
            log_var.dims()
        )));
    }
    let eps = rng.normal_vec(mu.len());
    reparam_with_noise(mu, log_var, &eps)
}
