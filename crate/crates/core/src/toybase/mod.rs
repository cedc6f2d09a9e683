//! Small deterministic MLP testbed: base model, LoRA application, synthetic
//! task suites, and full-batch training loops.

pub mod lora;
pub mod tasks;
pub mod train;

use std::sync::Arc;

pub use lora::{flatten, unflatten, AdapterShape, FactorTag, FlatParams, LoraAdapter, LoraLayer};
pub use tasks::{make_task_suite, Split, TaskDataset, TaskKind, TaskSpec};
pub use train::{finetune_lora, pretrain, task_loss, CheckpointSequence};

use crate::error::{Error, Result};
use crate::numerics::{stream_id, DenseArray, RngStream};

/// Nonlinearity used between layers. Only tanh is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

/// Frozen three-layer MLP: input -> hidden -> hidden -> output.
///
/// LoRA adapts the two hidden weight matrices; the output head and all
/// biases stay untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// W1 (hidden x input), W2 (hidden x hidden), W3 (output x hidden).
    pub weights: [DenseArray; 3],
    /// b1, b2 (hidden), b3 (output).
    pub biases: [DenseArray; 3],
}

impl BaseModel {
    /// Gaussian init with per-layer std 1/sqrt(fan_in); zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidInput("model dims must be positive".into()));
        }
        let mut rng = RngStream::new(seed, stream_id("base/init"));
        let dims = [
            (hidden_dim, input_dim),
            (hidden_dim, hidden_dim),
            (output_dim, hidden_dim),
        ];
        let mut weights = Vec::new();
        for &(rows, cols) in &dims {
            let std = 1.0 / (cols as f64).sqrt();
            let mut data = rng.normal_vec(rows * cols);
            for v in &mut data {
                *v *= std;
            }
            weights.push(DenseArray::from_vec(vec![rows, cols], data)?);
        }
        let biases = [
            DenseArray::zeros(vec![hidden_dim]),
            DenseArray::zeros(vec![hidden_dim]),
            DenseArray::zeros(vec![output_dim]),
        ];
        let weights: [DenseArray; 3] = weights.try_into().expect("three layers");
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
            activation: Activation::Tanh,
            weights,
            biases,
        })
    }

    /// Dims of the two adapted layers as (layer index, d_out, d_in).
    pub fn adapted_layer_dims(&self) -> [(usize, usize, usize); 2] {
        [
            (0, self.hidden_dim, self.input_dim),
            (1, self.hidden_dim, self.hidden_dim),
        ]
    }

    /// Manifest for adapters of the given rank over this model.
    pub fn adapter_shape(&self, rank: usize, alpha: f64) -> Result<Arc<AdapterShape>> {
        Ok(Arc::new(AdapterShape::new(
            rank,
            alpha,
            &self.adapted_layer_dims(),
        )?))
    }

    /// FNV-1a over the raw bit patterns of all parameters, for asserting
    /// that the base is never mutated.
    pub fn param_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut absorb = |values: &[f64]| {
            for v in values {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for w in &self.weights {
            absorb(w.data());
        }
        for b in &self.biases {
            absorb(b.data());
        }
        hash
    }
}

/// Base model with LoRA deltas folded into the adapted layers.
///
/// Owns its effective weights, so the base stays immutable and the adapted
/// view can outlive borrows of it.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub weights: [DenseArray; 3],
    pub biases: [DenseArray; 3],
}

/// Intermediate activations for a batch, kept for backprop and probing.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// n x input_dim.
    pub x: DenseArray,
    /// n x hidden_dim, post-tanh of layer 1.
    pub h1: DenseArray,
    /// n x hidden_dim, post-tanh of layer 2 (final hidden layer).
    pub h2: DenseArray,
    /// n x output_dim, linear head.
    pub y: DenseArray,
}

/// Materializes W_j + (alpha/rank) * B_j * A_j for each adapted layer.
pub fn apply_lora(base: &BaseModel, adapter: &LoraAdapter) -> Result<AdaptedModel> {
    let expected = base.adapted_layer_dims();
    if adapter.layers.len() != expected.len() {
        return Err(Error::DimMismatch(format!(
            "adapter covers {} layers, model adapts {}",
            adapter.layers.len(),
            expected.len()
        )));
    }
    let scaling = adapter.shape.scaling();
    let mut weights = base.weights.clone();
    for (lora, &(layer, d_out, d_in)) in adapter.layers.iter().zip(&expected) {
        if lora.layer != layer {
            return Err(Error::DimMismatch(format!(
                "adapter layer id {} does not match model layer {layer}",
                lora.layer
            )));
        }
        let r = adapter.shape.rank;
        if lora.a.dims() != [r, d_in] || lora.b.dims() != [d_out, r] {
            return Err(Error::DimMismatch(format!(
                "adapter factor dims at layer {layer} do not match model layer"
            )));
        }
        let target = weights[layer].data_mut();
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = 0.0;
                for e in 0..r {
                    acc += lora.b.data()[i * r + e] * lora.a.data()[e * d_in + j];
                }
                target[i * d_in + j] += scaling * acc;
            }
        }
    }
    Ok(AdaptedModel {
        input_dim: base.input_dim,
        hidden_dim: base.hidden_dim,
        output_dim: base.output_dim,
        weights,
        biases: base.biases.clone(),
    })
}

/// The base model as an adapted view with a zero delta.
pub fn base_as_adapted(base: &BaseModel) -> AdaptedModel {
    AdaptedModel {
        input_dim: base.input_dim,
        hidden_dim: base.hidden_dim,
        output_dim: base.output_dim,
        weights: base.weights.clone(),
        biases: base.biases.clone(),
    }
}

impl AdaptedModel {
    /// Forward pass for a batch of rows, keeping every intermediate.
    pub fn forward_cached(&self, inputs: &DenseArray) -> Result<ForwardCache> {
        if inputs.dims().len() != 2 || inputs.dims()[1] != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "expected inputs of shape [n, {}], got {:?}",
                self.input_dim,
                inputs.dims()
            )));
        }
        let n = inputs.dims()[0];
        let h1 = affine_tanh(inputs, &self.weights[0], &self.biases[0]);
        let h2 = affine_tanh(&h1, &self.weights[1], &self.biases[1]);
        let y = affine(&h2, &self.weights[2], &self.biases[2]);
        debug_assert_eq!(y.dims(), [n, self.output_dim]);
        Ok(ForwardCache {
            x: inputs.clone(),
            h1,
            h2,
            y,
        })
    }

    /// Batch outputs only, n x output_dim.
    pub fn forward(&self, inputs: &DenseArray) -> Result<DenseArray> {
        Ok(self.forward_cached(inputs)?.y)
    }

    /// Final hidden-layer activations, n x hidden_dim.
    pub fn hidden_activations(&self, inputs: &DenseArray) -> Result<DenseArray> {
        Ok(self.forward_cached(inputs)?.h2)
    }
}

fn affine(inputs: &DenseArray, w: &DenseArray, b: &DenseArray) -> DenseArray {
    let n = inputs.dims()[0];
    let d_in = inputs.dims()[1];
    let d_out = w.dims()[0];
    let mut out = vec![0.0; n * d_out];
    for s in 0..n {
        let row = &inputs.data()[s * d_in..(s + 1) * d_in];
        for i in 0..d_out {
            let mut acc = b.data()[i];
            let wrow = &w.data()[i * d_in..(i + 1) * d_in];
            for j in 0..d_in {
                acc += wrow[j] * row[j];
            }
            out[s * d_out + i] = acc;
        }
    }
    DenseArray::from_parts(vec![n, d_out], out)
}

fn affine_tanh(inputs: &DenseArray, w: &DenseArray, b: &DenseArray) -> DenseArray {
    let mut out = affine(inputs, w, b);
    for v in out.data_mut() {
        *v = v.tanh();
    }
    out
}
