//! LoRA adapters and their flat parameter representation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Which factor of the low-rank pair an entry describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorTag {
    A,
    B,
}

/// Shape of one factor of one adapted layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub layer: usize,
    pub factor: FactorTag,
    pub rows: usize,
    pub cols: usize,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ordered manifest shared by every flat adapter in one experiment:
/// layers ascending, A before B, row-major payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterShape {
    pub rank: usize,
    pub alpha: f64,
    pub entries: Vec<ManifestEntry>,
}

impl AdapterShape {
    /// Manifest for adapting the given (out_dim, in_dim) layers.
    pub fn new(rank: usize, alpha: f64, layer_dims: &[(usize, usize, usize)]) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidInput("LoRA rank must be positive".into()));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidInput("LoRA alpha must be positive".into()));
        }
        let mut entries = Vec::new();
        for &(layer, out_dim, in_dim) in layer_dims {
            if rank > in_dim.min(out_dim) {
                return Err(Error::InvalidInput(format!(
                    "rank {rank} exceeds min(d_in, d_out) = {} at layer {layer}",
                    in_dim.min(out_dim)
                )));
            }
            entries.push(ManifestEntry {
                layer,
                factor: FactorTag::A,
                rows: rank,
                cols: in_dim,
            });
            entries.push(ManifestEntry {
                layer,
                factor: FactorTag::B,
                rows: out_dim,
                cols: rank,
            });
        }
        Ok(Self {
            rank,
            alpha,
            entries,
        })
    }

    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(ManifestEntry::len).sum()
    }

    /// Scaling applied to the composed update: alpha / rank.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        layers.dedup();
        layers
    }
}

/// Per-layer low-rank factor pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub layer: usize,
    /// Down-projection, rank x d_in.
    pub a: DenseArray,
    /// Up-projection, d_out x rank.
    pub b: DenseArray,
}

/// Low-rank adapter over the base model's adapted layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub shape: Arc<AdapterShape>,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    pub fn zeros(shape: Arc<AdapterShape>) -> Self {
        let mut layers = Vec::new();
        for pair in shape.entries.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            layers.push(LoraLayer {
                layer: a.layer,
                a: DenseArray::zeros(vec![a.rows, a.cols]),
                b: DenseArray::zeros(vec![b.rows, b.cols]),
            });
        }
        Self { shape, layers }
    }

    pub fn rank(&self) -> usize {
        self.shape.rank
    }

    pub fn alpha(&self) -> f64 {
        self.shape.alpha
    }

    /// In-place `self -= lr * grad`, factor by factor.
    pub fn step(&mut self, grad: &LoraAdapter, lr: f64) {
        for (layer, glayer) in self.layers.iter_mut().zip(&grad.layers) {
            for (v, g) in layer.a.data_mut().iter_mut().zip(glayer.a.data()) {
                *v -= lr * g;
            }
            for (v, g) in layer.b.data_mut().iter_mut().zip(glayer.b.data()) {
                *v -= lr * g;
            }
        }
    }
}

/// One-dimensional view of an adapter plus the manifest needed to restore it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub shape: Arc<AdapterShape>,
    pub data: Vec<f64>,
}

impl FlatParams {
    pub fn new(shape: Arc<AdapterShape>, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.flat_len() {
            return Err(Error::DimMismatch(format!(
                "flat data length {} does not match manifest length {}",
                data.len(),
                shape.flat_len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Concatenates factors in manifest order (layers ascending, A before B,
/// row-major within each factor).
pub fn flatten(adapter: &LoraAdapter) -> FlatParams {
    let mut data = Vec::with_capacity(adapter.shape.flat_len());
    for layer in &adapter.layers {
        data.extend_from_slice(layer.a.data());
        data.extend_from_slice(layer.b.data());
    }
    FlatParams {
        shape: Arc::clone(&adapter.shape),
        data,
    }
}

/// Exact inverse of [`flatten`].
pub fn unflatten(flat: &FlatParams) -> Result<LoraAdapter> {
    if flat.data.len() != flat.shape.flat_len() {
        return Err(Error::DimMismatch(format!(
            "flat data length {} does not match manifest length {}",
            flat.data.len(),
            flat.shape.flat_len()
        )));
    }
    let mut layers = Vec::new();
    let mut offset = 0;
    for pair in flat.shape.entries.chunks(2) {
        let (ea, eb) = (&pair[0], &pair[1]);
        let a_data = flat.data[offset..offset + ea.len()].to_vec();
        offset += ea.len();
        let b_data = flat.data[offset..offset + eb.len()].to_vec();
        offset += eb.len();
        layers.push(LoraLayer {
            layer: ea.layer,
            a: DenseArray::from_vec(vec![ea.rows, ea.cols], a_data)?,
            b: DenseArray::from_vec(vec![eb.rows, eb.cols], b_data)?,
        });
    }
    Ok(LoraAdapter {
        shape: Arc::clone(&flat.shape),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer_shape() -> Arc<AdapterShape> {
        // one adapted layer: out 2, in 2, rank 1
        Arc::new(AdapterShape::new(1, 1.0, &[(0, 2, 2)]).unwrap())
    }

    #[test]
    fn flatten_orders_a_before_b() {
        let shape = Arc::new(AdapterShape::new(1, 1.0, &[(0, 2, 2)]).unwrap());
        let adapter = LoraAdapter {
            shape: Arc::clone(&shape),
            layers: vec![LoraLayer {
                layer: 0,
                a: DenseArray::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap(),
                b: DenseArray::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap(),
            }],
        };
        let flat = flatten(&adapter);
        assert_eq!(flat.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flat_len_counts_factors() {
        let shape = AdapterShape::new(3, 3.0, &[(0, 32, 16), (1, 32, 32)]).unwrap();
        assert_eq!(shape.flat_len(), 3 * (16 + 32) + 3 * (32 + 32));
    }

    #[test]
    fn unflatten_rejects_bad_length() {
        let shape = single_layer_shape();
        let flat = FlatParams {
            shape,
            data: vec![0.0; 3],
        };
        assert!(unflatten(&flat).is_err());
    }

    #[test]
    fn rank_above_layer_width_rejected() {
        assert!(AdapterShape::new(3, 1.0, &[(0, 2, 2)]).is_err());
    }
}
