//! Activation-space task vectors: mean final hidden-layer deltas between an
//! adapted model and its base, measured on one shared probe batch.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::toybase::{AdaptedModel, BaseModel, FlatParams};

/// Inputs shared by every task-vector extraction in one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub inputs: DenseArray,
    pub seed: u64,
    pub n_probe: usize,
}

impl ProbeBatch {
    /// Draws the experiment's probe once from the pretext input
    /// distribution on a dedicated stream.
    pub fn shared(n_probe: usize, input_dim: usize, seed: u64) -> Result<Self> {
        if n_probe == 0 {
            return Err(Error::InvalidInput("probe needs at least one row".into()));
        }
        let mut rng = RngStream::labeled(seed, "probe/x");
        let inputs = DenseArray::from_vec(vec![n_probe, input_dim], rng.normal_vec(n_probe * input_dim))?;
        Ok(Self {
            inputs,
            seed,
            n_probe,
        })
    }
}

/// Conditioning vector for one task. In activation mode its length is the
/// base model's final hidden width; in param-delta mode it is the flat
/// adapter length.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub data: DenseArray,
    pub task_id: String,
}

impl TaskVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Mean over probe rows of the final hidden layer's post-activation
/// output; length hidden_dim.
pub fn probe_activations(model: &AdaptedModel, probe: &ProbeBatch) -> Result<DenseArray> {
    let n = probe.inputs.dims()[0];
    if n == 0 {
        return Err(Error::InvalidInput("empty probe batch".into()));
    }
    let h2 = model.hidden_activations(&probe.inputs)?;
    let width = model.hidden_dim;
    let mut mean = vec![0.0; width];
    for s in 0..n {
        for j in 0..width {
            mean[j] += h2.data()[s * width + j];
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut mean {
        *v *= inv;
    }
    DenseArray::from_vec(vec![width], mean)
}

/// Element-wise difference of probe activations, adapted minus base.
pub fn extract_task_vector(
    base: &BaseModel,
    adapted: &AdaptedModel,
    probe: &ProbeBatch,
    task_id: &str,
) -> Result<TaskVector> {
    if base.input_dim != adapted.input_dim
        || base.hidden_dim != adapted.hidden_dim
        || base.output_dim != adapted.output_dim
    {
        return Err(Error::DimMismatch(
            "base and adapted models differ in architecture".into(),
        ));
    }
    let adapted_act = probe_activations(adapted, probe)?;
    let base_act = probe_activations(&crate::toybase::base_as_adapted(base), probe)?;
    let data: Vec<f64> = adapted_act
        .data()
        .iter()
        .zip(base_act.data())
        .map(|(a, b)| a - b)
        .collect();
    Ok(TaskVector {
        data: DenseArray::from_vec(vec![base.hidden_dim], data)?,
        task_id: task_id.to_string(),
    })
}

/// Parameter-space conditioning vector: the flat adapter itself (the delta
/// from the shared base, whose own adapter is zero).
pub fn param_delta_vector(flat: &FlatParams, task_id: &str) -> Result<TaskVector> {
    Ok(TaskVector {
        data: DenseArray::vector(flat.data.clone())?,
        task_id: task_id.to_string(),
    })
}

/// Convex combination of task vectors.
pub fn combine_task_vectors(vectors: &[TaskVector], weights: &[f64]) -> Result<TaskVector> {
    if vectors.is_empty() {
        return Err(Error::InvalidInput("no task vectors to combine".into()));
    }
    if vectors.len() != weights.len() {
        return Err(Error::DimMismatch(format!(
            "{} vectors vs {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let width = vectors[0].len();
    if vectors.iter().any(|v| v.len() != width) {
        return Err(Error::DimMismatch("task vector lengths differ".into()));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidInput("combination weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "combination weights sum to {sum}, expected 1"
        )));
    }
    let mut data = vec![0.0; width];
    for (v, &w) in vectors.iter().zip(weights) {
        for (acc, x) in data.iter_mut().zip(v.data.data()) {
            *acc += w * x;
        }
    }
    Ok(TaskVector {
        data: DenseArray::from_vec(vec![width], data)?,
        task_id: "fused".to_string(),
    })
}
