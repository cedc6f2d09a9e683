//! Pretraining and LoRA fine-tuning with plain full-batch gradient descent.

use std::sync::Arc;

use crate::config::{FinetuneConfig, ModelConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};

use super::lora::{flatten, AdapterShape, FlatParams, LoraAdapter};
use super::tasks::{Split, TaskDataset, TaskKind, TaskSpec};
use super::{apply_lora, AdaptedModel, BaseModel, ForwardCache};

/// Training aborts once the loss exceeds this bound.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Standard deviation of the A-factor initialization.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Adapter snapshots from the tail of a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSequence {
    pub task_id: String,
    /// (epoch index, adapter) pairs with strictly increasing indices.
    pub entries: Vec<(usize, FlatParams)>,
    pub retained_window: usize,
}

impl CheckpointSequence {
    pub fn new(task_id: String, entries: Vec<(usize, FlatParams)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput(
                "checkpoint sequence must retain at least one entry".into(),
            ));
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidInput(
                    "checkpoint epoch indices must increase strictly".into(),
                ));
            }
            if pair[1].1.shape != pair[0].1.shape {
                return Err(Error::DimMismatch(
                    "checkpoints in one sequence must share a manifest".into(),
                ));
            }
        }
        let retained_window = entries.len();
        Ok(Self {
            task_id,
            entries,
            retained_window,
        })
    }

    /// Adapter from the last retained epoch.
    pub fn final_params(&self) -> &FlatParams {
        &self.entries.last().expect("non-empty by construction").1
    }
}

/// Mean squared error for regression, mean cross-entropy over the first
/// `n_classes` logits for classification.
pub fn task_loss(model: &AdaptedModel, data: &TaskDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("task_loss on an empty dataset".into()));
    }
    let cache = model.forward_cached(&data.inputs)?;
    let (loss, _) = output_error(&cache, data)?;
    Ok(loss)
}

/// Loss and its gradient with respect to the network output.
fn output_error(cache: &ForwardCache, data: &TaskDataset) -> Result<(f64, DenseArray)> {
    let n = cache.y.dims()[0];
    let d_out = cache.y.dims()[1];
    let mut dy = vec![0.0; n * d_out];
    match data.kind {
        TaskKind::Regression => {
            if data.targets.dims() != cache.y.dims() {
                return Err(Error::DimMismatch(format!(
                    "regression targets {:?} vs outputs {:?}",
                    data.targets.dims(),
                    cache.y.dims()
                )));
            }
            let mut loss = 0.0;
            let scale = 1.0 / (n * d_out) as f64;
            for (i, (y, t)) in cache.y.data().iter().zip(data.targets.data()).enumerate() {
                let r = y - t;
                loss += r * r;
                dy[i] = 2.0 * r * scale;
            }
            Ok((loss * scale, DenseArray::from_parts(vec![n, d_out], dy)))
        }
        TaskKind::Classification => {
            let c = data.n_classes;
            if c < 2 || c > d_out {
                return Err(Error::DimMismatch(format!(
                    "n_classes {c} incompatible with output dim {d_out}"
                )));
            }
            let mut loss = 0.0;
            let inv_n = 1.0 / n as f64;
            for s in 0..n {
                let logits = &cache.y.data()[s * d_out..s * d_out + c];
                let target = data.targets.data()[s] as usize;
                if target >= c {
                    return Err(Error::InvalidInput(format!(
                        "class index {target} out of range for {c} classes"
                    )));
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                loss += log_z - logits[target];
                for (j, &v) in logits.iter().enumerate() {
                    let p = (v - max).exp() / sum_exp;
                    dy[s * d_out + j] = (p - if j == target { 1.0 } else { 0.0 }) * inv_n;
                }
            }
            Ok((loss * inv_n, DenseArray::from_parts(vec![n, d_out], dy)))
        }
    }
}

/// Gradients of a scalar loss with respect to all dense parameters.
struct DenseGrads {
    w: [DenseArray; 3],
    b: [DenseArray; 3],
}

/// Reverse pass through tanh-tanh-linear given d(loss)/d(output).
fn backprop(model: &AdaptedModel, cache: &ForwardCache, dy: &DenseArray) -> DenseGrads {
    let n = cache.x.dims()[0];
    let d_in = model.input_dim;
    let h = model.hidden_dim;
    let d_out = model.output_dim;

    let mut gw3 = vec![0.0; d_out * h];
    let mut gb3 = vec![0.0; d_out];
    let mut gw2 = vec![0.0; h * h];
    let mut gb2 = vec![0.0; h];
    let mut gw1 = vec![0.0; h * d_in];
    let mut gb1 = vec![0.0; h];

    let w3 = model.weights[2].data();
    let w2 = model.weights[1].data();
    let mut delta2 = vec![0.0; h];
    let mut delta1 = vec![0.0; h];
    for s in 0..n {
        let dy_s = &dy.data()[s * d_out..(s + 1) * d_out];
        let h2_s = &cache.h2.data()[s * h..(s + 1) * h];
        let h1_s = &cache.h1.data()[s * h..(s + 1) * h];
        let x_s = &cache.x.data()[s * d_in..(s + 1) * d_in];

        for i in 0..d_out {
            let d = dy_s[i];
            if d != 0.0 {
                for j in 0..h {
                    gw3[i * h + j] += d * h2_s[j];
                }
            }
            gb3[i] += d;
        }
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..d_out {
                acc += dy_s[i] * w3[i * h + j];
            }
            delta2[j] = acc * (1.0 - h2_s[j] * h2_s[j]);
        }
        for i in 0..h {
            let d = delta2[i];
            for j in 0..h {
                gw2[i * h + j] += d * h1_s[j];
            }
            gb2[i] += d;
        }
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..h {
                acc += delta2[i] * w2[i * h + j];
            }
            delta1[j] = acc * (1.0 - h1_s[j] * h1_s[j]);
        }
        for i in 0..h {
            let d = delta1[i];
            for j in 0..d_in {
                gw1[i * d_in + j] += d * x_s[j];
            }
            gb1[i] += d;
        }
    }

    DenseGrads {
        w: [
            DenseArray::from_parts(vec![h, d_in], gw1),
            DenseArray::from_parts(vec![h, h], gw2),
            DenseArray::from_parts(vec![d_out, h], gw3),
        ],
        b: [
            DenseArray::from_parts(vec![h], gb1),
            DenseArray::from_parts(vec![h], gb2),
            DenseArray::from_parts(vec![d_out], gb3),
        ],
    }
}

/// Loss and adapter-space gradients at the given adapter.
///
/// Dense gradients with respect to the two adapted effective weights are
/// projected onto the low-rank factors: gB = s * gW * A^T, gA = s * B^T * gW.
pub fn lora_grad(
    base: &BaseModel,
    adapter: &LoraAdapter,
    data: &TaskDataset,
) -> Result<(f64, LoraAdapter)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("gradient on an empty dataset".into()));
    }
    let model = apply_lora(base, adapter)?;
    let cache = model.forward_cached(&data.inputs)?;
    let (loss, dy) = output_error(&cache, data)?;
    let dense = backprop(&model, &cache, &dy);

    let scaling = adapter.shape.scaling();
    let r = adapter.shape.rank;
    let mut grads = LoraAdapter::zeros(Arc::clone(&adapter.shape));
    for (g, lora) in grads.layers.iter_mut().zip(&adapter.layers) {
        let gw = dense.w[lora.layer].data();
        let d_out = lora.b.dims()[0];
        let d_in = lora.a.dims()[1];
        let ga = g.a.data_mut();
        for e in 0..r {
            for j in 0..d_in {
                let mut acc = 0.0;
                for i in 0..d_out {
                    acc += lora.b.data()[i * r + e] * gw[i * d_in + j];
                }
                ga[e * d_in + j] = scaling * acc;
            }
        }
        let gb = g.b.data_mut();
        for i in 0..d_out {
            for e in 0..r {
                let mut acc = 0.0;
                for j in 0..d_in {
                    acc += gw[i * d_in + j] * lora.a.data()[e * d_in + j];
                }
                gb[i * r + e] = scaling * acc;
            }
        }
    }
    Ok((loss, grads))
}

/// Trains the base model on input reconstruction: the target is the first
/// output_dim coordinates of each input row.
pub fn pretrain(model_cfg: &ModelConfig, cfg: &PretrainConfig, seed: u64) -> Result<BaseModel> {
    if cfg.epochs == 0 || cfg.n_samples == 0 {
        return Err(Error::InvalidConfig(
            "pretrain needs positive epochs and sample count".into(),
        ));
    }
    let mut model = BaseModel::init(
        model_cfg.input_dim,
        model_cfg.hidden_dim,
        model_cfg.output_dim,
        seed,
    )?;
    if model.output_dim > model.input_dim {
        return Err(Error::InvalidConfig(
            "reconstruction pretext needs output_dim <= input_dim".into(),
        ));
    }
    let mut rng = RngStream::labeled(seed, "pretext/x");
    let n = cfg.n_samples;
    let d_in = model.input_dim;
    let d_out = model.output_dim;
    let xs = rng.normal_vec(n * d_in);
    let mut targets = vec![0.0; n * d_out];
    for s in 0..n {
        targets[s * d_out..(s + 1) * d_out]
            .copy_from_slice(&xs[s * d_in..s * d_in + d_out]);
    }
    let data = TaskDataset {
        inputs: DenseArray::from_vec(vec![n, d_in], xs)?,
        targets: DenseArray::from_vec(vec![n, d_out], targets)?,
        split: Split::Train,
        kind: TaskKind::Regression,
        n_classes: 0,
    };

    for epoch in 0..cfg.epochs {
        let view = AdaptedModel {
            input_dim: model.input_dim,
            hidden_dim: model.hidden_dim,
            output_dim: model.output_dim,
            weights: model.weights.clone(),
            biases: model.biases.clone(),
        };
        let cache = view.forward_cached(&data.inputs)?;
        let (loss, dy) = output_error(&cache, &data)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "pretrain loss not finite at epoch {epoch}"
            )));
        }
        if loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "pretrain loss {loss} exceeded {DIVERGENCE_LIMIT} at epoch {epoch}"
            )));
        }
        let grads = backprop(&view, &cache, &dy);
        for layer in 0..3 {
            for (w, g) in model.weights[layer]
                .data_mut()
                .iter_mut()
                .zip(grads.w[layer].data())
            {
                *w -= cfg.lr * g;
            }
            for (b, g) in model.biases[layer]
                .data_mut()
                .iter_mut()
                .zip(grads.b[layer].data())
            {
                *b -= cfg.lr * g;
            }
        }
    }
    for w in &model.weights {
        w.check_finite("pretrain weights")?;
    }
    Ok(model)
}

/// Pretext reconstruction loss of a model, for before/after comparisons.
pub fn pretext_loss(model: &BaseModel, n_samples: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::labeled(seed, "pretext/x");
    let d_in = model.input_dim;
    let d_out = model.output_dim;
    let xs = rng.normal_vec(n_samples * d_in);
    let mut targets = vec![0.0; n_samples * d_out];
    for s in 0..n_samples {
        targets[s * d_out..(s + 1) * d_out]
            .copy_from_slice(&xs[s * d_in..s * d_in + d_out]);
    }
    let data = TaskDataset {
        inputs: DenseArray::from_vec(vec![n_samples, d_in], xs)?,
        targets: DenseArray::from_vec(vec![n_samples, d_out], targets)?,
        split: Split::Train,
        kind: TaskKind::Regression,
        n_classes: 0,
    };
    task_loss(&super::base_as_adapted(model), &data)
}

/// Full-batch LoRA fine-tuning on the task's train split. Retains the
/// final ceil(epochs/2) per-epoch snapshots.
pub fn finetune_lora(
    base: &BaseModel,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<CheckpointSequence> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidInput(
            "finetune_lora needs at least one epoch".into(),
        ));
    }
    let data = task.dataset(Split::Train)?;
    if data.is_empty() {
        return Err(Error::InvalidInput(format!(
            "task {} has an empty train split",
            task.task_id
        )));
    }
    let shape = base.adapter_shape(cfg.rank, cfg.effective_alpha())?;
    let mut adapter = init_adapter(&shape, &task.task_id, seed);

    let retained = cfg.epochs.div_ceil(2);
    let first_kept = cfg.epochs - retained + 1;
    let mut entries = Vec::with_capacity(retained);
    for epoch in 1..=cfg.epochs {
        let (loss, grads) = lora_grad(base, &adapter, &data)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "fine-tune loss not finite at epoch {epoch} on {}",
                task.task_id
            )));
        }
        if loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "fine-tune loss {loss} exceeded {DIVERGENCE_LIMIT} at epoch {epoch} on {}",
                task.task_id
            )));
        }
        adapter.step(&grads, cfg.lr);
        // the frozen output layer plus tanh keeps the loss bounded even
        // when the adapter blows up, so divergence is caught on the
        // factor magnitudes
        let max_abs = adapter
            .layers
            .iter()
            .flat_map(|l| l.a.data().iter().chain(l.b.data().iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "adapter magnitude {max_abs} exceeded {DIVERGENCE_LIMIT} at epoch {epoch} on {}",
                task.task_id
            )));
        }
        if epoch >= first_kept {
            entries.push((epoch, flatten(&adapter)));
        }
    }
    CheckpointSequence::new(task.task_id.clone(), entries)
}

/// B starts at zero, A at a small Gaussian, so the initial delta is zero.
pub fn init_adapter(shape: &Arc<AdapterShape>, task_id: &str, seed: u64) -> LoraAdapter {
    let mut rng = RngStream::labeled(seed, &format!("finetune/{task_id}/a_init"));
    let mut adapter = LoraAdapter::zeros(Arc::clone(shape));
    for layer in &mut adapter.layers {
        for v in layer.a.data_mut() {
            *v = LORA_A_INIT_STD * rng.normal();
        }
    }
    adapter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SuiteConfig;
    use crate::numerics::{finite_diff_grad, grad_check};
    use crate::toybase::tasks::make_task_suite;
    use crate::toybase::{base_as_adapted, unflatten};

    fn small_model() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            hidden_dim: 16,
            output_dim: 8,
        }
    }

    fn small_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 150,
            lr: 0.5,
            n_samples: 128,
        }
    }

    fn small_suite() -> SuiteConfig {
        SuiteConfig {
            size: 4,
            n_train: 48,
            n_val: 16,
            n_test: 32,
            gain: 1.5,
            noise_std: 0.05,
            n_classes: 4,
            cluster_std: 1.0,
            center_std: 2.0,
            long_tail_fraction: 1.0,
        }
    }

    fn small_finetune() -> FinetuneConfig {
        FinetuneConfig {
            rank: 2,
            alpha: Some(2.0),
            epochs: 40,
            lr: 0.5,
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_descends() {
        let a = pretrain(&small_model(), &small_pretrain(), 7).unwrap();
        let b = pretrain(&small_model(), &small_pretrain(), 7).unwrap();
        assert_eq!(a, b);
        let init = BaseModel::init(8, 16, 8, 7).unwrap();
        let before = pretext_loss(&init, 128, 7).unwrap();
        let after = pretext_loss(&a, 128, 7).unwrap();
        assert!(after < before, "pretext loss {after} did not drop below {before}");
    }

    #[test]
    fn regression_loss_matches_hand_value() {
        // single sample, outputs forced to zero by zero weights, target 2
        let model = AdaptedModel {
            input_dim: 1,
            hidden_dim: 2,
            output_dim: 1,
            weights: [
                DenseArray::zeros(vec![2, 1]),
                DenseArray::zeros(vec![2, 2]),
                DenseArray::zeros(vec![1, 2]),
            ],
            biases: [
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![1]),
            ],
        };
        let data = TaskDataset {
            inputs: DenseArray::from_vec(vec![1, 1], vec![0.3]).unwrap(),
            targets: DenseArray::from_vec(vec![1, 1], vec![2.0]).unwrap(),
            split: Split::Test,
            kind: TaskKind::Regression,
            n_classes: 0,
        };
        assert_eq!(task_loss(&model, &data).unwrap(), 4.0);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let model = AdaptedModel {
            input_dim: 1,
            hidden_dim: 2,
            output_dim: 4,
            weights: [
                DenseArray::zeros(vec![2, 1]),
                DenseArray::zeros(vec![2, 2]),
                DenseArray::zeros(vec![4, 2]),
            ],
            biases: [
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![4]),
            ],
        };
        let data = TaskDataset {
            inputs: DenseArray::from_vec(vec![1, 1], vec![0.5]).unwrap(),
            targets: DenseArray::from_vec(vec![1, 1], vec![2.0]).unwrap(),
            split: Split::Test,
            kind: TaskKind::Classification,
            n_classes: 4,
        };
        let loss = task_loss(&model, &data).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_outputs_give_zero_loss() {
        let model = AdaptedModel {
            input_dim: 2,
            hidden_dim: 2,
            output_dim: 2,
            weights: [
                DenseArray::zeros(vec![2, 2]),
                DenseArray::zeros(vec![2, 2]),
                DenseArray::zeros(vec![2, 2]),
            ],
            biases: [
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![2]),
                DenseArray::zeros(vec![2]),
            ],
        };
        let data = TaskDataset {
            inputs: DenseArray::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap(),
            targets: DenseArray::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            split: Split::Test,
            kind: TaskKind::Regression,
            n_classes: 0,
        };
        assert_eq!(task_loss(&model, &data).unwrap(), 0.0);
    }

    #[test]
    fn lora_grad_matches_finite_differences() {
        let base = BaseModel::init(5, 6, 4, 17).unwrap();
        let shape = base.adapter_shape(2, 2.0).unwrap();
        let mut rng = RngStream::labeled(17, "test/grad");
        let mut adapter = LoraAdapter::zeros(Arc::clone(&shape));
        for layer in &mut adapter.layers {
            for v in layer.a.data_mut() {
                *v = 0.3 * rng.normal();
            }
            for v in layer.b.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        let inputs = DenseArray::from_vec(vec![6, 5], rng.normal_vec(30)).unwrap();
        let targets = DenseArray::from_vec(vec![6, 4], rng.normal_vec(24)).unwrap();
        let data = TaskDataset {
            inputs,
            targets,
            split: Split::Train,
            kind: TaskKind::Regression,
            n_classes: 0,
        };
        let (_, grads) = lora_grad(&base, &adapter, &data).unwrap();
        let analytic = DenseArray::vector(flatten(&grads).data).unwrap();
        let flat0 = flatten(&adapter);
        let point = DenseArray::vector(flat0.data.clone()).unwrap();
        let shape_ref = Arc::clone(&shape);
        let numeric = finite_diff_grad(
            |p| {
                let flat = FlatParams::new(Arc::clone(&shape_ref), p.data().to_vec()).unwrap();
                let cand = unflatten(&flat).unwrap();
                let model = apply_lora(&base, &cand).unwrap();
                task_loss(&model, &data).unwrap()
            },
            &point,
            1e-5,
        )
        .unwrap();
        let report = grad_check(&analytic, &numeric, 1e-6).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn classification_grad_matches_finite_differences() {
        let base = BaseModel::init(5, 6, 4, 19).unwrap();
        let shape = base.adapter_shape(1, 1.0).unwrap();
        let mut rng = RngStream::labeled(19, "test/grad-cls");
        let mut adapter = LoraAdapter::zeros(Arc::clone(&shape));
        for layer in &mut adapter.layers {
            for v in layer.a.data_mut() {
                *v = 0.3 * rng.normal();
            }
            for v in layer.b.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        let inputs = DenseArray::from_vec(vec![8, 5], rng.normal_vec(40)).unwrap();
        let labels: Vec<f64> = (0..8).map(|s| (s % 3) as f64).collect();
        let data = TaskDataset {
            inputs,
            targets: DenseArray::from_vec(vec![8, 1], labels).unwrap(),
            split: Split::Train,
            kind: TaskKind::Classification,
            n_classes: 3,
        };
        let (_, grads) = lora_grad(&base, &adapter, &data).unwrap();
        let analytic = DenseArray::vector(flatten(&grads).data).unwrap();
        let point = DenseArray::vector(flatten(&adapter).data).unwrap();
        let shape_ref = Arc::clone(&shape);
        let numeric = finite_diff_grad(
            |p| {
                let flat = FlatParams::new(Arc::clone(&shape_ref), p.data().to_vec()).unwrap();
                let cand = unflatten(&flat).unwrap();
                let model = apply_lora(&base, &cand).unwrap();
                task_loss(&model, &data).unwrap()
            },
            &point,
            1e-5,
        )
        .unwrap();
        let report = grad_check(&analytic, &numeric, 1e-6).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn finetune_retains_final_half() {
        let base = pretrain(&small_model(), &small_pretrain(), 3).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 3).unwrap();
        let seq = finetune_lora(&base, &suite[0], &small_finetune(), 3).unwrap();
        assert_eq!(seq.retained_window, 20);
        assert_eq!(seq.entries.len(), 20);
        assert_eq!(seq.entries.first().unwrap().0, 21);
        assert_eq!(seq.entries.last().unwrap().0, 40);
    }

    #[test]
    fn finetune_reduces_test_loss_and_preserves_base() {
        let base = pretrain(&small_model(), &small_pretrain(), 5).unwrap();
        let checksum = base.param_checksum();
        let suite = make_task_suite(&small_suite(), 8, 8, 5).unwrap();
        for task in &suite {
            let seq = finetune_lora(&base, task, &small_finetune(), 5).unwrap();
            let test = task.dataset(Split::Test).unwrap();
            let zero = task_loss(&base_as_adapted(&base), &test).unwrap();
            let tuned_adapter = unflatten(seq.final_params()).unwrap();
            let tuned = task_loss(&apply_lora(&base, &tuned_adapter).unwrap(), &test).unwrap();
            assert!(
                tuned < zero,
                "task {}: tuned {tuned} not below zero-adapter {zero}",
                task.task_id
            );
        }
        assert_eq!(base.param_checksum(), checksum);
    }

    #[test]
    fn finetune_determinism() {
        let base = pretrain(&small_model(), &small_pretrain(), 9).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 9).unwrap();
        let a = finetune_lora(&base, &suite[1], &small_finetune(), 9).unwrap();
        let b = finetune_lora(&base, &suite[1], &small_finetune(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conflicting_pair_deltas_anticorrelate() {
        let base = pretrain(&small_model(), &small_pretrain(), 11).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 11).unwrap();
        let cfg = small_finetune();
        let a = finetune_lora(&base, &suite[0], &cfg, 11).unwrap();
        let b = finetune_lora(&base, &suite[1], &cfg, 11).unwrap();
        let fa = &a.final_params().data;
        let fb = &b.final_params().data;
        let dot: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
        let na: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (na * nb);
        assert!(cosine < 0.0, "conflicting pair cosine {cosine} not negative");
    }

    #[test]
    fn zero_epochs_rejected() {
        let base = BaseModel::init(8, 16, 8, 1).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 1).unwrap();
        let mut cfg = small_finetune();
        cfg.epochs = 0;
        assert!(finetune_lora(&base, &suite[0], &cfg, 1).is_err());
    }

    #[test]
    fn empty_train_split_rejected() {
        let base = BaseModel::init(8, 16, 8, 1).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 1).unwrap();
        let tail = suite[3].with_data_fraction(0.0).unwrap();
        assert!(finetune_lora(&base, &tail, &small_finetune(), 1).is_err());
    }

    #[test]
    fn divergent_lr_reports_divergence() {
        let base = pretrain(&small_model(), &small_pretrain(), 13).unwrap();
        let suite = make_task_suite(&small_suite(), 8, 8, 13).unwrap();
        let mut cfg = small_finetune();
        cfg.lr = 1e12;
        cfg.epochs = 200;
        let err = finetune_lora(&base, &suite[0], &cfg, 13).unwrap_err();
        assert!(matches!(err, Error::Divergence(_) | Error::NonFinite(_)));
    }
}
