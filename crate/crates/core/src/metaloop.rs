//! The meta-learning procedure: inner task adaptation on decoded adapters
//! and outer VAE updates on the combined checkpoint dataset.
//!
//! The outer gradient is first-order: the adapted parameters are treated
//! as constant inputs to the re-encoding, so no second derivatives of the
//! task loss are needed. The finite-difference oracle targets exactly this
//! truncated objective.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::MetaConfig;
use crate::error::{Error, Result};
use crate::fvae::{
    decoder_backward, encoder_backward, LossBreakdown, VaeGrads, VaeParams,
};
use crate::numerics::RngStream;
use crate::taskvec::TaskVector;
use crate::toybase::train::lora_grad;
use crate::toybase::{flatten, unflatten, BaseModel, CheckpointSequence, FlatParams, TaskDataset};

/// One checkpoint paired with its task's conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedEntry {
    pub task_id: String,
    pub epoch: usize,
    pub vector: TaskVector,
    pub flat: FlatParams,
}

/// Union of all tasks' retained checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDataset {
    pub entries: Vec<CombinedEntry>,
}

impl CombinedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits off the last tenth of each task's checkpoints (by epoch
    /// order) for reconstruction validation.
    pub fn split_holdout(&self) -> (Vec<CombinedEntry>, Vec<CombinedEntry>) {
        let mut per_task: BTreeMap<&str, Vec<&CombinedEntry>> = BTreeMap::new();
        for e in &self.entries {
            per_task.entry(&e.task_id).or_default().push(e);
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (_, mut group) in per_task {
            group.sort_by_key(|e| e.epoch);
            let held_count = group.len() / 10;
            let cut = group.len() - held_count;
            for (i, e) in group.into_iter().enumerate() {
                if i < cut {
                    train.push(e.clone());
                } else {
                    held.push(e.clone());
                }
            }
        }
        (train, held)
    }
}

/// Pairs every retained checkpoint with its task's vector.
pub fn build_combined_dataset(
    sequences: &[CheckpointSequence],
    task_vectors: &BTreeMap<String, TaskVector>,
) -> Result<CombinedDataset> {
    let mut entries = Vec::new();
    let mut cond_dim = None;
    for seq in sequences {
        let vector = task_vectors.get(&seq.task_id).ok_or_else(|| {
            Error::MissingInput(format!("no task vector for task {}", seq.task_id))
        })?;
        match cond_dim {
            None => cond_dim = Some(vector.len()),
            Some(w) if w != vector.len() => {
                return Err(Error::DimMismatch(
                    "task vectors differ in width across tasks".into(),
                ))
            }
            _ => {}
        }
        for (epoch, flat) in &seq.entries {
            if !entries.is_empty() {
                let first: &CombinedEntry = &entries[0];
                if first.flat.shape != flat.shape {
                    return Err(Error::DimMismatch(
                        "checkpoints differ in manifest across tasks".into(),
                    ));
                }
            }
            entries.push(CombinedEntry {
                task_id: seq.task_id.clone(),
                epoch: *epoch,
                vector: vector.clone(),
                flat: flat.clone(),
            });
        }
    }
    Ok(CombinedDataset { entries })
}

/// K gradient steps with a caller-supplied loss/gradient function over
/// flat parameters. Exact identity when beta == 0 or k == 0.
pub fn inner_adapt_with<F>(theta_init: &FlatParams, beta: f64, k: usize, mut grad_fn: F) -> Result<FlatParams>
where
    F: FnMut(&FlatParams) -> Result<(f64, Vec<f64>)>,
{
    if beta == 0.0 || k == 0 {
        return Ok(theta_init.clone());
    }
    let mut theta = theta_init.clone();
    for step in 0..k {
        let (loss, grad) = grad_fn(&theta)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "inner adaptation loss at step {step}"
            )));
        }
        if grad.len() != theta.data.len() {
            return Err(Error::DimMismatch(
                "inner gradient length mismatch".into(),
            ));
        }
        for (t, g) in theta.data.iter_mut().zip(&grad) {
            *t -= beta * g;
        }
    }
    Ok(theta)
}

/// K steps of gradient descent on the task loss, starting from a decoded
/// adapter.
pub fn inner_adapt(
    base: &BaseModel,
    theta_init: &FlatParams,
    task_data: &TaskDataset,
    beta: f64,
    k: usize,
) -> Result<FlatParams> {
    inner_adapt_with(theta_init, beta, k, |theta| {
        let adapter = unflatten(theta)?;
        let (loss, grads) = lora_grad(base, &adapter, task_data)?;
        Ok((loss, flatten(&grads).data))
    })
}

/// One element of a meta batch: a combined-dataset entry plus the inner
/// mini-batch drawn for this iteration.
#[derive(Debug, Clone)]
pub struct MetaBatchEntry {
    pub task_id: String,
    pub epoch: usize,
    pub vector: TaskVector,
    pub flat: FlatParams,
    pub data: TaskDataset,
}

/// Batch loss and parameter gradients of the truncated meta objective.
///
/// Entries must already be in reduction order and `eps_list` aligned with
/// them. When `frozen_adapts` is given (the finite-difference oracle),
/// those adapted parameters feed the re-encoding instead of freshly
/// computed ones; otherwise adaptation runs from the current decode.
/// Returns the adapted parameters actually used.
pub fn meta_batch_eval(
    vae: &VaeParams,
    base: &BaseModel,
    batch: &[&MetaBatchEntry],
    eps_list: &[Vec<f64>],
    frozen_adapts: Option<&[FlatParams]>,
    cfg: &MetaConfig,
) -> Result<(LossBreakdown, VaeGrads, Vec<FlatParams>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("meta batch is empty".into()));
    }
    if eps_list.len() != batch.len() {
        return Err(Error::DimMismatch("one noise vector per entry required".into()));
    }
    if let Some(f) = frozen_adapts {
        if f.len() != batch.len() {
            return Err(Error::DimMismatch(
                "one frozen adaptation per entry required".into(),
            ));
        }
    }
    let mut total = LossBreakdown::zero(cfg.lambda_kl);
    let mut grads = VaeGrads::zeros(vae);
    let mut adapts = Vec::with_capacity(batch.len());
    let d_flat = vae.input_dim as f64;

    for (idx, entry) in batch.iter().enumerate() {
        let v = entry.vector.data.data();
        let (g, ecache) = vae.encode_cached(&entry.flat.data, v)?;
        let eps = &eps_list[idx];
        if eps.len() != vae.latent_dim {
            return Err(Error::DimMismatch("noise width mismatch".into()));
        }
        let mu = g.mu.data();
        let lv = g.log_var.data();
        let z: Vec<f64> = mu
            .iter()
            .zip(lv)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        // one decode serves as both the adaptation start and the
        // reconstruction
        let (theta_init_data, dcache) = vae.decode_cached(&z, v)?;
        let theta_init = FlatParams::new(entry.flat.shape.clone(), theta_init_data)?;

        let theta_adapt = match frozen_adapts {
            Some(f) => f[idx].clone(),
            None => inner_adapt(base, &theta_init, &entry.data, cfg.beta, cfg.inner_steps)?,
        };
        let (g2, ecache2) = vae.encode_cached(&theta_adapt.data, v)?;

        let recon = crate::fvae::recon_loss(&entry.flat, &theta_init)?;
        let kl = crate::fvae::kl_to_standard_normal(&g2);
        let breakdown = LossBreakdown::new(recon, kl, cfg.lambda_kl)?;
        if !breakdown.meta.is_finite() {
            return Err(Error::NonFinite(format!(
                "meta loss for task {} epoch {}",
                entry.task_id, entry.epoch
            )));
        }
        total = total.accumulate(&breakdown)?;

        // reconstruction path: through the decode and the first encode
        let dlhat: Vec<f64> = theta_init
            .data
            .iter()
            .zip(&entry.flat.data)
            .map(|(y, t)| 2.0 * (y - t) / d_flat)
            .collect();
        let dz = decoder_backward(vae, &dcache, &dlhat, &mut grads.dec);
        let mut dmu = vec![0.0; vae.latent_dim];
        let mut dlv = vec![0.0; vae.latent_dim];
        for j in 0..vae.latent_dim {
            dmu[j] = dz[j];
            dlv[j] = dz[j] * 0.5 * (0.5 * lv[j]).exp() * eps[j];
        }
        encoder_backward(vae, &ecache, &dmu, &dlv, &mut grads.enc);

        // KL path: through the re-encoding only (adapted input constant)
        let mu2 = g2.mu.data();
        let lv2 = g2.log_var.data();
        let mut dmu2 = vec![0.0; vae.latent_dim];
        let mut dlv2 = vec![0.0; vae.latent_dim];
        for j in 0..vae.latent_dim {
            dmu2[j] = cfg.lambda_kl * mu2[j];
            dlv2[j] = -cfg.lambda_kl * 0.5 * (1.0 - lv2[j].exp());
        }
        encoder_backward(vae, &ecache2, &dmu2, &dlv2, &mut grads.enc);

        adapts.push(theta_adapt);
    }
    grads.check_finite()?;
    Ok((total, grads, adapts))
}

/// One outer update. Entries are reduced in (task_id, epoch) order, with
/// per-entry noise drawn in that order, so the result is invariant to the
/// batch's incoming permutation. gamma == 0 leaves the parameters
/// bit-identical.
pub fn meta_step(
    vae: &VaeParams,
    base: &BaseModel,
    batch: &[MetaBatchEntry],
    cfg: &MetaConfig,
    eps_stream: &mut RngStream,
) -> Result<(VaeParams, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("meta batch is empty".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        (batch[a].task_id.as_str(), batch[a].epoch).cmp(&(batch[b].task_id.as_str(), batch[b].epoch))
    });
    let sorted: Vec<&MetaBatchEntry> = order.iter().map(|&i| &batch[i]).collect();
    let eps_list: Vec<Vec<f64>> = sorted
        .iter()
        .map(|_| eps_stream.normal_vec(vae.latent_dim))
        .collect();
    let (total, grads, _) = meta_batch_eval(vae, base, &sorted, &eps_list, None, cfg)?;
    if cfg.gamma == 0.0 {
        return Ok((vae.clone(), total));
    }
    let mut next = vae.clone();
    next.step(&grads, cfg.gamma);
    next.check_finite()?;
    Ok((next, total))
}

/// Loss trace of a meta-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaHistoryRow {
    pub iteration: usize,
    pub recon: f64,
    pub kl: f64,
    pub meta: f64,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaHistory {
    pub rows: Vec<MetaHistoryRow>,
}

impl MetaHistory {
    /// CSV with columns iteration, recon, kl, meta (timings excluded so
    /// reruns stay byte-identical).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("iteration,recon,kl,meta\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.iteration, row.recon, row.kl, row.meta
            ));
        }
        out
    }

    /// Mean meta loss over a trailing window ending at `end` (1-based
    /// iteration index).
    pub fn smoothed_meta(&self, end: usize, window: usize) -> Option<f64> {
        if end == 0 || end > self.rows.len() || window == 0 || end < window {
            return None;
        }
        let slice = &self.rows[end - window..end];
        Some(slice.iter().map(|r| r.meta).sum::<f64>() / window as f64)
    }
}

/// Everything the meta loop needs about one task.
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub task_id: String,
    pub vector: TaskVector,
    pub sequence: CheckpointSequence,
    pub train_data: TaskDataset,
}

/// Result of a meta-training run: trained parameters, loss history, and
/// the held-out checkpoints reserved for reconstruction validation.
#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub params: VaeParams,
    pub history: MetaHistory,
    pub held_out: Vec<CombinedEntry>,
}

/// Runs M meta iterations over the combined dataset. The standardizer is
/// fitted once from the training split before the first iteration.
pub fn train_meta(
    base: &BaseModel,
    tasks: &[MetaTask],
    cfg: &MetaConfig,
    vae_init: &VaeParams,
    seed: u64,
) -> Result<MetaOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks for meta-training".into()));
    }
    if cfg.iters == 0 {
        return Ok(MetaOutcome {
            params: vae_init.clone(),
            history: MetaHistory::default(),
            held_out: Vec::new(),
        });
    }
    let sequences: Vec<CheckpointSequence> = tasks.iter().map(|t| t.sequence.clone()).collect();
    let vectors: BTreeMap<String, TaskVector> = tasks
        .iter()
        .map(|t| (t.task_id.clone(), t.vector.clone()))
        .collect();
    let combined = build_combined_dataset(&sequences, &vectors)?;
    let (train, held_out) = combined.split_holdout();
    if train.is_empty() {
        return Err(Error::InvalidInput(
            "combined dataset has no training entries".into(),
        ));
    }
    let datasets: BTreeMap<&str, &TaskDataset> = tasks
        .iter()
        .map(|t| (t.task_id.as_str(), &t.train_data))
        .collect();

    let mut params = vae_init.clone();
    let flats: Vec<&[f64]> = train.iter().map(|e| e.flat.data.as_slice()).collect();
    let conds: Vec<&[f64]> = train.iter().map(|e| e.vector.data.data()).collect();
    params.fit_standardizer(&flats, &conds)?;

    let mut batch_stream = RngStream::labeled(seed, "meta/batch");
    let mut eps_stream = RngStream::labeled(seed, "meta/eps");
    let mut history = MetaHistory::default();

    for iter in 1..=cfg.iters {
        let started = Instant::now();
        let k = cfg.batch_size.min(train.len());
        let picks = batch_stream.sample_distinct(train.len(), k);
        let mut batch = Vec::with_capacity(k);
        for &pick in &picks {
            let entry = &train[pick];
            let full = datasets.get(entry.task_id.as_str()).ok_or_else(|| {
                Error::MissingInput(format!("no train data for task {}", entry.task_id))
            })?;
            let data = if cfg.inner_steps == 0 || cfg.beta == 0.0 {
                (*full).clone()
            } else {
                let mut inner_stream =
                    RngStream::labeled(seed, &format!("meta/inner/{iter}/{}", entry.task_id));
                let take = cfg.inner_batch.min(full.len());
                let rows = inner_stream.sample_distinct(full.len(), take);
                full.subset(&rows)?
            };
            batch.push(MetaBatchEntry {
                task_id: entry.task_id.clone(),
                epoch: entry.epoch,
                vector: entry.vector.clone(),
                flat: entry.flat.clone(),
                data,
            });
        }
        let (next, breakdown) = meta_step(&params, base, &batch, cfg, &mut eps_stream)
            .map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("iteration {iter}: {msg}"))
                }
                other => other,
            })?;
        params = next;
        history.rows.push(MetaHistoryRow {
            iteration: iter,
            recon: breakdown.recon,
            kl: breakdown.kl,
            meta: breakdown.meta,
            millis: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(MetaOutcome {
        params,
        history,
        held_out,
    })
}

/// Mean reconstruction MSE of entries under the current VAE, decoding
/// from the posterior mean.
pub fn reconstruction_mse(params: &VaeParams, entries: &[CombinedEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("no entries to reconstruct".into()));
    }
    let mut acc = 0.0;
    for e in entries {
        let (g, _) = params.encode_cached(&e.flat.data, e.vector.data.data())?;
        let (lhat, _) = params.decode_cached(g.mu.data(), e.vector.data.data())?;
        acc += crate::fvae::recon_loss_slices(&e.flat.data, &lhat)?;
    }
    Ok(acc / entries.len() as f64)
}

/// Population variance over every element of the entries' flats.
pub fn flat_variance(entries: &[CombinedEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("no entries for variance".into()));
    }
    let mut count = 0usize;
    let mut mean = 0.0;
    for e in entries {
        for &x in &e.flat.data {
            count += 1;
            mean += x;
        }
    }
    let mean = mean / count as f64;
    let mut var = 0.0;
    for e in entries {
        for &x in &e.flat.data {
            let d = x - mean;
            var += d * d;
        }
    }
    Ok(var / count as f64)
}
