//! Adapter fusion: latent-space ICM fusion through the trained VAE, and
//! the training-free parameter-space baselines it is compared against.
//!
//! All mergers are permutation-invariant over their input list. The
//! stochastic ones (dare, dare_ties) key their streams by task_id, not
//! list position, so shuffling the inputs cannot change the result.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fvae::{decode, encode, VaeParams};
use crate::numerics::linalg::{matmul, rank_k_reconstruction, solve, transpose, truncated_svd_factors};
use crate::numerics::{DenseArray, RngStream};
use crate::taskvec::{combine_task_vectors, ProbeBatch, TaskVector};
use crate::toybase::{
    apply_lora, flatten, task_loss, unflatten, AdapterShape, BaseModel, FlatParams, LoraAdapter,
    LoraLayer, TaskDataset,
};

/// Parameter-space task vector: the fine-tuned adapter itself, since the
/// base adapter is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub flat: FlatParams,
    pub task_id: String,
}

impl ParamDelta {
    pub fn new(flat: FlatParams, task_id: impl Into<String>) -> Self {
        ParamDelta {
            flat,
            task_id: task_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.flat.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.data.is_empty()
    }
}

fn require_shared_shape<'a, I>(shapes: I) -> Result<Arc<AdapterShape>>
where
    I: IntoIterator<Item = &'a Arc<AdapterShape>>,
{
    let mut iter = shapes.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidInput("nothing to merge".into()))?;
    for shape in iter {
        if shape != first {
            return Err(Error::DimMismatch(
                "adapters to merge differ in manifest".into(),
            ));
        }
    }
    Ok(Arc::clone(first))
}

/// Element-wise uniform mean of equal-length vectors.
pub fn uniform_mean(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for row in rows {
        if row.len() != d {
            return Err(Error::DimMismatch("vectors differ in length".into()));
        }
        for (o, x) in out.iter_mut().zip(*row) {
            *o += x;
        }
    }
    let n = rows.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// lambda times the element-wise sum.
pub fn scaled_sum(rows: &[&[f64]], lambda: f64) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to sum".into()))?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for row in rows {
        if row.len() != d {
            return Err(Error::DimMismatch("vectors differ in length".into()));
        }
        for (o, x) in out.iter_mut().zip(*row) {
            *o += x;
        }
    }
    for o in &mut out {
        *o *= lambda;
    }
    Ok(out)
}

/// Trim each delta to its top-ceil(density*D) magnitudes, elect a
/// per-coordinate sign from the sum of trimmed values (a zero sum elects
/// positive), then average only the trimmed values that strictly agree
/// with the elected sign. Coordinates with no agreeing survivor are zero.
pub fn ties_combine(rows: &[&[f64]], density: f64) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("nothing to merge".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    let d = rows[0].len();
    for row in rows {
        if row.len() != d {
            return Err(Error::DimMismatch("vectors differ in length".into()));
        }
    }
    let keep = ((density * d as f64).ceil() as usize).min(d);
    let mut trimmed: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .abs()
                .partial_cmp(&row[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut t = vec![0.0; d];
        for &idx in order.iter().take(keep) {
            t[idx] = row[idx];
        }
        trimmed.push(t);
    }
    let mut out = vec![0.0; d];
    for c in 0..d {
        let sum: f64 = trimmed.iter().map(|t| t[c]).sum();
        let positive = sum >= 0.0;
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in &trimmed {
            let v = t[c];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                acc += v;
                count += 1;
            }
        }
        if count > 0 {
            out[c] = acc / count as f64;
        }
    }
    Ok(out)
}

/// Zero each coordinate independently with probability drop_p and rescale
/// survivors by 1/(1 - drop_p), keeping the expectation unchanged.
pub fn dare_sparsify(delta: &[f64], drop_p: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidInput(format!(
            "drop_p must lie in [0, 1), got {drop_p}"
        )));
    }
    let scale = 1.0 / (1.0 - drop_p);
    Ok(delta
        .iter()
        .map(|&v| if rng.uniform() < drop_p { 0.0 } else { v * scale })
        .collect())
}

/// Stack the vectors as matrix rows, reconstruct at the given rank, and
/// average the reconstructed rows.
pub fn svd_latent_combine(rows: &[&[f64]], rank_k: usize) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("nothing to merge".into()));
    }
    if rank_k == 0 || rank_k > rows.len() {
        return Err(Error::InvalidInput(format!(
            "rank {rank_k} invalid for {} vectors",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let mut stacked = Vec::with_capacity(rows.len() * d);
    for row in rows {
        if row.len() != d {
            return Err(Error::DimMismatch("vectors differ in length".into()));
        }
        stacked.extend_from_slice(row);
    }
    let recon = rank_k_reconstruction(&stacked, rows.len(), d, rank_k);
    let views: Vec<&[f64]> = recon.chunks(d).collect();
    uniform_mean(&views)
}

/// Element-wise uniform mean of adapters.
pub fn soup_merge(adapters: &[FlatParams]) -> Result<FlatParams> {
    let shape = require_shared_shape(adapters.iter().map(|a| &a.shape))?;
    let rows: Vec<&[f64]> = adapters.iter().map(|a| a.data.as_slice()).collect();
    FlatParams::new(shape, uniform_mean(&rows)?)
}

/// Task arithmetic: lambda times the sum of deltas.
pub fn ta_merge(deltas: &[ParamDelta], lambda_ta: f64) -> Result<FlatParams> {
    let shape = require_shared_shape(deltas.iter().map(|d| &d.flat.shape))?;
    let rows: Vec<&[f64]> = deltas.iter().map(|d| d.flat.data.as_slice()).collect();
    FlatParams::new(shape, scaled_sum(&rows, lambda_ta)?)
}

/// Trim, elect sign, disjoint-mean.
pub fn ties_merge(deltas: &[ParamDelta], density: f64) -> Result<FlatParams> {
    let shape = require_shared_shape(deltas.iter().map(|d| &d.flat.shape))?;
    let rows: Vec<&[f64]> = deltas.iter().map(|d| d.flat.data.as_slice()).collect();
    FlatParams::new(shape, ties_combine(&rows, density)?)
}

/// Random drop-and-rescale of one delta.
pub fn dare(delta: &ParamDelta, drop_p: f64, rng: &mut RngStream) -> Result<ParamDelta> {
    let data = dare_sparsify(&delta.flat.data, drop_p, rng)?;
    Ok(ParamDelta {
        flat: FlatParams::new(Arc::clone(&delta.flat.shape), data)?,
        task_id: delta.task_id.clone(),
    })
}

/// dare applied per delta (stream keyed by task_id), then ties_merge.
pub fn dare_ties_merge(
    deltas: &[ParamDelta],
    drop_p: f64,
    density: f64,
    seed: u64,
) -> Result<FlatParams> {
    let mut sparsified = Vec::with_capacity(deltas.len());
    for delta in deltas {
        let mut rng = RngStream::labeled(seed, &format!("dare/{}", delta.task_id));
        sparsified.push(dare(delta, drop_p, &mut rng)?);
    }
    ties_merge(&sparsified, density)
}

/// Per-layer Gram-weighted least-squares merge:
/// W* solves (sum Gi + eps I) W*^T = sum Gi Wi^T with ridge
/// eps = 1e-6 * trace(sum Gi) / dim.
pub fn regmean_merge(
    layer_weights: &[Vec<DenseArray>],
    grams: &[Vec<DenseArray>],
) -> Result<Vec<DenseArray>> {
    if layer_weights.is_empty() {
        return Err(Error::InvalidInput("nothing to merge".into()));
    }
    if layer_weights.len() != grams.len() {
        return Err(Error::DimMismatch(
            "one Gram set per task required".into(),
        ));
    }
    let n_layers = layer_weights[0].len();
    for (w, g) in layer_weights.iter().zip(grams) {
        if w.len() != n_layers || g.len() != n_layers {
            return Err(Error::DimMismatch("tasks differ in layer count".into()));
        }
    }
    let mut merged = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let [d_out, d_in] = {
            let dims = layer_weights[0][layer].dims();
            [dims[0], dims[1]]
        };
        let mut g_sum = vec![0.0; d_in * d_in];
        let mut rhs = vec![0.0; d_in * d_out];
        for (w_task, g_task) in layer_weights.iter().zip(grams) {
            let w = &w_task[layer];
            let g = &g_task[layer];
            if w.dims() != [d_out, d_in] || g.dims() != [d_in, d_in] {
                return Err(Error::DimMismatch(format!(
                    "layer {layer} weight or Gram dimensions differ across tasks"
                )));
            }
            for (acc, x) in g_sum.iter_mut().zip(g.data()) {
                *acc += x;
            }
            let wt = transpose(w.data(), d_out, d_in);
            let gw = matmul(g.data(), d_in, d_in, &wt, d_out);
            for (acc, x) in rhs.iter_mut().zip(&gw) {
                *acc += x;
            }
        }
        let mut tr = 0.0;
        for i in 0..d_in {
            tr += g_sum[i * d_in + i];
        }
        let eps = 1e-6 * tr / d_in as f64;
        for i in 0..d_in {
            g_sum[i * d_in + i] += eps;
        }
        let merged_t = solve(&g_sum, d_in, &rhs, d_out)?;
        merged.push(DenseArray::from_vec(
            vec![d_out, d_in],
            transpose(&merged_t, d_in, d_out),
        )?);
    }
    Ok(merged)
}

/// Composed per-layer LoRA updates of one adapter, as dense matrices.
fn composed_updates(base: &BaseModel, adapter: &LoraAdapter) -> Result<Vec<DenseArray>> {
    let scaling = adapter.shape.scaling();
    let mut out = Vec::with_capacity(adapter.layers.len());
    for (layer, (_, d_out, d_in)) in adapter
        .layers
        .iter()
        .zip(base.adapted_layer_dims())
    {
        let r = adapter.shape.rank;
        let mut ba = matmul(layer.b.data(), d_out, r, layer.a.data(), d_in);
        for v in &mut ba {
            *v *= scaling;
        }
        out.push(DenseArray::from_vec(vec![d_out, d_in], ba)?);
    }
    Ok(out)
}

fn gram_of(x: &DenseArray) -> DenseArray {
    let n = x.dims()[0];
    let d = x.dims()[1];
    let xt = transpose(x.data(), n, d);
    let g = matmul(&xt, d, n, x.data(), d);
    DenseArray::from_vec(vec![d, d], g).expect("gram dims are consistent")
}

/// RegMean over LoRA adapters: compose each task's updates into dense
/// matrices, build per-layer Grams from that task's adapted activations
/// on the shared probe, merge, and re-factor each merged update back to
/// rank r by truncated SVD.
pub fn regmean_lora(
    base: &BaseModel,
    deltas: &[ParamDelta],
    probe: &ProbeBatch,
) -> Result<FlatParams> {
    let shape = require_shared_shape(deltas.iter().map(|d| &d.flat.shape))?;
    let mut layer_weights = Vec::with_capacity(deltas.len());
    let mut grams = Vec::with_capacity(deltas.len());
    for delta in deltas {
        let adapter = unflatten(&delta.flat)?;
        layer_weights.push(composed_updates(base, &adapter)?);
        let adapted = apply_lora(base, &adapter)?;
        let cache = adapted.forward_cached(&probe.inputs)?;
        grams.push(vec![gram_of(&cache.x), gram_of(&cache.h1)]);
    }
    let merged = regmean_merge(&layer_weights, &grams)?;
    let r = shape.rank;
    let inv_scaling = 1.0 / shape.scaling();
    let mut layers = Vec::with_capacity(merged.len());
    for (update, (layer, d_out, d_in)) in merged.iter().zip(base.adapted_layer_dims()) {
        let mut m = update.data().to_vec();
        for v in &mut m {
            *v *= inv_scaling;
        }
        let (b, a) = truncated_svd_factors(&m, d_out, d_in, r);
        layers.push(LoraLayer {
            layer,
            a: DenseArray::from_vec(vec![r, d_in], a)?,
            b: DenseArray::from_vec(vec![d_out, r], b)?,
        });
    }
    let adapter = LoraAdapter {
        shape,
        layers,
    };
    Ok(flatten(&adapter))
}

/// Stack flats, reconstruct at rank_k, average rows.
pub fn svd_latent_merge(flats: &[FlatParams], rank_k: usize) -> Result<FlatParams> {
    let shape = require_shared_shape(flats.iter().map(|f| &f.shape))?;
    let rows: Vec<&[f64]> = flats.iter().map(|f| f.data.as_slice()).collect();
    FlatParams::new(shape, svd_latent_combine(&rows, rank_k)?)
}

/// Latent-space fusion: convex combination of posterior means and of
/// task vectors, decoded once.
pub fn icm_fuse(
    vae: &VaeParams,
    entries: &[(FlatParams, TaskVector)],
    weights: &[f64],
) -> Result<FlatParams> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("nothing to fuse".into()));
    }
    require_shared_shape(entries.iter().map(|(f, _)| &f.shape))?;
    if entries.len() != weights.len() {
        return Err(Error::DimMismatch(
            "one weight per fusion entry required".into(),
        ));
    }
    let vectors: Vec<TaskVector> = entries.iter().map(|(_, v)| v.clone()).collect();
    let v_fused = combine_task_vectors(&vectors, weights)?;
    let mut z_fused = vec![0.0; vae.latent_dim];
    for ((flat, vector), &w) in entries.iter().zip(weights) {
        let g = encode(vae, flat, vector)?;
        for (z, m) in z_fused.iter_mut().zip(g.mu.data()) {
            *z += w * m;
        }
    }
    decode(vae, &DenseArray::vector(z_fused)?, &v_fused)
}

/// All weightings on the simplex with coordinates k/S, S = round(1/step),
/// in lexicographic order of the composition counts.
pub fn simplex_grid(n: usize, grid_step: f64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("simplex over zero tasks".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::InvalidInput(format!(
            "grid_step must lie in (0, 0.5], got {grid_step}"
        )));
    }
    let levels = (1.0 / grid_step).round().max(1.0) as usize;
    let mut out = Vec::new();
    let mut counts = vec![0usize; n];
    fill_compositions(levels, 0, &mut counts, &mut out);
    Ok(out
        .into_iter()
        .map(|c| c.iter().map(|&k| k as f64 / levels as f64).collect())
        .collect())
}

fn fill_compositions(remaining: usize, idx: usize, counts: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if idx == counts.len() - 1 {
        counts[idx] = remaining;
        out.push(counts.clone());
        return;
    }
    for take in 0..=remaining {
        counts[idx] = take;
        fill_compositions(remaining - take, idx + 1, counts, out);
    }
}

/// Grid search over the weight simplex minimizing the mean validation
/// task loss of the fused adapter. Ties go to the weighting closest to
/// uniform; remaining ties to the earliest grid candidate.
pub fn select_fusion_weights(
    vae: &VaeParams,
    base: &BaseModel,
    entries: &[(FlatParams, TaskVector)],
    eval_sets: &[TaskDataset],
    grid_step: f64,
) -> Result<Vec<f64>> {
    if eval_sets.is_empty() {
        return Err(Error::InvalidInput("no evaluation sets".into()));
    }
    let candidates = simplex_grid(entries.len(), grid_step)?;
    let uniform = 1.0 / entries.len() as f64;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for weights in candidates {
        let fused = icm_fuse(vae, entries, &weights)?;
        let adapter = unflatten(&fused)?;
        let adapted = apply_lora(base, &adapter)?;
        let mut loss = 0.0;
        for set in eval_sets {
            loss += task_loss(&adapted, set)?;
        }
        loss /= eval_sets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(
                "fusion candidate produced a non-finite loss".into(),
            ));
        }
        let dist: f64 = weights.iter().map(|w| (w - uniform) * (w - uniform)).sum();
        let better = match &best {
            None => true,
            Some((best_loss, best_dist, _)) => {
                loss < *best_loss || (loss == *best_loss && dist < *best_dist)
            }
        };
        if better {
            best = Some((loss, dist, weights));
        }
    }
    Ok(best.expect("grid is never empty").2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PretrainConfig};
    use crate::fvae::init_vae;
    use crate::toybase::pretrain;
    use proptest::prelude::*;

    fn shape_d(d_in: usize, d_out: usize) -> Arc<AdapterShape> {
        Arc::new(AdapterShape::new(1, 1.0, &[(0, d_out, d_in)]).unwrap())
    }

    fn flat(shape: &Arc<AdapterShape>, data: Vec<f64>) -> FlatParams {
        FlatParams::new(Arc::clone(shape), data).unwrap()
    }

    #[test]
    fn soup_examples() {
        let shape = shape_d(1, 1);
        let a = flat(&shape, vec![1.0, 3.0]);
        let b = flat(&shape, vec![3.0, 1.0]);
        assert_eq!(soup_merge(&[a.clone()]).unwrap().data, vec![1.0, 3.0]);
        assert_eq!(
            soup_merge(&[a.clone(), a.clone()]).unwrap().data,
            vec![1.0, 3.0]
        );
        let neg = flat(&shape, vec![-1.0, -3.0]);
        assert_eq!(soup_merge(&[a.clone(), neg]).unwrap().data, vec![0.0, 0.0]);
        assert_eq!(soup_merge(&[a, b]).unwrap().data, vec![2.0, 2.0]);
        assert!(soup_merge(&[]).is_err());
    }

    #[test]
    fn ta_examples() {
        let shape = shape_d(1, 1);
        let d1 = ParamDelta::new(flat(&shape, vec![1.0, 0.0]), "t1");
        let d2 = ParamDelta::new(flat(&shape, vec![0.0, 1.0]), "t2");
        assert_eq!(
            ta_merge(&[d1.clone(), d2.clone()], 0.0).unwrap().data,
            vec![0.0, 0.0]
        );
        assert_eq!(ta_merge(&[d1.clone()], 1.0).unwrap().data, vec![1.0, 0.0]);
        assert_eq!(ta_merge(&[d1, d2], 0.5).unwrap().data, vec![0.5, 0.5]);
    }

    #[test]
    fn ties_single_delta_full_density_is_identity() {
        let rows: Vec<&[f64]> = vec![&[0.5, -2.0, 0.0]];
        assert_eq!(ties_combine(&rows, 1.0).unwrap(), vec![0.5, -2.0, 0.0]);
    }

    #[test]
    fn ties_hand_traced_sign_election() {
        let rows: Vec<&[f64]> = vec![&[2.0], &[-1.0]];
        assert_eq!(ties_combine(&rows, 1.0).unwrap(), vec![2.0]);
    }

    #[test]
    fn ties_hand_traced_trim_and_tie() {
        let rows: Vec<&[f64]> = vec![&[1.0, 10.0], &[1.0, -10.0]];
        assert_eq!(ties_combine(&rows, 0.5).unwrap(), vec![0.0, 10.0]);
    }

    #[test]
    fn dare_zero_drop_is_identity() {
        let mut rng = RngStream::labeled(7, "test/dare");
        let data = vec![1.5, -0.25, 4.0];
        assert_eq!(dare_sparsify(&data, 0.0, &mut rng).unwrap(), data);
    }

    #[test]
    fn dare_survivors_are_exactly_rescaled() {
        let mut rng = RngStream::labeled(8, "test/dare");
        let data = vec![4.0; 64];
        let out = dare_sparsify(&data, 0.25, &mut rng).unwrap();
        let mut survivors = 0;
        for v in out {
            if v != 0.0 {
                assert_eq!(v, 4.0 / 0.75);
                survivors += 1;
            }
        }
        assert!(survivors > 0);
    }

    #[test]
    fn dare_is_unbiased_over_trials() {
        let mut rng = RngStream::labeled(9, "test/dare-mc");
        let trials = 10_000;
        let mut mean = 0.0;
        for _ in 0..trials {
            mean += dare_sparsify(&[4.0], 0.5, &mut rng).unwrap()[0];
        }
        mean /= trials as f64;
        // per-trial variance: (4/(1-p))^2 p(1-p) = 16 at p = 0.5
        let se = 4.0 / (trials as f64).sqrt();
        assert!(
            (mean - 4.0).abs() <= 3.0 * se,
            "biased mean {mean}, tolerance {}",
            3.0 * se
        );
    }

    #[test]
    fn dare_ties_zero_drop_equals_ties() {
        let shape = shape_d(2, 2);
        let d1 = ParamDelta::new(flat(&shape, vec![1.0, -0.5, 2.0, 0.25]), "t1");
        let d2 = ParamDelta::new(flat(&shape, vec![0.5, 0.75, -2.0, 0.5]), "t2");
        let composed = dare_ties_merge(&[d1.clone(), d2.clone()], 0.0, 0.5, 3).unwrap();
        let plain = ties_merge(&[d1, d2], 0.5).unwrap();
        assert_eq!(composed.data, plain.data);
    }

    #[test]
    fn dare_ties_is_seed_deterministic_and_order_invariant() {
        let shape = shape_d(2, 2);
        let d1 = ParamDelta::new(flat(&shape, vec![1.0, -0.5, 2.0, 0.25]), "t1");
        let d2 = ParamDelta::new(flat(&shape, vec![0.5, 0.75, -2.0, 0.5]), "t2");
        let a = dare_ties_merge(&[d1.clone(), d2.clone()], 0.3, 0.5, 11).unwrap();
        let b = dare_ties_merge(&[d1.clone(), d2.clone()], 0.3, 0.5, 11).unwrap();
        let c = dare_ties_merge(&[d2, d1], 0.3, 0.5, 11).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data, c.data);
    }

    #[test]
    fn regmean_identical_grams_is_uniform_mean() {
        let g = DenseArray::from_vec(vec![2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let w1 = DenseArray::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w2 = DenseArray::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let merged = regmean_merge(
            &[vec![w1.clone()], vec![w2.clone()]],
            &[vec![g.clone()], vec![g.clone()]],
        )
        .unwrap();
        // the ridge shifts the solution away from the exact mean by
        // O(eps / lambda_min) ~ 1e-5 here
        for i in 0..4 {
            let expect = (w1.data()[i] + w2.data()[i]) / 2.0;
            assert!((merged[0].data()[i] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn regmean_single_task_returns_own_weights() {
        let g = DenseArray::from_vec(vec![2, 2], vec![1.0, 0.25, 0.25, 2.0]).unwrap();
        let w = DenseArray::from_vec(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let merged = regmean_merge(&[vec![w.clone()]], &[vec![g]]).unwrap();
        for i in 0..4 {
            assert!((merged[0].data()[i] - w.data()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn regmean_selection_case_matches_hand_solve() {
        let eps_in = 1e-4;
        let g1 = DenseArray::from_vec(vec![2, 2], vec![1.0 + eps_in, 0.0, 0.0, eps_in]).unwrap();
        let g2 = DenseArray::from_vec(vec![2, 2], vec![eps_in, 0.0, 0.0, 1.0 + eps_in]).unwrap();
        let w1 = DenseArray::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w2 = DenseArray::from_vec(vec![2, 2], vec![-5.0, -6.0, -7.0, -8.0]).unwrap();
        let merged = regmean_merge(
            &[vec![w1.clone()], vec![w2.clone()]],
            &[vec![g1.clone()], vec![g2.clone()]],
        )
        .unwrap();

        // independent 2x2 inversion of the same normal equations
        let gs = [
            g1.data()[0] + g2.data()[0],
            0.0,
            0.0,
            g1.data()[3] + g2.data()[3],
        ];
        let ridge = 1e-6 * (gs[0] + gs[3]) / 2.0;
        let a00 = gs[0] + ridge;
        let a11 = gs[3] + ridge;
        let w1t = transpose(w1.data(), 2, 2);
        let w2t = transpose(w2.data(), 2, 2);
        let g1w = matmul(g1.data(), 2, 2, &w1t, 2);
        let g2w = matmul(g2.data(), 2, 2, &w2t, 2);
        let mut expect_t = [0.0; 4];
        for c in 0..2 {
            expect_t[c] = (g1w[c] + g2w[c]) / a00;
            expect_t[2 + c] = (g1w[2 + c] + g2w[2 + c]) / a11;
        }
        let expect = transpose(&expect_t, 2, 2);
        for i in 0..4 {
            assert!(
                (merged[0].data()[i] - expect[i]).abs() < 1e-10,
                "coord {i}: {} vs {}",
                merged[0].data()[i],
                expect[i]
            );
        }
    }

    fn small_base(seed: u64) -> BaseModel {
        let model_cfg = ModelConfig {
            input_dim: 4,
            hidden_dim: 6,
            output_dim: 4,
        };
        let pre_cfg = PretrainConfig {
            epochs: 30,
            lr: 0.3,
            n_samples: 32,
        };
        pretrain(&model_cfg, &pre_cfg, seed).unwrap()
    }

    fn random_delta(base: &BaseModel, rank: usize, seed: u64, task_id: &str) -> ParamDelta {
        let shape = base.adapter_shape(rank, rank as f64).unwrap();
        let mut rng = RngStream::labeled(seed, &format!("test/delta/{task_id}"));
        let data = rng.normal_vec(shape.flat_len());
        ParamDelta::new(FlatParams::new(shape, data).unwrap(), task_id)
    }

    #[test]
    fn regmean_lora_single_task_recovers_its_update() {
        let base = small_base(20);
        let delta = random_delta(&base, 2, 20, "t1");
        let probe = ProbeBatch::shared(16, 4, 20).unwrap();
        let merged = regmean_lora(&base, &[delta.clone()], &probe).unwrap();
        let adapter = unflatten(&delta.flat).unwrap();
        let orig = composed_updates(&base, &adapter).unwrap();
        let back = composed_updates(&base, &unflatten(&merged).unwrap()).unwrap();

        // the single-task solution is W (I + eps G^-1)^-1, so the drift
        // is bounded by eps / lambda_min(G) times the update norm; the
        // rank-r refactor adds at most the same order again
        let adapted = apply_lora(&base, &adapter).unwrap();
        let cache = adapted.forward_cached(&probe.inputs).unwrap();
        for ((o, b), x) in orig.iter().zip(&back).zip([&cache.x, &cache.h1]) {
            let g = gram_of(x);
            let d_in = g.dims()[0];
            let tr: f64 = (0..d_in).map(|i| g.at(i, i)).sum();
            let ridge = 1e-6 * tr / d_in as f64;
            let (eigvals, _) = crate::numerics::linalg::jacobi_eigh(g.data(), d_in);
            let lambda_min = eigvals.iter().cloned().fold(f64::INFINITY, f64::min);
            let frob: f64 = o.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let bound = 4.0 * ridge / lambda_min * frob + 1e-9;
            for (v, w) in o.data().iter().zip(b.data()) {
                assert!((v - w).abs() < bound, "update drifted: {v} vs {w} (bound {bound})");
            }
        }
    }

    #[test]
    fn regmean_lora_is_order_invariant() {
        let base = small_base(21);
        let d1 = random_delta(&base, 2, 21, "t1");
        let d2 = random_delta(&base, 2, 22, "t2");
        let probe = ProbeBatch::shared(16, 4, 21).unwrap();
        let ab = regmean_lora(&base, &[d1.clone(), d2.clone()], &probe).unwrap();
        let ba = regmean_lora(&base, &[d2, d1], &probe).unwrap();
        for (x, y) in ab.data.iter().zip(&ba.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn svd_full_rank_equals_soup() {
        let shape = shape_d(3, 3);
        let mut rng = RngStream::labeled(30, "test/svd");
        let flats: Vec<FlatParams> = (0..3)
            .map(|_| flat(&shape, rng.normal_vec(shape.flat_len())))
            .collect();
        let svd = svd_latent_merge(&flats, 3).unwrap();
        let soup = soup_merge(&flats).unwrap();
        for (x, y) in svd.data.iter().zip(&soup.data) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn svd_identical_flats_rank_one_is_that_flat() {
        let shape = shape_d(2, 2);
        let f = flat(&shape, vec![1.0, -2.0, 0.5, 3.0]);
        let merged = svd_latent_merge(&[f.clone(), f.clone()], 1).unwrap();
        for (x, y) in merged.data.iter().zip(&f.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn svd_orthogonal_flats_rank_one_keeps_dominant_component() {
        let rows: Vec<&[f64]> = vec![&[2.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]];
        let merged = svd_latent_combine(&rows, 1).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.0];
        for (x, y) in merged.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn svd_rank_bounds_are_enforced() {
        let rows: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        assert!(svd_latent_combine(&rows, 0).is_err());
        assert!(svd_latent_combine(&rows, 3).is_err());
    }

    fn vae_fixture(base: &BaseModel, seed: u64) -> (VaeParams, Vec<(FlatParams, TaskVector)>) {
        let shape = base.adapter_shape(1, 1.0).unwrap();
        let cond = base.hidden_dim;
        let vae = init_vae(Arc::clone(&shape), cond, 2, 8, seed).unwrap();
        let mut rng = RngStream::labeled(seed, "test/fuse-entries");
        let entries: Vec<(FlatParams, TaskVector)> = (0..2)
            .map(|i| {
                let f = FlatParams::new(Arc::clone(&shape), rng.normal_vec(shape.flat_len()))
                    .unwrap();
                let v = TaskVector {
                    data: DenseArray::vector(rng.normal_vec(cond)).unwrap(),
                    task_id: format!("t{i}"),
                };
                (f, v)
            })
            .collect();
        (vae, entries)
    }

    #[test]
    fn icm_single_entry_is_vae_reconstruction() {
        let base = small_base(40);
        let (vae, entries) = vae_fixture(&base, 40);
        let fused = icm_fuse(&vae, &entries[..1], &[1.0]).unwrap();
        let g = encode(&vae, &entries[0].0, &entries[0].1).unwrap();
        let recon = decode(&vae, &g.mu, &entries[0].1).unwrap();
        assert_eq!(fused.data, recon.data);
    }

    #[test]
    fn icm_duplicate_entries_match_single() {
        let base = small_base(41);
        let (vae, entries) = vae_fixture(&base, 41);
        let pair = vec![entries[0].clone(), entries[0].clone()];
        let fused = icm_fuse(&vae, &pair, &[0.5, 0.5]).unwrap();
        let single = icm_fuse(&vae, &entries[..1], &[1.0]).unwrap();
        for (x, y) in fused.data.iter().zip(&single.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn icm_rejects_bad_weights() {
        let base = small_base(42);
        let (vae, entries) = vae_fixture(&base, 42);
        assert!(icm_fuse(&vae, &entries, &[0.7, 0.7]).is_err());
        assert!(icm_fuse(&vae, &entries, &[-0.5, 1.5]).is_err());
        assert!(icm_fuse(&vae, &[], &[]).is_err());
    }

    #[test]
    fn simplex_grid_counts_candidates() {
        let grid = simplex_grid(2, 0.25).unwrap();
        assert_eq!(grid.len(), 5);
        for weights in &grid {
            let sum: f64 = weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(simplex_grid(1, 0.25).unwrap(), vec![vec![1.0]]);
        assert!(simplex_grid(2, 0.0).is_err());
        assert!(simplex_grid(2, 0.6).is_err());
    }

    #[test]
    fn weight_selection_breaks_ties_toward_uniform() {
        // zero flats and zero vectors give mu = 0 under the freshly
        // initialized encoder (zero biases, identity standardizer), so
        // every candidate decodes the same adapter and the losses tie
        // exactly
        let base = small_base(43);
        let shape = base.adapter_shape(1, 1.0).unwrap();
        let vae = init_vae(Arc::clone(&shape), 6, 2, 8, 43).unwrap();
        let zero_flat = FlatParams::new(Arc::clone(&shape), vec![0.0; shape.flat_len()]).unwrap();
        let zero_vec = TaskVector {
            data: DenseArray::vector(vec![0.0; 6]).unwrap(),
            task_id: "t0".into(),
        };
        let pair = vec![
            (zero_flat.clone(), zero_vec.clone()),
            (zero_flat, zero_vec),
        ];
        let mut rng = RngStream::labeled(43, "test/eval-x");
        let inputs = DenseArray::from_vec(vec![8, 4], rng.normal_vec(8 * 4)).unwrap();
        let targets = DenseArray::from_vec(vec![8, 4], rng.normal_vec(8 * 4)).unwrap();
        let eval = TaskDataset {
            inputs,
            targets,
            split: crate::toybase::Split::Val,
            kind: crate::toybase::TaskKind::Regression,
            n_classes: 0,
        };
        let weights = select_fusion_weights(&vae, &base, &pair, &[eval], 0.25).unwrap();
        assert_eq!(weights, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn ties_never_exceeds_max_input_magnitude(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
            density in 0.2f64..1.0,
        ) {
            let rows: Vec<&[f64]> = vec![&a, &b];
            let merged = ties_combine(&rows, density).unwrap();
            for (c, m) in merged.iter().enumerate() {
                let cap = a[c].abs().max(b[c].abs());
                prop_assert!(m.abs() <= cap + 1e-12);
            }
        }

        #[test]
        fn soup_and_ties_are_permutation_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            c in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let fwd: Vec<&[f64]> = vec![&a, &b, &c];
            let rev: Vec<&[f64]> = vec![&c, &b, &a];
            let soup_f = uniform_mean(&fwd).unwrap();
            let soup_r = uniform_mean(&rev).unwrap();
            for (x, y) in soup_f.iter().zip(&soup_r) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let ties_f = ties_combine(&fwd, 0.5).unwrap();
            let ties_r = ties_combine(&rev, 0.5).unwrap();
            for (x, y) in ties_f.iter().zip(&ties_r) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
