//! Fusion VAE: a task-vector-conditioned encoder/decoder over flattened
//! LoRA parameters, with closed-form KL and reparameterized ELBO losses.

pub mod backward;

use std::sync::Arc;

pub use backward::{
    decoder_backward, encoder_backward, vae_backward, vae_backward_with_noise, DecoderGrads,
    EncoderGrads, VaeGrads,
};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::taskvec::TaskVector;
use crate::toybase::{AdapterShape, FlatParams};

/// Bounds applied to the encoder's log-variance head.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Floor for standardization scales.
const SCALE_FLOOR: f64 = 1e-8;

/// Gaussian posterior over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: DenseArray,
    pub log_var: DenseArray,
}

/// Per-coordinate affine standardization of the VAE's inputs and outputs.
/// Identity at init; fitted once from the combined dataset before
/// meta-training. Losses are always computed in actual parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub flat_mean: DenseArray,
    pub flat_scale: DenseArray,
    pub cond_mean: DenseArray,
    pub cond_scale: DenseArray,
}

impl Standardizer {
    pub fn identity(input_dim: usize, cond_dim: usize) -> Self {
        Self {
            flat_mean: DenseArray::zeros(vec![input_dim]),
            flat_scale: DenseArray::from_parts(vec![input_dim], vec![1.0; input_dim]),
            cond_mean: DenseArray::zeros(vec![cond_dim]),
            cond_scale: DenseArray::from_parts(vec![cond_dim], vec![1.0; cond_dim]),
        }
    }

    /// Per-coordinate mean and floored standard deviation over rows.
    pub fn fit(rows: &[&[f64]], width: usize) -> Result<(DenseArray, DenseArray)> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("standardizer needs at least one row".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for row in rows {
            if row.len() != width {
                return Err(Error::DimMismatch("standardizer row width mismatch".into()));
            }
            for (m, x) in mean.iter_mut().zip(*row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; width];
        for row in rows {
            for ((v, x), m) in var.iter_mut().zip(*row).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| (v / n).sqrt().max(SCALE_FLOOR))
            .collect();
        Ok((
            DenseArray::from_vec(vec![width], mean)?,
            DenseArray::from_vec(vec![width], scale)?,
        ))
    }
}

/// Encoder (phi) and decoder (psi) parameters, both two-hidden-layer tanh
/// MLPs. The encoder maps [flat; cond] to (mu, log_var); the decoder maps
/// [z; cond] back to a flat adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub shape: Arc<AdapterShape>,
    pub input_dim: usize,
    pub cond_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub enc_w1: DenseArray,
    pub enc_b1: DenseArray,
    pub enc_w2: DenseArray,
    pub enc_b2: DenseArray,
    pub enc_mu_w: DenseArray,
    pub enc_mu_b: DenseArray,
    pub enc_lv_w: DenseArray,
    pub enc_lv_b: DenseArray,
    pub dec_w1: DenseArray,
    pub dec_b1: DenseArray,
    pub dec_w2: DenseArray,
    pub dec_b2: DenseArray,
    pub dec_out_w: DenseArray,
    pub dec_out_b: DenseArray,
    pub norm: Standardizer,
}

/// Reconstruction, KL, and their weighted sum. `meta` always equals
/// `recon + lambda_kl * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub meta: f64,
    pub lambda_kl: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, lambda_kl: f64) -> Result<Self> {
        if recon < 0.0 || lambda_kl < 0.0 {
            return Err(Error::InvalidInput(format!(
                "loss components out of range: recon {recon}, lambda_kl {lambda_kl}"
            )));
        }
        // closed-form KL can round to a tiny negative
        let kl = if kl < 0.0 && kl > -1e-12 { 0.0 } else { kl };
        if kl < 0.0 {
            return Err(Error::InvalidInput(format!("negative KL {kl}")));
        }
        let meta = recon + lambda_kl * kl;
        if !meta.is_finite() {
            return Err(Error::NonFinite("loss breakdown".into()));
        }
        Ok(Self {
            recon,
            kl,
            meta,
            lambda_kl,
        })
    }

    /// Component-wise sum for batch accumulation; shares lambda_kl.
    pub fn accumulate(&self, other: &LossBreakdown) -> Result<LossBreakdown> {
        if (self.lambda_kl - other.lambda_kl).abs() > 0.0 {
            return Err(Error::InvalidInput(
                "cannot accumulate breakdowns with different lambda_kl".into(),
            ));
        }
        LossBreakdown::new(self.recon + other.recon, self.kl + other.kl, self.lambda_kl)
    }

    pub fn zero(lambda_kl: f64) -> LossBreakdown {
        LossBreakdown {
            recon: 0.0,
            kl: 0.0,
            meta: 0.0,
            lambda_kl,
        }
    }
}

fn gaussian_array(rng: &mut RngStream, dims: Vec<usize>, std: f64) -> DenseArray {
    let n: usize = dims.iter().product();
    let mut data = rng.normal_vec(n);
    for v in &mut data {
        *v *= std;
    }
    DenseArray::from_parts(dims, data)
}

/// Deterministic small-Gaussian initialization. The log-variance head
/// starts with small weights and bias -2 so early samples stay close to
/// the posterior mean.
pub fn init_vae(
    shape: Arc<AdapterShape>,
    cond_dim: usize,
    latent_dim: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<VaeParams> {
    let input_dim = shape.flat_len();
    if input_dim == 0 || cond_dim == 0 || latent_dim == 0 || hidden_dim == 0 {
        return Err(Error::InvalidInput("VAE dims must be positive".into()));
    }
    let mut rng = RngStream::labeled(seed, "vae/init");
    let enc_in = input_dim + cond_dim;
    let dec_in = latent_dim + cond_dim;
    let h = hidden_dim;
    let enc_w1 = gaussian_array(&mut rng, vec![h, enc_in], 1.0 / (enc_in as f64).sqrt());
    let enc_w2 = gaussian_array(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt());
    let enc_mu_w = gaussian_array(&mut rng, vec![latent_dim, h], 1.0 / (h as f64).sqrt());
    let enc_lv_w = gaussian_array(&mut rng, vec![latent_dim, h], 0.1 / (h as f64).sqrt());
    let mut enc_lv_b = DenseArray::zeros(vec![latent_dim]);
    for v in enc_lv_b.data_mut() {
        *v = -2.0;
    }
    let dec_w1 = gaussian_array(&mut rng, vec![h, dec_in], 1.0 / (dec_in as f64).sqrt());
    let dec_w2 = gaussian_array(&mut rng, vec![h, h], 1.0 / (h as f64).sqrt());
    let dec_out_w = gaussian_array(&mut rng, vec![input_dim, h], 1.0 / (h as f64).sqrt());
    Ok(VaeParams {
        shape,
        input_dim,
        cond_dim,
        latent_dim,
        hidden_dim,
        enc_w1,
        enc_b1: DenseArray::zeros(vec![h]),
        enc_w2,
        enc_b2: DenseArray::zeros(vec![h]),
        enc_mu_w,
        enc_mu_b: DenseArray::zeros(vec![latent_dim]),
        enc_lv_w,
        enc_lv_b,
        dec_w1,
        dec_b1: DenseArray::zeros(vec![h]),
        dec_w2,
        dec_b2: DenseArray::zeros(vec![h]),
        dec_out_w,
        dec_out_b: DenseArray::zeros(vec![input_dim]),
        norm: Standardizer::identity(input_dim, cond_dim),
    })
}

/// Encoder intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Standardized concatenated input [l_std; v_std].
    pub x: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    /// Pre-clamp log-variance, for the clamp gradient mask.
    pub lv_pre: Vec<f64>,
}

/// Decoder intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    /// Concatenated input [z; v_std].
    pub u: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

fn affine(w: &DenseArray, b: &DenseArray, x: &[f64]) -> Vec<f64> {
    let rows = w.dims()[0];
    let cols = w.dims()[1];
    let mut out = b.data().to_vec();
    for i in 0..rows {
        let wrow = &w.data()[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += wrow[j] * x[j];
        }
        out[i] += acc;
    }
    out
}

fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

impl VaeParams {
    fn standardize_flat(&self, l: &[f64]) -> Vec<f64> {
        l.iter()
            .zip(self.norm.flat_mean.data())
            .zip(self.norm.flat_scale.data())
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn standardize_cond(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.norm.cond_mean.data())
            .zip(self.norm.cond_scale.data())
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    /// Forward encoder pass on raw slices, returning intermediates.
    pub fn encode_cached(&self, l: &[f64], v: &[f64]) -> Result<(LatentGaussian, EncoderCache)> {
        if l.len() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "encoder expects flat length {}, got {}",
                self.input_dim,
                l.len()
            )));
        }
        if v.len() != self.cond_dim {
            return Err(Error::DimMismatch(format!(
                "encoder expects cond length {}, got {}",
                self.cond_dim,
                v.len()
            )));
        }
        let mut x = self.standardize_flat(l);
        x.extend(self.standardize_cond(v));
        let mut e1 = affine(&self.enc_w1, &self.enc_b1, &x);
        tanh_inplace(&mut e1);
        let mut e2 = affine(&self.enc_w2, &self.enc_b2, &e1);
        tanh_inplace(&mut e2);
        let mu = affine(&self.enc_mu_w, &self.enc_mu_b, &e2);
        let lv_pre = affine(&self.enc_lv_w, &self.enc_lv_b, &e2);
        let lv: Vec<f64> = lv_pre
            .iter()
            .map(|&v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect();
        let gaussian = LatentGaussian {
            mu: DenseArray::from_vec(vec![self.latent_dim], mu)?,
            log_var: DenseArray::from_vec(vec![self.latent_dim], lv)?,
        };
        Ok((
            gaussian,
            EncoderCache {
                x,
                e1,
                e2,
                lv_pre,
            },
        ))
    }

    /// Forward decoder pass on raw slices; output is in actual parameter
    /// space (de-standardized).
    pub fn decode_cached(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, DecoderCache)> {
        if z.len() != self.latent_dim {
            return Err(Error::DimMismatch(format!(
                "decoder expects latent length {}, got {}",
                self.latent_dim,
                z.len()
            )));
        }
        if v.len() != self.cond_dim {
            return Err(Error::DimMismatch(format!(
                "decoder expects cond length {}, got {}",
                self.cond_dim,
                v.len()
            )));
        }
        let mut u = z.to_vec();
        u.extend(self.standardize_cond(v));
        let mut d1 = affine(&self.dec_w1, &self.dec_b1, &u);
        tanh_inplace(&mut d1);
        let mut d2 = affine(&self.dec_w2, &self.dec_b2, &d1);
        tanh_inplace(&mut d2);
        let o = affine(&self.dec_out_w, &self.dec_out_b, &d2);
        let lhat: Vec<f64> = o
            .iter()
            .zip(self.norm.flat_scale.data())
            .zip(self.norm.flat_mean.data())
            .map(|((y, s), m)| y * s + m)
            .collect();
        Ok((lhat, DecoderCache { u, d1, d2 }))
    }

    /// Fits input/output standardization from combined-dataset rows.
    pub fn fit_standardizer(&mut self, flats: &[&[f64]], conds: &[&[f64]]) -> Result<()> {
        let (fm, fs) = Standardizer::fit(flats, self.input_dim)?;
        let (cm, cs) = Standardizer::fit(conds, self.cond_dim)?;
        self.norm = Standardizer {
            flat_mean: fm,
            flat_scale: fs,
            cond_mean: cm,
            cond_scale: cs,
        };
        Ok(())
    }

    /// Parameter arrays in a fixed order, shared by serialization and the
    /// finite-difference oracle.
    pub fn param_arrays(&self) -> [(&'static str, &DenseArray); 14] {
        [
            ("enc_w1", &self.enc_w1),
            ("enc_b1", &self.enc_b1),
            ("enc_w2", &self.enc_w2),
            ("enc_b2", &self.enc_b2),
            ("enc_mu_w", &self.enc_mu_w),
            ("enc_mu_b", &self.enc_mu_b),
            ("enc_lv_w", &self.enc_lv_w),
            ("enc_lv_b", &self.enc_lv_b),
            ("dec_w1", &self.dec_w1),
            ("dec_b1", &self.dec_b1),
            ("dec_w2", &self.dec_w2),
            ("dec_b2", &self.dec_b2),
            ("dec_out_w", &self.dec_out_w),
            ("dec_out_b", &self.dec_out_b),
        ]
    }

    fn param_arrays_mut(&mut self) -> [&mut DenseArray; 14] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.enc_mu_w,
            &mut self.enc_mu_b,
            &mut self.enc_lv_w,
            &mut self.enc_lv_b,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
            &mut self.dec_out_w,
            &mut self.dec_out_b,
        ]
    }

    /// All trainable parameters flattened in `param_arrays` order.
    pub fn to_flat_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, arr) in self.param_arrays() {
            out.extend_from_slice(arr.data());
        }
        out
    }

    /// Inverse of [`VaeParams::to_flat_vec`], keeping dims and
    /// standardization from `self`.
    pub fn with_flat_vec(&self, flat: &[f64]) -> Result<VaeParams> {
        let mut out = self.clone();
        let mut offset = 0;
        for arr in out.param_arrays_mut() {
            let n = arr.len();
            if offset + n > flat.len() {
                return Err(Error::DimMismatch("flat parameter vector too short".into()));
            }
            arr.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::DimMismatch("flat parameter vector too long".into()));
        }
        Ok(out)
    }

    /// In-place gradient step `self -= lr * grads`.
    pub fn step(&mut self, grads: &VaeGrads, lr: f64) {
        let targets = self.param_arrays_mut();
        let sources = grads.arrays();
        for (t, s) in targets.into_iter().zip(sources) {
            for (v, g) in t.data_mut().iter_mut().zip(s.data()) {
                *v -= lr * g;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, arr) in self.param_arrays() {
            arr.check_finite(name)?;
        }
        Ok(())
    }
}

/// Posterior parameters q_phi(z | [l; v]).
pub fn encode(params: &VaeParams, flat: &FlatParams, v: &TaskVector) -> Result<LatentGaussian> {
    let (g, _) = params.encode_cached(&flat.data, v.data.data())?;
    Ok(g)
}

/// Mean reconstruction p_psi(l | [z; v]), attached to the experiment
/// manifest.
pub fn decode(params: &VaeParams, z: &DenseArray, v: &TaskVector) -> Result<FlatParams> {
    let (lhat, _) = params.decode_cached(z.data(), v.data.data())?;
    FlatParams::new(Arc::clone(&params.shape), lhat)
}

/// KL(N(mu, sigma^2) || N(0, I)) in closed form.
pub fn kl_to_standard_normal(g: &LatentGaussian) -> f64 {
    let mut acc = 0.0;
    for (mu, lv) in g.mu.data().iter().zip(g.log_var.data()) {
        acc += 1.0 + lv - mu * mu - lv.exp();
    }
    let kl = -0.5 * acc;
    if kl < 0.0 && kl > -1e-12 {
        0.0
    } else {
        kl
    }
}

/// Mean squared element-wise difference.
pub fn recon_loss(original: &FlatParams, recon: &FlatParams) -> Result<f64> {
    recon_loss_slices(&original.data, &recon.data)
}

pub(crate) fn recon_loss_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "reconstruction length {} vs original {}",
            b.len(),
            a.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty parameter vectors".into()));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Single-sample reparameterized ELBO objective with injected noise.
pub fn elbo_loss_with_noise(
    params: &VaeParams,
    flat: &FlatParams,
    v: &TaskVector,
    lambda_kl: f64,
    eps: &[f64],
) -> Result<LossBreakdown> {
    if eps.len() != params.latent_dim {
        return Err(Error::DimMismatch(format!(
            "noise length {} vs latent dim {}",
            eps.len(),
            params.latent_dim
        )));
    }
    let (g, _) = params.encode_cached(&flat.data, v.data.data())?;
    let z: Vec<f64> = g
        .mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .zip(eps)
        .map(|((mu, lv), e)| mu + (0.5 * lv).exp() * e)
        .collect();
    let (lhat, _) = params.decode_cached(&z, v.data.data())?;
    let recon = recon_loss_slices(&flat.data, &lhat)?;
    let kl = kl_to_standard_normal(&g);
    LossBreakdown::new(recon, kl, lambda_kl)
}

/// Single-sample reparameterized ELBO objective with sampled noise.
pub fn elbo_loss(
    params: &VaeParams,
    flat: &FlatParams,
    v: &TaskVector,
    lambda_kl: f64,
    rng: &mut RngStream,
) -> Result<LossBreakdown> {
    let eps = rng.normal_vec(params.latent_dim);
    elbo_loss_with_noise(params, flat, v, lambda_kl, &eps)
}

#[cfg(test)]
pub(crate) fn test_shape(d: usize) -> Arc<AdapterShape> {
    assert!(d >= 2 && d % 2 == 0, "test shape wants even flat length");
    Arc::new(AdapterShape::new(1, 1.0, &[(0, d / 2, d / 2)]).unwrap())
}
