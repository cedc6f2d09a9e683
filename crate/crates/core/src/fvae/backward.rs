//! Analytic gradients for the Fusion VAE, verified against the
//! finite-difference oracle. Exposes encoder/decoder halves separately so
//! the meta loop can assemble its own objective graph.

use crate::error::{Error, Result};
use crate::numerics::{linalg, DenseArray, RngStream};
use crate::taskvec::TaskVector;
use crate::toybase::FlatParams;

use super::{
    kl_to_standard_normal, recon_loss_slices, DecoderCache, EncoderCache, LossBreakdown,
    VaeParams, LOG_VAR_CLAMP,
};

/// Gradients for the encoder parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
    pub mu_w: DenseArray,
    pub mu_b: DenseArray,
    pub lv_w: DenseArray,
    pub lv_b: DenseArray,
}

/// Gradients for the decoder parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
    pub out_w: DenseArray,
    pub out_b: DenseArray,
}

/// Gradients for all VAE parameters, in `VaeParams::param_arrays` order.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub enc: EncoderGrads,
    pub dec: DecoderGrads,
}

impl VaeGrads {
    pub fn zeros(params: &VaeParams) -> Self {
        let zero_like = |a: &DenseArray| DenseArray::zeros(a.dims().to_vec());
        Self {
            enc: EncoderGrads {
                w1: zero_like(&params.enc_w1),
                b1: zero_like(&params.enc_b1),
                w2: zero_like(&params.enc_w2),
                b2: zero_like(&params.enc_b2),
                mu_w: zero_like(&params.enc_mu_w),
                mu_b: zero_like(&params.enc_mu_b),
                lv_w: zero_like(&params.enc_lv_w),
                lv_b: zero_like(&params.enc_lv_b),
            },
            dec: DecoderGrads {
                w1: zero_like(&params.dec_w1),
                b1: zero_like(&params.dec_b1),
                w2: zero_like(&params.dec_w2),
                b2: zero_like(&params.dec_b2),
                out_w: zero_like(&params.dec_out_w),
                out_b: zero_like(&params.dec_out_b),
            },
        }
    }

    /// Arrays in the same order as `VaeParams::param_arrays`.
    pub fn arrays(&self) -> [&DenseArray; 14] {
        [
            &self.enc.w1,
            &self.enc.b1,
            &self.enc.w2,
            &self.enc.b2,
            &self.enc.mu_w,
            &self.enc.mu_b,
            &self.enc.lv_w,
            &self.enc.lv_b,
            &self.dec.w1,
            &self.dec.b1,
            &self.dec.w2,
            &self.dec.b2,
            &self.dec.out_w,
            &self.dec.out_b,
        ]
    }

    pub fn to_flat_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for arr in self.arrays() {
            out.extend_from_slice(arr.data());
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for arr in self.arrays() {
            arr.check_finite("vae gradient")?;
        }
        Ok(())
    }
}

/// Backpropagates d(loss)/d(lhat) through the decoder, accumulating into
/// `grads` and returning d(loss)/d(z).
pub fn decoder_backward(
    params: &VaeParams,
    cache: &DecoderCache,
    dlhat: &[f64],
    grads: &mut DecoderGrads,
) -> Vec<f64> {
    let h = params.hidden_dim;
    let d_lat = params.latent_dim;
    let d_out = params.input_dim;

    // de-standardization: lhat = o * s + m
    let mut dout = vec![0.0; d_out];
    for ((d, g), s) in dlhat
        .iter()
        .zip(dout.iter_mut())
        .zip(params.norm.flat_scale.data())
    {
        *g = d * s;
    }

    linalg::outer_acc(grads.out_w.data_mut(), &dout, &cache.d2);
    for (b, d) in grads.out_b.data_mut().iter_mut().zip(&dout) {
        *b += d;
    }

    let pre2 = linalg::matvec_t(params.dec_out_w.data(), d_out, h, &dout);
    let delta2: Vec<f64> = pre2
        .iter()
        .zip(&cache.d2)
        .map(|(p, d)| p * (1.0 - d * d))
        .collect();
    linalg::outer_acc(grads.w2.data_mut(), &delta2, &cache.d1);
    for (b, d) in grads.b2.data_mut().iter_mut().zip(&delta2) {
        *b += d;
    }

    let pre1 = linalg::matvec_t(params.dec_w2.data(), h, h, &delta2);
    let delta1: Vec<f64> = pre1
        .iter()
        .zip(&cache.d1)
        .map(|(p, d)| p * (1.0 - d * d))
        .collect();
    let u_width = d_lat + params.cond_dim;
    linalg::outer_acc(grads.w1.data_mut(), &delta1, &cache.u);
    for (b, d) in grads.b1.data_mut().iter_mut().zip(&delta1) {
        *b += d;
    }

    let du = linalg::matvec_t(params.dec_w1.data(), h, u_width, &delta1);
    du[..d_lat].to_vec()
}

/// Backpropagates gradients at (mu, log_var) through the encoder,
/// accumulating into `grads`. `dlv` is with respect to the clamped
/// log-variance; the clamp mask is applied here.
pub fn encoder_backward(
    params: &VaeParams,
    cache: &EncoderCache,
    dmu: &[f64],
    dlv: &[f64],
    grads: &mut EncoderGrads,
) {
    let h = params.hidden_dim;
    let d_lat = params.latent_dim;
    let x_width = params.input_dim + params.cond_dim;

    let dlv_pre: Vec<f64> = dlv
        .iter()
        .zip(&cache.lv_pre)
        .map(|(d, pre)| {
            if pre.abs() < LOG_VAR_CLAMP {
                *d
            } else {
                0.0
            }
        })
        .collect();

    linalg::outer_acc(grads.mu_w.data_mut(), dmu, &cache.e2);
    for (b, d) in grads.mu_b.data_mut().iter_mut().zip(dmu) {
        *b += d;
    }
    linalg::outer_acc(grads.lv_w.data_mut(), &dlv_pre, &cache.e2);
    for (b, d) in grads.lv_b.data_mut().iter_mut().zip(&dlv_pre) {
        *b += d;
    }

    let mut pre2 = linalg::matvec_t(params.enc_mu_w.data(), d_lat, h, dmu);
    let from_lv = linalg::matvec_t(params.enc_lv_w.data(), d_lat, h, &dlv_pre);
    for (p, l) in pre2.iter_mut().zip(&from_lv) {
        *p += l;
    }
    let delta2: Vec<f64> = pre2
        .iter()
        .zip(&cache.e2)
        .map(|(p, e)| p * (1.0 - e * e))
        .collect();
    linalg::outer_acc(grads.w2.data_mut(), &delta2, &cache.e1);
    for (b, d) in grads.b2.data_mut().iter_mut().zip(&delta2) {
        *b += d;
    }

    let pre1 = linalg::matvec_t(params.enc_w2.data(), h, h, &delta2);
    let delta1: Vec<f64> = pre1
        .iter()
        .zip(&cache.e1)
        .map(|(p, e)| p * (1.0 - e * e))
        .collect();
    debug_assert_eq!(cache.x.len(), x_width);
    linalg::outer_acc(grads.w1.data_mut(), &delta1, &cache.x);
    for (b, d) in grads.b1.data_mut().iter_mut().zip(&delta1) {
        *b += d;
    }
}

/// Loss and analytic gradients of the single-sample ELBO under injected
/// noise (pathwise derivative through the reparameterization).
pub fn vae_backward_with_noise(
    params: &VaeParams,
    flat: &FlatParams,
    v: &TaskVector,
    lambda_kl: f64,
    eps: &[f64],
) -> Result<(LossBreakdown, VaeGrads)> {
    if eps.len() != params.latent_dim {
        return Err(Error::DimMismatch(format!(
            "noise length {} vs latent dim {}",
            eps.len(),
            params.latent_dim
        )));
    }
    let (g, ecache) = params.encode_cached(&flat.data, v.data.data())?;
    let mu = g.mu.data();
    let lv = g.log_var.data();
    let z: Vec<f64> = mu
        .iter()
        .zip(lv)
        .zip(eps)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    let (lhat, dcache) = params.decode_cached(&z, v.data.data())?;
    let recon = recon_loss_slices(&flat.data, &lhat)?;
    let kl = kl_to_standard_normal(&g);
    let breakdown = LossBreakdown::new(recon, kl, lambda_kl)?;

    let mut grads = VaeGrads::zeros(params);
    let d = params.input_dim as f64;
    let dlhat: Vec<f64> = lhat
        .iter()
        .zip(&flat.data)
        .map(|(y, t)| 2.0 * (y - t) / d)
        .collect();
    let dz = decoder_backward(params, &dcache, &dlhat, &mut grads.dec);

    let mut dmu = vec![0.0; params.latent_dim];
    let mut dlv = vec![0.0; params.latent_dim];
    for j in 0..params.latent_dim {
        dmu[j] = dz[j] + lambda_kl * mu[j];
        dlv[j] = dz[j] * 0.5 * (0.5 * lv[j]).exp() * eps[j]
            - lambda_kl * 0.5 * (1.0 - lv[j].exp());
    }
    encoder_backward(params, &ecache, &dmu, &dlv, &mut grads.enc);
    grads.check_finite()?;
    Ok((breakdown, grads))
}

/// Sampled-noise variant of [`vae_backward_with_noise`].
pub fn vae_backward(
    params: &VaeParams,
    flat: &FlatParams,
    v: &TaskVector,
    lambda_kl: f64,
    rng: &mut RngStream,
) -> Result<(LossBreakdown, VaeGrads)> {
    let eps = rng.normal_vec(params.latent_dim);
    vae_backward_with_noise(params, flat, v, lambda_kl, &eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvae::{elbo_loss_with_noise, init_vae, test_shape};
    use crate::numerics::{finite_diff_grad, grad_check};
    use std::sync::Arc;

    fn random_instance(
        flat_len: usize,
        cond: usize,
        latent: usize,
        hidden: usize,
        seed: u64,
    ) -> (VaeParams, FlatParams, TaskVector, Vec<f64>) {
        let params = init_vae(test_shape(flat_len), cond, latent, hidden, seed).unwrap();
        let mut rng = RngStream::labeled(seed, "test/instance");
        let flat = FlatParams::new(Arc::clone(&params.shape), rng.normal_vec(flat_len)).unwrap();
        let v = TaskVector {
            data: DenseArray::vector(rng.normal_vec(cond)).unwrap(),
            task_id: "t".into(),
        };
        let eps = rng.normal_vec(latent);
        (params, flat, v, eps)
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let cases = [
            (12usize, 4usize, 2usize, 8usize, 101u64),
            (20, 6, 3, 10, 102),
            (24, 3, 4, 12, 103),
            (16, 5, 2, 9, 104),
            (40, 4, 4, 8, 105),
        ];
        for (flat_len, cond, latent, hidden, seed) in cases {
            let (params, flat, v, eps) = random_instance(flat_len, cond, latent, hidden, seed);
            let (_, grads) = vae_backward_with_noise(&params, &flat, &v, 0.005, &eps).unwrap();
            let analytic = DenseArray::vector(grads.to_flat_vec()).unwrap();
            let point = DenseArray::vector(params.to_flat_vec()).unwrap();
            let numeric = finite_diff_grad(
                |p| {
                    let cand = params.with_flat_vec(p.data()).unwrap();
                    elbo_loss_with_noise(&cand, &flat, &v, 0.005, &eps)
                        .unwrap()
                        .meta
                },
                &point,
                1e-5,
            )
            .unwrap();
            let report = grad_check(&analytic, &numeric, 1e-4).unwrap();
            assert!(
                report.passed,
                "seed {seed}: rel err {} at {}",
                report.max_rel_error, report.worst_index
            );
        }
    }

    #[test]
    fn gradient_matches_with_fitted_standardizer() {
        let (mut params, flat, v, eps) = random_instance(16, 4, 3, 8, 301);
        // a clearly non-identity standardizer whose standardized inputs
        // stay in tanh's responsive range, keeping the finite-difference
        // oracle well conditioned
        let flats: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut rng = RngStream::labeled(400 + i, "test/std-flat");
                rng.normal_vec(16).iter().map(|x| 0.5 + 0.8 * x).collect()
            })
            .collect();
        let conds: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut rng = RngStream::labeled(500 + i, "test/std-cond");
                rng.normal_vec(4)
            })
            .collect();
        let f: Vec<&[f64]> = flats.iter().map(|x| x.as_slice()).collect();
        let c: Vec<&[f64]> = conds.iter().map(|x| x.as_slice()).collect();
        params.fit_standardizer(&f, &c).unwrap();

        let (_, grads) = vae_backward_with_noise(&params, &flat, &v, 0.01, &eps).unwrap();
        let analytic = DenseArray::vector(grads.to_flat_vec()).unwrap();
        let point = DenseArray::vector(params.to_flat_vec()).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let cand = params.with_flat_vec(p.data()).unwrap();
                elbo_loss_with_noise(&cand, &flat, &v, 0.01, &eps)
                    .unwrap()
                    .meta
            },
            &point,
            1e-5,
        )
        .unwrap();
        let report = grad_check(&analytic, &numeric, 1e-4).unwrap();
        let mut owner = String::new();
        let mut offset = 0;
        for (name, arr) in params.param_arrays() {
            if report.worst_index < offset + arr.len() {
                owner = format!("{name}[{}]", report.worst_index - offset);
                break;
            }
            offset += arr.len();
        }
        assert!(
            report.passed,
            "rel err {} at {} ({owner})",
            report.max_rel_error, report.worst_index
        );
    }

    #[test]
    fn recon_gradient_at_output_bias_is_scaled_residual() {
        let (params, flat, v, eps) = random_instance(2, 2, 2, 4, 201);
        let (_, grads) = vae_backward_with_noise(&params, &flat, &v, 0.0, &eps).unwrap();
        let (g, _) = params.encode_cached(&flat.data, v.data.data()).unwrap();
        let z: Vec<f64> = g
            .mu
            .data()
            .iter()
            .zip(g.log_var.data())
            .zip(&eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        let (lhat, _) = params.decode_cached(&z, v.data.data()).unwrap();
        for i in 0..2 {
            let expected = 2.0 * (lhat[i] - flat.data[i]) / 2.0;
            let got = grads.dec.out_b.data()[i];
            assert!(
                (expected - got).abs() < 1e-12,
                "bias grad {got} vs residual {expected}"
            );
        }
    }

    #[test]
    fn backward_is_deterministic_under_fixed_noise() {
        let (params, flat, v, eps) = random_instance(12, 4, 2, 8, 401);
        let (b1, g1) = vae_backward_with_noise(&params, &flat, &v, 0.005, &eps).unwrap();
        let (b2, g2) = vae_backward_with_noise(&params, &flat, &v, 0.005, &eps).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn noise_length_mismatch_rejected() {
        let (params, flat, v, _) = random_instance(12, 4, 2, 8, 402);
        assert!(vae_backward_with_noise(&params, &flat, &v, 0.005, &[0.0]).is_err());
    }
}
