//! Analytic gradients of the SAE loss, and a central-difference oracle.
//!
//! In aligned mode the encoder row `v_i = z_i + α_i u_i` depends on both the
//! free row `z_i = [a_free_i | 0]` and the decoder column `u_i`. With
//! `G = ∂L/∂v_i`:
//!
//! ```text
//! ∂L/∂z_i = G - (G·u_i) u_i / ‖u_i‖²
//! ∂L/∂u_i = α_i G - (G·u_i) (z_i + 2 α_i u_i) / ‖u_i‖²      (encoder path)
//! ```
//!
//! The decoder gradient is the sum of that encoder path, the reconstruction
//! path and the penalty's dependence on `‖u_i‖`.

use crate::error::{Error, Result};
use crate::model::{
    forward_with_encoder, loss_from_forward, penalty_weights, total_loss, Activation, EncoderMode,
    ForwardOutput, LossBreakdown, Penalty, SaeParams, SaeVariant, TensorName,
};
use crate::numerics::{dot, matmul, matmul_tn, Matrix, RngStream};

/// Gradient per stored tensor of [`SaeParams`], shapes mirrored.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub a_free: Option<Matrix>,
    pub w_enc: Option<Matrix>,
    pub w_dec: Matrix,
    pub b_enc: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl GradSet {
    pub fn zeros_like(params: &SaeParams) -> Self {
        GradSet {
            a_free: params.a_free.as_ref().map(|a| Matrix::zeros(a.rows(), a.cols())),
            w_enc: params.w_enc_raw.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
            w_dec: Matrix::zeros(params.n, params.m),
            b_enc: vec![0.0; params.m],
            b_dec: vec![0.0; params.n],
        }
    }

    /// Same order as [`SaeParams::tensors`].
    pub fn tensors(&self) -> Vec<(TensorName, &[f64])> {
        let mut out: Vec<(TensorName, &[f64])> = Vec::with_capacity(4);
        if let Some(a) = &self.a_free {
            out.push((TensorName::AFree, a.as_slice()));
        }
        if let Some(w) = &self.w_enc {
            out.push((TensorName::WEnc, w.as_slice()));
        }
        out.push((TensorName::WDec, self.w_dec.as_slice()));
        out.push((TensorName::BEnc, &self.b_enc));
        out.push((TensorName::BDec, &self.b_dec));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorName, &mut [f64])> {
        let mut out: Vec<(TensorName, &mut [f64])> = Vec::with_capacity(4);
        if let Some(a) = &mut self.a_free {
            out.push((TensorName::AFree, a.as_mut_slice()));
        }
        if let Some(w) = &mut self.w_enc {
            out.push((TensorName::WEnc, w.as_mut_slice()));
        }
        out.push((TensorName::WDec, self.w_dec.as_mut_slice()));
        out.push((TensorName::BEnc, &mut self.b_enc));
        out.push((TensorName::BDec, &mut self.b_dec));
        out
    }

    pub fn get(&self, name: TensorName) -> Option<&[f64]> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: TensorName) -> Option<&mut [f64]> {
        self.tensors_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("gradient of {name}"),
                    step: 0,
                });
            }
        }
        Ok(())
    }
}

/// Everything one backward pass produces.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: LossBreakdown,
    pub forward: ForwardOutput,
    pub encoder: Matrix,
    pub grads: GradSet,
}

/// Loss and exact gradients with respect to every stored tensor.
pub fn backward(params: &SaeParams, x: &Matrix, lambda: f64, p_current: f64) -> Result<(f64, GradSet)> {
    let out = backward_full(params, x, lambda, p_current)?;
    Ok((out.loss.total, out.grads))
}

pub fn backward_full(params: &SaeParams, x: &Matrix, lambda: f64, p_current: f64) -> Result<BackwardOutput> {
    let encoder = params.effective_encoder()?;
    let fwd = forward_with_encoder(params, &encoder, x)?;
    let loss = loss_from_forward(params, x, &fwd, lambda, p_current);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
            step: 0,
        });
    }

    let batch = x.rows();
    let (n, m) = (params.n, params.m);
    let mut grads = GradSet::zeros_like(params);
    if batch == 0 {
        return Ok(BackwardOutput {
            loss,
            forward: fwd,
            encoder,
            grads,
        });
    }
    let inv_b = 1.0 / batch as f64;
    let f = &fwd.features;

    // d recon / d x̂ = 2 (x̂ - x) / B
    let mut d_recon = fwd.reconstruction.clone();
    for (d, xv) in d_recon.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d = 2.0 * (*d - xv) * inv_b;
    }
    grads.b_dec = d_recon.column_sums();
    grads.w_dec = matmul_tn(&d_recon, f)?;
    let mut d_feat = matmul(&d_recon, &params.w_dec)?;

    if !params.variant.activation.is_structural() && lambda != 0.0 {
        let weights = penalty_weights(&params.w_dec);
        let scale = lambda * inv_b;
        let mut d_weight = vec![0.0; m];
        for r in 0..batch {
            let f_row = f.row(r);
            let df_row = d_feat.row_mut(r);
            for i in 0..m {
                let fi = f_row[i];
                if fi <= 0.0 {
                    continue;
                }
                let w = weights[i];
                match params.variant.penalty {
                    Penalty::L1Weighted => {
                        df_row[i] += scale * w;
                        d_weight[i] += scale * fi;
                    }
                    Penalty::LpAnnealed { .. } => {
                        let t = fi * w;
                        if t > 0.0 {
                            let dt = scale * p_current * t.powf(p_current - 1.0);
                            df_row[i] += dt * w;
                            d_weight[i] += dt * fi;
                        }
                    }
                }
            }
        }
        for i in 0..m {
            let w = weights[i];
            if w > 0.0 && d_weight[i] != 0.0 {
                let k = d_weight[i] / w;
                for j in 0..n {
                    grads.w_dec[(j, i)] += k * params.w_dec[(j, i)];
                }
            }
        }
    }

    // ReLU and top-k pass gradient only where the feature is active; the kink
    // at zero gets subgradient 0 and the top-k mask is held fixed.
    for (d, &fv) in d_feat.as_mut_slice().iter_mut().zip(f.as_slice()) {
        if fv <= 0.0 {
            *d = 0.0;
        }
    }
    grads.b_enc = d_feat.column_sums();
    let d_enc = matmul_tn(&d_feat, x)?;

    match params.variant.encoder {
        EncoderMode::Standard => grads.w_enc = Some(d_enc),
        EncoderMode::Tied => {
            for i in 0..m {
                for j in 0..n {
                    grads.w_dec[(j, i)] += d_enc[(i, j)];
                }
            }
        }
        EncoderMode::Aligned => {
            let a_free = params
                .a_free
                .as_ref()
                .ok_or_else(|| Error::Config("aligned mode without a_free".into()))?;
            let dec_t = params.w_dec.transpose();
            let mut d_a = Matrix::zeros(m, n - 1);
            let mut z = vec![0.0; n];
            for i in 0..m {
                let u = dec_t.row(i);
                let g = d_enc.row(i);
                z[..n - 1].copy_from_slice(a_free.row(i));
                z[n - 1] = 0.0;
                let uu = dot(u, u);
                let alpha = (1.0 - dot(&z, u)) / uu;
                let gu = dot(g, u);
                let d_a_row = d_a.row_mut(i);
                for j in 0..n - 1 {
                    d_a_row[j] = g[j] - gu * u[j] / uu;
                }
                for j in 0..n {
                    grads.w_dec[(j, i)] += alpha * g[j] - gu * (z[j] + 2.0 * alpha * u[j]) / uu;
                }
            }
            grads.a_free = Some(d_a);
        }
    }

    grads.check_finite()?;
    Ok(BackwardOutput {
        loss,
        forward: fwd,
        encoder,
        grads,
    })
}

/// Active-feature pattern of a forward pass.
fn activation_pattern(out: &ForwardOutput) -> Vec<bool> {
    out.features.as_slice().iter().map(|&v| v > 0.0).collect()
}

fn loss_and_pattern(params: &SaeParams, x: &Matrix, lambda: f64, p: f64) -> Result<(f64, Vec<bool>)> {
    let enc = params.effective_encoder()?;
    let out = forward_with_encoder(params, &enc, x)?;
    let loss = loss_from_forward(params, x, &out, lambda, p);
    Ok((loss.total, activation_pattern(&out)))
}

/// Central differences plus, per scalar, whether the perturbation changed
/// which features are active (ReLU sign flips or top-k swaps).
fn finite_diff_with_stability(
    params: &SaeParams,
    x: &Matrix,
    lambda: f64,
    p_current: f64,
    step: f64,
) -> Result<(GradSet, Vec<(TensorName, Vec<bool>)>)> {
    let (_, base_pattern) = loss_and_pattern(params, x, lambda, p_current)?;
    let mut grads = GradSet::zeros_like(params);
    let mut unstable = Vec::new();
    let names: Vec<(TensorName, usize)> = params.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    let mut probe = params.clone();
    for (name, len) in names {
        let mut flags = vec![false; len];
        for idx in 0..len {
            let orig = tensor_mut(&mut probe, name)[idx];
            tensor_mut(&mut probe, name)[idx] = orig + step;
            let (lp, pat_p) = loss_and_pattern(&probe, x, lambda, p_current)?;
            tensor_mut(&mut probe, name)[idx] = orig - step;
            let (lm, pat_m) = loss_and_pattern(&probe, x, lambda, p_current)?;
            tensor_mut(&mut probe, name)[idx] = orig;
            grads.get_mut(name).expect("tensor present")[idx] = (lp - lm) / (2.0 * step);
            flags[idx] = pat_p != base_pattern || pat_m != base_pattern;
        }
        unstable.push((name, flags));
    }
    Ok((grads, unstable))
}

fn tensor_mut(params: &mut SaeParams, name: TensorName) -> &mut [f64] {
    params
        .tensors_mut()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t)
        .expect("tensor present")
}

/// Central-difference gradient of [`total_loss`] for every stored scalar.
pub fn finite_diff_grads(params: &SaeParams, x: &Matrix, lambda: f64, p_current: f64, step: f64) -> Result<GradSet> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    // total_loss is the reference objective; keep the oracle tied to it.
    debug_assert!(total_loss(params, x, lambda, p_current).is_ok());
    Ok(finite_diff_with_stability(params, x, lambda, p_current, step)?.0)
}

/// Default finite-difference step for [`grad_check`].
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked scalars of `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
    pub max_rel_err: f64,
    pub worst_tensor: Option<TensorName>,
    pub worst_index: usize,
    /// Scalars whose perturbation changed the active-feature pattern.
    pub skipped: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

pub fn grad_check(params: &SaeParams, x: &Matrix, lambda: f64, p_current: f64) -> Result<GradCheckReport> {
    let (_, analytic) = backward(params, x, lambda, p_current)?;
    check_gradients(params, x, lambda, p_current, &analytic, FD_STEP)
}

/// Compares a supplied gradient against central differences.
pub fn check_gradients(
    params: &SaeParams,
    x: &Matrix,
    lambda: f64,
    p_current: f64,
    analytic: &GradSet,
    step: f64,
) -> Result<GradCheckReport> {
    let (numeric, unstable) = finite_diff_with_stability(params, x, lambda, p_current, step)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: None,
        worst_index: 0,
        skipped: 0,
        checked: 0,
    };
    for (name, flags) in unstable {
        let ga = analytic
            .get(name)
            .ok_or_else(|| Error::Config(format!("analytic gradient lacks {name}")))?;
        let gn = numeric.get(name).expect("tensor present");
        if ga.len() != gn.len() {
            return Err(Error::dims("check_gradients", ga.len(), gn.len()));
        }
        for (idx, skip) in flags.into_iter().enumerate() {
            if skip {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let (a, b) = (ga[idx], gn[idx]);
            let denom = a.abs().max(b.abs()).max(1e-8);
            let err = (a - b).abs() / denom;
            if err > report.max_rel_err || report.worst_tensor.is_none() {
                report.max_rel_err = err;
                report.worst_tensor = Some(name);
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// A random problem for gradient checking.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub params: SaeParams,
    pub x: Matrix,
    pub lambda: f64,
    pub p_current: f64,
}

/// Every (encoder, activation, penalty) combination, with top-k sizes for
/// dictionaries of `m` features.
pub fn variant_grid(m: usize) -> Vec<SaeVariant> {
    let k = (m / 2).max(1);
    let acts = [
        Activation::Relu,
        Activation::TopK { k },
        Activation::BatchTopK { k: (k / 2).max(1) },
    ];
    let pens = [
        Penalty::L1Weighted,
        Penalty::LpAnnealed {
            p_start: 1.0,
            p_end: 0.5,
            anneal_steps: 100,
        },
    ];
    let mut out = Vec::new();
    for enc in EncoderMode::ALL {
        for act in acts {
            for pen in pens {
                out.push(SaeVariant::new(enc, act, pen));
            }
        }
    }
    out
}

/// Random, well-scaled parameters and data for `variant`.
pub fn random_instance(variant: SaeVariant, n: usize, m: usize, batch: usize, seed: u64) -> GradInstance {
    let mut rng = RngStream::new(seed);
    let mut params = SaeParams::zeros(variant, n, m);
    let scale = 1.0 / (n as f64).sqrt();
    params.w_dec = rng.normal_matrix(n, m, scale);
    if let Some(a) = &mut params.a_free {
        *a = rng.normal_matrix(m, n - 1, scale);
    }
    if let Some(w) = &mut params.w_enc_raw {
        *w = rng.normal_matrix(m, n, scale);
    }
    params.b_enc = rng.normal_vec(m, 0.1);
    params.b_dec = rng.normal_vec(n, 0.1);
    let x = rng.normal_matrix(batch, n, 1.0);
    let lambda = 0.1 + 0.9 * rng.uniform();
    let p_current = match variant.penalty {
        Penalty::L1Weighted => 1.0,
        Penalty::LpAnnealed { .. } => 0.4 + 0.6 * rng.uniform(),
    };
    GradInstance {
        params,
        x,
        lambda,
        p_current,
    }
}
