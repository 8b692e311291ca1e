//! SAE parameterization, forward pass and sparsity penalties.
//!
//! Three encoder modes share one decoder layout (`w_dec`, `n×m`, one column per
//! feature):
//!
//! * `standard`: the encoder `w_enc` (`m×n`) is a free tensor.
//! * `aligned`: a free matrix `a_free` (`m×(n-1)`) is padded with a zero last
//!   column and each row is projected onto the hyperplane
//!   `{v : v · w_dec[:, i] = 1}`, so every feature has alignment score 1.
//! * `tied`: the encoder is `w_decᵀ`.
//!
//! The effective encoder is always derived from the stored tensors.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{column_norms, dot, matmul, matmul_nt, Matrix};

/// Decoder columns shorter than this cannot anchor an aligned encoder row.
pub const DECODER_NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Standard,
    Aligned,
    Tied,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 3] = [EncoderMode::Standard, EncoderMode::Aligned, EncoderMode::Tied];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Standard => "standard",
            EncoderMode::Aligned => "aligned",
            EncoderMode::Tied => "tied",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EncoderMode::Standard),
            "aligned" => Ok(EncoderMode::Aligned),
            "tied" => Ok(EncoderMode::Tied),
            other => Err(Error::Config(format!(
                "unknown encoder mode {other:?} (expected standard, aligned or tied)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    #[serde(rename = "topk")]
    TopK { k: usize },
    #[serde(rename = "batchtopk")]
    BatchTopK { k: usize },
}

impl Activation {
    pub fn is_structural(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::TopK { k } => write!(f, "topk({k})"),
            Activation::BatchTopK { k } => write!(f, "batchtopk({k})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Penalty {
    L1Weighted,
    LpAnnealed {
        p_start: f64,
        p_end: f64,
        anneal_steps: u64,
    },
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::L1Weighted => f.write_str("l1_weighted"),
            Penalty::LpAnnealed { p_start, p_end, .. } => write!(f, "lp({p_start}->{p_end})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeVariant {
    pub encoder: EncoderMode,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_penalty")]
    pub penalty: Penalty,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_penalty() -> Penalty {
    Penalty::L1Weighted
}

impl SaeVariant {
    pub fn new(encoder: EncoderMode, activation: Activation, penalty: Penalty) -> Self {
        SaeVariant {
            encoder,
            activation,
            penalty,
        }
    }

    pub fn relu(encoder: EncoderMode) -> Self {
        Self::new(encoder, Activation::Relu, Penalty::L1Weighted)
    }

    /// Checks the variant against a dictionary of `m` features.
    pub fn validate(&self, m: usize) -> Result<()> {
        match self.activation {
            Activation::TopK { k } | Activation::BatchTopK { k } if k == 0 || k > m => {
                return Err(Error::Config(format!(
                    "top-k size {k} must be in 1..={m} (dictionary size)"
                )));
            }
            _ => {}
        }
        if let Penalty::LpAnnealed { p_start, p_end, .. } = self.penalty {
            if !(p_end > 0.0 && p_end <= p_start && p_start <= 1.0) {
                return Err(Error::Config(format!(
                    "lp annealing needs 0 < p_end <= p_start <= 1, got p_start={p_start}, p_end={p_end}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SaeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.encoder, self.activation, self.penalty)
    }
}

/// Names of the stored tensors, as used in checkpoints and gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorName {
    AFree,
    WEnc,
    WDec,
    BEnc,
    BDec,
}

impl TensorName {
    pub fn as_str(self) -> &'static str {
        match self {
            TensorName::AFree => "a_free",
            TensorName::WEnc => "w_enc",
            TensorName::WDec => "w_dec",
            TensorName::BEnc => "b_enc",
            TensorName::BDec => "b_dec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "a_free" => TensorName::AFree,
            "w_enc" => TensorName::WEnc,
            "w_dec" => TensorName::WDec,
            "b_enc" => TensorName::BEnc,
            "b_dec" => TensorName::BDec,
            _ => return None,
        })
    }

    pub fn is_bias(self) -> bool {
        matches!(self, TensorName::BEnc | TensorName::BDec)
    }
}

impl fmt::Display for TensorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    pub variant: SaeVariant,
    /// Activation dimension.
    pub n: usize,
    /// Dictionary size.
    pub m: usize,
    /// `m×(n-1)`, aligned mode only.
    pub a_free: Option<Matrix>,
    /// `m×n`, standard mode only.
    pub w_enc_raw: Option<Matrix>,
    /// `n×m`.
    pub w_dec: Matrix,
    pub b_enc: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl SaeParams {
    /// All-zero parameters of the right shapes for `variant`.
    pub fn zeros(variant: SaeVariant, n: usize, m: usize) -> Self {
        let (a_free, w_enc_raw) = match variant.encoder {
            EncoderMode::Standard => (None, Some(Matrix::zeros(m, n))),
            EncoderMode::Aligned => (Some(Matrix::zeros(m, n.saturating_sub(1))), None),
            EncoderMode::Tied => (None, None),
        };
        SaeParams {
            variant,
            n,
            m,
            a_free,
            w_enc_raw,
            w_dec: Matrix::zeros(n, m),
            b_enc: vec![0.0; m],
            b_dec: vec![0.0; n],
        }
    }

    /// Checks tensor shapes and that exactly the right encoder tensor is present.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        self.variant.validate(m)?;
        if n == 0 || m == 0 {
            return Err(Error::Config(format!("empty SAE: n={n}, m={m}")));
        }
        let expect = |name: &'static str, got: &Matrix, rows: usize, cols: usize| {
            if got.rows() != rows || got.cols() != cols {
                Err(Error::dims(name, got.shape(), format!("{rows}x{cols}")))
            } else {
                Ok(())
            }
        };
        expect("w_dec", &self.w_dec, n, m)?;
        if self.b_enc.len() != m {
            return Err(Error::dims("b_enc", self.b_enc.len(), m));
        }
        if self.b_dec.len() != n {
            return Err(Error::dims("b_dec", self.b_dec.len(), n));
        }
        match (self.variant.encoder, &self.a_free, &self.w_enc_raw) {
            (EncoderMode::Standard, None, Some(w)) => expect("w_enc", w, m, n),
            (EncoderMode::Aligned, Some(a), None) => expect("a_free", a, m, n - 1),
            (EncoderMode::Tied, None, None) => Ok(()),
            (mode, a, w) => Err(Error::Config(format!(
                "{mode} mode with a_free {}, w_enc {}",
                if a.is_some() { "present" } else { "absent" },
                if w.is_some() { "present" } else { "absent" },
            ))),
        }
    }

    /// The `m×n` encoder actually applied to inputs.
    pub fn effective_encoder(&self) -> Result<Matrix> {
        match self.variant.encoder {
            EncoderMode::Standard => Ok(self
                .w_enc_raw
                .clone()
                .ok_or_else(|| Error::Config("standard mode without w_enc".into()))?),
            EncoderMode::Aligned => {
                let a = self
                    .a_free
                    .as_ref()
                    .ok_or_else(|| Error::Config("aligned mode without a_free".into()))?;
                build_encoder(a, &self.w_dec)
            }
            EncoderMode::Tied => Ok(self.w_dec.transpose()),
        }
    }

    /// Number of trainable encoder scalars: `m×n`, `m×(n-1)` or 0.
    pub fn trainable_encoder_scalars(&self) -> usize {
        self.a_free.as_ref().map_or(0, Matrix::len) + self.w_enc_raw.as_ref().map_or(0, Matrix::len)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable_encoder_scalars() + self.w_dec.len() + self.b_enc.len() + self.b_dec.len()
    }

    /// Stored tensors in canonical order.
    pub fn tensors(&self) -> Vec<(TensorName, &[f64])> {
        let mut out: Vec<(TensorName, &[f64])> = Vec::with_capacity(4);
        if let Some(a) = &self.a_free {
            out.push((TensorName::AFree, a.as_slice()));
        }
        if let Some(w) = &self.w_enc_raw {
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
        if let Some(w) = &mut self.w_enc_raw {
            out.push((TensorName::WEnc, w.as_mut_slice()));
        }
        out.push((TensorName::WDec, self.w_dec.as_mut_slice()));
        out.push((TensorName::BEnc, &mut self.b_enc));
        out.push((TensorName::BDec, &mut self.b_dec));
        out
    }

    /// Every stored value rounded through `f32`.
    pub fn to_storage_precision(&self) -> SaeParams {
        let mut p = self.clone();
        for (_, t) in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        p
    }
}

/// Projects each row of `[a_free | 0]` onto `{v : v · u_i = 1}`, `u_i = w_dec[:, i]`.
///
/// Row `i` becomes `A_i + α_i u_i` with `α_i = (1 - A_i·u_i) / ‖u_i‖²`.
pub fn build_encoder(a_free: &Matrix, w_dec: &Matrix) -> Result<Matrix> {
    let (n, m) = (w_dec.rows(), w_dec.cols());
    check_encoder_shapes(a_free, w_dec)?;
    let dec_t = w_dec.transpose();
    let mut enc = Matrix::zeros(m, n);
    for i in 0..m {
        let u = dec_t.row(i);
        let u_sq = dot(u, u);
        check_column(i, u_sq)?;
        let row = enc.row_mut(i);
        row[..n - 1].copy_from_slice(a_free.row(i));
        let alpha = (1.0 - dot(row, u)) / u_sq;
        for (v, uj) in row.iter_mut().zip(u) {
            *v += alpha * uj;
        }
    }
    Ok(enc)
}

/// Same result as [`build_encoder`] through the general solution of `uᵀv = 1`:
/// `v = u⁺ + (I - u⁺uᵀ) z` with `u⁺ = u/‖u‖²`, using an explicit `n×n`
/// projector. Quadratic in `n`; kept as an independent check.
pub fn build_encoder_pseudoinverse(a_free: &Matrix, w_dec: &Matrix) -> Result<Matrix> {
    let (n, m) = (w_dec.rows(), w_dec.cols());
    check_encoder_shapes(a_free, w_dec)?;
    let mut enc = Matrix::zeros(m, n);
    for i in 0..m {
        let u = w_dec.col(i);
        let u_sq: f64 = u.iter().map(|x| x * x).sum();
        check_column(i, u_sq)?;
        let pinv: Vec<f64> = u.iter().map(|x| x / u_sq).collect();
        let projector = Matrix::from_fn(n, n, |r, c| {
            let eye = if r == c { 1.0 } else { 0.0 };
            eye - pinv[r] * u[c]
        });
        let mut z = Matrix::zeros(n, 1);
        for (j, &a) in a_free.row(i).iter().enumerate() {
            z[(j, 0)] = a;
        }
        let projected = matmul(&projector, &z)?;
        for j in 0..n {
            enc[(i, j)] = pinv[j] + projected[(j, 0)];
        }
    }
    Ok(enc)
}

fn check_encoder_shapes(a_free: &Matrix, w_dec: &Matrix) -> Result<()> {
    let (n, m) = (w_dec.rows(), w_dec.cols());
    if n == 0 || a_free.rows() != m || a_free.cols() + 1 != n {
        return Err(Error::dims(
            "build_encoder",
            format!("a_free {}", a_free.shape()),
            format!("w_dec {}", w_dec.shape()),
        ));
    }
    Ok(())
}

fn check_column(feature: usize, norm_sq: f64) -> Result<()> {
    let norm = norm_sq.sqrt();
    if !(norm >= DECODER_NORM_FLOOR) {
        return Err(Error::DegenerateColumn { feature, norm });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `batch×m`, non-negative.
    pub features: Matrix,
    /// `batch×n`.
    pub reconstruction: Matrix,
    /// `batch×m`, `x·W_encᵀ + b_enc`.
    pub pre_activations: Matrix,
}

pub fn forward(params: &SaeParams, x: &Matrix) -> Result<ForwardOutput> {
    let enc = params.effective_encoder()?;
    forward_with_encoder(params, &enc, x)
}

/// Forward pass with a precomputed effective encoder.
pub fn forward_with_encoder(params: &SaeParams, encoder: &Matrix, x: &Matrix) -> Result<ForwardOutput> {
    if x.cols() != params.n {
        return Err(Error::dims(
            "forward",
            format!("input {}", x.shape()),
            format!("n={}", params.n),
        ));
    }
    let mut pre = matmul_nt(x, encoder)?;
    pre.add_row_vector(&params.b_enc);
    let features = activate(&pre, params.variant.activation);
    let mut reconstruction = matmul(&features, &params.w_dec.transpose())?;
    reconstruction.add_row_vector(&params.b_dec);
    Ok(ForwardOutput {
        features,
        reconstruction,
        pre_activations: pre,
    })
}

/// Applies the activation rule to pre-activations.
///
/// Top-k variants select on raw pre-activations (largest first, ties to the
/// lowest index) and clamp the kept values at zero afterwards.
pub fn activate(pre: &Matrix, activation: Activation) -> Matrix {
    match activation {
        Activation::Relu => pre.map(|z| z.max(0.0)),
        Activation::TopK { k } => {
            let mut f = Matrix::zeros(pre.rows(), pre.cols());
            for r in 0..pre.rows() {
                let row = pre.row(r);
                for j in top_indices(row, k) {
                    f[(r, j)] = row[j].max(0.0);
                }
            }
            f
        }
        Activation::BatchTopK { k } => {
            let mut f = Matrix::zeros(pre.rows(), pre.cols());
            let budget = k.saturating_mul(pre.rows());
            let out = f.as_mut_slice();
            for j in top_indices(pre.as_slice(), budget) {
                out[j] = pre.as_slice()[j].max(0.0);
            }
            f
        }
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k >= values.len() {
        return idx;
    }
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &usize, b: &usize| -> Ordering {
        values[*b].total_cmp(&values[*a]).then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, order);
    idx.truncate(k);
    idx
}

/// Per-feature penalty weights `‖w_dec[:, i]‖`.
pub fn penalty_weights(w_dec: &Matrix) -> Vec<f64> {
    column_norms(w_dec)
}

/// Batch mean of `Σ_i f_i ‖w_dec[:, i]‖`, or of `Σ_i (f_i ‖w_dec[:, i]‖)^p` for the
/// annealed penalty. Zero for the top-k activations.
pub fn sparsity_penalty(out: &ForwardOutput, w_dec: &Matrix, variant: SaeVariant, p_current: f64) -> f64 {
    if variant.activation.is_structural() {
        return 0.0;
    }
    let f = &out.features;
    if f.rows() == 0 {
        return 0.0;
    }
    let weights = penalty_weights(w_dec);
    let mut total = 0.0;
    for r in 0..f.rows() {
        for (&fi, &w) in f.row(r).iter().zip(&weights) {
            if fi > 0.0 {
                total += match variant.penalty {
                    Penalty::L1Weighted => fi * w,
                    Penalty::LpAnnealed { .. } => (fi * w).powf(p_current),
                };
            }
        }
    }
    total / f.rows() as f64
}

/// Batch mean of `‖x̂ - x‖²`.
pub fn reconstruction_error(x: &Matrix, reconstruction: &Matrix) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let sq: f64 = x
        .as_slice()
        .iter()
        .zip(reconstruction.as_slice())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    sq / x.rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `recon + λ · penalty`.
    pub total: f64,
    pub recon: f64,
    /// Unweighted sparsity penalty.
    pub penalty: f64,
}

pub fn total_loss(params: &SaeParams, x: &Matrix, lambda: f64, p_current: f64) -> Result<LossBreakdown> {
    let out = forward(params, x)?;
    Ok(loss_from_forward(params, x, &out, lambda, p_current))
}

pub(crate) fn loss_from_forward(
    params: &SaeParams,
    x: &Matrix,
    out: &ForwardOutput,
    lambda: f64,
    p_current: f64,
) -> LossBreakdown {
    let recon = reconstruction_error(x, &out.reconstruction);
    let penalty = sparsity_penalty(out, &params.w_dec, params.variant, p_current);
    LossBreakdown {
        total: recon + lambda * penalty,
        recon,
        penalty,
    }
}

/// `a_i = W_enc[i, :] · W_dec[:, i]` for every feature.
pub fn alignment_scores(params: &SaeParams) -> Result<Vec<f64>> {
    let enc = params.effective_encoder()?;
    Ok(alignment_scores_with_encoder(&enc, &params.w_dec))
}

pub fn alignment_scores_with_encoder(encoder: &Matrix, w_dec: &Matrix) -> Vec<f64> {
    let dec_t = w_dec.transpose();
    (0..encoder.rows())
        .map(|i| dot(encoder.row(i), dec_t.row(i)))
        .collect()
}
