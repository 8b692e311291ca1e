//! Evaluation quantities: reconstruction quality, sparsity, dead features,
//! alignment-score summaries and dictionary agreement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    alignment_scores_with_encoder, forward_with_encoder, reconstruction_error, sparsity_penalty, SaeParams,
};
use crate::numerics::{column_norms, dot, Matrix, COSINE_ZERO_NORM};

/// Band counted as well aligned in [`AlignmentSummary`].
pub const NEAR_ONE: (f64, f64) = (0.9, 1.1);
/// Band counted as unaligned in [`AlignmentSummary`].
pub const NEAR_ZERO: (f64, f64) = (-0.2, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Share of features with score in [0.9, 1.1].
    pub frac_near_one: f64,
    /// Share of features with score in [-0.2, 0.2].
    pub frac_near_zero: f64,
}

impl AlignmentSummary {
    pub fn from_scores(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return AlignmentSummary {
                mean: 0.0,
                min: 0.0,
                max: 0.0,
                frac_near_one: 0.0,
                frac_near_zero: 0.0,
            };
        }
        let k = scores.len() as f64;
        let within = |(lo, hi): (f64, f64)| scores.iter().filter(|&&s| s >= lo && s <= hi).count() as f64 / k;
        AlignmentSummary {
            mean: scores.iter().sum::<f64>() / k,
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            frac_near_one: within(NEAR_ONE),
            frac_near_zero: within(NEAR_ZERO),
        }
    }

    /// `max_i |a_i - 1|`, read off the extremes.
    pub fn max_deviation_from_one(&self) -> f64 {
        (self.max - 1.0).abs().max((self.min - 1.0).abs())
    }
}

/// One row of a metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Optimizer updates applied so far.
    pub step: u64,
    pub recon_loss: f64,
    /// Unweighted sparsity penalty.
    pub penalty: f64,
    /// `None` when the evaluated rows have no variance.
    pub explained_variance: Option<f64>,
    pub l0_mean: f64,
    /// Share of features silent for the whole training window (training logs only).
    pub dead_fraction_train: Option<f64>,
    /// Share of features silent on every evaluated sample (full-set evaluations only).
    pub dead_fraction_eval: Option<f64>,
    pub alignment: AlignmentSummary,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub p: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialize")
    }
}

/// `1 - mean‖x - x̂‖² / mean‖x - μ‖²` with `μ` the mean row of `x`.
pub fn explained_variance(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dims("explained_variance", x.shape(), x_hat.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::DegenerateVariance(format!(
            "need at least 2 samples, got {}",
            x.rows()
        )));
    }
    let k = x.rows() as f64;
    let mu = x.column_means();
    let mut resid = 0.0;
    let mut total = 0.0;
    for r in 0..x.rows() {
        for ((a, b), m) in x.row(r).iter().zip(x_hat.row(r)).zip(&mu) {
            resid += (a - b) * (a - b);
            total += (a - m) * (a - m);
        }
    }
    let (resid, total) = (resid / k, total / k);
    if !(total >= 1e-12) {
        return Err(Error::DegenerateVariance(format!(
            "mean squared deviation {total:e} is below 1e-12"
        )));
    }
    Ok(1.0 - resid / total)
}

/// Fraction of the zero-ablation cross-entropy gap closed by the reconstruction:
/// `(h_star - h_zero) / (h_orig - h_zero)`.
pub fn ce_recovered(h_orig: f64, h_star: f64, h_zero: f64) -> Result<f64> {
    let denom = h_orig - h_zero;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateDenominator(format!(
            "h_orig ({h_orig}) equals h_zero ({h_zero})"
        )));
    }
    // Adding 0.0 turns a -0.0 result (h_star == h_zero) into 0.0.
    Ok((h_star - h_zero) / denom + 0.0)
}

/// Mean number of positive entries per row.
pub fn l0_mean(features: &Matrix) -> f64 {
    if features.rows() == 0 {
        return 0.0;
    }
    let active = features.as_slice().iter().filter(|&&v| v > 0.0).count();
    active as f64 / features.rows() as f64
}

/// Which features fired at least once over the rows seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringTracker {
    fired: Vec<bool>,
}

impl FiringTracker {
    pub fn new(m: usize) -> Self {
        FiringTracker { fired: vec![false; m] }
    }

    pub fn observe(&mut self, features: &Matrix) {
        for r in 0..features.rows() {
            for (f, &v) in self.fired.iter_mut().zip(features.row(r)) {
                *f |= v > 0.0;
            }
        }
    }

    pub fn dead_fraction(&self) -> f64 {
        if self.fired.is_empty() {
            return 0.0;
        }
        self.fired.iter().filter(|f| !**f).count() as f64 / self.fired.len() as f64
    }
}

/// Share of features (columns) that are zero on every row.
pub fn dead_fraction_eval(features: &Matrix) -> f64 {
    let mut t = FiringTracker::new(features.cols());
    t.observe(features);
    t.dead_fraction()
}

/// Columns scaled to unit length; near-zero columns become zero.
fn unit_columns_t(d: &Matrix) -> Matrix {
    let norms = column_norms(d);
    let mut t = d.transpose();
    for (i, &nrm) in norms.iter().enumerate() {
        let row = t.row_mut(i);
        if nrm < COSINE_ZERO_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
    }
    t
}

/// For each column of `query`, the largest cosine similarity to any column of `reference`.
pub fn max_cos_per_feature(query: &Matrix, reference: &Matrix) -> Result<Vec<f64>> {
    if query.rows() != reference.rows() {
        return Err(Error::dims("max_cos_per_feature", query.shape(), reference.shape()));
    }
    let q = unit_columns_t(query);
    let r = unit_columns_t(reference);
    Ok((0..q.rows())
        .map(|i| {
            let qi = q.row(i);
            if qi.iter().all(|v| *v == 0.0) {
                return 0.0;
            }
            (0..r.rows())
                .map(|j| dot(qi, r.row(j)).clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max)
                .max(if r.rows() == 0 { 0.0 } else { f64::NEG_INFINITY })
        })
        .collect())
}

/// Mean over `query` features of their best cosine match in `reference`.
///
/// Asymmetric: `query` is the dictionary whose features are averaged over.
pub fn mmcs(query: &Matrix, reference: &Matrix) -> Result<f64> {
    let per = max_cos_per_feature(query, reference)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Both directions of [`mmcs`] and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmcsPair {
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub mean: f64,
}

pub fn mmcs_symmetric(a: &Matrix, b: &Matrix) -> Result<MmcsPair> {
    let a_to_b = mmcs(a, b)?;
    let b_to_a = mmcs(b, a)?;
    Ok(MmcsPair {
        a_to_b,
        b_to_a,
        mean: 0.5 * (a_to_b + b_to_a),
    })
}

/// How well a learned decoder rediscovers the ground-truth dictionary.
pub fn ground_truth_recovery(decoder: &Matrix, ground_truth: &Matrix) -> Result<f64> {
    mmcs(ground_truth, decoder)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_left,count` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,count\n");
        for (left, count) in self.edges.iter().zip(&self.counts) {
            out.push_str(&format!("{left},{count}\n"));
        }
        out
    }
}

/// Uniform histogram over `[lo, hi]`; out-of-range values land in the end bins.
pub fn alignment_histogram(scores: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0u64; bins];
    for &s in scores {
        let pos = ((s - lo) / width).floor();
        let idx = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Full-set evaluation of `params` on `data`, in chunks of `chunk` rows.
///
/// Fills every field except the training-only ones (`dead_fraction_train`, `lr`).
pub fn evaluate(
    params: &SaeParams,
    data: &Matrix,
    lambda: f64,
    p_current: f64,
    chunk: usize,
    step: u64,
) -> Result<MetricsRecord> {
    if data.cols() != params.n {
        return Err(Error::dims(
            "evaluate",
            format!("data {}", data.shape()),
            format!("SAE n={}", params.n),
        ));
    }
    if data.rows() == 0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let encoder = params.effective_encoder()?;
    let chunk = chunk.max(1);
    let mut recon = Matrix::zeros(data.rows(), data.cols());
    let mut firing = FiringTracker::new(params.m);
    let (mut sq_err, mut penalty, mut active) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < data.rows() {
        let end = (start + chunk).min(data.rows());
        let x = data.slice_rows(start, end);
        let out = forward_with_encoder(params, &encoder, &x)?;
        let rows = (end - start) as f64;
        sq_err += reconstruction_error(&x, &out.reconstruction) * rows;
        penalty += sparsity_penalty(&out, &params.w_dec, params.variant, p_current) * rows;
        active += l0_mean(&out.features) * rows;
        firing.observe(&out.features);
        recon.as_mut_slice()[start * data.cols()..end * data.cols()]
            .copy_from_slice(out.reconstruction.as_slice());
        start = end;
    }
    let k = data.rows() as f64;
    let scores = alignment_scores_with_encoder(&encoder, &params.w_dec);
    Ok(MetricsRecord {
        step,
        recon_loss: sq_err / k,
        penalty: penalty / k,
        explained_variance: explained_variance(data, &recon).ok(),
        l0_mean: active / k,
        dead_fraction_train: None,
        dead_fraction_eval: Some(firing.dead_fraction()),
        alignment: AlignmentSummary::from_scores(&scores),
        lr: None,
        lambda: Some(lambda),
        p: Some(p_current),
    })
}
