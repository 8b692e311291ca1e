//! Seeded training loop with warmup/decay schedules, Adam, dead-feature
//! tracking and the `SAEC` checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "SAEC" | u32 version = 1 | u64 header length | header JSON (UTF-8)
//! then for each tensor of the mode, in canonical order:
//!     u32 name length | name | u64 rows | u64 cols | rows*cols f32, row-major
//! ```
//!
//! The header holds the training config, the final step and the final
//! metrics. Biases are stored as `1×len` tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::data::{random_unit_dictionary, ActivationSet, BatchIter};
use crate::error::{Error, Result};
use crate::grad::backward_full;
use crate::metrics::{evaluate, MetricsRecord};
use crate::model::{alignment_scores_with_encoder, EncoderMode, Penalty, SaeParams, SaeVariant, TensorName};
use crate::numerics::{streams, AdamState, Matrix, RngStream};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEC";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Abort threshold on `max_i |a_i - 1|` for aligned runs, measured on 32-bit storage.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;

const MAX_HEADER_BYTES: u64 = 1 << 26;
const MAX_NAME_BYTES: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: SaeVariant,
    pub n: usize,
    pub m: usize,
    pub lambda: f64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    pub total_steps: u64,
    #[serde(default = "defaults::lr_warmup_steps")]
    pub lr_warmup_steps: u64,
    #[serde(default = "defaults::lambda_warmup_steps")]
    pub lambda_warmup_steps: u64,
    #[serde(default = "defaults::lr_decay_start_frac")]
    pub lr_decay_start_frac: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::dead_window")]
    pub dead_window: u64,
    #[serde(default = "defaults::log_every")]
    pub log_every: u64,
    /// When false, both biases stay at zero for the whole run.
    #[serde(default = "defaults::use_biases")]
    pub use_biases: bool,
}

mod defaults {
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn lr_warmup_steps() -> u64 {
        1000
    }
    pub fn lambda_warmup_steps() -> u64 {
        5000
    }
    pub fn lr_decay_start_frac() -> f64 {
        0.8
    }
    pub fn batch_size() -> usize {
        2048
    }
    pub fn dead_window() -> u64 {
        500
    }
    pub fn log_every() -> u64 {
        100
    }
    pub fn use_biases() -> bool {
        true
    }
}

impl TrainConfig {
    /// A config with every optional field at its default.
    pub fn new(variant: SaeVariant, n: usize, m: usize, lambda: f64, total_steps: u64) -> Self {
        TrainConfig {
            variant,
            n,
            m,
            lambda,
            lr: defaults::lr(),
            total_steps,
            lr_warmup_steps: defaults::lr_warmup_steps(),
            lambda_warmup_steps: defaults::lambda_warmup_steps(),
            lr_decay_start_frac: defaults::lr_decay_start_frac(),
            batch_size: defaults::batch_size(),
            seed: 0,
            dead_window: defaults::dead_window(),
            log_every: defaults::log_every(),
            use_biases: defaults::use_biases(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config(format!("n and m must be positive (n={}, m={})", self.n, self.m)));
        }
        self.variant.validate(self.m)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if !(self.lr_decay_start_frac > 0.0 && self.lr_decay_start_frac <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_start_frac must be in (0, 1], got {}",
                self.lr_decay_start_frac
            )));
        }
        if self.total_steps > 0 {
            for (name, steps) in [
                ("lr_warmup_steps", self.lr_warmup_steps),
                ("lambda_warmup_steps", self.lambda_warmup_steps),
            ] {
                if steps >= self.total_steps {
                    return Err(Error::Config(format!(
                        "{name} ({steps}) must be below total_steps ({})",
                        self.total_steps
                    )));
                }
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size as u64),
            ("dead_window", self.dead_window),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `p` used by the penalty at `step`; 1 for penalties without a schedule.
    pub fn p_at(&self, step: u64) -> f64 {
        p_schedule(step, self).unwrap_or(1.0)
    }
}

/// Linear warmup to `lr`, flat, then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step as f64;
    let warm = if cfg.lr_warmup_steps == 0 {
        1.0
    } else {
        s / cfg.lr_warmup_steps as f64
    };
    let total = cfg.total_steps as f64;
    let decay_start = cfg.lr_decay_start_frac * total;
    let decay = if s <= decay_start || total <= decay_start {
        1.0
    } else {
        (total - s) / (total - decay_start)
    };
    cfg.lr * warm.min(decay).clamp(0.0, 1.0)
}

/// Linear warmup to `lambda`, then flat.
pub fn lambda_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.lambda_warmup_steps == 0 {
        return cfg.lambda;
    }
    cfg.lambda * (step as f64 / cfg.lambda_warmup_steps as f64).min(1.0)
}

/// `p_start` through the λ warmup, then linear to `p_end` over `anneal_steps`.
pub fn p_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    let Penalty::LpAnnealed {
        p_start,
        p_end,
        anneal_steps,
    } = cfg.variant.penalty
    else {
        return Err(Error::Config(format!(
            "p schedule requested for {} penalty",
            cfg.variant.penalty
        )));
    };
    if step < cfg.lambda_warmup_steps {
        return Ok(p_start);
    }
    let into = step - cfg.lambda_warmup_steps;
    if into >= anneal_steps {
        return Ok(p_end);
    }
    Ok(p_start + (p_end - p_start) * (into as f64 / anneal_steps as f64))
}

/// Fresh parameters for `cfg`.
///
/// Decoder columns are unit Gaussian directions. Standard mode starts with
/// `W_enc = W_decᵀ`, so every alignment score begins at one, as it does by
/// construction in aligned and tied modes. `b_dec` is the mean of
/// `first_batch` when biases are enabled.
pub fn init_params(cfg: &TrainConfig, rng: &mut RngStream, first_batch: Option<&Matrix>) -> Result<SaeParams> {
    let (n, m) = (cfg.n, cfg.m);
    let mut params = SaeParams::zeros(cfg.variant, n, m);
    params.w_dec = random_unit_dictionary(rng, n, m);
    match cfg.variant.encoder {
        EncoderMode::Standard => params.w_enc_raw = Some(params.w_dec.transpose()),
        EncoderMode::Aligned => {
            params.a_free = Some(rng.normal_matrix(m, n - 1, 1.0 / (n as f64).sqrt()));
        }
        EncoderMode::Tied => {}
    }
    if cfg.use_biases {
        if let Some(batch) = first_batch {
            if batch.cols() != n {
                return Err(Error::dims("init_params", batch.shape(), format!("n={n}")));
            }
            if batch.rows() > 0 {
                params.b_dec = batch.column_means();
            }
        }
    }
    Ok(params)
}

/// Per-feature record of the last step on which the feature fired.
#[derive(Clone, Debug, PartialEq)]
pub struct DeadTracker {
    last_active: Vec<u64>,
    current: u64,
}

impl DeadTracker {
    pub fn new(m: usize) -> Self {
        DeadTracker {
            last_active: vec![0; m],
            current: 0,
        }
    }

    /// Advances one step and marks every feature positive on some row of `features`.
    pub fn observe(&mut self, features: &Matrix) -> Result<()> {
        if features.cols() != self.last_active.len() {
            return Err(Error::dims(
                "dead_update",
                features.shape(),
                format!("m={}", self.last_active.len()),
            ));
        }
        self.current += 1;
        for r in 0..features.rows() {
            for (last, &v) in self.last_active.iter_mut().zip(features.row(r)) {
                if v > 0.0 {
                    *last = self.current;
                }
            }
        }
        Ok(())
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn last_active(&self) -> &[u64] {
        &self.last_active
    }

    /// Share of features that have not fired in the last `window` steps.
    pub fn dead_fraction(&self, window: u64) -> f64 {
        if self.last_active.is_empty() {
            return 0.0;
        }
        let dead = self
            .last_active
            .iter()
            .filter(|&&last| self.current - last >= window)
            .count();
        dead as f64 / self.last_active.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: SaeParams,
    pub step: u64,
    pub metrics: MetricsRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TrainConfig,
    final_step: u64,
    final_metrics: MetricsRecord,
}

/// Largest `|a_i - 1|` with the encoder built from, and rounded to, 32-bit storage.
pub fn storage_constraint_deviation(params: &SaeParams) -> Result<f64> {
    let stored = params.to_storage_precision();
    let encoder = stored.effective_encoder()?.to_storage_precision();
    Ok(alignment_scores_with_encoder(&encoder, &stored.w_dec)
        .iter()
        .fold(0.0, |acc: f64, a| acc.max((a - 1.0).abs())))
}

fn check_constraint(params: &SaeParams, step: u64) -> Result<()> {
    if params.variant.encoder != EncoderMode::Aligned {
        return Ok(());
    }
    let deviation = storage_constraint_deviation(params)?;
    if !(deviation <= CONSTRAINT_TOLERANCE) {
        return Err(Error::ConstraintViolation { step, deviation });
    }
    Ok(())
}

fn with_step(err: Error, step: u64) -> Error {
    match err {
        Error::NonFinite { tensor, .. } => Error::NonFinite { tensor, step },
        other => other,
    }
}

/// Trains an SAE on `data`; a pure function of `(cfg, data)`.
///
/// The log starts with a step-0 row and then has one row per `log_every`
/// updates plus one after the last update; rows are measured on the batch
/// just trained on, with the updated parameters. The checkpoint's metrics
/// come from a full pass over `data`.
pub fn train(cfg: &TrainConfig, data: &ActivationSet) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    cfg.validate()?;
    if data.n() != cfg.n {
        return Err(Error::dims(
            "train",
            format!("data n={}", data.n()),
            format!("config n={}", cfg.n),
        ));
    }
    if data.samples() < cfg.batch_size {
        return Err(Error::Config(format!(
            "data has {} samples, fewer than batch_size {}",
            data.samples(),
            cfg.batch_size
        )));
    }

    let root = RngStream::new(cfg.seed);
    let mut batches = BatchIter::with_rng(data, cfg.batch_size, root.fork(streams::BATCHES))?;
    let mut batch = batches.next().expect("batch stream is endless");
    let mut params = init_params(cfg, &mut root.fork(streams::INIT), Some(&batch))?;
    check_constraint(&params, 0)?;

    let batch_record = |params: &SaeParams, x: &Matrix, step: u64, tracker: &DeadTracker| -> Result<MetricsRecord> {
        let sched = step.min(cfg.total_steps.saturating_sub(1));
        let mut rec = evaluate(params, x, lambda_schedule(sched, cfg), cfg.p_at(sched), x.rows(), step)?;
        rec.dead_fraction_eval = None;
        rec.dead_fraction_train = Some(tracker.dead_fraction(cfg.dead_window));
        rec.lr = Some(lr_schedule(sched, cfg));
        Ok(rec)
    };

    let mut tracker = DeadTracker::new(cfg.m);
    let mut log = vec![batch_record(&params, &batch, 0, &tracker)?];
    let mut adam: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|(name, t)| AdamState::new(name.as_str(), t.len()))
        .collect();

    for s in 0..cfg.total_steps {
        if s > 0 {
            batch = batches.next().expect("batch stream is endless");
        }
        let lr = lr_schedule(s, cfg);
        let out = backward_full(&params, &batch, lambda_schedule(s, cfg), cfg.p_at(s)).map_err(|e| with_step(e, s))?;
        for (((name, p), (_, g)), state) in params.tensors_mut().into_iter().zip(out.grads.tensors()).zip(&mut adam) {
            if name.is_bias() && !cfg.use_biases {
                continue;
            }
            state.update(p, g, lr).map_err(|e| with_step(e, s))?;
        }
        tracker.observe(&out.forward.features)?;

        let done = s + 1;
        if done % cfg.log_every == 0 || done == cfg.total_steps {
            check_constraint(&params, done)?;
            log.push(batch_record(&params, &batch, done, &tracker)?);
        }
    }

    let params = params.to_storage_precision();
    let end = cfg.total_steps;
    let mut metrics = evaluate(
        &params,
        &data.data,
        lambda_schedule(end, cfg),
        cfg.p_at(end),
        cfg.batch_size,
        end,
    )?;
    metrics.dead_fraction_train = Some(tracker.dead_fraction(cfg.dead_window));
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        params,
        step: end,
        metrics,
    };
    Ok((checkpoint, log))
}

fn tensor_shape(params: &SaeParams, name: TensorName) -> (usize, usize) {
    match name {
        TensorName::AFree => (params.m, params.n - 1),
        TensorName::WEnc => (params.m, params.n),
        TensorName::WDec => (params.n, params.m),
        TensorName::BEnc => (1, params.m),
        TensorName::BDec => (1, params.n),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint, w: &mut impl Write) -> Result<()> {
    ckpt.params.validate()?;
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ckpt.config.clone(),
        final_step: ckpt.step,
        final_metrics: ckpt.metrics.clone(),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    binio::put_u32(w, CHECKPOINT_VERSION)?;
    binio::put_u64(w, header.len() as u64)?;
    w.write_all(&header)?;
    for (name, values) in ckpt.params.tensors() {
        let (rows, cols) = tensor_shape(&ckpt.params, name);
        binio::put_u32(w, name.as_str().len() as u32)?;
        w.write_all(name.as_str().as_bytes())?;
        binio::put_u64(w, rows as u64)?;
        binio::put_u64(w, cols as u64)?;
        binio::put_f32_array(w, values)?;
    }
    Ok(())
}

pub fn decode_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader::new(r);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            format: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.u64("header length")?;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("checkpoint header of {header_len} bytes")));
    }
    let header: CheckpointHeader = serde_json::from_str(&r.string(header_len as usize, "checkpoint header")?)?;
    let cfg = &header.config;
    cfg.variant.validate(cfg.m)?;
    if cfg.n == 0 || cfg.m == 0 {
        return Err(Error::Format(format!("checkpoint with n={}, m={}", cfg.n, cfg.m)));
    }

    let mut params = SaeParams::zeros(cfg.variant, cfg.n, cfg.m);
    let names: Vec<TensorName> = params.tensors().iter().map(|(name, _)| *name).collect();
    for name in names {
        let len = r.u32("tensor name length")?;
        if len > MAX_NAME_BYTES {
            return Err(Error::Format(format!("tensor name of {len} bytes")));
        }
        let found = r.string(len as usize, "tensor name")?;
        if found != name.as_str() {
            return Err(Error::Format(format!("expected tensor {name}, found {found:?}")));
        }
        let rows = r.u64("tensor rows")?;
        let cols = r.u64("tensor cols")?;
        let (want_rows, want_cols) = tensor_shape(&params, name);
        if (rows, cols) != (want_rows as u64, want_cols as u64) {
            return Err(Error::Format(format!(
                "tensor {name} is {rows}x{cols}, expected {want_rows}x{want_cols}"
            )));
        }
        let values = r.f32_array(want_rows * want_cols, name.as_str())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor {name} holds non-finite values")));
        }
        let slot = params
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .expect("tensor list comes from these params");
        slot.copy_from_slice(&values);
    }
    if !r.at_eof()? {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        step: header.final_step,
        metrics: header.final_metrics,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_checkpoint(ckpt, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::model::{alignment_scores, Activation};
    use crate::numerics::column_norms;
    use proptest::prelude::*;

    fn cfg(variant: SaeVariant, total: u64) -> TrainConfig {
        let mut c = TrainConfig::new(variant, 8, 16, 0.05, total);
        c.lr = 1e-3;
        c.lr_warmup_steps = total / 10;
        c.lambda_warmup_steps = total / 5;
        c.batch_size = 32;
        c.dead_window = 20;
        c.log_every = 25;
        c.seed = 3;
        c
    }

    fn small_data() -> ActivationSet {
        gen_synthetic(&SyntheticSpec {
            n: 8,
            m_true: 16,
            fire_prob: 0.1,
            noise_sigma: 0.01,
            samples: 400,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_points() {
        let mut c = TrainConfig::new(SaeVariant::relu(EncoderMode::Standard), 4, 4, 0.0, 1000);
        c.lr_warmup_steps = 100;
        c.lambda_warmup_steps = 100;
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(100, &c), c.lr);
        assert_eq!(lr_schedule(50, &c), c.lr / 2.0);
        assert_eq!(lr_schedule(800, &c), c.lr);
        assert!((lr_schedule(900, &c) - c.lr / 2.0).abs() < 1e-18);
    }

    #[test]
    fn lambda_schedule_points() {
        let mut c = TrainConfig::new(SaeVariant::relu(EncoderMode::Standard), 4, 4, 0.04, 10_000);
        assert_eq!(lambda_schedule(0, &c), 0.0);
        assert_eq!(lambda_schedule(2500, &c), 0.02);
        assert_eq!(lambda_schedule(5000, &c), 0.04);
        assert_eq!(lambda_schedule(9999, &c), 0.04);
        c.lambda_warmup_steps = 0;
        assert_eq!(lambda_schedule(0, &c), 0.04);
    }

    #[test]
    fn p_schedule_points() {
        let variant = SaeVariant::new(
            EncoderMode::Aligned,
            Activation::Relu,
            Penalty::LpAnnealed {
                p_start: 1.0,
                p_end: 0.2,
                anneal_steps: 1000,
            },
        );
        let mut c = TrainConfig::new(variant, 4, 4, 0.04, 10_000);
        c.lambda_warmup_steps = 2000;
        assert_eq!(p_schedule(0, &c).unwrap(), 1.0);
        assert_eq!(p_schedule(1999, &c).unwrap(), 1.0);
        assert!((p_schedule(2500, &c).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(p_schedule(3000, &c).unwrap(), 0.2);
        assert_eq!(p_schedule(9000, &c).unwrap(), 0.2);

        let l1 = TrainConfig::new(SaeVariant::relu(EncoderMode::Aligned), 4, 4, 0.04, 10_000);
        assert!(matches!(p_schedule(0, &l1), Err(Error::Config(_))));
        assert_eq!(l1.p_at(10), 1.0);
    }

    #[test]
    fn config_validation() {
        let base = cfg(SaeVariant::relu(EncoderMode::Standard), 100);
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.lr_warmup_steps = 100;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.lr_decay_start_frac = 0.0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.total_steps = 0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"variant":{"encoder":"aligned"},"n":64,"m":256,"lambda":0.035,"total_steps":10000}"#,
        )
        .unwrap();
        assert_eq!(c, TrainConfig::new(SaeVariant::relu(EncoderMode::Aligned), 64, 256, 0.035, 10_000));
        let again: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
        let bad = r#"{"variant":{"encoder":"aligned"},"n":64,"m":256,"lambda":0.035,"total_steps":1,"lamda":1}"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
    }

    #[test]
    fn init_contract() {
        for mode in EncoderMode::ALL {
            let c = cfg(SaeVariant::relu(mode), 100);
            let a = init_params(&c, &mut RngStream::new(5), None).unwrap();
            let b = init_params(&c, &mut RngStream::new(5), None).unwrap();
            assert_eq!(a, b);
            for norm in column_norms(&a.w_dec) {
                assert!((norm - 1.0).abs() < 1e-12);
            }
            for s in alignment_scores(&a).unwrap() {
                assert!((s - 1.0).abs() < 1e-10, "{mode}: {s}");
            }
            assert!(a.b_enc.iter().all(|v| *v == 0.0));
        }
        let c = cfg(SaeVariant::relu(EncoderMode::Standard), 100);
        let batch = Matrix::from_fn(3, 8, |r, col| (r + col) as f64);
        let p = init_params(&c, &mut RngStream::new(5), Some(&batch)).unwrap();
        assert_eq!(p.b_dec, batch.column_means());
    }

    #[test]
    fn dead_tracker_cases() {
        let mut t = DeadTracker::new(3);
        let fire_all = Matrix::from_rows(&[[1.0, 1.0, 1.0]]);
        for _ in 0..10 {
            t.observe(&fire_all).unwrap();
        }
        assert_eq!(t.dead_fraction(1), 0.0);

        let mut t = DeadTracker::new(4);
        let three = Matrix::from_rows(&[[1.0, 0.5, 2.0, 0.0]]);
        for _ in 0..6 {
            t.observe(&three).unwrap();
        }
        assert_eq!(t.dead_fraction(5), 0.25);
        assert_eq!(t.dead_fraction(7), 0.0);
        assert!(t.last_active().iter().all(|&l| l <= t.current()));
        assert!(t.observe(&Matrix::zeros(1, 3)).is_err());
    }

    proptest! {
        #[test]
        fn dead_fraction_monotone_in_window(seed in any::<u64>(), steps in 1usize..40) {
            let mut rng = RngStream::new(seed);
            let mut t = DeadTracker::new(12);
            for _ in 0..steps {
                let f = rng.normal_matrix(2, 12, 1.0).map(|v| (v - 1.8).max(0.0));
                t.observe(&f).unwrap();
            }
            let mut last = 1.0;
            for w in 1..45 {
                let d = t.dead_fraction(w);
                prop_assert!(d <= last);
                last = d;
            }
        }

        #[test]
        fn schedules_continuous_and_nonnegative(total in 10u64..3000, warm_frac in 0.0f64..0.9, decay in 0.05f64..1.0) {
            let mut c = TrainConfig::new(SaeVariant::relu(EncoderMode::Standard), 2, 2, 0.5, total);
            c.lr_warmup_steps = (warm_frac * total as f64) as u64;
            c.lambda_warmup_steps = c.lr_warmup_steps;
            c.lr_decay_start_frac = decay;
            let mut prev = (lr_schedule(0, &c), lambda_schedule(0, &c));
            let max_jump = c.lr / (c.lr_warmup_steps.max(1) as f64).min(total as f64 * (1.0 - decay)).max(1.0);
            for s in 0..total {
                let cur = (lr_schedule(s, &c), lambda_schedule(s, &c));
                prop_assert!(cur.0 >= 0.0 && cur.1 >= 0.0);
                prop_assert!((cur.0 - prev.0).abs() <= max_jump * (1.0 + 1e-9) + 1e-18);
                prev = cur;
            }
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let data = small_data();
        let c = cfg(SaeVariant::relu(EncoderMode::Aligned), 0);
        let (ckpt, log) = train(&c, &data).unwrap();
        assert_eq!(log.len(), 1);
        let root = RngStream::new(c.seed);
        let first = BatchIter::with_rng(&data, c.batch_size, root.fork(streams::BATCHES))
            .unwrap()
            .next()
            .unwrap();
        let init = init_params(&c, &mut root.fork(streams::INIT), Some(&first)).unwrap();
        assert_eq!(ckpt.params, init.to_storage_precision());
        assert_eq!(ckpt.step, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_on_schedule() {
        let data = small_data();
        let c = cfg(SaeVariant::relu(EncoderMode::Standard), 110);
        let (a, log_a) = train(&c, &data).unwrap();
        let (b, log_b) = train(&c, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let steps: Vec<u64> = log_a.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 25, 50, 75, 100, 110]);
    }

    #[test]
    fn aligned_training_holds_constraint_and_learns() {
        let data = small_data();
        let c = cfg(SaeVariant::relu(EncoderMode::Aligned), 300);
        let (ckpt, log) = train(&c, &data).unwrap();
        for rec in &log {
            assert!(rec.alignment.max_deviation_from_one() <= 1e-10, "step {}", rec.step);
        }
        assert!(storage_constraint_deviation(&ckpt.params).unwrap() <= CONSTRAINT_TOLERANCE);
        assert!(log.last().unwrap().recon_loss < log[0].recon_loss);
    }

    #[test]
    fn data_dimension_mismatch_names_both() {
        let data = small_data();
        let mut c = cfg(SaeVariant::relu(EncoderMode::Standard), 10);
        c.lr_warmup_steps = 1;
        c.lambda_warmup_steps = 1;
        c.n = 9;
        let err = train(&c, &data).unwrap_err().to_string();
        assert!(err.contains("data n=8") && err.contains("config n=9"), "{err}");
    }

    #[test]
    fn exploding_run_reports_step() {
        let data = small_data();
        let mut c = cfg(SaeVariant::relu(EncoderMode::Standard), 50);
        c.lr = 1e300;
        c.lr_warmup_steps = 0;
        c.lambda_warmup_steps = 0;
        c.lr_decay_start_frac = 1.0;
        match train(&c, &data) {
            Err(Error::NonFinite { step, .. }) => assert!(step > 0 && step < 50),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    fn trained_checkpoint(mode: EncoderMode) -> Checkpoint {
        let mut c = cfg(SaeVariant::relu(mode), 30);
        c.log_every = 10;
        train(&c, &small_data()).unwrap().0
    }

    #[test]
    fn checkpoint_round_trip() {
        for mode in EncoderMode::ALL {
            let ckpt = trained_checkpoint(mode);
            let mut buf = Vec::new();
            encode_checkpoint(&ckpt, &mut buf).unwrap();
            let back = decode_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, ckpt);
            let mut again = Vec::new();
            encode_checkpoint(&back, &mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn checkpoint_faults() {
        let ckpt = trained_checkpoint(EncoderMode::Aligned);
        let mut buf = Vec::new();
        encode_checkpoint(&ckpt, &mut buf).unwrap();

        for cut in [0, 3, 6, 12, 40, buf.len() / 2, buf.len() - 1] {
            let err = decode_checkpoint(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated(_)), "cut at {cut}: {err}");
        }

        let mut bad = buf.clone();
        bad[..4].copy_from_slice(b"SAEA");
        let err = decode_checkpoint(bad.as_slice()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("SAEC"));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(bad.as_slice()),
            Err(Error::Version { found: 2, .. })
        ));

        let mut bad = buf;
        bad.push(0);
        assert!(matches!(decode_checkpoint(bad.as_slice()), Err(Error::Format(_))));
    }
}
