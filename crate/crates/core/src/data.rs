//! Synthetic superposition data and the `SAEA` activation file format.
//!
//! # `SAEA` layout (little-endian)
//!
//! ```text
//! "SAEA"                magic
//! u32                   version = 1
//! u64                   samples
//! u32                   n (activation dimension)
//! u8                    dtype, 0 = f32
//! f32 × samples × n     row-major payload
//! -- optional ground-truth block --
//! "GTRU"                sub-magic
//! u32                   m_true
//! f32 × n × m_true      dictionary, row-major
//! per sample:           u32 count, then count × (u32 feature, f32 coefficient)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, check_magic, Reader};
use crate::error::{Error, Result};
use crate::numerics::{column_norms, streams, Matrix, RngStream};

pub const ACTIVATION_MAGIC: &[u8; 4] = b"SAEA";
pub const GROUND_TRUTH_MAGIC: &[u8; 4] = b"GTRU";
pub const ACTIVATION_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Parameters of the synthetic generator: `x = G·c + ε`, with each
/// `c_i = Bernoulli(fire_prob) · Uniform(0, 1]` and `ε ~ N(0, noise_sigma² I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m_true: usize,
    pub fire_prob: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m_true == 0 {
            return Err(Error::Config(format!(
                "synthetic spec needs n >= 1 and m_true >= 1, got n={}, m_true={}",
                self.n, self.m_true
            )));
        }
        if !(0.0..1.0).contains(&self.fire_prob) {
            return Err(Error::Config(format!(
                "fire probability must be in [0, 1), got {}",
                self.fire_prob
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Expected number of active ground-truth features per sample.
    pub fn expected_l0(&self) -> f64 {
        self.fire_prob * self.m_true as f64
    }
}

/// Sparse coefficients of one sample: `(feature, magnitude)` pairs.
pub type SparseCode = Vec<(u32, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `n×m_true`, unit-norm columns.
    pub dictionary: Matrix,
    pub codes: Vec<SparseCode>,
}

/// Rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub data: Matrix,
    pub ground_truth: Option<GroundTruth>,
}

impl ActivationSet {
    pub fn new(data: Matrix) -> Self {
        ActivationSet {
            data,
            ground_truth: None,
        }
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    pub fn n(&self) -> usize {
        self.data.cols()
    }

    /// Data and ground truth rounded through `f32`, i.e. what a file round trip yields.
    pub fn to_storage_precision(&self) -> ActivationSet {
        ActivationSet {
            data: self.data.to_storage_precision(),
            ground_truth: self.ground_truth.as_ref().map(|gt| GroundTruth {
                dictionary: gt.dictionary.to_storage_precision(),
                codes: gt
                    .codes
                    .iter()
                    .map(|c| c.iter().map(|&(i, v)| (i, v as f32 as f64)).collect())
                    .collect(),
            }),
        }
    }
}

/// Unit-norm Gaussian dictionary, `n×m`.
pub fn random_unit_dictionary(rng: &mut RngStream, n: usize, m: usize) -> Matrix {
    let mut g = rng.normal_matrix(n, m, 1.0);
    let norms = column_norms(&g);
    for r in 0..n {
        for (c, norm) in norms.iter().enumerate() {
            if *norm > 0.0 {
                g[(r, c)] /= norm;
            }
        }
    }
    g
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<ActivationSet> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut dict_rng = root.fork(streams::DICTIONARY);
    let mut sample_rng = root.fork(streams::SAMPLES);
    let dictionary = random_unit_dictionary(&mut dict_rng, spec.n, spec.m_true);

    let mut codes = Vec::with_capacity(spec.samples);
    let mut noise = Matrix::zeros(spec.samples, spec.n);
    for s in 0..spec.samples {
        let mut code = SparseCode::new();
        for i in 0..spec.m_true {
            if sample_rng.bernoulli(spec.fire_prob) {
                code.push((i as u32, sample_rng.uniform_open_closed()));
            }
        }
        codes.push(code);
        if spec.noise_sigma > 0.0 {
            for v in noise.row_mut(s) {
                *v = spec.noise_sigma * sample_rng.normal();
            }
        }
    }
    let mut data = compose(&dictionary, &codes)?;
    for (x, e) in data.as_mut_slice().iter_mut().zip(noise.as_slice()) {
        *x += e;
    }
    Ok(ActivationSet {
        data,
        ground_truth: Some(GroundTruth { dictionary, codes }),
    })
}

/// `x_s = Σ_i c_{s,i} G[:, i]` for every sparse code.
pub fn compose(dictionary: &Matrix, codes: &[SparseCode]) -> Result<Matrix> {
    let n = dictionary.rows();
    let g_t = dictionary.transpose();
    let mut data = Matrix::zeros(codes.len(), n);
    for (s, code) in codes.iter().enumerate() {
        let row = data.row_mut(s);
        for &(i, c) in code {
            let i = i as usize;
            if i >= dictionary.cols() {
                return Err(Error::dims("compose", format!("feature {i}"), dictionary.shape()));
            }
            for (x, g) in row.iter_mut().zip(g_t.row(i)) {
                *x += c * g;
            }
        }
    }
    Ok(data)
}

pub fn write_activations(set: &ActivationSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_activations(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationSet> {
    decode_activations(BufReader::new(File::open(path)?))
}

pub fn encode_activations(set: &ActivationSet, w: &mut impl Write) -> Result<()> {
    let n = u32::try_from(set.n()).map_err(|_| Error::Config("n exceeds u32".into()))?;
    w.write_all(ACTIVATION_MAGIC)?;
    binio::put_u32(w, ACTIVATION_VERSION)?;
    binio::put_u64(w, set.samples() as u64)?;
    binio::put_u32(w, n)?;
    binio::put_u8(w, DTYPE_F32)?;
    binio::put_f32_array(w, set.data.as_slice())?;
    if let Some(gt) = &set.ground_truth {
        if gt.dictionary.rows() != set.n() || gt.codes.len() != set.samples() {
            return Err(Error::dims(
                "ground truth",
                format!("dictionary {} with {} codes", gt.dictionary.shape(), gt.codes.len()),
                format!("{} samples of n={}", set.samples(), set.n()),
            ));
        }
        w.write_all(GROUND_TRUTH_MAGIC)?;
        binio::put_u32(w, gt.dictionary.cols() as u32)?;
        binio::put_f32_array(w, gt.dictionary.as_slice())?;
        for code in &gt.codes {
            binio::put_u32(w, code.len() as u32)?;
            for &(i, c) in code {
                binio::put_u32(w, i)?;
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn decode_activations(r: impl Read) -> Result<ActivationSet> {
    let mut r = Reader::new(r);
    r.magic(ACTIVATION_MAGIC)?;
    let version = r.u32("version")?;
    if version != ACTIVATION_VERSION {
        return Err(Error::Version {
            format: "SAEA",
            found: version,
            expected: ACTIVATION_VERSION,
        });
    }
    let samples = r.u64("sample count")? as usize;
    let n = r.u32("dimension")? as usize;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let count = samples
        .checked_mul(n)
        .ok_or_else(|| Error::Format(format!("{samples}x{n} payload overflows")))?;
    let data = Matrix::from_vec(samples, n, r.f32_array(count, "activation payload")?)?;

    let ground_truth = match r.tag_or_eof("ground-truth magic")? {
        None => None,
        Some(tag) => {
            check_magic(&tag, GROUND_TRUTH_MAGIC)?;
            let m_true = r.u32("ground-truth size")? as usize;
            let dict = r.f32_array(n * m_true, "ground-truth dictionary")?;
            let dictionary = Matrix::from_vec(n, m_true, dict)?;
            let mut codes = Vec::with_capacity(samples);
            for _ in 0..samples {
                let k = r.u32("code length")? as usize;
                let mut code = SparseCode::with_capacity(k.min(m_true));
                for _ in 0..k {
                    let i = r.u32("code index")?;
                    let c = r.f32("code value")? as f64;
                    code.push((i, c));
                }
                codes.push(code);
            }
            Some(GroundTruth { dictionary, codes })
        }
    };
    if !data.is_finite() {
        return Err(Error::Format("activation payload contains non-finite values".into()));
    }
    Ok(ActivationSet { data, ground_truth })
}

/// Endless stream of shuffled mini-batches.
///
/// Each epoch draws a fresh permutation from the seeded stream and visits
/// every sample exactly once; the last batch of an epoch may be short.
pub struct BatchIter<'a> {
    data: &'a Matrix,
    batch_size: usize,
    rng: RngStream,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(set: &'a ActivationSet, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(set, batch_size, RngStream::new(seed))
    }

    pub fn with_rng(set: &'a ActivationSet, batch_size: usize, rng: RngStream) -> Result<Self> {
        if batch_size == 0 || batch_size > set.samples() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={} (sample count)",
                set.samples()
            )));
        }
        Ok(BatchIter {
            data: &set.data,
            batch_size,
            rng,
            order: (0..set.samples()).collect(),
            pos: set.samples(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Row indices of the next batch.
    pub fn next_indices(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let start = self.pos;
        self.pos = end;
        &self.order[start..end]
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Matrix;

    fn next(&mut self) -> Option<Matrix> {
        let data = self.data;
        let idx = self.next_indices();
        Some(data.gather_rows(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(samples: usize, rho: f64, sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n: 16,
            m_true: 32,
            fire_prob: rho,
            noise_sigma: sigma,
            samples,
            seed: 5,
        }
    }

    #[test]
    fn zero_fire_prob_is_pure_noise() {
        let set = gen_synthetic(&spec(4000, 0.0, 0.5)).unwrap();
        assert!(set.ground_truth.as_ref().unwrap().codes.iter().all(Vec::is_empty));
        let mean_sq: f64 = set.data.as_slice().iter().map(|v| v * v).sum::<f64>() / 4000.0;
        // E‖x‖² = σ² n = 4.
        assert!((mean_sq - 4.0).abs() < 0.1, "{mean_sq}");
    }

    #[test]
    fn single_unit_code_reproduces_column() {
        let mut rng = RngStream::new(3);
        let g = random_unit_dictionary(&mut rng, 8, 5);
        let x = compose(&g, &[vec![(3, 1.0)]]).unwrap();
        assert_eq!(x.row(0), g.col(3).as_slice());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_synthetic(&spec(200, 0.1, 0.05)).unwrap();
        let b = gen_synthetic(&spec(200, 0.1, 0.05)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(200, 0.1, 0.05);
        other.seed = 6;
        assert_ne!(a, gen_synthetic(&other).unwrap());
    }

    #[test]
    fn ground_truth_columns_are_unit() {
        let set = gen_synthetic(&spec(10, 0.1, 0.0)).unwrap();
        for c in column_norms(&set.ground_truth.unwrap().dictionary) {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_samples_lie_in_active_span() {
        // Residual of x against the active columns with the recorded codes.
        let set = gen_synthetic(&spec(300, 0.1, 0.0)).unwrap();
        let gt = set.ground_truth.as_ref().unwrap();
        let rebuilt = compose(&gt.dictionary, &gt.codes).unwrap();
        assert_eq!(rebuilt, set.data);
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synthetic(&spec(10, 1.0, 0.0)).is_err());
        assert!(gen_synthetic(&spec(10, -0.1, 0.0)).is_err());
        assert!(gen_synthetic(&spec(10, 0.1, -1.0)).is_err());
    }

    #[test]
    fn round_trip_with_ground_truth() {
        let set = gen_synthetic(&spec(50, 0.2, 0.01)).unwrap();
        let mut buf = Vec::new();
        encode_activations(&set, &mut buf).unwrap();
        let back = decode_activations(buf.as_slice()).unwrap();
        assert_eq!(back, set.to_storage_precision());
        let mut again = Vec::new();
        encode_activations(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_set_round_trips() {
        let set = ActivationSet::new(Matrix::zeros(0, 7));
        let mut buf = Vec::new();
        encode_activations(&set, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 1);
        let back = decode_activations(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), 0);
        assert_eq!(back.n(), 7);
    }

    #[test]
    fn header_layout() {
        let set = ActivationSet::new(Matrix::from_rows(&[[1.0, -2.0]]));
        let mut buf = Vec::new();
        encode_activations(&set, &mut buf).unwrap();
        let mut want = b"SAEA".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let set = gen_synthetic(&spec(5, 0.2, 0.0)).unwrap();
        let mut buf = Vec::new();
        encode_activations(&set, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        match decode_activations(bad.as_slice()) {
            Err(Error::BadMagic { expected, .. }) => assert_eq!(expected, "SAEA"),
            other => panic!("{other:?}"),
        }

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(decode_activations(bad.as_slice()), Err(Error::Version { found: 9, .. })));

        assert!(matches!(decode_activations(&buf[..30]), Err(Error::Truncated(_))));
        // Cut inside the ground-truth block.
        assert!(matches!(decode_activations(&buf[..buf.len() - 3]), Err(Error::Truncated(_))));

        let mut bad = buf[..4 + 4 + 8 + 4 + 1 + 5 * 16 * 4].to_vec();
        bad.extend_from_slice(b"NOPE");
        assert!(matches!(decode_activations(bad.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.saea");
        let set = gen_synthetic(&spec(20, 0.2, 0.1)).unwrap();
        write_activations(&set, &path).unwrap();
        assert_eq!(read_activations(&path).unwrap(), set.to_storage_precision());
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let set = ActivationSet::new(Matrix::from_fn(10, 1, |r, _| r as f64));
        let mut it = BatchIter::new(&set, 10, 1).unwrap();
        let b = it.next().unwrap();
        let mut vals: Vec<f64> = b.as_slice().to_vec();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, (0..10).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        let set = ActivationSet::new(Matrix::from_fn(23, 2, |r, c| (r * 2 + c) as f64));
        let mut it = BatchIter::new(&set, 5, 9).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..it.batches_per_epoch() {
            seen.extend_from_slice(it.next_indices());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let set = ActivationSet::new(Matrix::from_fn(40, 3, |r, c| (r + c) as f64));
        let a: Vec<Matrix> = BatchIter::new(&set, 7, 2).unwrap().take(20).collect();
        let b: Vec<Matrix> = BatchIter::new(&set, 7, 2).unwrap().take(20).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_batch_rejected() {
        let set = ActivationSet::new(Matrix::zeros(4, 2));
        assert!(matches!(BatchIter::new(&set, 5, 0), Err(Error::Config(_))));
        assert!(BatchIter::new(&set, 0, 0).is_err());
    }
}
