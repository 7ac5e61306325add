//! The persona codebook: `N` code vectors of dimension `d`, their
//! initializers, nearest-code lookup, and the losses that train them.

mod em;
mod loss;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{MorpheusError, Result};

pub use em::{e_step, em_fit, m_step, EmOptions, EmState, MStep, DEAD_MASS_FRACTION, VARIANCE_FLOOR};
pub use loss::{contrastive_graph, contrastive_loss, vq_graph, vq_loss, VqLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    Sequential,
    Average,
    Em,
}

impl InitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Sequential => "sequential",
            InitStrategy::Average => "average",
            InitStrategy::Em => "em",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitStrategy {
    type Err = MorpheusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitStrategy::Random),
            "sequential" => Ok(InitStrategy::Sequential),
            "average" => Ok(InitStrategy::Average),
            "em" => Ok(InitStrategy::Em),
            other => Err(MorpheusError::InvalidArgument(format!(
                "unknown init strategy `{other}` (expected random, sequential, average or em)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonaCodebook {
    vectors: Matrix,
    usage_counts: Vec<u64>,
    pub strategy: InitStrategy,
    pub seed: u64,
    pub em_state: Option<EmState>,
}

impl PersonaCodebook {
    pub fn from_vectors(vectors: Matrix, strategy: InitStrategy, seed: u64) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 || d == 0 {
            return Err(MorpheusError::InvalidArgument("codebook needs N ≥ 1 and d ≥ 1".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(MorpheusError::NonFinite("codebook vectors".into()));
        }
        Ok(PersonaCodebook {
            vectors,
            usage_counts: vec![0; n],
            strategy,
            seed,
            em_state: None,
        })
    }

    /// Entries i.i.d. uniform on `[-1/√d, 1/√d]`.
    pub fn init_random(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(MorpheusError::InvalidArgument("codebook needs N ≥ 1 and d ≥ 1".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = Matrix::from_shape_fn((n, d), |_| rng.gen_range(-bound..=bound));
        Self::from_vectors(vectors, InitStrategy::Random, seed)
    }

    /// Slot `k` takes the `k`-th distinct vector of `stream`; slots the
    /// stream never reaches keep their random initialization.
    pub fn init_sequential<I>(stream: I, n: usize, d: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = Array1<f64>>,
    {
        let mut cb = Self::init_random(n, d, seed)?;
        cb.strategy = InitStrategy::Sequential;
        let mut filled = 0;
        for v in stream {
            if filled == n {
                break;
            }
            cb.fill_slot(&mut filled, v.view())?;
        }
        Ok(cb)
    }

    /// Slot `k` takes the mean of the `k`-th batch (skipping means equal to
    /// an already filled slot); unreached slots stay random.
    pub fn init_average<I>(batches: I, n: usize, d: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<Array1<f64>>>,
    {
        let mut cb = Self::init_random(n, d, seed)?;
        cb.strategy = InitStrategy::Average;
        let mut filled = 0;
        for batch in batches {
            if filled == n {
                break;
            }
            if batch.is_empty() {
                return Err(MorpheusError::InvalidArgument("empty batch in average init".into()));
            }
            let mut mean = Array1::<f64>::zeros(d);
            for v in &batch {
                if v.len() != d {
                    return Err(MorpheusError::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
                mean += v;
            }
            mean /= batch.len() as f64;
            cb.fill_slot(&mut filled, mean.view())?;
        }
        Ok(cb)
    }

    fn fill_slot(&mut self, filled: &mut usize, v: ArrayView1<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(MorpheusError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        if (0..*filled).any(|k| self.vectors.row(k) == v) {
            return Ok(());
        }
        self.vectors.row_mut(*filled).assign(&v);
        *filled += 1;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn code(&self, k: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(k)
    }

    /// Replaces the code vectors (e.g. after a training step), keeping usage.
    pub fn set_vectors(&mut self, vectors: Matrix) -> Result<()> {
        if vectors.dim() != self.vectors.dim() {
            return Err(MorpheusError::DimensionMismatch {
                expected: self.vectors.len(),
                got: vectors.len(),
            });
        }
        self.vectors = vectors;
        Ok(())
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size() {
            return Err(MorpheusError::DimensionMismatch {
                expected: self.size(),
                got: counts.len(),
            });
        }
        self.usage_counts = counts;
        Ok(())
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Nearest code by Euclidean distance, recording the lookup.
    pub fn lookup(&mut self, p: ArrayView1<f64>) -> Result<(usize, f64)> {
        let (k, dist) = nearest_code(p, self.vectors.view())?;
        self.usage_counts[k] += 1;
        Ok((k, dist))
    }

    /// Records a lookup of code `k` made elsewhere.
    pub fn record_lookup(&mut self, k: usize) {
        self.usage_counts[k] += 1;
    }

    pub fn utilization(&self) -> Result<Utilization> {
        utilization(&self.usage_counts)
    }

    /// Standalone export: magic, version, `N`, `d`, strategy tag, seed, then
    /// row-major little-endian `f32` entries.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(32 + 4 * self.vectors.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.size() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        let tag = self.strategy.as_str().as_bytes();
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.vectors.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| MorpheusError::io(path, e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MorpheusError::io(path, e))?;
        let mut r = crate::binio::ByteReader::new(&bytes);
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(MorpheusError::Format("not a codebook file".into()));
        }
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(MorpheusError::Version {
                found: version,
                expected: CODEBOOK_VERSION,
            });
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let tag_len = r.u8()? as usize;
        let tag = std::str::from_utf8(r.take(tag_len)?)
            .map_err(|_| MorpheusError::Format("strategy tag is not UTF-8".into()))?;
        let strategy: InitStrategy = tag.parse()?;
        let seed = r.u64()?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(r.f32()? as f64);
        }
        r.finish()?;
        let vectors = Matrix::from_shape_vec((n, d), data)
            .map_err(|e| MorpheusError::Format(e.to_string()))?;
        Self::from_vectors(vectors, strategy, seed)
    }
}

const CODEBOOK_MAGIC: &[u8; 4] = b"MPCB";
const CODEBOOK_VERSION: u32 = 1;

/// Index of the code closest to `p` (lowest index among ties) and the
/// Euclidean distance to it.
pub fn nearest_code(p: ArrayView1<f64>, codes: ArrayView2<f64>) -> Result<(usize, f64)> {
    if p.len() != codes.ncols() {
        return Err(MorpheusError::DimensionMismatch {
            expected: codes.ncols(),
            got: p.len(),
        });
    }
    let mut best = (0, f64::INFINITY);
    for (k, row) in codes.rows().into_iter().enumerate() {
        let dist2: f64 = row.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist2 < best.1 {
            best = (k, dist2);
        }
    }
    if !best.1.is_finite() {
        return Err(MorpheusError::NonFinite("nearest-code distance".into()));
    }
    Ok((best.0, best.1.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub histogram: Vec<u64>,
    pub total: u64,
    /// `exp(entropy)` of the normalized usage, in `[1, N]`.
    pub perplexity: f64,
}

pub fn utilization(usage_counts: &[u64]) -> Result<Utilization> {
    let total: u64 = usage_counts.iter().sum();
    if total == 0 {
        return Err(MorpheusError::InvalidArgument("no codebook lookups recorded".into()));
    }
    let entropy: f64 = usage_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(Utilization {
        histogram: usage_counts.to_vec(),
        total,
        perplexity: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = PersonaCodebook::init_random(10, 16, 3).unwrap();
        let b = PersonaCodebook::init_random(10, 16, 3).unwrap();
        let c = PersonaCodebook::init_random(10, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.vectors(), c.vectors());
        let bound = 1.0 / 4.0;
        assert!(a.vectors().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sequential_fills_in_order() {
        let vs = vec![array![1.0, 0.0], array![0.0, 1.0], array![1.0, 1.0]];
        let cb = PersonaCodebook::init_sequential(vs.clone(), 3, 2, 0).unwrap();
        assert_eq!(cb.vectors(), &array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);

        let cb = PersonaCodebook::init_sequential(vs[..2].to_vec(), 3, 2, 0).unwrap();
        let random = PersonaCodebook::init_random(3, 2, 0).unwrap();
        assert_eq!(cb.code(0), vs[0].view());
        assert_eq!(cb.code(1), vs[1].view());
        assert_eq!(cb.code(2), random.code(2));

        let cb = PersonaCodebook::init_sequential(vs.clone(), 1, 2, 0).unwrap();
        assert_eq!(cb.vectors(), &array![[1.0, 0.0]]);

        // duplicates do not take a new slot
        let dup = vec![array![1.0, 0.0], array![1.0, 0.0], array![2.0, 0.0]];
        let cb = PersonaCodebook::init_sequential(dup, 2, 2, 0).unwrap();
        assert_eq!(cb.vectors(), &array![[1.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn average_uses_batch_means() {
        let batches = vec![vec![array![0.0, 0.0], array![2.0, 2.0]]];
        let cb = PersonaCodebook::init_average(batches, 1, 2, 0).unwrap();
        assert_eq!(cb.vectors(), &array![[1.0, 1.0]]);

        let singles: Vec<Array1<f64>> = (0..4).map(|i| array![i as f64, -(i as f64)]).collect();
        let avg = PersonaCodebook::init_average(singles.iter().map(|v| vec![v.clone()]), 4, 2, 9).unwrap();
        let seq = PersonaCodebook::init_sequential(singles, 4, 2, 9).unwrap();
        assert_eq!(avg.vectors(), seq.vectors());

        let batches = vec![vec![array![1.0]], vec![array![3.0], array![5.0]]];
        let cb = PersonaCodebook::init_average(batches, 2, 1, 0).unwrap();
        assert_eq!(cb.vectors(), &array![[1.0], [4.0]]);

        assert!(PersonaCodebook::init_average(vec![vec![]], 2, 1, 0).is_err());
    }

    #[test]
    fn nearest_code_examples() {
        let codes = array![[1.0, 0.0], [0.0, 1.0]];
        let (k, dist) = nearest_code(array![0.9, 0.1].view(), codes.view()).unwrap();
        assert_eq!(k, 0);
        assert!((dist * dist - 0.02).abs() < 1e-12);

        let (k, dist) = nearest_code(array![0.0, 1.0].view(), codes.view()).unwrap();
        assert_eq!((k, dist), (1, 0.0));

        let dup = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(nearest_code(array![0.5, 0.5].view(), dup.view()).unwrap().0, 0);

        assert!(nearest_code(array![1.0].view(), codes.view()).is_err());
    }

    #[test]
    fn lookup_counts_usage() {
        let mut cb = PersonaCodebook::from_vectors(array![[0.0], [1.0]], InitStrategy::Random, 0).unwrap();
        assert!(cb.utilization().is_err());
        cb.lookup(array![0.9].view()).unwrap();
        cb.lookup(array![0.8].view()).unwrap();
        assert_eq!(cb.usage_counts(), &[0, 2]);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(utilization(&[0, 7, 0]).unwrap().perplexity, 1.0);
        let uniform = utilization(&[5; 100]).unwrap().perplexity;
        assert!((uniform - 100.0).abs() < 1e-9);
        let p = utilization(&[3, 1]).unwrap().perplexity;
        let expected = (-0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln()).exp();
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 1.7548).abs() < 1e-4);
    }

    #[test]
    fn export_round_trip() {
        let mut cb = PersonaCodebook::init_random(5, 3, 11).unwrap();
        cb.strategy = InitStrategy::Em;
        let f = tempfile::NamedTempFile::new().unwrap();
        cb.export(f.path()).unwrap();
        let back = PersonaCodebook::import(f.path()).unwrap();
        assert_eq!(back.size(), 5);
        assert_eq!(back.strategy, InitStrategy::Em);
        assert_eq!(back.seed, 11);
        for (a, b) in back.vectors().iter().zip(cb.vectors().iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("em".parse::<InitStrategy>().unwrap(), InitStrategy::Em);
        assert!("kmeans".parse::<InitStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn nearest_code_is_the_brute_force_minimum(
            codes in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..30),
            p in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let n = codes.len();
            let m = Matrix::from_shape_vec((n, 4), codes.concat()).unwrap();
            let p = Array1::from(p);
            let (k, _) = nearest_code(p.view(), m.view()).unwrap();
            let d2: Vec<f64> = m.rows().into_iter()
                .map(|r| r.iter().zip(p.iter()).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let first = d2.iter().position(|&x| x == min).unwrap();
            prop_assert_eq!(k, first);
        }
    }
}
