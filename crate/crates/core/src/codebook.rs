//! Codebook storage, nearest-codeword search, usage statistics and
//! checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIVEQCB1";

/// Moving-average accumulators: one `g` row and one `h` count per codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaAccumulators {
    pub g: Tensor,
    pub h: Vec<f64>,
}

/// A `K x D` codeword matrix with its usage counters and optional EMA state.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
    ema: Option<EmaAccumulators>,
    usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::param(
                "codebook",
                format!("needs a non-empty K x D matrix, got shape {:?}", vectors.shape()),
            ));
        }
        let k = vectors.rows();
        Ok(Codebook {
            vectors,
            ema: None,
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub fn set_vectors(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::shape("set_vectors", self.vectors.shape(), vectors.shape()));
        }
        self.vectors = vectors;
        Ok(())
    }

    pub fn ema(&self) -> Option<&EmaAccumulators> {
        self.ema.as_ref()
    }

    pub fn ema_mut(&mut self) -> Option<&mut EmaAccumulators> {
        self.ema.as_mut()
    }

    /// Starts EMA tracking with `h = 1` and `g` equal to the current codewords.
    pub fn enable_ema(&mut self) {
        if self.ema.is_none() {
            self.ema = Some(EmaAccumulators {
                g: self.vectors.clone(),
                h: vec![1.0; self.size()],
            });
        }
    }

    pub fn set_ema(&mut self, ema: EmaAccumulators) -> Result<()> {
        if ema.g.shape() != self.vectors.shape() || ema.h.len() != self.size() {
            return Err(Error::shape("set_ema", self.vectors.shape(), ema.g.shape()));
        }
        if ema.h.iter().any(|&h| h < 0.0) {
            return Err(Error::param("ema.h", "entries must be non-negative"));
        }
        self.ema = Some(ema);
        Ok(())
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn nearest(&self, z: &Tensor) -> Result<Assignment> {
        nearest(z, &self.vectors)
    }

    pub fn usage_stats(&self) -> UsageStats {
        UsageStats::from_counts(&self.usage_counts)
    }

    /// Samples one interpolation factor per consecutive pair of codewords.
    pub fn dither<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DitheredCodebook> {
        if self.size() < 2 {
            return Err(Error::param("codebook", "dithering needs at least two codewords"));
        }
        let lambdas = (0..self.size() - 1).map(|_| rng.random::<f64>()).collect();
        DitheredCodebook::from_lambdas(&self.vectors, lambdas)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Layout: magic, `K` and `D` as u64, an EMA flag byte, `K*D` f64
    /// codewords, `K` u64 usage counts, then (flag set) `K*D` f64 `g` and `K`
    /// f64 `h`. All little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.size() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.ema.is_some())])?;
        write_f64s(w, self.vectors.data())?;
        for &c in &self.usage_counts {
            w.write_all(&c.to_le_bytes())?;
        }
        if let Some(ema) = &self.ema {
            write_f64s(w, ema.g.data())?;
            write_f64s(w, &ema.h)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a codebook checkpoint (bad magic)".into()));
        }
        let k = read_u64(r, "K")? as usize;
        let d = read_u64(r, "D")? as usize;
        if k == 0 || d == 0 {
            return Err(Error::Format(format!("invalid codebook shape K={k}, D={d}")));
        }
        let len = k
            .checked_mul(d)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("codebook shape K={k}, D={d} too large")))?;
        let mut flag = [0u8; 1];
        read_exact(r, &mut flag, "EMA flag")?;
        let vectors = Tensor::matrix(k, d, read_f64s(r, len, "codewords")?)?;
        let usage_counts = (0..k).map(|_| read_u64(r, "usage counts")).collect::<Result<_>>()?;
        let ema = match flag[0] {
            0 => None,
            1 => {
                let g = Tensor::matrix(k, d, read_f64s(r, len, "EMA g")?)?;
                let h = read_f64s(r, k, "EMA h")?;
                if h.iter().any(|&v| v < 0.0) {
                    return Err(Error::Format("negative EMA count".into()));
                }
                Some(EmaAccumulators { g, h })
            }
            other => return Err(Error::Format(format!("unknown EMA flag {other}"))),
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Codebook {
            vectors,
            ema,
            usage_counts,
        })
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b, what)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Result of a nearest-codeword search.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// Euclidean distance to the winning codeword.
    pub distances: Vec<f64>,
}

/// Exhaustive nearest-row search; ties go to the lowest index.
pub fn nearest(z: &Tensor, codewords: &Tensor) -> Result<Assignment> {
    if z.is_empty() && z.ndim() == 2 && z.rows() == 0 {
        return Ok(Assignment {
            indices: Vec::new(),
            distances: Vec::new(),
        });
    }
    if z.ndim() != 2 || z.cols() != codewords.cols() {
        return Err(Error::Dimension {
            expected: codewords.cols(),
            actual: z.cols(),
        });
    }
    let mut indices = Vec::with_capacity(z.rows());
    let mut distances = Vec::with_capacity(z.rows());
    for row in z.iter_rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in codewords.iter_rows().enumerate() {
            let d = squared_distance(row, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        indices.push(best);
        distances.push(best_d.sqrt());
    }
    Ok(Assignment { indices, distances })
}

/// `K - 1` points, one on each segment between consecutive codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct DitheredCodebook {
    pub points: Tensor,
    pub lambdas: Vec<f64>,
}

impl DitheredCodebook {
    pub fn from_lambdas(vectors: &Tensor, lambdas: Vec<f64>) -> Result<Self> {
        if vectors.rows() < 2 || lambdas.len() != vectors.rows() - 1 {
            return Err(Error::param(
                "lambdas",
                format!("need one factor per segment ({} codewords, {} factors)", vectors.rows(), lambdas.len()),
            ));
        }
        let d = vectors.cols();
        let mut data = Vec::with_capacity(lambdas.len() * d);
        for (j, &lambda) in lambdas.iter().enumerate() {
            let (a, b) = (vectors.row(j), vectors.row(j + 1));
            data.extend(a.iter().zip(b).map(|(&a, &b)| interpolate(a, b, lambda)));
        }
        Ok(DitheredCodebook {
            points: Tensor::matrix(lambdas.len(), d, data)?,
            lambdas,
        })
    }
}

/// `(1 - lambda) a + lambda b`, the single formula shared by every
/// dithered-point computation so results agree bit for bit.
#[inline]
pub fn interpolate(a: f64, b: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * a + lambda * b
}

/// Empirical codeword usage.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub probs: Vec<f64>,
    /// Entropy in nats.
    pub entropy: f64,
    pub perplexity: f64,
    pub usage_fraction: f64,
    pub total: u64,
    /// True when no assignments were counted.
    pub no_data: bool,
}

impl UsageStats {
    pub fn from_counts(counts: &[u64]) -> Self {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return UsageStats {
                probs: vec![0.0; counts.len()],
                entropy: 0.0,
                perplexity: 1.0,
                usage_fraction: 0.0,
                total,
                no_data: true,
            };
        }
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        let entropy = entropy.max(0.0);
        let used = counts.iter().filter(|&&c| c > 0).count();
        UsageStats {
            perplexity: entropy.exp().clamp(1.0, counts.len() as f64),
            entropy,
            usage_fraction: used as f64 / counts.len() as f64,
            probs,
            total,
            no_data: false,
        }
    }

    pub fn from_indices(indices: &[usize], k: usize) -> Self {
        let mut counts = vec![0u64; k];
        for &i in indices {
            counts[i] += 1;
        }
        Self::from_counts(&counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[[f64; 2]]) -> Codebook {
        Codebook::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn nearest_simple_case() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        let a = cb.nearest(&Tensor::from_rows(&[[0.9, 0.0]]).unwrap()).unwrap();
        assert_eq!(a.indices, vec![0]);
        assert!((a.distances[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nearest_on_codeword_and_ties() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]);
        let a = cb.nearest(&Tensor::from_rows(&[[-1.0, 0.0], [0.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(a.indices, vec![1, 0]);
        assert_eq!(a.distances[0], 0.0);
    }

    #[test]
    fn nearest_empty_and_mismatch() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        let empty = cb.nearest(&Tensor::zeros(&[0, 2])).unwrap();
        assert!(empty.indices.is_empty());
        assert!(matches!(
            cb.nearest(&Tensor::zeros(&[1, 3])),
            Err(Error::Dimension { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn dither_endpoints_and_midpoint() {
        let v = Tensor::from_rows(&[[0.0, 0.0], [2.0, 2.0], [4.0, 0.0]]).unwrap();
        let d = DitheredCodebook::from_lambdas(&v, vec![0.5, 0.0]).unwrap();
        assert_eq!(d.points.row(0), &[1.0, 1.0]);
        assert_eq!(d.points.row(1), &[2.0, 2.0]);
    }

    #[test]
    fn dither_is_seeded() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]]);
        let a = cb.dither(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = cb.dither(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(book(&[[0.0, 0.0]]).dither(&mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn usage_uniform_and_single() {
        let s = UsageStats::from_counts(&[5; 16]);
        assert!((s.perplexity - 16.0).abs() < 1e-9);
        let s = UsageStats::from_counts(&[0, 7, 0]);
        assert_eq!(s.perplexity, 1.0);
        assert!((s.usage_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn usage_hand_computed() {
        // p = [2/3, 1/3, 0]: H = ln 3 - (2/3) ln 2
        let s = UsageStats::from_counts(&[10, 5, 0]);
        let h = 3f64.ln() - 2.0 / 3.0 * 2f64.ln();
        assert!((s.entropy - h).abs() < 1e-12);
        assert!((s.entropy - 0.6365).abs() < 1e-4);
        assert!((s.perplexity - 1.8899).abs() < 1e-4);
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn usage_without_data() {
        let s = UsageStats::from_counts(&[0, 0]);
        assert!(s.no_data);
        assert_eq!(s.perplexity, 1.0);
        assert_eq!(s.entropy, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cb = book(&[[0.1, -0.2], [1e-300, 3.5]]);
        cb.record_usage(&[1, 1, 0]);
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DIVEQCB1");
        let back = Codebook::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, cb);

        cb.enable_ema();
        cb.ema_mut().unwrap().h[0] = 0.25;
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(Codebook::read_from(&mut buf.as_slice()).unwrap(), cb);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let cb = book(&[[0.1, -0.2], [1.0, 3.5]]);
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Codebook::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn empty_codebook_checkpoint_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.push(0);
        assert!(matches!(Codebook::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
