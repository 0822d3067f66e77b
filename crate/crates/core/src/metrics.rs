//! Quantization-quality metrics, rate-distortion tables and the alignment
//! snapshot export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{read_exact, Codebook, UsageStats};
use crate::data::{read_dataset_body, write_dataset};
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

/// Role byte of a latent row in an alignment snapshot.
pub const ROLE_LATENT: u8 = 0;
/// Role byte of a codeword row in an alignment snapshot.
pub const ROLE_CODEWORD: u8 = 1;

/// One row of the metrics stream. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub total_loss: f64,
    pub recon: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub kl_term: f64,
    pub distortion: f64,
    pub perplexity: f64,
    pub usage_fraction: f64,
    pub distortion_per_bit: f64,
    pub lr: f64,
    pub tau: Option<f64>,
    pub replaced_count: usize,
}

/// `(1/N) sum ||z_n - z_hat_n||^2`.
pub fn distortion(z: &Tensor, hard_points: &Tensor) -> Result<f64> {
    if z.shape() != hard_points.shape() {
        return Err(Error::shape("distortion", z.shape(), hard_points.shape()));
    }
    if z.ndim() != 2 || z.rows() == 0 {
        return Err(Error::param("z", "distortion of an empty batch"));
    }
    let total: f64 = z.iter_rows().zip(hard_points.iter_rows()).map(|(a, b)| squared_distance(a, b)).sum();
    Ok(total / z.rows() as f64)
}

/// Usage entropy in bits, computed from the probabilities directly.
pub fn entropy_bits(usage: &UsageStats) -> f64 {
    let h = -usage.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>();
    h.max(0.0)
}

/// Distortion per bit of index entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionPerBit {
    /// `D / H_2`, or infinity when the entropy is zero.
    pub value: f64,
    /// A single codeword (or none) carried all assignments.
    pub zero_rate: bool,
}

pub fn distortion_per_bit(distortion: f64, usage: &UsageStats) -> DistortionPerBit {
    let bits = entropy_bits(usage);
    if bits <= 0.0 {
        return DistortionPerBit {
            value: f64::INFINITY,
            zero_rate: true,
        };
    }
    DistortionPerBit {
        value: distortion / bits,
        zero_rate: false,
    }
}

/// One bitrate of a rate-distortion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionRow {
    pub bitrate: u32,
    pub mean_distortion: f64,
    pub runs: usize,
    /// Distortion went up relative to the next-lower bitrate.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionTable {
    pub rows: Vec<RateDistortionRow>,
}

impl RateDistortionTable {
    pub fn violations(&self) -> Vec<u32> {
        self.rows.iter().filter(|r| r.violation).map(|r| r.bitrate).collect()
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_distortion < w[0].mean_distortion)
    }
}

/// Averages runs that share a bitrate, sorts by bitrate and flags every
/// bitrate whose mean distortion exceeds the one below it.
pub fn rate_distortion_table(runs: &[(u32, f64)]) -> Result<RateDistortionTable> {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &(b, d) in runs {
        groups.entry(b).or_default().push(d);
    }
    if groups.len() < 2 {
        return Err(Error::param("runs", "a rate-distortion table needs at least two bitrates"));
    }
    let mut rows: Vec<RateDistortionRow> = groups
        .into_iter()
        .map(|(bitrate, ds)| RateDistortionRow {
            bitrate,
            mean_distortion: ds.iter().sum::<f64>() / ds.len() as f64,
            runs: ds.len(),
            violation: false,
        })
        .collect();
    for i in 1..rows.len() {
        rows[i].violation = rows[i].mean_distortion > rows[i - 1].mean_distortion;
    }
    Ok(RateDistortionTable { rows })
}

/// Latent rows followed by codeword rows in the dataset layout, then one
/// role byte per row.
pub fn write_alignment_snapshot<W: Write>(w: &mut W, codebook: &Codebook, latents: &Tensor) -> Result<()> {
    let d = codebook.dim();
    if latents.ndim() != 2 || (latents.shape()[1] != d && latents.rows() > 0) {
        return Err(Error::Dimension {
            expected: d,
            actual: latents.shape().get(1).copied().unwrap_or(0),
        });
    }
    let mut rows = latents.data().to_vec();
    rows.extend_from_slice(codebook.vectors().data());
    let n = latents.rows() + codebook.size();
    write_dataset(w, &Tensor::matrix(n, d, rows)?)?;
    let mut roles = vec![ROLE_LATENT; latents.rows()];
    roles.extend(std::iter::repeat_n(ROLE_CODEWORD, codebook.size()));
    w.write_all(&roles)?;
    Ok(())
}

pub fn read_alignment_snapshot<R: Read>(r: &mut R) -> Result<(Tensor, Vec<u8>)> {
    let rows = read_dataset_body(r)?;
    let mut roles = vec![0u8; rows.rows()];
    read_exact(r, &mut roles, "role column")?;
    if let Some(bad) = roles.iter().find(|&&b| b > ROLE_CODEWORD) {
        return Err(Error::Format(format!("unknown role byte {bad}")));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after snapshot".into()));
    }
    Ok((rows, roles))
}

pub fn export_alignment_snapshot(codebook: &Codebook, latents: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_alignment_snapshot(&mut w, codebook, latents)?;
    w.flush()?;
    Ok(())
}

pub fn load_alignment_snapshot(path: impl AsRef<Path>) -> Result<(Tensor, Vec<u8>)> {
    read_alignment_snapshot(&mut BufReader::new(File::open(path)?))
}
