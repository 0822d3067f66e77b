use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What an EMA step touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmaReport {
    /// Codewords that received at least one latent, ascending.
    pub updated: Vec<usize>,
    /// Codewords whose `h` reached zero and were left unchanged.
    pub skipped: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Moving-average codebook step: for every selected codeword,
/// `h <- gamma h + (1 - gamma) n`, `g <- gamma g + (1 - gamma) sum(z)` and
/// `c <- g / h`. Unselected codewords and their accumulators are untouched.
///
/// Starts tracking (`h = 1`, `g = c`) if the codebook has no EMA state yet.
pub fn ema_update(codebook: &mut Codebook, z: &Tensor, indices: &[usize], gamma: f64) -> Result<EmaReport> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("must lie in [0, 1), got {gamma}")));
    }
    if z.ndim() != 2 || z.cols() != codebook.dim() {
        return Err(Error::Dimension {
            expected: codebook.dim(),
            actual: z.cols(),
        });
    }
    if indices.len() != z.rows() {
        return Err(Error::shape("ema_update", &[z.rows()], &[indices.len()]));
    }
    let (k, d) = (codebook.size(), codebook.dim());
    if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
        return Err(Error::param("indices", format!("index {bad} out of range for K = {k}")));
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * d];
    for (row, &i) in z.iter_rows().zip(indices) {
        counts[i] += 1;
        for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    codebook.enable_ema();
    let mut report = EmaReport::default();
    let mut vectors = codebook.vectors().clone();
    let ema = codebook.ema_mut().expect("enabled above");
    for i in (0..k).filter(|&i| counts[i] > 0) {
        ema.h[i] = gamma * ema.h[i] + (1.0 - gamma) * counts[i] as f64;
        let g = ema.g.row_mut(i);
        for (g, s) in g.iter_mut().zip(&sums[i * d..(i + 1) * d]) {
            *g = gamma * *g + (1.0 - gamma) * s;
        }
        // unreachable for gamma < 1 and n >= 1 unless h was already degenerate
        if ema.h[i] <= 0.0 {
            report.skipped.push(i);
            report.warnings.push(format!("codeword {i}: EMA count is zero, update skipped"));
            continue;
        }
        let h = ema.h[i];
        for (c, g) in vectors.row_mut(i).iter_mut().zip(ema.g.row(i)) {
            *c = g / h;
        }
        report.updated.push(i);
    }
    codebook.set_vectors(vectors)?;
    Ok(report)
}
