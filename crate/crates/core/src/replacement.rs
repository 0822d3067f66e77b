//! Re-seeding of under-used codewords from active ones.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::tensor::{norm, squared_distance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplacementKind {
    /// Donors drawn uniformly from the active codewords.
    NsvqUniform,
    /// Donors drawn in proportion to their usage counts.
    Importance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplacementPolicy {
    pub kind: ReplacementKind,
    /// Codewords whose share of assignments falls below this are replaced.
    pub discard_threshold: f64,
    /// Last iteration of the dense phase.
    pub phase1_end: usize,
    pub phase1_period: usize,
    pub phase2_period: usize,
    /// Trailing iterations with no replacement.
    pub stop_margin: usize,
    /// Perturbation std relative to the mean nearest-neighbour spacing.
    pub perturbation_scale: f64,
}

impl Default for ReplacementPolicy {
    fn default() -> Self {
        ReplacementPolicy {
            kind: ReplacementKind::Importance,
            discard_threshold: 0.01,
            phase1_end: 2000,
            phase1_period: 100,
            phase2_period: 500,
            stop_margin: 1000,
            perturbation_scale: 0.1,
        }
    }
}

impl ReplacementPolicy {
    pub fn with_kind(kind: ReplacementKind) -> Self {
        ReplacementPolicy {
            kind,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.discard_threshold > 0.0 && self.discard_threshold < 1.0) {
            out.push((
                "discard_threshold",
                format!("must lie in (0, 1), got {}", self.discard_threshold),
            ));
        }
        if self.phase1_period == 0 {
            out.push(("phase1_period", "must be >= 1".into()));
        }
        if self.phase2_period == 0 {
            out.push(("phase2_period", "must be >= 1".into()));
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            out.push((
                "perturbation_scale",
                format!("must be finite and >= 0, got {}", self.perturbation_scale),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some((name, reason)) => Err(Error::param(name, reason)),
        }
    }

    /// Whether a replacement event fires after iteration `iter` (1-based)
    /// of `total_iters`.
    pub fn should_replace(&self, iter: usize, total_iters: usize) -> bool {
        if iter == 0 || iter + self.stop_margin > total_iters {
            return false;
        }
        let period = if iter <= self.phase1_end {
            self.phase1_period
        } else {
            self.phase2_period
        };
        period > 0 && iter.is_multiple_of(period)
    }
}

/// One replacement event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplacementEvent {
    /// Overwritten codewords, ascending.
    pub replaced: Vec<usize>,
    /// `donors[i]` seeded `replaced[i]`.
    pub donors: Vec<usize>,
    /// Standard deviation of the perturbation that was applied.
    pub perturbation_std: f64,
}

/// Overwrites every codeword used less than `discard_threshold` of the time
/// since the last reset with a perturbed copy of an active codeword, then
/// resets the usage counters.
///
/// Fails with [`Error::TotalCollapse`] if no codeword qualifies as active;
/// the counters are left untouched in that case.
pub fn replace<R: Rng + ?Sized>(
    codebook: &mut Codebook,
    policy: &ReplacementPolicy,
    rng: &mut R,
) -> Result<ReplacementEvent> {
    policy.validate()?;
    let counts = codebook.usage_counts().to_vec();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::TotalCollapse);
    }
    let share = |c: u64| c as f64 / total as f64;
    let (active, inactive): (Vec<usize>, Vec<usize>) =
        (0..counts.len()).partition(|&k| share(counts[k]) >= policy.discard_threshold);
    if active.is_empty() {
        return Err(Error::TotalCollapse);
    }
    if inactive.is_empty() {
        codebook.reset_usage();
        return Ok(ReplacementEvent::default());
    }

    let std = perturbation_std(codebook, &active, policy.perturbation_scale);
    let donors: Vec<usize> = match policy.kind {
        ReplacementKind::Importance => {
            let weights: Vec<u64> = active.iter().map(|&k| counts[k]).collect();
            let dist = WeightedIndex::new(&weights).expect("active codewords have positive counts");
            inactive.iter().map(|_| active[dist.sample(rng)]).collect()
        }
        ReplacementKind::NsvqUniform => inactive.iter().map(|_| active[rng.random_range(0..active.len())]).collect(),
    };
    let mut vectors = codebook.vectors().clone();
    for (&target, &donor) in inactive.iter().zip(&donors) {
        let source = codebook.vectors().row(donor).to_vec();
        for (dst, src) in vectors.row_mut(target).iter_mut().zip(source) {
            let n: f64 = StandardNormal.sample(rng);
            *dst = src + std * n;
        }
    }
    codebook.set_vectors(vectors)?;
    restart_ema(codebook, &inactive);
    codebook.reset_usage();
    Ok(ReplacementEvent {
        replaced: inactive,
        donors,
        perturbation_std: std,
    })
}

/// Re-seeded codewords restart their moving averages at the new position.
fn restart_ema(codebook: &mut Codebook, indices: &[usize]) {
    let vectors = codebook.vectors().clone();
    if let Some(ema) = codebook.ema_mut() {
        for &k in indices {
            ema.g.row_mut(k).copy_from_slice(vectors.row(k));
            ema.h[k] = 1.0;
        }
    }
}

/// `scale` times the mean nearest-neighbour distance among the active
/// codewords. A lone active codeword, or active codewords that all
/// coincide, fall back to `scale` times their RMS norm, and to `scale`
/// itself when that is zero too.
fn perturbation_std(codebook: &Codebook, active: &[usize], scale: f64) -> f64 {
    let v = codebook.vectors();
    let mut spacing = 0.0;
    if active.len() > 1 {
        for &a in active {
            let nn = active
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| squared_distance(v.row(a), v.row(b)))
                .fold(f64::INFINITY, f64::min);
            spacing += nn.sqrt();
        }
        spacing /= active.len() as f64;
    }
    if spacing > 0.0 {
        return scale * spacing;
    }
    let rms = (active.iter().map(|&a| norm(v.row(a)).powi(2)).sum::<f64>() / active.len() as f64).sqrt();
    if rms > 0.0 {
        scale * rms
    } else {
        scale
    }
}
