//! Desk-scale trainers: direct codebook learning on raw vectors and a small
//! MLP autoencoder with a quantized bottleneck.

mod autoencoder;
mod direct;
mod mlp;
mod optimizer;
mod residual;
mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{train_autoencoder, Autoencoder, AutoencoderArch, AutoencoderRun};
pub use direct::{train_codebook_direct, CodebookInit, DirectRun};
pub use mlp::{Activation, Mlp};
pub use residual::{residual_distortion, residual_hard, train_residual_direct, ResidualRun};
pub use optimizer::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{anneal_tau, TrainingSchedule};

use crate::autodiff::{Tape, Var};
use crate::codebook::{nearest, Codebook, UsageStats};
use crate::error::{Error, Result};
use crate::losses::{training_loss, LossBreakdown};
use crate::metrics::{distortion, distortion_per_bit, MetricsRecord};
use crate::quantizers::{ema_update, quantize, Method, QuantizerConfig};
use crate::replacement::{replace, ReplacementEvent, ReplacementPolicy};
use crate::tensor::Tensor;

/// A replacement event and the iteration after which it fired.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementLog {
    pub iteration: usize,
    pub event: ReplacementEvent,
}

/// Hard-assignment quality of a codebook on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub distortion: f64,
    pub perplexity: f64,
    pub usage_fraction: f64,
    pub distortion_per_bit: f64,
}

/// Nearest-codeword distortion and usage of `codebook` over `data`.
pub fn evaluate(data: &Tensor, codebook: &Tensor) -> Result<Evaluation> {
    let a = nearest(data, codebook)?;
    let hard = codebook.select_rows(&a.indices);
    let d = distortion(data, &hard)?;
    let usage = UsageStats::from_indices(&a.indices, codebook.rows());
    Ok(Evaluation {
        distortion: d,
        perplexity: usage.perplexity,
        usage_fraction: usage.usage_fraction,
        distortion_per_bit: distortion_per_bit(d, &usage).value,
    })
}

/// Codebook formed from `K` contiguous groups of `buffer` rows in arrival
/// order, each codeword the mean of its group.
pub fn sf_delayed_init(buffer: &Tensor, k: usize) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::param("K", "must be >= 1"));
    }
    if buffer.ndim() != 2 || buffer.rows() < k {
        return Err(Error::param(
            "sf_init_window",
            format!(
                "latent buffer holds {} vectors but K = {k}; increase the window",
                if buffer.ndim() == 2 { buffer.rows() } else { 0 }
            ),
        ));
    }
    let (n, d) = (buffer.rows(), buffer.cols());
    let mut out = Vec::with_capacity(k * d);
    for j in 0..k {
        let (lo, hi) = (j * n / k, (j + 1) * n / k);
        let mut mean = vec![0.0; d];
        for r in lo..hi {
            for (m, v) in mean.iter_mut().zip(buffer.row(r)) {
                *m += v;
            }
        }
        out.extend(mean.into_iter().map(|m| m / (hi - lo) as f64));
    }
    Codebook::new(Tensor::matrix(k, d, out)?)
}

/// Result of one quantized training step.
pub(crate) struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub distortion: f64,
    pub usage: UsageStats,
}

/// What the quantization layer produced inside a larger graph.
pub(crate) struct VqForward<'t> {
    pub z_q: Var<'t>,
    pub codebook_var: Var<'t>,
    pub quantization: crate::quantizers::QuantizationResult<'t>,
    pub usage_indices: Vec<usize>,
}

/// Quantizes `z` against `codebook` on `tape`.
pub(crate) fn vq_forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    z: Var<'t>,
    codebook: &Codebook,
    config: &QuantizerConfig,
    tau: f64,
    rng: &mut R,
) -> Result<VqForward<'t>> {
    let codebook_var = if config.method == Method::Ema || config.method == Method::Hard {
        tape.constant(codebook.vectors().clone())
    } else {
        tape.var(codebook.vectors().clone())
    };
    let quantization = quantize(z, codebook_var, config, tau, rng)?;
    // usage is always counted against codewords, also for the space-filling methods
    let usage_indices = if config.method.is_space_filling() {
        nearest(&z.value(), codebook.vectors())?.indices
    } else {
        quantization.indices.clone()
    };
    Ok(VqForward {
        z_q: quantization.z_q,
        codebook_var,
        quantization,
        usage_indices,
    })
}

/// Moves the codebook after a backward pass: EMA uses moving averages, the
/// other estimators the gradient.
pub(crate) fn update_codebook(
    codebook: &mut Codebook,
    grad: &Tensor,
    z: &Tensor,
    indices: &[usize],
    config: &QuantizerConfig,
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<()> {
    if config.method == Method::Ema {
        ema_update(codebook, z, indices, config.gamma)?;
        return Ok(());
    }
    let mut vectors = codebook.vectors().clone();
    optimizer.step(&mut [&mut vectors], std::slice::from_ref(grad), lr)?;
    codebook.set_vectors(vectors)
}

pub(crate) fn check_finite(value: f64, iteration: usize, last_good: Option<usize>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, last_good })
    }
}

/// Maps tape overflow during a step to a divergence error.
pub(crate) fn as_divergence(e: Error, iteration: usize, last_good: Option<usize>) -> Error {
    match e {
        Error::Domain { .. } => Error::Diverged { iteration, last_good },
        other => other,
    }
}

/// Runs the replacement schedule; returns the number of codewords replaced.
pub(crate) fn maybe_replace<R: Rng + ?Sized>(
    codebook: &mut Codebook,
    policy: Option<&ReplacementPolicy>,
    method: Method,
    iteration: usize,
    total: usize,
    rng: &mut R,
    log: &mut Vec<ReplacementLog>,
) -> Result<Option<Vec<usize>>> {
    let Some(policy) = policy else { return Ok(None) };
    if method.is_space_filling() || !policy.should_replace(iteration, total) {
        return Ok(None);
    }
    let event = replace(codebook, policy, rng)?;
    let replaced = event.replaced.clone();
    log.push(ReplacementLog { iteration, event });
    Ok(Some(replaced))
}

pub(crate) fn step_loss<'t>(
    x: Var<'t>,
    x_r: Var<'t>,
    z: Var<'t>,
    vq: &VqForward<'t>,
    config: &QuantizerConfig,
) -> Result<crate::losses::Loss<'t>> {
    training_loss(x, x_r, z, vq.codebook_var, &vq.quantization, config)
}

pub(crate) fn record(
    iteration: usize,
    epoch: usize,
    step: &StepOutcome,
    lr: f64,
    tau: Option<f64>,
    replaced_count: usize,
) -> MetricsRecord {
    MetricsRecord {
        iteration,
        epoch,
        total_loss: step.breakdown.total,
        recon: step.breakdown.reconstruction,
        codebook_term: step.breakdown.codebook_term,
        commitment_term: step.breakdown.commitment_term,
        kl_term: step.breakdown.kl_term,
        distortion: step.distortion,
        perplexity: step.usage.perplexity,
        usage_fraction: step.usage.usage_fraction,
        distortion_per_bit: distortion_per_bit(step.distortion, &step.usage).value,
        lr,
        tau,
        replaced_count,
    }
}

/// Endless stream of minibatch row indices, reshuffled every pass.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(n: usize) -> Self {
        BatchStream {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (batch - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}
