use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    as_divergence, check_finite, evaluate, maybe_replace, record, sf_delayed_init, step_loss, update_codebook,
    vq_forward, BatchStream, Evaluation, Optimizer, ReplacementLog, StepOutcome, TrainingSchedule,
};
use crate::autodiff::Tape;
use crate::codebook::{Codebook, UsageStats};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::quantizers::{Method, QuantizerConfig};
use crate::replacement::ReplacementPolicy;
use crate::tensor::{squared_distance, Tensor};

/// Starting codebook for direct training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CodebookInit {
    /// `K` distinct data rows chosen uniformly.
    DataSamples,
    /// k-means++ seeding on the data.
    KmeansPlusPlus,
    /// Every codeword at this point.
    Point(Vec<f64>),
    /// Group means of the first `sf_init_window` batches.
    DelayedStart,
    Given(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct DirectRun {
    pub codebook: Codebook,
    pub records: Vec<MetricsRecord>,
    pub replacements: Vec<ReplacementLog>,
    /// Hard-assignment quality on the training data.
    pub evaluation: Evaluation,
}

fn initial_codebook<R: Rng + ?Sized>(
    data: &Tensor,
    k: usize,
    init: &CodebookInit,
    schedule: &TrainingSchedule,
    stream: &mut BatchStream,
    rng: &mut R,
) -> Result<Codebook> {
    let d = data.cols();
    match init {
        CodebookInit::DataSamples => Codebook::new(data.select_rows(&sample(rng, data.rows(), k).into_vec())),
        CodebookInit::KmeansPlusPlus => Codebook::new(kmeans_plus_plus(data, k, rng)),
        CodebookInit::Point(p) => {
            if p.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: p.len(),
                });
            }
            Codebook::new(Tensor::matrix(k, d, p.iter().copied().cycle().take(k * d).collect())?)
        }
        CodebookInit::DelayedStart => {
            let rows: Vec<usize> = (0..schedule.sf_init_window)
                .flat_map(|_| stream.next(schedule.batch_size, rng))
                .collect();
            sf_delayed_init(&data.select_rows(&rows), k)
        }
        CodebookInit::Given(rows) => {
            let t = Tensor::from_rows(rows)?;
            if t.rows() != k || t.cols() != d {
                return Err(Error::shape("initial codebook", &[k, d], t.shape()));
            }
            Codebook::new(t)
        }
    }
}

/// D^2-weighted seeding.
pub(crate) fn kmeans_plus_plus<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = data.iter_rows().map(|r| squared_distance(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (b, r) in best.iter_mut().zip(data.iter_rows()) {
            *b = b.min(squared_distance(r, data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

/// Fits a `K`-codeword codebook to `data` by minimizing the quantization
/// error through `config.method`.
///
/// The batch itself is the latent: `x = z` and `x_r = z_q`. EMA moves the
/// codebook by moving averages, every other estimator by gradient steps on
/// its training loss. The run length is `schedule.iterations` if set, else
/// `schedule.epochs` passes over the data.
pub fn train_codebook_direct(
    data: &Tensor,
    k: usize,
    config: &QuantizerConfig,
    schedule: &TrainingSchedule,
    policy: Option<&ReplacementPolicy>,
    init: &CodebookInit,
) -> Result<DirectRun> {
    config.validate()?;
    if let Some((name, reason)) = schedule.violations().into_iter().next() {
        return Err(Error::param(name, reason));
    }
    if let Some(p) = policy {
        p.validate()?;
    }
    if config.method == Method::Hard {
        return Err(Error::param("method", "HARD has no training signal"));
    }
    if data.ndim() != 2 || data.rows() < k || k == 0 {
        return Err(Error::param(
            "K",
            format!("need 1 <= K <= N, got K = {k} for {} rows", data.rows()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = data.rows();
    let batch = schedule.batch_size.min(n);
    let mut stream = BatchStream::new(n);
    let mut codebook = initial_codebook(data, k, init, schedule, &mut stream, &mut rng)?;
    let total = schedule.iterations.unwrap_or(schedule.epochs * n.div_ceil(batch));
    let mut optimizer = Optimizer::new(schedule.optimizer);
    let mut records = Vec::with_capacity(total);
    let mut replacements = Vec::new();
    let mut last_good = None;

    for iteration in 1..=total {
        let epoch = (iteration - 1) * batch / n;
        let lr = schedule.lr_at(epoch);
        let tau = (config.method == Method::Stgs).then(|| config.tau.at(epoch));
        let rows = stream.next(batch, &mut rng);
        let z_value = data.select_rows(&rows);

        let tape = Tape::new();
        let step = (|| {
            let z = tape.constant(z_value.clone());
            let vq = vq_forward(&tape, z, &codebook, config, tau.unwrap_or(1.0), &mut rng)?;
            let loss = step_loss(z, vq.z_q, z, &vq, config)?;
            let grads = loss.total.backward()?;
            Ok((grads.wrt(vq.codebook_var), vq.quantization.indices.clone(), vq.usage_indices, loss.breakdown, vq.quantization.distortion))
        })()
        .map_err(|e| as_divergence(e, iteration, last_good))?;
        let (grad, indices, usage_indices, breakdown, distortion) = step;
        check_finite(breakdown.total, iteration, last_good)?;

        update_codebook(&mut codebook, &grad, &z_value, &indices, config, &mut optimizer, lr)?;
        if !codebook.vectors().is_finite() {
            return Err(Error::Diverged { iteration, last_good });
        }
        codebook.record_usage(&usage_indices);
        let replaced = maybe_replace(&mut codebook, policy, config.method, iteration, total, &mut rng, &mut replacements)?;
        if let Some(rows) = &replaced {
            optimizer.reset_rows(0, rows);
        }
        let outcome = StepOutcome {
            breakdown,
            distortion,
            usage: UsageStats::from_indices(&usage_indices, k),
        };
        records.push(record(iteration, epoch, &outcome, lr, tau, replaced.map_or(0, |r| r.len())));
        last_good = Some(iteration);
    }

    let evaluation = evaluate(data, codebook.vectors())?;
    Ok(DirectRun {
        codebook,
        records,
        replacements,
        evaluation,
    })
}
