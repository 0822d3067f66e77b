use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    as_divergence, check_finite, evaluate, maybe_replace, record, sf_delayed_init, step_loss, update_codebook,
    vq_forward, Activation, BatchStream, Evaluation, Mlp, Optimizer, ReplacementLog, StepOutcome, TrainingSchedule,
};
use crate::autodiff::{Tape, Var};
use crate::codebook::{nearest, Codebook, UsageStats};
use crate::error::{Error, Result};
use crate::losses::loss_noise_family;
use crate::metrics::MetricsRecord;
use crate::quantizers::{Method, QuantizerConfig};
use crate::replacement::ReplacementPolicy;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderArch {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl Default for AutoencoderArch {
    fn default() -> Self {
        AutoencoderArch {
            hidden: vec![32, 32],
            latent_dim: 4,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn new<R: rand::Rng + ?Sized>(input_dim: usize, arch: &AutoencoderArch, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(&arch.hidden);
        sizes.push(arch.latent_dim);
        let encoder = Mlp::new(&sizes, arch.activation, rng)?;
        sizes.reverse();
        let decoder = Mlp::new(&sizes, arch.activation, rng)?;
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    /// Encode, snap to the nearest codeword, decode.
    pub fn reconstruct(&self, x: &Tensor, codebook: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        let hard = codebook.select_rows(&nearest(&z, codebook)?.indices);
        self.decoder.predict(&hard)
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderRun {
    pub model: Autoencoder,
    pub codebook: Codebook,
    pub records: Vec<MetricsRecord>,
    pub replacements: Vec<ReplacementLog>,
    /// Learning rate used in each epoch.
    pub lr_trace: Vec<f64>,
    /// ST-GS temperature used in each epoch.
    pub tau_trace: Vec<f64>,
    /// First quantized iteration of a space-filling run.
    pub sf_start_iteration: Option<usize>,
    /// MSE of hard-quantized reconstructions of the test set.
    pub test_mse: f64,
    /// Hard-assignment quality on the test latents.
    pub test_evaluation: Evaluation,
}

fn mean_squared(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Trains encoder, codebook and decoder end to end.
///
/// Space-filling methods first train without quantization for
/// `schedule.sf_warmup` epochs, then initialize the codebook from the
/// latents of the last `schedule.sf_init_window` batches. Other methods
/// start from the encodings of `K` random training rows.
pub fn train_autoencoder(
    train: &Tensor,
    test: &Tensor,
    arch: &AutoencoderArch,
    k: usize,
    config: &QuantizerConfig,
    schedule: &TrainingSchedule,
    policy: Option<&ReplacementPolicy>,
) -> Result<AutoencoderRun> {
    config.validate()?;
    if let Some((name, reason)) = schedule.violations().into_iter().next() {
        return Err(Error::param(name, reason));
    }
    if let Some(p) = policy {
        p.validate()?;
    }
    if config.method.is_space_filling() && schedule.sf_warmup == 0 {
        return Err(Error::param("sf_warmup", "space-filling training needs at least one warmup epoch"));
    }
    if train.ndim() != 2 || train.rows() < k || k == 0 {
        return Err(Error::param("K", format!("need 1 <= K <= N, got K = {k}")));
    }
    if test.ndim() != 2 || test.cols() != train.cols() {
        return Err(Error::Dimension {
            expected: train.cols(),
            actual: test.cols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Autoencoder::new(train.cols(), arch, &mut rng)?;
    let n = train.rows();
    let batch = schedule.batch_size.min(n);
    let per_epoch = (n / batch).max(1);
    let epochs = schedule.iterations.map_or(schedule.epochs, |it| it.div_ceil(per_epoch));
    let total = schedule.iterations.unwrap_or(epochs * per_epoch);
    let warmup = if config.method.is_space_filling() { schedule.sf_warmup } else { 0 };

    let mut codebook = if warmup > 0 {
        None
    } else {
        let rows = sample(&mut rng, n, k).into_vec();
        Some(Codebook::new(model.encode(&train.select_rows(&rows))?)?)
    };
    let mut stream = BatchStream::new(n);
    let mut model_opt = Optimizer::new(schedule.optimizer);
    let mut codebook_opt = Optimizer::new(schedule.optimizer);
    let mut buffer: VecDeque<Tensor> = VecDeque::with_capacity(schedule.sf_init_window);
    let mut records = Vec::with_capacity(total);
    let mut replacements = Vec::new();
    let mut lr_trace = Vec::with_capacity(epochs);
    let mut tau_trace = Vec::with_capacity(epochs);
    let mut sf_start_iteration = None;
    let mut last_good = None;

    for iteration in 1..=total {
        let epoch = (iteration - 1) / per_epoch;
        let lr = schedule.lr_at(epoch);
        let tau = config.tau.at(epoch);
        if lr_trace.len() == epoch {
            lr_trace.push(lr);
            tau_trace.push(tau);
        }
        if codebook.is_none() && epoch >= warmup {
            let window: Vec<f64> = buffer.iter().flat_map(|t| t.data().iter().copied()).collect();
            let latents = Tensor::matrix(window.len() / arch.latent_dim, arch.latent_dim, window)?;
            codebook = Some(sf_delayed_init(&latents, k)?);
            sf_start_iteration = Some(iteration);
        }
        let x_value = train.select_rows(&stream.next(batch, &mut rng));
        let tape = Tape::new();
        let params = model.encoder.register(&tape);
        let dec_params = model.decoder.register(&tape);
        let all: Vec<Var<'_>> = params.iter().chain(&dec_params).copied().collect();

        let step = (|| {
            let x = tape.constant(x_value.clone());
            let z = model.encoder.forward(&params, x)?;
            match &codebook {
                None => {
                    let x_r = model.decoder.forward(&dec_params, z)?;
                    let loss = loss_noise_family(x, x_r)?;
                    let grads = loss.total.backward()?;
                    let g: Vec<Tensor> = all.iter().map(|&p| grads.wrt(p)).collect();
                    Ok((g, None, z.value(), loss.breakdown))
                }
                Some(cb) => {
                    let vq = vq_forward(&tape, z, cb, config, tau, &mut rng)?;
                    let x_r = model.decoder.forward(&dec_params, vq.z_q)?;
                    let loss = step_loss(x, x_r, z, &vq, config)?;
                    let grads = loss.total.backward()?;
                    let g: Vec<Tensor> = all.iter().map(|&p| grads.wrt(p)).collect();
                    let cb_grad = grads.wrt(vq.codebook_var);
                    let vq_out = (cb_grad, vq.quantization.indices.clone(), vq.usage_indices, vq.quantization.distortion);
                    Ok((g, Some(vq_out), z.value(), loss.breakdown))
                }
            }
        })()
        .map_err(|e| as_divergence(e, iteration, last_good))?;
        let (grads, vq_out, z_value, breakdown) = step;
        check_finite(breakdown.total, iteration, last_good)?;

        {
            let mut targets = model.encoder.parameters_mut();
            targets.extend(model.decoder.parameters_mut());
            model_opt.step(&mut targets, &grads, lr)?;
        }

        let (usage, distortion, replaced) = match (vq_out, codebook.as_mut()) {
            (Some((cb_grad, indices, usage_indices, distortion)), Some(cb)) => {
                update_codebook(cb, &cb_grad, &z_value, &indices, config, &mut codebook_opt, lr)?;
                cb.record_usage(&usage_indices);
                let replaced = maybe_replace(cb, policy, config.method, iteration, total, &mut rng, &mut replacements)?;
                if let Some(rows) = &replaced {
                    codebook_opt.reset_rows(0, rows);
                }
                (UsageStats::from_indices(&usage_indices, k), distortion, replaced.map_or(0, |r| r.len()))
            }
            _ => {
                if buffer.len() == schedule.sf_init_window {
                    buffer.pop_front();
                }
                buffer.push_back(z_value);
                (UsageStats::from_counts(&vec![0; k]), 0.0, 0)
            }
        };
        if model.encoder.layers.iter().chain(&model.decoder.layers).any(|(w, b)| !w.is_finite() || !b.is_finite()) {
            return Err(Error::Diverged { iteration, last_good });
        }
        let outcome = StepOutcome {
            breakdown,
            distortion,
            usage,
        };
        let tau_field = (config.method == Method::Stgs).then_some(tau);
        records.push(record(iteration, epoch, &outcome, lr, tau_field, replaced));
        last_good = Some(iteration);
    }

    let codebook = match codebook {
        Some(cb) => cb,
        None => {
            return Err(Error::param(
                "sf_warmup",
                format!("warmup of {warmup} epochs leaves no quantized training in {epochs} epochs"),
            ))
        }
    };
    let test_latents = model.encode(test)?;
    let test_evaluation = evaluate(&test_latents, codebook.vectors())?;
    let test_mse = mean_squared(test, &model.reconstruct(test, codebook.vectors())?);
    Ok(AutoencoderRun {
        model,
        codebook,
        records,
        replacements,
        lr_trace,
        tau_trace,
        sf_start_iteration,
        test_mse,
        test_evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::harness::OptimizerKind;

    fn arch() -> AutoencoderArch {
        AutoencoderArch {
            hidden: vec![16],
            latent_dim: 2,
            activation: Activation::Tanh,
        }
    }

    fn schedule(epochs: usize) -> TrainingSchedule {
        TrainingSchedule {
            epochs,
            batch_size: 32,
            learning_rate: 0.05,
            lr_milestones: vec![],
            optimizer: OptimizerKind::Sgd,
            sf_warmup: 1,
            sf_init_window: 4,
            iterations: None,
        }
    }

    #[test]
    fn noiseless_clusters_reconstruct_almost_exactly() {
        // four distinct points and sixteen codewords; bound fixed by a pilot run
        let ds = DatasetSpec {
            seed: 1,
            size: 2000,
            components: 4,
            noise: 0.0,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let sched = TrainingSchedule {
            lr_milestones: vec![6, 8],
            ..schedule(10)
        };
        let run = train_autoencoder(&ds.train, &ds.test, &arch(), 16, &QuantizerConfig::default(), &sched, None).unwrap();
        assert!(run.test_mse < 1e-2, "{}", run.test_mse);
    }

    #[test]
    fn stgs_tau_trace_follows_annealing() {
        let ds = DatasetSpec { size: 100, ..Default::default() }.generate().unwrap();
        let config = QuantizerConfig {
            tau: crate::quantizers::TauSchedule {
                start: 1.0,
                min: 0.1,
                epochs: 4,
            },
            ..QuantizerConfig::with_method(Method::Stgs)
        };
        let run = train_autoencoder(&ds.train, &ds.test, &arch(), 4, &config, &schedule(6), None).unwrap();
        let eta = 0.1f64.powf(0.25);
        let expect: Vec<f64> = (0..6).map(|e| (eta.powi(e)).max(0.1)).collect();
        assert_eq!(run.tau_trace.len(), 6);
        for (a, b) in run.tau_trace.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let per_epoch = 80 / 32;
        for r in &run.records {
            assert_eq!(r.tau, Some(run.tau_trace[r.epoch]));
            assert_eq!(r.epoch, (r.iteration - 1) / per_epoch);
        }
    }

    #[test]
    fn lr_trace_halves_at_milestones() {
        let ds = DatasetSpec { size: 100, ..Default::default() }.generate().unwrap();
        let sched = TrainingSchedule {
            lr_milestones: vec![2, 4],
            ..schedule(5)
        };
        let run = train_autoencoder(&ds.train, &ds.test, &arch(), 4, &QuantizerConfig::default(), &sched, None).unwrap();
        assert_eq!(run.lr_trace, [0.05, 0.05, 0.025, 0.025, 0.0125]);
    }

    #[test]
    fn sf_waits_for_warmup_then_initializes_from_window() {
        let ds = DatasetSpec { size: 200, ..Default::default() }.generate().unwrap();
        let sched = TrainingSchedule {
            sf_warmup: 2,
            ..schedule(4)
        };
        let per_epoch = 160 / 32;
        let config = QuantizerConfig::with_method(Method::SfDiveq);
        let policy = ReplacementPolicy {
            phase1_period: 1,
            stop_margin: 0,
            ..Default::default()
        };
        let run = train_autoencoder(&ds.train, &ds.test, &arch(), 4, &config, &sched, Some(&policy)).unwrap();
        assert_eq!(run.sf_start_iteration, Some(2 * per_epoch + 1));
        for r in &run.records[..2 * per_epoch] {
            assert_eq!((r.distortion, r.usage_fraction), (0.0, 0.0));
        }
        assert!(run.records[2 * per_epoch].usage_fraction > 0.0);
        assert!(run.replacements.is_empty());
    }

    #[test]
    fn sf_without_warmup_is_rejected() {
        let ds = DatasetSpec { size: 100, ..Default::default() }.generate().unwrap();
        let sched = TrainingSchedule {
            sf_warmup: 0,
            ..schedule(2)
        };
        let config = QuantizerConfig::with_method(Method::SfDiveq);
        assert!(train_autoencoder(&ds.train, &ds.test, &arch(), 4, &config, &sched, None).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = DatasetSpec { size: 100, ..Default::default() }.generate().unwrap();
        let config = QuantizerConfig::with_method(Method::Nsvq);
        let a = train_autoencoder(&ds.train, &ds.test, &arch(), 4, &config, &schedule(2), None).unwrap();
        let b = train_autoencoder(&ds.train, &ds.test, &arch(), 4, &config, &schedule(2), None).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.codebook, b.codebook);
    }
}
