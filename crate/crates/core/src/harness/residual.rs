use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::direct::kmeans_plus_plus;
use super::{as_divergence, check_finite, record, update_codebook, BatchStream, Optimizer, StepOutcome, TrainingSchedule};
use crate::autodiff::Tape;
use crate::codebook::{nearest, Codebook, UsageStats};
use crate::error::{Error, Result};
use crate::losses::{mse, training_loss, LossBreakdown};
use crate::metrics::MetricsRecord;
use crate::quantizers::{quantize_residual, Method, QuantizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ResidualRun {
    pub codebooks: Vec<Codebook>,
    /// Usage columns describe the first stage.
    pub records: Vec<MetricsRecord>,
    /// Hard residual-VQ distortion on the training data.
    pub distortion: f64,
}

/// Hard residual quantization of `data`; returns the final residuals.
pub fn residual_hard(data: &Tensor, codebooks: &[Tensor]) -> Result<Tensor> {
    let mut r = data.clone();
    for c in codebooks {
        let a = nearest(&r, c)?;
        let hard = c.select_rows(&a.indices);
        for (v, h) in r.data_mut().iter_mut().zip(hard.data()) {
            *v -= h;
        }
    }
    Ok(r)
}

/// Mean squared norm of the hard residual after all stages.
pub fn residual_distortion(data: &Tensor, codebooks: &[Tensor]) -> Result<f64> {
    let r = residual_hard(data, codebooks)?;
    Ok(r.data().iter().map(|v| v * v).sum::<f64>() / r.rows().max(1) as f64)
}

/// Trains `stages` codebooks of `K` codewords jointly on `data`.
///
/// The reconstruction is `sum_s z_q_s` against the batch; each stage adds
/// its own auxiliary terms. Stage `s` starts from k-means++ on the hard
/// residuals left by the initial stages before it.
pub fn train_residual_direct(
    data: &Tensor,
    k: usize,
    stages: usize,
    config: &QuantizerConfig,
    schedule: &TrainingSchedule,
) -> Result<ResidualRun> {
    config.validate()?;
    if let Some((name, reason)) = schedule.violations().into_iter().next() {
        return Err(Error::param(name, reason));
    }
    if config.method == Method::Hard {
        return Err(Error::param("method", "HARD has no training signal"));
    }
    if stages == 0 {
        return Err(Error::param("stages", "must be >= 1"));
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
    let mut codebooks: Vec<Codebook> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let vectors: Vec<Tensor> = codebooks.iter().map(|c| c.vectors().clone()).collect();
        let r = residual_hard(data, &vectors)?;
        codebooks.push(Codebook::new(kmeans_plus_plus(&r, k, &mut rng))?);
    }
    let total = schedule.iterations.unwrap_or(schedule.epochs * n.div_ceil(batch));
    let mut optimizers: Vec<Optimizer> = (0..stages).map(|_| Optimizer::new(schedule.optimizer)).collect();
    let mut stream = BatchStream::new(n);
    let mut records = Vec::with_capacity(total);
    let mut last_good = None;
    let trainable = config.method != Method::Ema;

    for iteration in 1..=total {
        let epoch = (iteration - 1) * batch / n;
        let lr = schedule.lr_at(epoch);
        let tau = (config.method == Method::Stgs).then(|| config.tau.at(epoch));
        let z_value = data.select_rows(&stream.next(batch, &mut rng));

        let tape = Tape::new();
        let step = (|| {
            let z = tape.constant(z_value.clone());
            let vars: Vec<_> = codebooks
                .iter()
                .map(|c| {
                    if trainable {
                        tape.var(c.vectors().clone())
                    } else {
                        tape.constant(c.vectors().clone())
                    }
                })
                .collect();
            let rvq = quantize_residual(z, &vars, config, tau.unwrap_or(1.0), &mut rng)?;
            let recon = mse(z, rvq.z_q_total)?;
            let mut breakdown = LossBreakdown {
                reconstruction: recon.item(),
                ..Default::default()
            };
            let mut loss = recon;
            let mut input = z;
            for (s, q) in rvq.stage_results.iter().enumerate() {
                let aux = training_loss(input, input, input, vars[s], q, config)?;
                breakdown.codebook_term += aux.breakdown.codebook_term;
                breakdown.commitment_term += aux.breakdown.commitment_term;
                breakdown.kl_term += aux.breakdown.kl_term;
                loss = loss.add(aux.total)?;
                input = tape.constant(rvq.residuals[s].clone());
            }
            breakdown.total = loss.item();
            let grads = loss.backward()?;
            let stage_inputs: Vec<Tensor> = std::iter::once(z_value.clone())
                .chain(rvq.residuals.iter().take(stages - 1).cloned())
                .collect();
            Ok((
                vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>(),
                rvq.stage_results.iter().map(|q| q.indices.clone()).collect::<Vec<_>>(),
                stage_inputs,
                breakdown,
                rvq.distortion(),
            ))
        })()
        .map_err(|e| as_divergence(e, iteration, last_good))?;
        let (grads, indices, inputs, breakdown, distortion) = step;
        check_finite(breakdown.total, iteration, last_good)?;

        for s in 0..stages {
            update_codebook(&mut codebooks[s], &grads[s], &inputs[s], &indices[s], config, &mut optimizers[s], lr)?;
            if !codebooks[s].vectors().is_finite() {
                return Err(Error::Diverged { iteration, last_good });
            }
            codebooks[s].record_usage(&indices[s]);
        }
        let outcome = StepOutcome {
            breakdown,
            distortion,
            usage: UsageStats::from_indices(&indices[0], k),
        };
        records.push(record(iteration, epoch, &outcome, lr, tau, 0));
        last_good = Some(iteration);
    }

    let vectors: Vec<Tensor> = codebooks.iter().map(|c| c.vectors().clone()).collect();
    let distortion = residual_distortion(data, &vectors)?;
    Ok(ResidualRun {
        codebooks,
        records,
        distortion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn schedule() -> TrainingSchedule {
        TrainingSchedule {
            batch_size: 128,
            learning_rate: 0.05,
            lr_milestones: vec![],
            iterations: Some(100),
            ..Default::default()
        }
    }

    #[test]
    fn hard_residual_matches_manual_two_stage() {
        let data = Tensor::from_rows(&[&[1.2, 0.0][..], &[-0.9, 0.4]]).unwrap();
        let c1 = Tensor::from_rows(&[&[1.0, 0.0][..], &[-1.0, 0.0]]).unwrap();
        let c2 = Tensor::from_rows(&[&[0.0, 0.5][..], &[0.2, 0.0]]).unwrap();
        let r = residual_hard(&data, &[c1, c2]).unwrap();
        let expect = [0.0, 0.0, 0.1, -0.1];
        for (a, b) in r.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_gradient_method_trains_finitely() {
        let data = DatasetSpec { size: 400, ..Default::default() }.generate().unwrap().data;
        for method in Method::ALL.iter().copied().filter(|&m| m != Method::Hard) {
            let run = train_residual_direct(&data, 4, 2, &QuantizerConfig::with_method(method), &schedule()).unwrap();
            assert!(run.distortion.is_finite(), "{method}");
            assert_eq!(run.records.len(), 100);
        }
    }

    #[test]
    fn ste_adds_stage_terms() {
        let data = DatasetSpec { size: 200, ..Default::default() }.generate().unwrap().data;
        let run = train_residual_direct(&data, 4, 3, &QuantizerConfig::with_method(Method::Ste), &schedule()).unwrap();
        let r = &run.records[0];
        assert!(r.codebook_term > 0.0 && r.commitment_term > 0.0);
        assert!((r.total_loss - (r.recon + r.codebook_term + r.commitment_term)).abs() < 1e-9);
    }

    #[test]
    fn rejects_zero_stages() {
        let data = DatasetSpec { size: 50, ..Default::default() }.generate().unwrap().data;
        assert!(train_residual_direct(&data, 4, 0, &QuantizerConfig::default(), &schedule()).is_err());
    }
}
