//! Training objectives per estimator family.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::quantizers::{Method, QuantizationResult, QuantizerConfig};

/// Offset inside the KL logarithm.
pub const KL_LOG_EPS: f64 = 1e-12;

/// Scalar values of every term; inactive terms are exactly zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

/// A loss on the tape together with its breakdown.
#[derive(Debug, Clone, Copy)]
pub struct Loss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Mean over all entries of `(x - x_r)^2`.
pub fn mse<'t>(x: Var<'t>, x_r: Var<'t>) -> Result<Var<'t>> {
    if x.shape() != x_r.shape() {
        return Err(Error::shape("mse", &x.shape(), &x_r.shape()));
    }
    x.sub(x_r)?.square()?.mean()
}

/// Batch mean of per-row squared distances.
fn mean_row_sq<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let rows = a.shape()[0] as f64;
    a.sub(b)?.square()?.sum()?.scale(1.0 / rows)
}

fn finish<'t>(terms: [Option<Var<'t>>; 4]) -> Result<Loss<'t>> {
    let values: Vec<f64> = terms.iter().map(|t| t.map_or(0.0, |v| v.item())).collect();
    let mut total: Option<Var<'t>> = None;
    for t in terms.into_iter().flatten() {
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(t)?,
        });
    }
    let total = total.expect("reconstruction is always present");
    Ok(Loss {
        breakdown: LossBreakdown {
            reconstruction: values[0],
            codebook_term: values[1],
            commitment_term: values[2],
            kl_term: values[3],
            total: total.item(),
        },
        total,
    })
}

/// Reconstruction plus `alpha ||sg[z] - c||^2` and `beta ||z - sg[c]||^2`,
/// each averaged over the batch. `with_codebook_term = false` is the EMA
/// variant, whose codebook moves by moving averages instead.
#[allow(clippy::too_many_arguments)]
pub fn loss_ste_family<'t>(
    x: Var<'t>,
    x_r: Var<'t>,
    z: Var<'t>,
    codebook: Var<'t>,
    quantization: &QuantizationResult<'t>,
    alpha: f64,
    beta: f64,
    with_codebook_term: bool,
) -> Result<Loss<'t>> {
    let tape = z.tape();
    let reconstruction = mse(x, x_r)?;
    let codebook_term = if with_codebook_term {
        let selected = codebook.gather_rows(&quantization.indices)?;
        Some(mean_row_sq(z.stop_gradient()?, selected)?.scale(alpha)?)
    } else {
        None
    };
    let target = tape.constant(quantization.hard_points.clone());
    let commitment = mean_row_sq(z, target)?.scale(beta)?;
    finish([Some(reconstruction), codebook_term, Some(commitment), None])
}

/// `ln K - H(q_bar)` for the batch-mean soft assignment, written as
/// `sum q_bar ln(q_bar) + ln K`.
pub fn kl_to_uniform<'t>(soft_assignments: Var<'t>) -> Result<Var<'t>> {
    let k = soft_assignments.shape()[1] as f64;
    let q_bar = soft_assignments.column_means()?;
    q_bar.mul(q_bar.add_scalar(KL_LOG_EPS)?.log()?)?.sum()?.add_scalar(k.ln())
}

/// Reconstruction plus `phi` times the KL divergence from the uniform prior.
pub fn loss_gs<'t>(x: Var<'t>, x_r: Var<'t>, soft_assignments: Var<'t>, phi: f64) -> Result<Loss<'t>> {
    let reconstruction = mse(x, x_r)?;
    let kl = kl_to_uniform(soft_assignments)?.scale(phi)?;
    finish([Some(reconstruction), None, None, Some(kl)])
}

/// Reconstruction only.
pub fn loss_noise_family<'t>(x: Var<'t>, x_r: Var<'t>) -> Result<Loss<'t>> {
    finish([Some(mse(x, x_r)?), None, None, None])
}

/// The objective `config.method` trains with.
pub fn training_loss<'t>(
    x: Var<'t>,
    x_r: Var<'t>,
    z: Var<'t>,
    codebook: Var<'t>,
    quantization: &QuantizationResult<'t>,
    config: &QuantizerConfig,
) -> Result<Loss<'t>> {
    match config.method {
        Method::Ste | Method::Rt => loss_ste_family(x, x_r, z, codebook, quantization, config.alpha, config.beta, true),
        Method::Ema => loss_ste_family(x, x_r, z, codebook, quantization, config.alpha, config.beta, false),
        Method::Stgs => {
            let y = quantization
                .soft_assignments
                .ok_or_else(|| Error::Usage("ST-GS loss needs soft assignments".into()))?;
            loss_gs(x, x_r, y, config.phi)
        }
        Method::Hard
        | Method::Nsvq
        | Method::Diveq
        | Method::SfDiveq
        | Method::DiveqDetach
        | Method::SfDiveqDetach => loss_noise_family(x, x_r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::quantizers::{quantize_diveq, quantize_ste};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn ste_hand_example() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.5, 0.5]]));
        let z = tape.var(m(&[&[1.0, 0.0]]));
        let c = tape.var(m(&[&[0.0, 0.0], &[5.0, 5.0]]));
        let q = quantize_ste(z, c).unwrap();
        let loss = loss_ste_family(x, x, z, c, &q, 1.0, 0.25, true).unwrap();
        assert_eq!(loss.breakdown.total, 1.25);
        assert_eq!(loss.breakdown.reconstruction, 0.0);
        assert_eq!(loss.breakdown.kl_term, 0.0);
    }

    #[test]
    fn ste_perfect_fit_is_zero() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.5, 0.5]]));
        let z = tape.var(m(&[&[5.0, 5.0]]));
        let c = tape.var(m(&[&[0.0, 0.0], &[5.0, 5.0]]));
        let q = quantize_ste(z, c).unwrap();
        assert_eq!(loss_ste_family(x, x, z, c, &q, 1.0, 0.25, true).unwrap().breakdown.total, 0.0);
    }

    #[test]
    fn ste_terms_route_gradients() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.0, 0.0]]));
        let z = tape.var(m(&[&[1.0, 0.0]]));
        let c = tape.var(m(&[&[0.0, 0.0], &[5.0, 5.0]]));
        let q = quantize_ste(z, c).unwrap();
        // only the commitment term
        let commit = loss_ste_family(x, x, z, c, &q, 0.0, 0.25, true).unwrap();
        let g = commit.total.backward().unwrap();
        assert!(g.wrt(c).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.wrt(z).data(), &[0.5, 0.0]);
        // only the codebook term, which touches only c_{i*}
        let tape = Tape::new();
        let z = tape.var(m(&[&[1.0, 0.0]]));
        let c = tape.var(m(&[&[0.0, 0.0], &[5.0, 5.0]]));
        let x = tape.var(m(&[&[0.0, 0.0]]));
        let q = quantize_ste(z, c).unwrap();
        let book = loss_ste_family(x, x, z, c, &q, 1.0, 0.0, true).unwrap();
        let g = book.total.backward().unwrap();
        assert!(g.wrt(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.wrt(c).data(), &[-2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ema_variant_drops_codebook_term() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.5, 0.5]]));
        let z = tape.var(m(&[&[1.0, 0.0]]));
        let c = tape.var(m(&[&[0.0, 0.0], &[5.0, 5.0]]));
        let q = quantize_ste(z, c).unwrap();
        let b = loss_ste_family(x, x, z, c, &q, 1.0, 0.25, false).unwrap().breakdown;
        assert_eq!(b.codebook_term, 0.0);
        assert_eq!(b.total, 0.25);
    }

    #[test]
    fn kl_limits() {
        let tape = Tape::new();
        let uniform = tape.var(Tensor::full(&[3, 4], 0.25));
        assert!(kl_to_uniform(uniform).unwrap().item().abs() < 1e-9);
        let onehot = tape.var(m(&[&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]));
        assert!((kl_to_uniform(onehot).unwrap().item() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let tape = Tape::new();
        let y = m(&[&[0.1, 0.6, 0.3], &[0.5, 0.2, 0.3]]);
        let q = [0.3, 0.4, 0.3];
        let direct: f64 = q.iter().map(|&p: &f64| p * (p * 3.0).ln()).sum();
        let kl = kl_to_uniform(tape.var(y)).unwrap().item();
        assert!((kl - direct).abs() < 1e-9);
    }

    #[test]
    fn gs_breakdown_sums() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let xr = tape.var(m(&[&[0.0, 0.0], &[0.0, 1.0]]));
        let y = tape.var(m(&[&[0.9, 0.1], &[0.8, 0.2]]));
        let b = loss_gs(x, xr, y, 2.0).unwrap().breakdown;
        assert!((b.total - b.reconstruction - b.kl_term).abs() < 1e-12);
        assert_eq!(b.reconstruction, 0.25);
        assert!(b.kl_term > 0.0);
    }

    #[test]
    fn noise_family_is_reconstruction_only() {
        let tape = Tape::new();
        let x = tape.var(m(&[&[0.0, 0.0], &[1.0, 1.0]]));
        let xr = tape.var(m(&[&[0.0, 0.0], &[0.0, 1.0]]));
        let b = loss_noise_family(x, xr).unwrap().breakdown;
        assert_eq!(b, LossBreakdown { reconstruction: 0.25, total: 0.25, ..Default::default() });
        assert_eq!(loss_noise_family(x, x).unwrap().breakdown.total, 0.0);
    }

    #[test]
    fn diveq_reconstruction_reaches_codebook() {
        let tape = Tape::new();
        let z = tape.var(m(&[&[0.4, 0.3]]));
        let c = tape.var(m(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        let target = tape.constant(m(&[&[0.0, 0.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = quantize_diveq(z, c, 1e-3, &mut rng).unwrap();
        let loss = loss_noise_family(target, q.z_q).unwrap();
        let g = loss.total.backward().unwrap().wrt(c);
        assert!(g.row(0).iter().any(|&v| v != 0.0));
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 2]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(loss_noise_family(a, b).is_err());
    }
}
