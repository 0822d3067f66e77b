use rand::Rng;

use super::{quantize, QuantizationResult, QuantizerConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

/// Multi-stage quantization of successive residuals.
#[derive(Debug, Clone)]
pub struct ResidualStageResult<'t> {
    pub stage_results: Vec<QuantizationResult<'t>>,
    /// `residuals[s]` is stage `s`'s input minus its hard targets.
    pub residuals: Vec<Tensor>,
    /// Sum of the selected codewords over all stages.
    pub z_hat_total: Tensor,
    /// Sum of the per-stage `z_q`, differentiable.
    pub z_q_total: Var<'t>,
}

impl ResidualStageResult<'_> {
    /// Mean of `||z - z_hat_total||^2`, i.e. of the last residual's squared norm.
    pub fn distortion(&self) -> f64 {
        let last = self.residuals.last().expect("at least one stage");
        let zeros = vec![0.0; last.cols()];
        last.iter_rows().map(|r| squared_distance(r, &zeros)).sum::<f64>() / last.rows() as f64
    }
}

/// Stage 1 quantizes `z`; stage `s` quantizes the hard residual of stage
/// `s - 1`. Every stage uses `config`'s estimator.
pub fn quantize_residual<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebooks: &[Var<'t>],
    config: &QuantizerConfig,
    tau: f64,
    rng: &mut R,
) -> Result<ResidualStageResult<'t>> {
    if codebooks.is_empty() {
        return Err(Error::param("codebooks", "residual quantization needs at least one stage"));
    }
    let tape = z.tape();
    let mut input = z;
    let mut stage_results = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len());
    let mut z_hat_total = Tensor::zeros(&z.shape());
    let mut z_q_total: Option<Var<'t>> = None;
    for (stage, &codebook) in codebooks.iter().enumerate() {
        let wrap = |source: Error| Error::Stage {
            stage,
            source: Box::new(source),
        };
        let result = quantize(input, codebook, config, tau, rng).map_err(wrap)?;
        let hard = tape.constant(result.hard_points.clone());
        let residual = input.sub(hard).map_err(wrap)?;
        for (acc, h) in z_hat_total.data_mut().iter_mut().zip(result.hard_points.data()) {
            *acc += h;
        }
        z_q_total = Some(match z_q_total {
            None => result.z_q,
            Some(total) => total.add(result.z_q).map_err(wrap)?,
        });
        residuals.push(residual.value());
        stage_results.push(result);
        input = residual;
    }
    Ok(ResidualStageResult {
        stage_results,
        residuals,
        z_hat_total,
        z_q_total: z_q_total.expect("at least one stage"),
    })
}
