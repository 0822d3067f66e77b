//! Vector-quantization estimators.
//!
//! Every estimator is split in two steps. [`FrozenQuantizer::plan`] performs
//! the non-differentiable work (nearest-codeword search, noise draws,
//! dithering, rotation factors) and freezes it. [`FrozenQuantizer::apply`]
//! then records the differentiable map from `(z, codebook)` to `z_q` on a
//! tape. Keeping the frozen state separate is what lets the gradient checks
//! re-evaluate an estimator at perturbed inputs with identical randomness.
//!
//! Estimators whose forward pass is a hard assignment (STE, EMA, RT, ST-GS
//! and both detach variants) return the hard target bit for bit; their
//! pullback is the pullback of the smooth surrogate, available on its own
//! through [`FrozenQuantizer::surrogate`].

mod ema;
mod residual;
mod rotation;

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Var, GUARD_EPS};
use crate::codebook::{nearest, DitheredCodebook};
use crate::error::{Error, Result};
use crate::tensor::{norm, squared_distance, Tensor};

pub use ema::{ema_update, EmaReport};
pub use residual::{quantize_residual, ResidualStageResult};
pub use rotation::{RotationFactors, ROTATION_EPS};

/// Radius below which `z` counts as sitting on its codeword.
pub const DEGENERATE_EPS: f64 = 1e-12;
/// Redraws allowed for a degenerate noise vector before giving up.
pub const MAX_NOISE_RESAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Hard,
    Ste,
    Ema,
    Rt,
    Stgs,
    Nsvq,
    Diveq,
    SfDiveq,
    DiveqDetach,
    SfDiveqDetach,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Hard,
        Method::Ste,
        Method::Ema,
        Method::Rt,
        Method::Stgs,
        Method::Nsvq,
        Method::Diveq,
        Method::SfDiveq,
        Method::DiveqDetach,
        Method::SfDiveqDetach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hard => "HARD",
            Method::Ste => "STE",
            Method::Ema => "EMA",
            Method::Rt => "RT",
            Method::Stgs => "STGS",
            Method::Nsvq => "NSVQ",
            Method::Diveq => "DIVEQ",
            Method::SfDiveq => "SF_DIVEQ",
            Method::DiveqDetach => "DIVEQ_DETACH",
            Method::SfDiveqDetach => "SF_DIVEQ_DETACH",
        }
    }

    /// Quantizes onto the curve through consecutive codewords.
    pub fn is_space_filling(self) -> bool {
        matches!(self, Method::SfDiveq | Method::SfDiveqDetach)
    }

    /// Estimators trained with reconstruction loss only.
    pub fn is_noise_family(self) -> bool {
        matches!(
            self,
            Method::Nsvq | Method::Diveq | Method::SfDiveq | Method::DiveqDetach | Method::SfDiveqDetach
        )
    }

    /// Uses the codebook and commitment terms.
    pub fn is_ste_family(self) -> bool {
        matches!(self, Method::Ste | Method::Ema | Method::Rt)
    }

    pub fn uses_sigma2(self) -> bool {
        matches!(self, Method::Diveq | Method::SfDiveq)
    }

    /// Forward value equals the hard target exactly.
    fn snaps_forward(self) -> bool {
        matches!(
            self,
            Method::Ste | Method::Ema | Method::Rt | Method::Stgs | Method::DiveqDetach | Method::SfDiveqDetach
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Exponential temperature annealing parameters for ST-GS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub min: f64,
    pub epochs: usize,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            start: 1.0,
            min: 0.1,
            epochs: 100,
        }
    }
}

impl TauSchedule {
    /// `max(start * eta^epoch, min)` with `eta = (min / start)^(1 / epochs)`.
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.epochs {
            return self.min;
        }
        let eta = (self.min / self.start).powf(1.0 / self.epochs as f64);
        (self.start * eta.powf(epoch as f64)).max(self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub method: Method,
    /// Variance of the directional noise (DiVeQ, SF-DiVeQ).
    pub sigma2: f64,
    /// Codebook-loss weight.
    pub alpha: f64,
    /// Commitment-loss weight.
    pub beta: f64,
    /// EMA decay.
    pub gamma: f64,
    /// KL weight for ST-GS.
    pub phi: f64,
    pub tau: TauSchedule,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            method: Method::Diveq,
            sigma2: 1e-3,
            alpha: 1.0,
            beta: 0.25,
            gamma: 0.99,
            phi: 1.0,
            tau: TauSchedule::default(),
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn with_method(method: Method) -> Self {
        QuantizerConfig {
            method,
            ..Default::default()
        }
    }

    /// Returns `(field, message)` for every violated constraint.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            out.push(("sigma2", format!("must be > 0, got {}", self.sigma2)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push(("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau.min > 0.0 && self.tau.start >= self.tau.min) {
            out.push((
                "tau",
                format!("need start >= min > 0, got start {} min {}", self.tau.start, self.tau.min),
            ));
        }
        if self.tau.epochs == 0 {
            out.push(("tau.epochs", "must be >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("phi", self.phi)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push((name, format!("must be a finite non-negative weight, got {v}")));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some((name, reason)) => Err(Error::param(name, reason)),
        }
    }
}

/// Counters for rare branches taken while quantizing a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// RT samples that used straight-through semantics.
    pub rt_fallbacks: usize,
    /// Noise vectors that had to be redrawn.
    pub noise_resamples: usize,
    /// Samples already on their target (zero radius).
    pub degenerate: usize,
}

/// Frozen ST-GS draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    /// `-||z - c_k||^2`.
    pub logits: Tensor,
    pub gumbels: Tensor,
    /// Softmax of `(logits + gumbels) / tau`.
    pub y: Tensor,
    pub onehot: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
enum Surrogate {
    Constant,
    /// `z + sg[offset]`
    Offset(Tensor),
    /// `sg[M_n] z_n + sg[offset_n]`
    Rotation { transforms: Tensor, offset: Tensor },
    /// `softmax((-d^2(z, C) + g) / tau) C`
    Gumbel { gumbels: Tensor, tau: f64 },
    /// `z + ||c_first - z|| sg[first_dir] + ||c_second - z|| sg[second_dir]`
    Radial {
        first_dir: Tensor,
        second: Option<(Vec<usize>, Tensor)>,
    },
}

/// Everything an estimator decides before differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuantizer {
    pub method: Method,
    /// `i*` per sample (segment index for space-filling methods).
    pub indices: Vec<usize>,
    /// `lambda_{i*}` per sample for space-filling methods.
    pub lambda: Option<Vec<f64>>,
    /// Hard targets: selected codewords, or the winning dithered points.
    pub hard_points: Tensor,
    pub gumbel: Option<GumbelSample>,
    pub diagnostics: Diagnostics,
    surrogate: Surrogate,
}

/// Output of one quantization call.
#[derive(Debug, Clone)]
pub struct QuantizationResult<'t> {
    pub method: Method,
    pub z_q: Var<'t>,
    pub indices: Vec<usize>,
    pub lambda: Option<Vec<f64>>,
    pub hard_points: Tensor,
    /// Mean of `||z - hard_point||^2`.
    pub distortion: f64,
    /// Soft assignments `y` on the tape (ST-GS only).
    pub soft_assignments: Option<Var<'t>>,
    pub gumbel: Option<GumbelSample>,
    pub diagnostics: Diagnostics,
}

fn check_inputs(z: &Tensor, codewords: &Tensor) -> Result<()> {
    if codewords.ndim() != 2 || codewords.rows() == 0 {
        return Err(Error::param("codebook", format!("needs a K x D matrix, got {:?}", codewords.shape())));
    }
    if z.ndim() != 2 || z.cols() != codewords.cols() {
        return Err(Error::Dimension {
            expected: codewords.cols(),
            actual: z.cols(),
        });
    }
    if z.rows() == 0 {
        return Err(Error::param("z", "empty batch"));
    }
    Ok(())
}

fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            std * s
        })
        .collect()
}

fn unit(v: &[f64], scale: f64) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| scale * x / n).collect()
}

/// Draws `v ~ N(0, std^2 I)` and returns `unit(v + shift)`, redrawing while
/// the sum is degenerate.
fn directional_noise<R: Rng + ?Sized>(
    rng: &mut R,
    shift: &[f64],
    std: f64,
    diagnostics: &mut Diagnostics,
) -> Result<Vec<f64>> {
    for attempt in 0..=MAX_NOISE_RESAMPLES {
        let v = sample_gaussian(rng, shift.len(), std);
        let vd: Vec<f64> = v.iter().zip(shift).map(|(a, b)| a + b).collect();
        if norm(&vd) >= DEGENERATE_EPS {
            return Ok(unit(&vd, 1.0));
        }
        if attempt < MAX_NOISE_RESAMPLES {
            diagnostics.noise_resamples += 1;
        }
    }
    Err(Error::DegenerateNoise(MAX_NOISE_RESAMPLES))
}

fn mean_squared_error_rows(z: &Tensor, targets: &Tensor) -> f64 {
    let total: f64 = z.iter_rows().zip(targets.iter_rows()).map(|(a, b)| squared_distance(a, b)).sum();
    total / z.rows() as f64
}

impl FrozenQuantizer {
    /// Runs the non-differentiable part of `config.method` on concrete values.
    /// `tau` is only read by ST-GS.
    pub fn plan<R: Rng + ?Sized>(
        z: &Tensor,
        codewords: &Tensor,
        config: &QuantizerConfig,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_inputs(z, codewords)?;
        let method = config.method;
        if method.uses_sigma2() && config.sigma2.is_nan() || config.sigma2 <= 0.0 {
            return Err(Error::param("sigma2", format!("must be > 0, got {}", config.sigma2)));
        }
        match method {
            Method::Hard | Method::Ste | Method::Ema => Ok(Self::plan_offset(z, codewords, method)),
            Method::Rt => Ok(Self::plan_rotation(z, codewords)),
            Method::Stgs => Self::plan_gumbel(z, codewords, tau, rng),
            Method::Nsvq => Self::plan_nsvq(z, codewords, rng),
            Method::Diveq => Self::plan_diveq(z, codewords, Some(config.sigma2.sqrt()), rng),
            Method::DiveqDetach => Self::plan_diveq(z, codewords, None, rng),
            Method::SfDiveq => Self::plan_space_filling(z, codewords, Some(config.sigma2.sqrt()), rng),
            Method::SfDiveqDetach => Self::plan_space_filling(z, codewords, None, rng),
        }
    }

    fn plan_offset(z: &Tensor, codewords: &Tensor, method: Method) -> Self {
        let assignment = nearest(z, codewords).expect("checked dimensions");
        let hard_points = codewords.select_rows(&assignment.indices);
        let surrogate = if method == Method::Hard {
            Surrogate::Constant
        } else {
            let offset: Vec<f64> = hard_points.data().iter().zip(z.data()).map(|(c, z)| c - z).collect();
            Surrogate::Offset(Tensor::new(z.shape().to_vec(), offset).expect("same shape"))
        };
        FrozenQuantizer {
            method,
            indices: assignment.indices,
            lambda: None,
            hard_points,
            gumbel: None,
            diagnostics: Diagnostics::default(),
            surrogate,
        }
    }

    fn plan_rotation(z: &Tensor, codewords: &Tensor) -> Self {
        let assignment = nearest(z, codewords).expect("checked dimensions");
        let hard_points = codewords.select_rows(&assignment.indices);
        let (n, d) = (z.rows(), z.cols());
        let mut transforms = Vec::with_capacity(n * d * d);
        let mut offset = Vec::with_capacity(n * d);
        let mut diagnostics = Diagnostics::default();
        for (zn, cn) in z.iter_rows().zip(hard_points.iter_rows()) {
            match RotationFactors::new(zn, cn) {
                Some(f) => {
                    transforms.extend_from_slice(f.scaled_rotation().data());
                    offset.extend(std::iter::repeat_n(0.0, d));
                }
                None => {
                    diagnostics.rt_fallbacks += 1;
                    transforms.extend_from_slice(Tensor::identity(d).data());
                    offset.extend(cn.iter().zip(zn).map(|(c, z)| c - z));
                }
            }
        }
        FrozenQuantizer {
            method: Method::Rt,
            indices: assignment.indices,
            lambda: None,
            hard_points,
            gumbel: None,
            diagnostics,
            surrogate: Surrogate::Rotation {
                transforms: Tensor::new(vec![n, d, d], transforms).expect("n*d*d values"),
                offset: Tensor::matrix(n, d, offset).expect("n*d values"),
            },
        }
    }

    fn plan_gumbel<R: Rng + ?Sized>(z: &Tensor, codewords: &Tensor, tau: f64, rng: &mut R) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::param("tau", format!("must be > 0, got {tau}")));
        }
        let (n, k) = (z.rows(), codewords.rows());
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
        let mut logits = Vec::with_capacity(n * k);
        for zn in z.iter_rows() {
            logits.extend(codewords.iter_rows().map(|c| -squared_distance(zn, c)));
        }
        let gumbels: Vec<f64> = (0..n * k).map(|_| gumbel.sample(rng)).collect();
        let mut y = Vec::with_capacity(n * k);
        let mut onehot = vec![0.0; n * k];
        let mut indices = Vec::with_capacity(n);
        for row in 0..n {
            let scores: Vec<f64> = (0..k).map(|j| (logits[row * k + j] + gumbels[row * k + j]) / tau).collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let mut best = 0;
            for j in 1..k {
                if probs[j] > probs[best] {
                    best = j;
                }
            }
            onehot[row * k + best] = 1.0;
            indices.push(best);
            y.extend(probs);
        }
        let gumbels = Tensor::matrix(n, k, gumbels)?;
        Ok(FrozenQuantizer {
            method: Method::Stgs,
            hard_points: codewords.select_rows(&indices),
            indices,
            lambda: None,
            gumbel: Some(GumbelSample {
                logits: Tensor::matrix(n, k, logits)?,
                gumbels: gumbels.clone(),
                y: Tensor::matrix(n, k, y)?,
                onehot: Tensor::matrix(n, k, onehot)?,
            }),
            diagnostics: Diagnostics::default(),
            surrogate: Surrogate::Gumbel { gumbels, tau },
        })
    }

    fn plan_nsvq<R: Rng + ?Sized>(z: &Tensor, codewords: &Tensor, rng: &mut R) -> Result<Self> {
        let assignment = nearest(z, codewords)?;
        let hard_points = codewords.select_rows(&assignment.indices);
        let d = z.cols();
        let mut diagnostics = Diagnostics::default();
        let zeros = vec![0.0; d];
        let mut dirs = Vec::with_capacity(z.len());
        for (zn, cn) in z.iter_rows().zip(hard_points.iter_rows()) {
            if squared_distance(zn, cn).sqrt() < DEGENERATE_EPS {
                diagnostics.degenerate += 1;
            }
            // the draw happens regardless so the stream does not depend on the data
            dirs.extend(directional_noise(rng, &zeros, 1.0, &mut diagnostics)?);
        }
        Ok(FrozenQuantizer {
            method: Method::Nsvq,
            indices: assignment.indices,
            lambda: None,
            hard_points,
            gumbel: None,
            diagnostics,
            surrogate: Surrogate::Radial {
                first_dir: Tensor::new(z.shape().to_vec(), dirs)?,
                second: None,
            },
        })
    }

    /// `noise_std = None` is the detach variant.
    fn plan_diveq<R: Rng + ?Sized>(
        z: &Tensor,
        codewords: &Tensor,
        noise_std: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let assignment = nearest(z, codewords)?;
        let hard_points = codewords.select_rows(&assignment.indices);
        let mut diagnostics = Diagnostics::default();
        let mut dirs = Vec::with_capacity(z.len());
        for (zn, cn) in z.iter_rows().zip(hard_points.iter_rows()) {
            let d: Vec<f64> = cn.iter().zip(zn).map(|(c, z)| c - z).collect();
            dirs.extend(toward(rng, &d, noise_std, 1.0, &mut diagnostics)?);
        }
        Ok(FrozenQuantizer {
            method: if noise_std.is_some() { Method::Diveq } else { Method::DiveqDetach },
            indices: assignment.indices,
            lambda: None,
            hard_points,
            gumbel: None,
            diagnostics,
            surrogate: Surrogate::Radial {
                first_dir: Tensor::new(z.shape().to_vec(), dirs)?,
                second: None,
            },
        })
    }

    fn plan_space_filling<R: Rng + ?Sized>(
        z: &Tensor,
        codewords: &Tensor,
        noise_std: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if codewords.rows() < 2 {
            return Err(Error::param("codebook", "space-filling quantization needs K >= 2"));
        }
        let lambdas = (0..codewords.rows() - 1).map(|_| rng.random::<f64>()).collect();
        Self::plan_space_filling_with(z, codewords, DitheredCodebook::from_lambdas(codewords, lambdas)?, noise_std, rng)
    }

    /// Space-filling plan against a given dithered codebook.
    pub fn plan_space_filling_with<R: Rng + ?Sized>(
        z: &Tensor,
        codewords: &Tensor,
        dithered: DitheredCodebook,
        noise_std: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        check_inputs(z, codewords)?;
        let assignment = nearest(z, &dithered.points)?;
        let seg = &assignment.indices;
        let hard_points = dithered.points.select_rows(seg);
        let next: Vec<usize> = seg.iter().map(|&j| j + 1).collect();
        let d = z.cols();
        let mut diagnostics = Diagnostics::default();
        let mut first = Vec::with_capacity(z.len());
        let mut second = Vec::with_capacity(z.len());
        let mut lambda = Vec::with_capacity(z.rows());
        for (n, zn) in z.iter_rows().enumerate() {
            let l = dithered.lambdas[seg[n]];
            lambda.push(l);
            let (ca, cb) = (codewords.row(seg[n]), codewords.row(seg[n] + 1));
            let da: Vec<f64> = ca.iter().zip(zn).map(|(c, z)| c - z).collect();
            if ca == cb {
                // collapsed segment: plain DiVeQ toward the shared point
                first.extend(toward(rng, &da, noise_std, 1.0, &mut diagnostics)?);
                second.extend(std::iter::repeat_n(0.0, d));
                continue;
            }
            let db: Vec<f64> = cb.iter().zip(zn).map(|(c, z)| c - z).collect();
            // one v shared by both directional noises
            let v = match noise_std {
                Some(std) => sample_gaussian(rng, d, std),
                None => vec![0.0; d],
            };
            first.extend(shifted_unit(&v, &da, 1.0 - l, &mut diagnostics));
            second.extend(shifted_unit(&v, &db, l, &mut diagnostics));
        }
        let method = if noise_std.is_some() { Method::SfDiveq } else { Method::SfDiveqDetach };
        Ok(FrozenQuantizer {
            method,
            indices: seg.clone(),
            lambda: Some(lambda),
            hard_points,
            gumbel: None,
            diagnostics,
            surrogate: Surrogate::Radial {
                first_dir: Tensor::new(z.shape().to_vec(), first)?,
                second: Some((next, Tensor::new(z.shape().to_vec(), second)?)),
            },
        })
    }

    /// The smooth map whose pullback every estimator uses. For estimators
    /// that do not snap, this is also the forward value.
    pub fn surrogate<'t>(&self, z: Var<'t>, codebook: Var<'t>) -> Result<Var<'t>> {
        Ok(self.surrogate_with_soft(z, codebook)?.0)
    }

    fn surrogate_with_soft<'t>(&self, z: Var<'t>, codebook: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let tape = z.tape();
        if z.shape() != self.hard_points.shape() {
            return Err(Error::shape("quantize", &z.shape(), self.hard_points.shape()));
        }
        match &self.surrogate {
            Surrogate::Constant => Ok((tape.constant(self.hard_points.clone()), None)),
            Surrogate::Offset(offset) => Ok((z.add(tape.constant(offset.clone()))?, None)),
            Surrogate::Rotation { transforms, offset } => {
                let rotated = z.row_linear(transforms.clone())?;
                Ok((rotated.add(tape.constant(offset.clone()))?, None))
            }
            Surrogate::Gumbel { gumbels, tau } => {
                let z_sq = z.square()?.row_sums()?;
                let c_sq = codebook.square()?.row_sums()?.transpose()?;
                let cross = z.matmul(codebook.transpose()?)?.scale(-2.0)?;
                let sq_dist = cross.add_column(z_sq)?.add_row(c_sq)?;
                let scores = sq_dist.neg()?.add(tape.constant(gumbels.clone()))?.scale(1.0 / tau)?;
                let y = scores.softmax()?;
                Ok((y.matmul(codebook)?, Some(y)))
            }
            Surrogate::Radial { first_dir, second } => {
                let first = radial_term(z, codebook, &self.indices, first_dir)?;
                let mut out = z.add(first)?;
                if let Some((next, dir)) = second {
                    out = out.add(radial_term(z, codebook, next, dir)?)?;
                }
                Ok((out, None))
            }
        }
    }

    /// Records the estimator on the tape.
    pub fn apply<'t>(&self, z: Var<'t>, codebook: Var<'t>) -> Result<QuantizationResult<'t>> {
        let z_value = z.value();
        let (surrogate, soft) = self.surrogate_with_soft(z, codebook)?;
        let z_q = if self.method.snaps_forward() {
            z.tape().straight_through(self.hard_points.clone(), surrogate)?
        } else {
            surrogate
        };
        Ok(QuantizationResult {
            method: self.method,
            z_q,
            indices: self.indices.clone(),
            lambda: self.lambda.clone(),
            distortion: mean_squared_error_rows(&z_value, &self.hard_points),
            hard_points: self.hard_points.clone(),
            soft_assignments: soft,
            gumbel: self.gumbel.clone(),
            diagnostics: self.diagnostics,
        })
    }
}

/// `||c_idx - z|| * sg[dir]`, one row per sample.
fn radial_term<'t>(z: Var<'t>, codebook: Var<'t>, indices: &[usize], dir: &Tensor) -> Result<Var<'t>> {
    let radius = codebook.gather_rows(indices)?.sub(z)?.row_norms()?;
    z.tape().constant(dir.clone()).mul_column(radius)
}

/// `scale * unit(noise + d)` with the degenerate cases zeroed.
fn toward<R: Rng + ?Sized>(
    rng: &mut R,
    d: &[f64],
    noise_std: Option<f64>,
    scale: f64,
    diagnostics: &mut Diagnostics,
) -> Result<Vec<f64>> {
    if norm(d) < DEGENERATE_EPS {
        diagnostics.degenerate += 1;
        return Ok(vec![0.0; d.len()]);
    }
    match noise_std {
        Some(std) => Ok(directional_noise(rng, d, std, diagnostics)?
            .into_iter()
            .map(|v| scale * v)
            .collect()),
        None => Ok(unit(d, scale)),
    }
}

fn shifted_unit(v: &[f64], d: &[f64], scale: f64, diagnostics: &mut Diagnostics) -> Vec<f64> {
    if norm(d) < DEGENERATE_EPS {
        diagnostics.degenerate += 1;
        return vec![0.0; d.len()];
    }
    let vd: Vec<f64> = v.iter().zip(d).map(|(a, b)| a + b).collect();
    if norm(&vd) < GUARD_EPS {
        // v cancelled d exactly; fall back to the noise-free direction
        diagnostics.noise_resamples += 1;
        return unit(d, scale);
    }
    unit(&vd, scale)
}

/// Plans and applies `config.method`.
pub fn quantize<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebook: Var<'t>,
    config: &QuantizerConfig,
    tau: f64,
    rng: &mut R,
) -> Result<QuantizationResult<'t>> {
    FrozenQuantizer::plan(&z.value(), &codebook.value(), config, tau, rng)?.apply(z, codebook)
}

fn run<'t>(z: Var<'t>, codebook: Var<'t>, method: Method, rng: &mut (impl Rng + ?Sized)) -> Result<QuantizationResult<'t>> {
    quantize(z, codebook, &QuantizerConfig::with_method(method), 1.0, rng)
}

/// Deterministic estimators never draw; any stream will do.
fn unused_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Nearest codeword, no gradient.
pub fn quantize_hard<'t>(z: Var<'t>, codebook: Var<'t>) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::Hard, &mut unused_rng())
}

/// `z + sg[c - z]`.
pub fn quantize_ste<'t>(z: Var<'t>, codebook: Var<'t>) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::Ste, &mut unused_rng())
}

/// `sg[rho R] z`.
pub fn quantize_rt<'t>(z: Var<'t>, codebook: Var<'t>) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::Rt, &mut unused_rng())
}

/// Straight-through Gumbel-Softmax at temperature `tau`.
pub fn quantize_stgs<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebook: Var<'t>,
    tau: f64,
    rng: &mut R,
) -> Result<QuantizationResult<'t>> {
    quantize(z, codebook, &QuantizerConfig::with_method(Method::Stgs), tau, rng)
}

/// `z + ||z - c|| v / ||v||` with `v ~ N(0, I)`.
pub fn quantize_nsvq<'t, R: Rng + ?Sized>(z: Var<'t>, codebook: Var<'t>, rng: &mut R) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::Nsvq, rng)
}

/// `z + ||c - z|| sg[v_d / ||v_d||]` with `v_d = v + (c - z)`, `v ~ N(0, sigma2 I)`.
pub fn quantize_diveq<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebook: Var<'t>,
    sigma2: f64,
    rng: &mut R,
) -> Result<QuantizationResult<'t>> {
    let config = QuantizerConfig {
        sigma2,
        ..QuantizerConfig::with_method(Method::Diveq)
    };
    quantize(z, codebook, &config, 1.0, rng)
}

pub fn quantize_sf_diveq<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebook: Var<'t>,
    sigma2: f64,
    rng: &mut R,
) -> Result<QuantizationResult<'t>> {
    let config = QuantizerConfig {
        sigma2,
        ..QuantizerConfig::with_method(Method::SfDiveq)
    };
    quantize(z, codebook, &config, 1.0, rng)
}

pub fn quantize_diveq_detach<'t>(z: Var<'t>, codebook: Var<'t>) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::DiveqDetach, &mut unused_rng())
}

pub fn quantize_sf_diveq_detach<'t, R: Rng + ?Sized>(
    z: Var<'t>,
    codebook: Var<'t>,
    rng: &mut R,
) -> Result<QuantizationResult<'t>> {
    run(z, codebook, Method::SfDiveqDetach, rng)
}
