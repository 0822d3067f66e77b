use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Fully connected network; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `(weights in x out, bias 1 x out)` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, weights ~ N(0, 1/fan_in), zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param("layers", format!("need >= 2 positive sizes, got {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                let weights = (0..w[0] * w[1])
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(rng);
                        std * n
                    })
                    .collect();
                (
                    Tensor::matrix(w[0], w[1], weights).expect("sized"),
                    Tensor::zeros(&[1, w[1]]),
                )
            })
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.cols()
    }

    /// Registers every parameter on `tape`, weights then bias per layer.
    pub fn register<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [tape.var(w.clone()), tape.var(b.clone())])
            .collect()
    }

    /// `params` as returned by [`Mlp::register`].
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            h = h.matmul(pair[0])?.add_row(pair[1])?;
            if i < last {
                h = self.activation.apply(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params: Vec<Var<'_>> = self
            .layers
            .iter()
            .flat_map(|(w, b)| [tape.constant(w.clone()), tape.constant(b.clone())])
            .collect();
        Ok(self.forward(&params, tape.constant(x.clone()))?.value())
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }
}
