//! Dense layers and MLP stacks built on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::param::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Weight initialization scheme for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias.
    KaimingUniform,
    /// N(0, std²) weights, zero bias.
    Normal(f64),
    Zeros,
}

impl Init {
    fn weights(self, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<f64> {
        let n = fan_in * fan_out;
        match self {
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
        }
    }
}

/// `y = x·W + b` with `W: in×out` and `b: 1×out`, stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::matrix(fan_in, fan_out, init.weights(fan_in, fan_out, rng))
            .expect("weight shape");
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, params[self.weight])?;
        tape.add_row(h, params[self.bias])
    }
}

/// Stack of [`Linear`] layers with a shared hidden activation and a separate
/// output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// Builds layers for `dims = [in, h1, ..., out]`. `init` picks the scheme
    /// per layer index.
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        init: impl Fn(usize) -> Init,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{prefix}.{i}"), w[0], w[1], init(i), rng))
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        mlp_forward(self, tape, params, x)
    }
}

/// Affine + activation stack; the final activation comes from `mlp.output`.
pub fn mlp_forward(mlp: &Mlp, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = layer.forward(tape, params, h)?;
        let act = if i == last { mlp.output } else { mlp.hidden };
        h = act.apply(tape, h);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new("theta_G");
        let mlp = Mlp::new(&mut ps, "m", &[3, 8, 2], Activation::Relu, Activation::Tanh, |_| Init::Zeros, &mut rng);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 5.]).unwrap());
        let y = mlp.forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new("theta_U");
        let mlp = Mlp::new(&mut ps, "m", &[2, 2], Activation::Relu, Activation::Identity, |_| Init::KaimingUniform, &mut rng);
        ps.params_mut()[1].value.data_mut().copy_from_slice(&[0.5, -0.25]);
        let w = ps.params()[0].value.data().to_vec();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let y = mlp.forward(&mut tape, &b, x).unwrap();
        let expect = [2.0 * w[0] + 3.0 * w[2] + 0.5, 2.0 * w[1] + 3.0 * w[3] - 0.25];
        assert_eq!(tape.value(y).data(), &expect);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new("theta_T");
        let mlp = Mlp::new(&mut ps, "m", &[4, 2], Activation::Relu, Activation::Identity, |_| Init::KaimingUniform, &mut rng);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.; 3]).unwrap());
        assert!(mlp.forward(&mut tape, &b, x).is_err());
    }
}
