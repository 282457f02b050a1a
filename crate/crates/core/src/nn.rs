//! Linear, layer-norm, feed-forward and attention layers.
//!
//! Layers read their weights from a [`ModelParams`] bag under a key prefix:
//! a linear layer at `p` uses `p/weight` (`C_in × C_out`) and `p/bias`
//! (`C_out`); a layer norm uses `p/scale` and `p/shift`; a feed-forward
//! block uses `p/fc1/…` and `p/fc2/…`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    /// Uniform `±1/sqrt(c_in)` initialization for weight and bias.
    pub fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(c_in.max(1) as f64);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        LinearParams {
            weight: Tensor::new([c_in, c_out], draw(c_in * c_out)).expect("shape"),
            bias: Tensor::new([c_out], draw(c_out)).expect("shape"),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros([c_in, c_out]),
            bias: Tensor::zeros([c_out]),
        }
    }

    pub fn identity(n: usize) -> Self {
        LinearParams {
            weight: Tensor::eye(n),
            bias: Tensor::zeros([n]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn insert_into(self, params: &mut ModelParams, prefix: &str) {
        params.insert(format!("{prefix}/weight"), self.weight);
        params.insert(format!("{prefix}/bias"), self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNormParams {
    pub fn unit(c: usize) -> Self {
        LayerNormParams {
            scale: Tensor::ones([c]),
            shift: Tensor::zeros([c]),
        }
    }

    pub fn insert_into(self, params: &mut ModelParams, prefix: &str) {
        params.insert(format!("{prefix}/scale"), self.scale);
        params.insert(format!("{prefix}/shift"), self.shift);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Two linears `C → C_hidden → C_out` around an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    pub activation: Activation,
}

impl FfnParams {
    pub fn init(c: usize, hidden: usize, c_out: usize, rng: &mut Rng) -> Self {
        FfnParams {
            fc1: LinearParams::init(c, hidden, rng),
            fc2: LinearParams::init(hidden, c_out, rng),
            activation: Activation::Gelu,
        }
    }

    pub fn zeros(c: usize, hidden: usize, c_out: usize) -> Self {
        FfnParams {
            fc1: LinearParams::zeros(c, hidden),
            fc2: LinearParams::zeros(hidden, c_out),
            activation: Activation::Gelu,
        }
    }

    pub fn insert_into(self, params: &mut ModelParams, prefix: &str) {
        self.fc1.insert_into(params, &format!("{prefix}/fc1"));
        self.fc2.insert_into(params, &format!("{prefix}/fc2"));
    }
}

/// `x · W + b` over the last axis.
pub fn linear(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}/weight"))?;
    let b = tape.param(params, &format!("{prefix}/bias"))?;
    let c_in = tape.shape(w)[0];
    if tape.shape(x).last() != Some(&c_in) {
        return Err(Error::shape("linear", tape.shape(x), tape.shape(w)));
    }
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `x W` without a bias. Used for attention keys, where a bias adds the
/// same amount to every score in a row and so never affects the softmax.
pub fn linear_no_bias(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}/weight"))?;
    if tape.shape(x).last() != Some(&tape.shape(w)[0]) {
        return Err(Error::shape("linear_no_bias", tape.shape(x), tape.shape(w)));
    }
    tape.matmul(x, w)
}

pub fn layer_norm(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let scale = tape.param(params, &format!("{prefix}/scale"))?;
    let shift = tape.param(params, &format!("{prefix}/shift"))?;
    if tape.shape(x).last() != tape.shape(scale).last() {
        return Err(Error::shape("layer_norm", tape.shape(x), tape.shape(scale)));
    }
    let n = tape.normalize(x, LAYER_NORM_EPS)?;
    let y = tape.mul(n, scale)?;
    tape.add(y, shift)
}

pub fn activate(tape: &mut Tape, x: Var, activation: Activation) -> Result<Var> {
    match activation {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
    }
}

pub fn ffn(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var, activation: Activation) -> Result<Var> {
    let h = linear(tape, params, &format!("{prefix}/fc1"), x)?;
    let h = activate(tape, h, activation)?;
    linear(tape, params, &format!("{prefix}/fc2"), h)
}

/// `Softmax(Q Kᵀ / sqrt(d)) V` for `M × C` inputs, with `C` split evenly
/// across `heads` (each head uses `d = C / heads`).
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("attention", &shape, tape.shape(k)));
    }
    let c = shape[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels cannot be split into {heads} heads")));
    }
    let d = c / heads;
    let head = |tape: &mut Tape, q: Var, k: Var, v: Var| -> Result<Var> {
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(d as f64))?;
        let a = tape.softmax(scores, 1)?;
        tape.matmul(a, v)
    };
    if heads == 1 {
        return head(tape, q, k, v);
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * d, d)?;
        let kh = tape.narrow(k, 1, h * d, d)?;
        let vh = tape.narrow(v, 1, h * d, d)?;
        outs.push(head(tape, qh, kh, vh)?);
    }
    tape.concat(&outs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::{stream, Stream};
    use alloc::vec;

    fn bag(prefix: &str, lin: LinearParams) -> ModelParams {
        let mut p = ModelParams::new();
        lin.insert_into(&mut p, prefix);
        p
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap();
        let p = bag("l", LinearParams::identity(2));
        let y = eval(|t| {
            let xv = t.constant(x.clone())?;
            linear(t, &p, "l", xv)
        });
        assert_eq!(y, x);

        let mut lin = LinearParams::zeros(2, 3);
        lin.bias = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = bag("l", lin);
        let y = eval(|t| {
            let xv = t.constant(Tensor::zeros([2, 2]))?;
            linear(t, &p, "l", xv)
        });
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_hand_case() {
        // [1, 2] · [[1, 2], [3, 4]] + [0.5, -1] = [7.5, 9]
        let lin = LinearParams {
            weight: Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            bias: Tensor::new([2], vec![0.5, -1.0]).unwrap(),
        };
        let p = bag("l", lin);
        let y = eval(|t| {
            let xv = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap())?;
            linear(t, &p, "l", xv)
        });
        assert_eq!(y.data(), &[7.5, 9.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let p = bag("l", LinearParams::zeros(3, 2));
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2])).unwrap();
        assert!(matches!(linear(&mut t, &p, "l", x), Err(Error::ShapeMismatch { .. })));
    }

    fn ln_bag(c: usize) -> ModelParams {
        let mut p = ModelParams::new();
        LayerNormParams::unit(c).insert_into(&mut p, "n");
        p
    }

    #[test]
    fn layer_norm_examples() {
        let p = ln_bag(3);
        let y = eval(|t| {
            let x = t.constant(Tensor::full([1, 3], 4.0))?;
            layer_norm(t, &p, "n", x)
        });
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        // already normalized: mean 0, population variance 1
        let s = libm::sqrt(1.5);
        let row = [-s, 0.0, s];
        let y = eval(|t| {
            let x = t.constant(Tensor::from_rows(&[row]).unwrap())?;
            layer_norm(t, &p, "n", x)
        });
        for (a, b) in y.data().iter().zip(row) {
            assert!((a - b).abs() < 1e-4);
        }

        let p = ln_bag(2);
        let y = eval(|t| {
            let x = t.constant(Tensor::from_rows(&[[1.0, 3.0]]).unwrap())?;
            layer_norm(t, &p, "n", x)
        });
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn ffn_zero_params_give_zero() {
        let mut p = ModelParams::new();
        FfnParams::zeros(3, 6, 3).insert_into(&mut p, "f");
        let y = eval(|t| {
            let x = t.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap())?;
            ffn(t, &p, "f", x, Activation::Gelu)
        });
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ffn_identity_weights_hand_point() {
        // W1 = W2 = I, zero bias: y = GELU(x) = x * Phi(x). At x = 1,
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746068543.
        let mut p = ModelParams::new();
        FfnParams {
            fc1: LinearParams::identity(2),
            fc2: LinearParams::identity(2),
            activation: Activation::Gelu,
        }
        .insert_into(&mut p, "f");
        let y = eval(|t| {
            let x = t.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap())?;
            ffn(t, &p, "f", x, Activation::Gelu)
        });
        assert!((y.data()[0] - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let mut rng = stream(3, Stream::Test);
        let mut p = ModelParams::new();
        FfnParams::init(4, 8, 4, &mut rng).insert_into(&mut p, "f");
        let x = Tensor::new([3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let report = grad_check(
            |t, x| {
                let y = ffn(t, &p, "f", x, Activation::Gelu)?;
                let y2 = t.square(y)?;
                t.sum(y2)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn attention_single_token_is_identity_on_v() {
        let y = eval(|t| {
            let q = t.constant(Tensor::from_rows(&[[0.3, -1.0]]).unwrap())?;
            let k = t.constant(Tensor::from_rows(&[[2.0, 5.0]]).unwrap())?;
            let v = t.constant(Tensor::from_rows(&[[7.0, -3.0]]).unwrap())?;
            attention(t, q, k, v, 1)
        });
        assert_eq!(y.data(), &[7.0, -3.0]);
    }

    #[test]
    fn attention_zero_values() {
        let y = eval(|t| {
            let q = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())?;
            let v = t.constant(Tensor::zeros([2, 2]))?;
            attention(t, q, q, v, 1)
        });
        assert_eq!(y, Tensor::zeros([2, 2]));
    }

    #[test]
    fn attention_orthogonal_hand_case() {
        // q = k = I2, C = 2: scores = I / sqrt 2, so each row weights its own
        // value by a = e^{1/sqrt2} / (e^{1/sqrt2} + 1) and the other by 1 - a.
        let a = libm::exp(1.0 / libm::sqrt(2.0));
        let a = a / (a + 1.0);
        let y = eval(|t| {
            let q = t.constant(Tensor::eye(2))?;
            let v = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap())?;
            attention(t, q, q, v, 1)
        });
        let expect = [
            a * 1.0 + (1.0 - a) * 3.0,
            a * 2.0 + (1.0 - a) * 4.0,
            (1.0 - a) * 1.0 + a * 3.0,
            (1.0 - a) * 2.0 + a * 4.0,
        ];
        for (y, e) in y.data().iter().zip(expect) {
            assert!((y - e).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = stream(8, Stream::Test);
        let mk = |rng: &mut Rng| Tensor::new([5, 4], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (q, k) = (mk(&mut rng), mk(&mut rng));
        let v = Tensor::full([5, 4], 3.25);
        let y = eval(|t| {
            let q = t.constant(q)?;
            let k = t.constant(k)?;
            let v = t.constant(v)?;
            attention(t, q, k, v, 2)
        });
        for x in y.data() {
            assert!((x - 3.25).abs() < 1e-12);
        }
    }
}
