//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over coordinates.
    pub max_rel_err: f64,
    /// Flat coordinate at which `max_rel_err` occurred.
    pub worst_index: usize,
    /// Reverse-mode and finite-difference values at `worst_index`.
    pub worst_ad: f64,
    pub worst_fd: f64,
    /// First coordinate where either gradient was NaN or infinite.
    pub non_finite_index: Option<usize>,
    pub checked: usize,
    pub pass: bool,
}

/// Step used for coordinate `x`: `1e-5 * max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

#[derive(Default)]
struct Accum {
    max_rel_err: f64,
    worst_index: usize,
    worst: (f64, f64),
    non_finite_index: Option<usize>,
    checked: usize,
}

impl Accum {
    fn record(&mut self, index: usize, ad: f64, fd: f64) {
        self.checked += 1;
        if !ad.is_finite() || !fd.is_finite() {
            self.non_finite_index.get_or_insert(index);
            return;
        }
        let e = relative_error(ad, fd);
        if e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst_index = index;
            self.worst = (ad, fd);
        }
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            pass: self.non_finite_index.is_none() && self.max_rel_err <= tol,
            max_rel_err: self.max_rel_err,
            worst_index: self.worst_index,
            worst_ad: self.worst.0,
            worst_fd: self.worst.1,
            non_finite_index: self.non_finite_index,
            checked: self.checked,
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.shape(v).to_vec()))
}

fn eval_at<F>(f: &F, x: &Tensor) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut run = || -> Result<f64> {
        let xv = tape.variable(x.clone())?;
        let y = f(&mut tape, xv)?;
        scalar_of(&tape, y)
    };
    run().unwrap_or(f64::NAN)
}

/// Checks the gradient of the scalar function `f` at `x` coordinate by
/// coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone())?;
    let y = f(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let ad = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut acc = Accum::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let h = fd_step(x0);
        probe.data_mut()[i] = x0 + h;
        let fp = eval_at(&f, &probe);
        probe.data_mut()[i] = x0 - h;
        let fm = eval_at(&f, &probe);
        probe.data_mut()[i] = x0;
        acc.record(i, ad.data()[i], (fp - fm) / (2.0 * h));
    }
    Ok(acc.finish(tol))
}

/// Per-parameter report from [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub key: alloc::string::String,
    pub report: GradCheckReport,
}

/// Checks the gradient of a scalar loss with respect to every tensor in
/// `params`. `loss` builds the forward pass from a parameter bag.
pub fn grad_check_params<F>(loss: F, params: &ModelParams, tol: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ModelParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = loss(&mut tape, params)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?.into_params();

    let eval = |p: &ModelParams| -> f64 {
        let mut tape = Tape::new();
        loss(&mut tape, p)
            .and_then(|y| scalar_of(&tape, y))
            .unwrap_or(f64::NAN)
    };

    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (key, value) in params.iter() {
        let ad = grads
            .get(key)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut acc = Accum::default();
        for i in 0..value.len() {
            let x0 = value.data()[i];
            let h = fd_step(x0);
            probe.get_mut(key).expect("key").data_mut()[i] = x0 + h;
            let fp = eval(&probe);
            probe.get_mut(key).expect("key").data_mut()[i] = x0 - h;
            let fm = eval(&probe);
            probe.get_mut(key).expect("key").data_mut()[i] = x0;
            acc.record(i, ad.data()[i], (fp - fm) / (2.0 * h));
        }
        out.push(ParamCheck {
            key: key.clone(),
            report: acc.finish(tol),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::CustomOp;
    use alloc::boxed::Box;
    use alloc::vec;

    fn random_x() -> Tensor {
        Tensor::new([2, 3], vec![0.3, -1.7, 2.2, 0.05, -0.4, 1.1]).unwrap()
    }

    #[test]
    fn sum_of_squares_passes() {
        let r = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &random_x(),
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn constant_function_passes() {
        let r = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                t.add_scalar(s, 4.0)
            },
            &random_x(),
            1e-4,
        )
        .unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
    }

    /// Square with a deliberately wrong derivative (x instead of 2x).
    struct BrokenSquare;

    impl CustomOp for BrokenSquare {
        fn name(&self) -> &'static str {
            "broken_square"
        }
        fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
            vec![grad.mul(inputs[0]).unwrap()]
        }
    }

    #[test]
    fn wrong_gradient_rule_fails() {
        let r = grad_check(
            |t, x| {
                let v = t.value(x).map(|a| a * a);
                let y = t.custom(Box::new(BrokenSquare), &[x], v)?;
                t.sum(y)
            },
            &random_x(),
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_reports_coordinate() {
        struct NanGrad;
        impl CustomOp for NanGrad {
            fn name(&self) -> &'static str {
                "nan_grad"
            }
            fn backward(&self, inputs: &[&Tensor], _o: &Tensor, _g: &Tensor) -> Vec<Tensor> {
                let mut d = Tensor::zeros(inputs[0].shape().to_vec());
                d.data_mut()[4] = f64::NAN;
                vec![d]
            }
        }
        let r = grad_check(
            |t, x| {
                let v = t.value(x).clone();
                let y = t.custom(Box::new(NanGrad), &[x], v)?;
                t.sum(y)
            },
            &random_x(),
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.non_finite_index, Some(4));
    }
}
