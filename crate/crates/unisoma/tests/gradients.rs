//! Full-model reverse-mode gradients against central differences, with an
//! absolute allowance for roundoff in the difference quotient.
//!
//! `gradcheck` applies the pure relative test; on the full model a few
//! parameters have gradients near 1e-10, where the difference quotient at
//! this step is noise. This test shows every disagreement is of that kind.

use unisoma::suites::{random_model, random_scene, tiny_config};
use unisoma_core::encoder::GammaMode;
use unisoma_core::gradcheck::fd_step;
use unisoma_core::model::{unisoma_forward, ModelConfig};
use unisoma_core::{ModelParams, Tape};

fn loss(model: &unisoma_core::model::Unisoma, input: &unisoma_core::model::ModelInput, p: &ModelParams) -> (Tape, unisoma_core::Var) {
    let mut tape = Tape::new();
    let preds = unisoma_forward(&mut tape, p, &model.config, &model.schema, input).unwrap().predictions;
    let terms: Vec<_> = preds
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let n: usize = tape.shape(y).iter().product();
            let w = (0..n).map(|j| ((i * 31 + j) as f64 * 0.618).sin()).collect();
            let w = tape.constant(unisoma_core::Tensor::new(tape.shape(y).to_vec(), w).unwrap()).unwrap();
            let m = tape.mul(y, w).unwrap();
            tape.sum(m).unwrap()
        })
        .collect();
    let y = tape.add_all(&terms).unwrap();
    (tape, y)
}

fn check(gamma_mode: GammaMode, seed: u64) {
    let sample = random_scene(seed);
    let config = ModelConfig {
        channels: 4,
        slices: 3,
        layers: 2,
        ..tiny_config(gamma_mode)
    };
    let model = random_model(&sample, config, seed).unwrap();
    let input = model.prepare(&sample).unwrap();
    let (mut tape, y) = loss(&model, &input, &model.params);
    let grads = tape.backward(y).unwrap().into_params();
    let mut probe = model.params.clone();
    for (key, value) in model.params.iter() {
        for i in 0..value.len() {
            let x0 = value.data()[i];
            let h = fd_step(x0);
            let mut at = |x: f64| {
                probe.get_mut(key).unwrap().data_mut()[i] = x;
                let (t, y) = loss(&model, &input, &probe);
                t.value(y).item().unwrap()
            };
            let fd = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            at(x0);
            let ad = grads.get(key).map_or(0.0, |g| g.data()[i]);
            let err = (ad - fd).abs();
            assert!(err <= 1e-4 * ad.abs().max(fd.abs()) + 1e-9, "{key}[{i}]: reverse {ad:e}, difference {fd:e}");
        }
    }
}

#[test]
fn points_over_edges() {
    check(GammaMode::PointsOverEdges, 0);
}

#[test]
fn k_value() {
    check(GammaMode::KValue, 1);
}

