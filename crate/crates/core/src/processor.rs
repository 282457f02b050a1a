//! One processor layer: contact modules over solid pairs, allocation of
//! contacts and loads to each deformable solid, then per-solid deformation
//! modules.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result, ResultExt};
use crate::nn::{attention, ffn, layer_norm, linear, linear_no_bias, Activation};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};

/// Floor on `|Σ x′|` in the allocation weights.
pub const ALLOCATION_EPS: f64 = 1e-8;

/// Tokens entering or leaving a processor layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessorState {
    pub deformables: Vec<Var>,
    pub rigids: Vec<Var>,
    pub loads: Vec<Var>,
    /// Contact tokens of the most recent layer, one per contact pair.
    pub contacts: Vec<Var>,
}

impl ProcessorState {
    /// Solid token `i` of `deformables ++ rigids`.
    pub fn solid(&self, i: usize) -> Option<Var> {
        if i < self.deformables.len() {
            self.deformables.get(i).copied()
        } else {
            self.rigids.get(i - self.deformables.len()).copied()
        }
    }
}

/// Names and settings one layer needs to find its parameters.
#[derive(Clone, Debug)]
pub struct LayerLayout<'a> {
    pub prefix: String,
    pub deformables: &'a [String],
    pub loads: &'a [String],
    /// Pair labels and solid indices, one per contact module.
    pub contacts: &'a [(String, usize, usize)],
    pub heads: usize,
    pub activation: Activation,
    pub allocation_softmax: bool,
}

/// `Attn(Linear_{q,k,v}(LN(g_i + g_j)))`.
pub fn contact_forward(tape: &mut Tape, params: &ModelParams, prefix: &str, gi: Var, gj: Var, heads: usize) -> Result<Var> {
    if tape.shape(gi) != tape.shape(gj) {
        return Err(Error::shape("contact_forward", tape.shape(gi), tape.shape(gj)));
    }
    let s = tape.add(gi, gj)?;
    let n = layer_norm(tape, params, &format!("{prefix}/norm"), s)?;
    let q = linear(tape, params, &format!("{prefix}/q"), n)?;
    let k = linear_no_bias(tape, params, &format!("{prefix}/k"), n)?;
    let v = linear(tape, params, &format!("{prefix}/v"), n)?;
    attention(tape, q, k, v, heads)
}

/// Element-wise adaptive weighting `Σ_i (x′_i / Σ x′) ⊙ x_i` with
/// `x′_i = Linear_i(x_i)`; `linears[i]` is the key prefix for item `i`.
/// With `softmax` the weights are a softmax over the item axis instead.
pub fn allocate(tape: &mut Tape, params: &ModelParams, items: &[Var], linears: &[String], softmax: bool) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Config("allocation needs at least one item".into()));
    }
    if items.len() != linears.len() {
        return Err(Error::Config(format!("{} allocation items but {} weight linears", items.len(), linears.len())));
    }
    let shape = tape.shape(items[0]).to_vec();
    if let Some(&bad) = items.iter().find(|&&v| tape.shape(v) != shape.as_slice()) {
        return Err(Error::shape("allocate", &shape, tape.shape(bad)));
    }
    if items.len() == 1 {
        return Ok(items[0]);
    }
    let scores: Vec<Var> = items
        .iter()
        .zip(linears)
        .map(|(&x, key)| linear(tape, params, key, x))
        .collect::<Result<_>>()?;
    let weights: Vec<Var> = if softmax {
        let stacked = tape.stack(&scores)?;
        let s = tape.softmax(stacked, 0)?;
        (0..items.len())
            .map(|i| {
                let w = tape.narrow(s, 0, i, 1)?;
                tape.reshape(w, &shape)
            })
            .collect::<Result<_>>()?
    } else {
        let total = tape.add_all(&scores)?;
        let den = tape.sign_floor(total, ALLOCATION_EPS)?;
        scores.iter().map(|&x| tape.div(x, den)).collect::<Result<_>>()?
    };
    let terms: Vec<Var> = weights
        .iter()
        .zip(items)
        .map(|(&w, &x)| tape.mul(w, x))
        .collect::<Result<_>>()?;
    tape.add_all(&terms)
}

/// `ĉ = allocate(c)`, then `c̄ = ĉ + FFN(LN(ĉ))` with the layer's shared FFN.
pub fn contact_equivalent(
    tape: &mut Tape,
    params: &ModelParams,
    layer_prefix: &str,
    contacts: &[Var],
    linears: &[String],
    activation: Activation,
    softmax: bool,
) -> Result<Var> {
    let c_hat = allocate(tape, params, contacts, linears, softmax)?;
    let n = layer_norm(tape, params, &format!("{layer_prefix}/contact_ffn/norm"), c_hat)?;
    let f = ffn(tape, params, &format!("{layer_prefix}/contact_ffn/ffn"), n, activation)?;
    tape.add(c_hat, f)
}

/// Allocation only; loads get no feed-forward block.
pub fn load_equivalent(tape: &mut Tape, params: &ModelParams, loads: &[Var], linears: &[String], softmax: bool) -> Result<Var> {
    allocate(tape, params, loads, linears, softmax)
}

/// `d′ = Attn(LN(d + f̄ + c̄))`, `d̂ = d′ + FFN(LN(d′))`. Either equivalent may be
/// absent when the scene has no loads or no contacts.
pub fn deform_forward(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    d: Var,
    f_bar: Option<Var>,
    c_bar: Option<Var>,
    heads: usize,
    activation: Activation,
) -> Result<Var> {
    let mut s = d;
    for extra in [f_bar, c_bar].into_iter().flatten() {
        if tape.shape(extra) != tape.shape(d) {
            return Err(Error::shape("deform_forward", tape.shape(d), tape.shape(extra)));
        }
        s = tape.add(s, extra)?;
    }
    let n = layer_norm(tape, params, &format!("{prefix}/norm"), s)?;
    let q = linear(tape, params, &format!("{prefix}/q"), n)?;
    let k = linear_no_bias(tape, params, &format!("{prefix}/k"), n)?;
    let v = linear(tape, params, &format!("{prefix}/v"), n)?;
    let d_prime = attention(tape, q, k, v, heads)?;
    let n2 = layer_norm(tape, params, &format!("{prefix}/ffn_norm"), d_prime)?;
    let f = ffn(tape, params, &format!("{prefix}/ffn"), n2, activation)?;
    tape.add(d_prime, f)
}

pub fn contact_prefix(layer_prefix: &str, pair: &str) -> String {
    format!("{layer_prefix}/contact/{pair}")
}

pub fn alloc_prefix(layer_prefix: &str, solid: &str, stream: &str, item: &str) -> String {
    format!("{layer_prefix}/alloc/{solid}/{stream}/{item}")
}

pub fn deform_prefix(layer_prefix: &str, solid: &str) -> String {
    format!("{layer_prefix}/deform/{solid}")
}

/// Contacts, allocation and deformation for one layer. Rigid and load
/// tokens are passed through as the same variables.
pub fn processor_forward(tape: &mut Tape, params: &ModelParams, layout: &LayerLayout<'_>, state: &ProcessorState) -> Result<ProcessorState> {
    if state.deformables.len() != layout.deformables.len() || state.loads.len() != layout.loads.len() {
        return Err(Error::Config(format!(
            "layer `{}` expects {} deformable and {} load tokens, got {} and {}",
            layout.prefix,
            layout.deformables.len(),
            layout.loads.len(),
            state.deformables.len(),
            state.loads.len()
        )));
    }
    let lp = layout.prefix.as_str();
    let mut contacts = Vec::with_capacity(layout.contacts.len());
    for (label, a, b) in layout.contacts {
        let (ga, gb) = match (state.solid(*a), state.solid(*b)) {
            (Some(ga), Some(gb)) => (ga, gb),
            _ => return Err(Error::Config(format!("contact pair `{label}` references a missing solid"))),
        };
        let c = contact_forward(tape, params, &contact_prefix(lp, label), ga, gb, layout.heads).context_with(|| format!("contact `{label}`"))?;
        contacts.push(c);
    }

    let mut deformables = Vec::with_capacity(state.deformables.len());
    for (&d, solid) in state.deformables.iter().zip(layout.deformables) {
        let f_bar = if state.loads.is_empty() {
            None
        } else {
            let keys: Vec<String> = layout.loads.iter().map(|l| alloc_prefix(lp, solid, "load", l)).collect();
            Some(load_equivalent(tape, params, &state.loads, &keys, layout.allocation_softmax).context_with(|| format!("load allocation for `{solid}`"))?)
        };
        let c_bar = if contacts.is_empty() {
            None
        } else {
            let keys: Vec<String> = layout.contacts.iter().map(|(l, _, _)| alloc_prefix(lp, solid, "contact", l)).collect();
            Some(
                contact_equivalent(tape, params, lp, &contacts, &keys, layout.activation, layout.allocation_softmax)
                    .context_with(|| format!("contact allocation for `{solid}`"))?,
            )
        };
        let d_hat = deform_forward(tape, params, &deform_prefix(lp, solid), d, f_bar, c_bar, layout.heads, layout.activation)
            .context_with(|| format!("deformation of `{solid}`"))?;
        deformables.push(d_hat);
    }
    Ok(ProcessorState {
        deformables,
        rigids: state.rigids.clone(),
        loads: state.loads.clone(),
        contacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FfnParams, LayerNormParams, LinearParams};
    use crate::rng::{stream, Stream};
    use crate::tensor::Tensor;
    use alloc::vec;

    fn attn_params(p: &mut ModelParams, prefix: &str, c: usize, seed: u64) {
        let mut rng = stream(seed, Stream::Test);
        LayerNormParams::unit(c).insert_into(p, &format!("{prefix}/norm"));
        for n in ["q", "k", "v"] {
            LinearParams::init(c, c, &mut rng).insert_into(p, &format!("{prefix}/{n}"));
        }
        p.remove(&format!("{prefix}/k/bias"));
    }

    fn tokens(t: &mut Tape, m: usize, c: usize, seed: u64) -> Var {
        let data = (0..m * c).map(|i| ((i as f64 + 1.0) * 0.731 + seed as f64).sin()).collect();
        t.constant(Tensor::new([m, c], data).unwrap()).unwrap()
    }

    #[test]
    fn contact_is_symmetric() {
        let mut p = ModelParams::new();
        attn_params(&mut p, "c", 4, 1);
        let mut t = Tape::new();
        let (a, b) = (tokens(&mut t, 3, 4, 1), tokens(&mut t, 3, 4, 2));
        let x = contact_forward(&mut t, &p, "c", a, b, 1).unwrap();
        let y = contact_forward(&mut t, &p, "c", b, a, 1).unwrap();
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn single_slice_contact_is_value_projection() {
        let mut p = ModelParams::new();
        attn_params(&mut p, "c", 3, 2);
        let mut t = Tape::new();
        let (a, b) = (tokens(&mut t, 1, 3, 1), tokens(&mut t, 1, 3, 2));
        let out = contact_forward(&mut t, &p, "c", a, b, 1).unwrap();
        let s = t.add(a, b).unwrap();
        let n = layer_norm(&mut t, &p, "c/norm", s).unwrap();
        let v = linear(&mut t, &p, "c/v", n).unwrap();
        assert!(t.value(out).max_abs_diff(t.value(v)) < 1e-15);
    }

    #[test]
    fn allocation_singleton_is_identity() {
        let p = ModelParams::new();
        let mut t = Tape::new();
        let a = tokens(&mut t, 2, 3, 4);
        let out = allocate(&mut t, &p, &[a], &["missing".into()], false).unwrap();
        assert_eq!(out, a);
        assert!(matches!(allocate(&mut t, &p, &[], &[], false), Err(Error::Config(_))));
    }

    #[test]
    fn identical_items_with_shared_linear() {
        let mut p = ModelParams::new();
        LinearParams::init(3, 3, &mut stream(5, Stream::Test)).insert_into(&mut p, "w");
        let mut t = Tape::new();
        let a = tokens(&mut t, 2, 3, 4);
        let keys = vec![String::from("w"); 3];
        for softmax in [false, true] {
            let out = allocate(&mut t, &p, &[a, a, a], &keys, softmax).unwrap();
            assert!(t.value(out).max_abs_diff(t.value(a)) < 1e-12);
        }
    }

    #[test]
    fn two_item_scalar_hand_case() {
        // x′ = 2x + 1 and x′ = -x + 3 on scalars.
        let mut p = ModelParams::new();
        p.insert("a/weight", Tensor::new([1, 1], vec![2.0]).unwrap());
        p.insert("a/bias", Tensor::new([1], vec![1.0]).unwrap());
        p.insert("b/weight", Tensor::new([1, 1], vec![-1.0]).unwrap());
        p.insert("b/bias", Tensor::new([1], vec![3.0]).unwrap());
        let (x1, x2) = (0.5, 4.0);
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([1, 1], vec![x1]).unwrap()).unwrap();
        let b = t.constant(Tensor::new([1, 1], vec![x2]).unwrap()).unwrap();
        let out = allocate(&mut t, &p, &[a, b], &["a".into(), "b".into()], false).unwrap();
        let (s1, s2) = (2.0 * x1 + 1.0, -x2 + 3.0);
        let expect = s1 / (s1 + s2) * x1 + s2 / (s1 + s2) * x2;
        assert!((t.value(out).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn allocation_denominator_is_floored() {
        let mut p = ModelParams::new();
        p.insert("a/weight", Tensor::new([1, 1], vec![1.0]).unwrap());
        p.insert("a/bias", Tensor::new([1], vec![0.0]).unwrap());
        p.insert("b/weight", Tensor::new([1, 1], vec![-1.0]).unwrap());
        p.insert("b/bias", Tensor::new([1], vec![0.0]).unwrap());
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
        let out = allocate(&mut t, &p, &[a, a], &["a".into(), "b".into()], false).unwrap();
        assert!(t.value(out).data()[0].is_finite());
    }

    #[test]
    fn contact_equivalent_with_zero_ffn_is_passthrough() {
        let mut p = ModelParams::new();
        LayerNormParams::unit(3).insert_into(&mut p, "l/contact_ffn/norm");
        FfnParams::zeros(3, 6, 3).insert_into(&mut p, "l/contact_ffn/ffn");
        let mut t = Tape::new();
        let c = tokens(&mut t, 2, 3, 8);
        let out = contact_equivalent(&mut t, &p, "l", &[c], &["x".into()], Activation::Gelu, false).unwrap();
        assert_eq!(t.value(out), t.value(c));
    }

    #[test]
    fn deform_hand_case() {
        // M = 2, C = 1. Layer norm over one channel maps everything to the shift.
        let mut p = ModelParams::new();
        p.insert("d/norm/scale", Tensor::new([1], vec![1.0]).unwrap());
        p.insert("d/norm/shift", Tensor::new([1], vec![0.0]).unwrap());
        for (n, w, b) in [("q", 1.0, 0.5), ("k", 2.0, 0.0), ("v", 3.0, 2.0)] {
            p.insert(format!("d/{n}/weight"), Tensor::new([1, 1], vec![w]).unwrap());
            if n != "k" {
                p.insert(format!("d/{n}/bias"), Tensor::new([1], vec![b]).unwrap());
            }
        }
        p.insert("d/ffn_norm/scale", Tensor::new([1], vec![1.0]).unwrap());
        p.insert("d/ffn_norm/shift", Tensor::new([1], vec![0.25]).unwrap());
        p.insert("d/ffn/fc1/weight", Tensor::new([1, 2], vec![1.0, -1.0]).unwrap());
        p.insert("d/ffn/fc1/bias", Tensor::new([2], vec![0.1, 0.2]).unwrap());
        p.insert("d/ffn/fc2/weight", Tensor::new([2, 1], vec![0.5, 0.3]).unwrap());
        p.insert("d/ffn/fc2/bias", Tensor::new([1], vec![-0.2]).unwrap());
        let mut t = Tape::new();
        let d = t.constant(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let f = t.constant(Tensor::new([2, 1], vec![0.5, -3.0]).unwrap()).unwrap();
        let out = deform_forward(&mut t, &p, "d", d, Some(f), None, 1, Activation::Gelu).unwrap();

        // Normalized inputs are all 0: q = 0.5, k = 0, v = 2 for both slices,
        // so attention returns 2 everywhere. The FFN then sees LN(2) + 0.25.
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
        let h = 0.25;
        let ffn_out = 0.5 * gelu(h + 0.1) + 0.3 * gelu(-h + 0.2) - 0.2;
        for r in 0..2 {
            assert!((t.value(out).data()[r] - (2.0 + ffn_out)).abs() < 1e-12);
        }
    }
}
