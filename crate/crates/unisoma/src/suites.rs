//! Identity and gradient suites behind `verify` and `gradcheck`.

use rand::Rng as _;
use serde::Serialize;
use unisoma_core::encoder::{compose_slices, encode_object, joint_encode, EncoderConfig, EncoderParams, GammaMode, ObjectInput};
use unisoma_core::gradcheck::{grad_check, grad_check_params};
use unisoma_core::model::{unisoma_forward, ModelConfig, SceneSchema, TargetSpace, Unisoma};
use unisoma_core::nn::{attention, ffn, layer_norm, linear, Activation, FfnParams, LayerNormParams, LinearParams};
use unisoma_core::processor::{allocate, contact_forward, contact_prefix};
use unisoma_core::rng::{mix, stream, Rng, Stream};
use unisoma_core::scene::{LoadMode, LoadObject, NormStats, Quantity, Role, SceneSample, SolidObject, Target, GEOMETRY};
use unisoma_core::{ModelParams, Result, Tape, Tensor, Var};

/// Result of one named check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    /// Largest observed error (absolute or relative, per check).
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, cases: usize, max_err: f64, tol: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            cases,
            max_err,
            tol,
            pass: max_err <= tol,
            detail: String::new(),
        }
    }

    fn failed(name: impl Into<String>, detail: String) -> Self {
        CheckOutcome {
            name: name.into(),
            cases: 0,
            max_err: f64::INFINITY,
            tol: 0.0,
            pass: false,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<CheckOutcome>) -> Self {
        r.unwrap_or_else(|e| CheckOutcome::failed(name, e.to_string()))
    }
}

pub fn all_pass(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.pass)
}

fn random_tensor(rng: &mut Rng, shape: impl Into<Vec<usize>>, scale: f64) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn random_points(rng: &mut Rng, n: usize) -> Tensor {
    random_tensor(rng, [n, 3], 1.0)
}

fn random_object(rng: &mut Rng, c_raw: usize, k: usize) -> Result<ObjectInput> {
    let n = rng.random_range(k + 1..k + 10);
    let pos = random_points(rng, n);
    ObjectInput::with_knn(random_tensor(rng, [n, c_raw], 1.0), &pos, k)
}

fn encoder_bag(rng: &mut Rng, c_raw: usize, c: usize, m: usize) -> ModelParams {
    let mut params = ModelParams::new();
    EncoderParams::init(c_raw, c, m, rng).insert_into(&mut params, "enc");
    params
}

/// Joint encoding with one object's weights masked equals encoding the
/// other object alone.
pub fn decomposition(seed: u64, cases: usize) -> CheckOutcome {
    let name = "slice decomposition";
    CheckOutcome::from_result(
        name,
        (|| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut rng = stream(mix(seed, case as u64), Stream::Test);
                let (c_raw, c, m, k) = (rng.random_range(1..5), rng.random_range(2..9), rng.random_range(1..7), rng.random_range(1..4));
                let gamma_mode = if case % 2 == 0 { GammaMode::PointsOverEdges } else { GammaMode::KValue };
                let cfg = EncoderConfig { gamma_mode, k };
                let params = encoder_bag(&mut rng, c_raw, c, m);
                let a = random_object(&mut rng, c_raw, k)?;
                let b = random_object(&mut rng, c_raw, k)?;
                let mut tape = Tape::new();
                let alone = encode_object(&mut tape, &params, "enc", &a, cfg)?;
                let joint = joint_encode(&mut tape, &params, "enc", &a, &b, true, cfg)?;
                worst = worst
                    .max(tape.value(alone.tokens).max_abs_diff(tape.value(joint.tokens)))
                    .max(tape.value(alone.mass).max_abs_diff(tape.value(joint.mass)));
            }
            Ok(CheckOutcome::new(name, cases, worst, 1e-10))
        })(),
    )
}

/// Composing two separate embeddings with their slice masses reproduces
/// the joint embedding.
pub fn composition(seed: u64, cases: usize, gamma_mode: GammaMode) -> CheckOutcome {
    let name = format!("slice composition ({gamma_mode:?})");
    CheckOutcome::from_result(
        &name,
        (|| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut rng = stream(mix(seed, case as u64), Stream::Test);
                let (c_raw, c, m, k) = (rng.random_range(1..5), rng.random_range(2..9), rng.random_range(1..7), rng.random_range(1..4));
                let cfg = EncoderConfig { gamma_mode, k };
                let params = encoder_bag(&mut rng, c_raw, c, m);
                let a = random_object(&mut rng, c_raw, k)?;
                let b = random_object(&mut rng, c_raw, k)?;
                let mut tape = Tape::new();
                let ea = encode_object(&mut tape, &params, "enc", &a, cfg)?;
                let eb = encode_object(&mut tape, &params, "enc", &b, cfg)?;
                let joint = joint_encode(&mut tape, &params, "enc", &a, &b, false, cfg)?;
                let (z, empty) = compose_slices(tape.value(ea.tokens), tape.value(ea.mass), tape.value(eb.tokens), tape.value(eb.mass))?;
                if !empty.is_empty() {
                    return Err(unisoma_core::Error::Config(format!("case {case} produced empty slices {empty:?}")));
                }
                worst = worst.max(z.max_abs_diff(tape.value(joint.tokens)));
            }
            Ok(CheckOutcome::new(name.clone(), cases, worst, 1e-9))
        })(),
    )
}

/// A small random scene: two deformables, one rigid, two loads from the
/// rigid and three contact pairs. Positions are random, so kNN has no ties.
pub fn random_scene(seed: u64) -> SceneSample {
    let mut rng = stream(seed, Stream::Test);
    let solid = |name: &str, role: Role, n: usize, rng: &mut Rng| {
        let pts = random_points(rng, n);
        let props = if role == Role::Deformable {
            random_tensor(rng, [n, 1], 1.0).map(|v| 1.0 + 0.5 * v)
        } else {
            Tensor::zeros([n, 0])
        };
        SolidObject::new(name, role, pts, props).expect("valid solid")
    };
    let a = solid("a", Role::Deformable, 7, &mut rng);
    let b = solid("b", Role::Deformable, 6, &mut rng);
    let r = solid("r", Role::Rigid, 5, &mut rng);
    let mut loads = Vec::new();
    for name in ["push", "twist"] {
        let next = r.points.add(&random_tensor(&mut rng, [5, 3], 0.1)).expect("same shape");
        loads.push(LoadObject::from_positions(name, 2, &r.points, &next, LoadMode::Delta).expect("valid load"));
    }
    let targets = [&a, &b]
        .iter()
        .map(|o| {
            let geo = o.points.add(&random_tensor(&mut rng, [o.len(), 3], 0.05)).expect("same shape");
            let stress = random_tensor(&mut rng, [o.len(), 1], 1.0);
            Target {
                values: Tensor::concat(&[&geo, &stress], 1).expect("same rows"),
                quantities: vec![Quantity::new(GEOMETRY, 0, 3), Quantity::new("stress", 3, 1)],
            }
        })
        .collect();
    SceneSample {
        deformables: vec![a, b],
        rigids: vec![r],
        loads,
        contact_pairs: vec![(0, 1), (0, 2), (1, 2)],
        targets,
        step_index: 0,
        sample_id: 0,
        seed,
        certificate: None,
    }
}

/// A model with random parameters and statistics taken from `sample`.
/// Decoder output layers are re-drawn so predictions are not near zero.
pub fn random_model(sample: &SceneSample, config: ModelConfig, seed: u64) -> Result<Unisoma> {
    let schema = SceneSchema::from_sample(sample)?;
    let stats = NormStats::compute(std::slice::from_ref(sample))?;
    let mut model = Unisoma::new(config, schema, stats, TargetSpace::Absolute, seed)?;
    let mut rng = stream(seed, Stream::Test);
    for (key, t) in model.params.iter_mut() {
        if key.starts_with("decoder/") && key.contains("/out/") {
            *t = random_tensor(&mut rng, t.shape().to_vec(), 0.5);
        }
    }
    Ok(model)
}

pub fn tiny_config(gamma_mode: GammaMode) -> ModelConfig {
    ModelConfig {
        channels: 8,
        slices: 4,
        layers: 2,
        k: 2,
        heads: 2,
        gamma_mode,
        ..ModelConfig::default()
    }
}

/// Rigid and load tokens leave every layer bit-for-bit unchanged, and all
/// slice weight rows sum to one.
pub fn structural(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let run = || -> Result<(f64, f64)> {
        let (mut pass_err, mut row_err) = (0.0f64, 0.0f64);
        for case in 0..cases {
            let s = mix(seed, case as u64);
            let sample = random_scene(s);
            let model = random_model(&sample, tiny_config(GammaMode::PointsOverEdges), s)?;
            let input = model.prepare(&sample)?;
            let mut tape = Tape::new();
            let out = unisoma_forward(&mut tape, &model.params, &model.config, &model.schema, &input)?;
            let first = &out.states[0];
            for state in &out.states[1..] {
                for (x, y) in first.rigids.iter().zip(&state.rigids).chain(first.loads.iter().zip(&state.loads)) {
                    let (x, y) = (tape.value(*x), tape.value(*y));
                    let same = x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        pass_err = pass_err.max(x.max_abs_diff(y).max(f64::MIN_POSITIVE));
                    }
                }
            }
            for emb in &out.deformable_embeddings {
                for w in std::iter::once(emb.point_weights).chain(emb.edge_weights) {
                    let sums = tape.value(w).sum_axis(1)?;
                    row_err = sums.data().iter().fold(row_err, |m, v| m.max((v - 1.0).abs()));
                }
            }
        }
        Ok((pass_err, row_err))
    };
    match run() {
        Ok((p, r)) => vec![
            CheckOutcome::new("rigid and load pass-through", cases, p, 0.0),
            CheckOutcome::new("slice weight rows sum to one", cases, r, 1e-6),
        ],
        Err(e) => vec![CheckOutcome::failed("structural invariants", e.to_string())],
    }
}

/// `contact(gi, gj)` and `contact(gj, gi)` agree bit for bit.
pub fn contact_symmetry(seed: u64, cases: usize) -> CheckOutcome {
    let name = "contact argument-order symmetry";
    CheckOutcome::from_result(
        name,
        (|| {
            let mut mismatches = 0usize;
            for case in 0..cases {
                let s = mix(seed, case as u64);
                let sample = random_scene(s);
                let model = random_model(&sample, tiny_config(GammaMode::PointsOverEdges), s)?;
                let mut rng = stream(s, Stream::Noise);
                let (m, c) = (model.config.slices, model.config.channels);
                let label = &model.schema.contacts[0].label;
                let prefix = contact_prefix("processor/0", label);
                let mut tape = Tape::new();
                let gi = tape.constant(random_tensor(&mut rng, [m, c], 1.0))?;
                let gj = tape.constant(random_tensor(&mut rng, [m, c], 1.0))?;
                let ab = contact_forward(&mut tape, &model.params, &prefix, gi, gj, model.config.heads)?;
                let ba = contact_forward(&mut tape, &model.params, &prefix, gj, gi, model.config.heads)?;
                let same = tape.value(ab).data().iter().zip(tape.value(ba).data()).all(|(x, y)| x.to_bits() == y.to_bits());
                mismatches += usize::from(!same);
            }
            Ok(CheckOutcome::new(name, cases, mismatches as f64, 0.0))
        })(),
    )
}

/// Allocation over one item returns that item unchanged.
pub fn singleton_allocation(seed: u64, cases: usize) -> CheckOutcome {
    let name = "singleton allocation identity";
    CheckOutcome::from_result(
        name,
        (|| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut rng = stream(mix(seed, case as u64), Stream::Test);
                let x = random_tensor(&mut rng, [4, 6], 3.0);
                for softmax in [false, true] {
                    let mut tape = Tape::new();
                    let v = tape.constant(x.clone())?;
                    let out = allocate(&mut tape, &ModelParams::new(), &[v], &["unused".to_string()], softmax)?;
                    let same = tape.value(out).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        worst = worst.max(tape.value(out).max_abs_diff(&x).max(f64::MIN_POSITIVE));
                    }
                }
            }
            Ok(CheckOutcome::new(name, cases, worst, 0.0))
        })(),
    )
}

/// Reorders the points of object `obj` (an index into
/// `deformables ++ rigids`), carrying along targets and loads it emits.
pub fn permute_object(sample: &SceneSample, obj: usize, perm: &[usize]) -> Result<SceneSample> {
    let mut out = sample.clone();
    let n_def = out.deformables.len();
    let target = if obj < n_def { &mut out.deformables[obj] } else { &mut out.rigids[obj - n_def] };
    target.points = target.points.permute_rows(perm)?;
    target.properties = target.properties.permute_rows(perm)?;
    if obj < n_def {
        out.targets[obj].values = out.targets[obj].values.permute_rows(perm)?;
    }
    for load in out.loads.iter_mut().filter(|l| l.source == obj) {
        load.origin = load.origin.permute_rows(perm)?;
        load.motion = load.motion.permute_rows(perm)?;
    }
    out.certificate = None;
    Ok(out)
}

fn random_perm(rng: &mut Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Permuting the points of an object permutes that object's prediction
/// rows and leaves every other prediction unchanged.
pub fn permutation(seed: u64, cases: usize) -> CheckOutcome {
    let name = "permutation equivariance";
    CheckOutcome::from_result(
        name,
        (|| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let s = mix(seed, case as u64);
                let sample = random_scene(s);
                let model = random_model(&sample, tiny_config(GammaMode::PointsOverEdges), s)?;
                let base = model.predict(&sample)?;
                let mut rng = stream(s, Stream::Shuffle);
                let obj = case % sample.num_objects();
                let n = sample.object(obj).map_or(0, |o| o.len());
                let perm = random_perm(&mut rng, n);
                let moved = model.predict(&permute_object(&sample, obj, &perm)?)?;
                for (i, (p, q)) in base.iter().zip(&moved).enumerate() {
                    let expect = if i == obj { p.permute_rows(&perm)? } else { p.clone() };
                    worst = worst.max(expect.max_abs_diff(q));
                }
            }
            Ok(CheckOutcome::new(name, cases, worst, 1e-9))
        })(),
    )
}

/// Everything `verify` runs.
pub fn verify_suite(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut out = vec![
        decomposition(seed, cases),
        composition(seed, cases, GammaMode::PointsOverEdges),
        composition(seed, cases, GammaMode::KValue),
    ];
    out.extend(structural(seed, cases.div_ceil(10)));
    out.push(contact_symmetry(seed, cases.div_ceil(10)));
    out.push(singleton_allocation(seed, cases.div_ceil(10)));
    out.push(permutation(seed, 20));
    out
}

/// Relative tolerance of every gradient check.
pub const GRAD_TOL: f64 = 1e-4;

type Probe = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

struct ProbeCtx {
    c: Tensor,
    c_pos: Tensor,
    right: Tensor,
    left: Tensor,
    params: ModelParams,
}

/// `Σ R ⊙ y` with a fixed random `R`, so every output entry matters.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, Stream::Test);
    let r = random_tensor(&mut rng, tape.shape(y).to_vec(), 1.0);
    let r = tape.constant(r)?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn op_probes(seed: u64) -> Vec<(&'static str, Tensor, Probe)> {
    let mut rng = stream(seed, Stream::Test);
    let x = random_tensor(&mut rng, [3, 4], 1.0);
    // Entries kept clear of the kinks of relu, clamp_min and sign_floor.
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let positive = x.map(|v| 0.5 + v.abs());
    let c = random_tensor(&mut rng, [3, 4], 1.0);
    let c_pos = c.map(|v| 0.5 + v.abs());
    let right = random_tensor(&mut rng, [4, 5], 1.0);
    let left = random_tensor(&mut rng, [2, 3], 1.0);
    let mut params = ModelParams::new();
    LinearParams::init(4, 6, &mut rng).insert_into(&mut params, "lin");
    LayerNormParams::unit(4).insert_into(&mut params, "ln");
    FfnParams::init(4, 8, 4, &mut rng).insert_into(&mut params, "ffn");
    for (k, t) in params.iter_mut() {
        if k.starts_with("ln/") {
            *t = t.add(&random_tensor(&mut rng, t.shape().to_vec(), 0.5)).expect("same shape");
        }
    }
    let ctx = std::rc::Rc::new(ProbeCtx {
        c,
        c_pos,
        right,
        left,
        params,
    });
    let probe = |name: &'static str, x: &Tensor, body: fn(&mut Tape, Var, &ProbeCtx) -> Result<Var>| {
        let ctx = ctx.clone();
        let s = seed ^ name.len() as u64;
        let f: Probe = Box::new(move |t: &mut Tape, v: Var| {
            let y = body(t, v, &ctx)?;
            weighted(t, y, s)
        });
        (name, x.clone(), f)
    };
    vec![
        probe("add", &x, |t, v, cx| {
            let c = t.constant(cx.c.clone())?;
            t.add(v, c)
        }),
        probe("sub", &x, |t, v, cx| {
            let c = t.constant(cx.c.clone())?;
            t.sub(c, v)
        }),
        probe("mul", &x, |t, v, _cx| t.mul(v, v)),
        probe("div (numerator)", &x, |t, v, cx| {
            let c = t.constant(cx.c_pos.clone())?;
            t.div(v, c)
        }),
        probe("div (denominator)", &positive, |t, v, cx| {
            let c = t.constant(cx.c.clone())?;
            t.div(c, v)
        }),
        probe("add_all", &x, |t, v, _cx| {
            let s = t.square(v)?;
            t.add_all(&[v, s, v])
        }),
        probe("scale", &x, |t, v, _cx| t.scale(v, -2.5)),
        probe("add_scalar", &x, |t, v, _cx| {
            let y = t.add_scalar(v, 0.7)?;
            t.square(y)
        }),
        probe("neg", &x, |t, v, _cx| t.neg(v)),
        probe("square", &x, |t, v, _cx| t.square(v)),
        probe("sqrt", &positive, |t, v, _cx| t.sqrt(v)),
        probe("exp", &x, |t, v, _cx| t.exp(v)),
        probe("gelu", &x, |t, v, _cx| t.gelu(v)),
        probe("relu", &away, |t, v, _cx| t.relu(v)),
        probe("clamp_min", &away, |t, v, _cx| t.clamp_min(v, 0.0)),
        probe("sign_floor", &away, |t, v, _cx| t.sign_floor(v, 0.05)),
        probe("sum", &x, |t, v, _cx| {
            let s = t.square(v)?;
            t.sum(s)
        }),
        probe("mean", &x, |t, v, _cx| {
            let s = t.square(v)?;
            t.mean(s)
        }),
        probe("sum_axis 0", &x, |t, v, _cx| t.sum_axis(v, 0)),
        probe("sum_axis 1", &x, |t, v, _cx| t.sum_axis(v, 1)),
        probe("matmul (left operand)", &x, |t, v, cx| {
            let r = t.constant(cx.right.clone())?;
            t.matmul(v, r)
        }),
        probe("matmul (right operand)", &x, |t, v, cx| {
            let l = t.constant(cx.left.clone())?;
            t.matmul(l, v)
        }),
        probe("transpose", &x, |t, v, _cx| t.transpose(v)),
        probe("softmax rows", &x, |t, v, _cx| t.softmax(v, 1)),
        probe("softmax columns", &x, |t, v, _cx| t.softmax(v, 0)),
        probe("normalize", &x, |t, v, _cx| t.normalize(v, 1e-5)),
        probe("reshape", &x, |t, v, _cx| t.reshape(v, &[2, 6])),
        probe("gather_rows", &x, |t, v, _cx| t.gather_rows(v, &[2, 0, 2, 1])),
        probe("concat", &x, |t, v, _cx| {
            let s = t.square(v)?;
            t.concat(&[v, s], 1)
        }),
        probe("narrow", &x, |t, v, _cx| t.narrow(v, 1, 1, 2)),
        probe("stack", &x, |t, v, _cx| {
            let s = t.exp(v)?;
            t.stack(&[v, s])
        }),
        probe("linear", &x, |t, v, cx| linear(t, &cx.params, "lin", v)),
        probe("layer_norm", &x, |t, v, cx| layer_norm(t, &cx.params, "ln", v)),
        probe("ffn", &x, |t, v, cx| ffn(t, &cx.params, "ffn", v, Activation::Gelu)),
        probe("attention", &x, |t, v, _cx| {
            let q = t.scale(v, 0.8)?;
            let kk = t.square(v)?;
            attention(t, q, kk, v, 1)
        }),
        probe("attention, 2 heads", &x, |t, v, _cx| {
            let kk = t.exp(v)?;
            attention(t, v, kk, v, 2)
        }),
    ]
}

/// Gradient checks of every tape op, then of the whole model with respect
/// to every parameter tensor, on a tiny scene.
pub fn gradcheck_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = op_probes(seed)
        .into_iter()
        .map(|(name, x, f)| match grad_check(f, &x, GRAD_TOL) {
            Ok(r) => {
                let mut o = CheckOutcome::new(name, r.checked, r.max_rel_err, GRAD_TOL);
                o.pass = r.pass;
                if let Some(i) = r.non_finite_index {
                    o.detail = format!("non-finite gradient at coordinate {i}");
                }
                o
            }
            Err(e) => CheckOutcome::failed(name, e.to_string()),
        })
        .collect();
    for gamma in [GammaMode::PointsOverEdges, GammaMode::KValue] {
        let name = format!("unisoma_forward ({gamma:?})");
        let run = || -> Result<CheckOutcome> {
            let sample = random_scene(seed);
            let config = ModelConfig {
                channels: 4,
                slices: 3,
                layers: 2,
                ..tiny_config(gamma)
            };
            let model = random_model(&sample, config, seed)?;
            let input = model.prepare(&sample)?;
            let loss = |tape: &mut Tape, p: &ModelParams| -> Result<Var> {
                let preds = unisoma_forward(tape, p, &model.config, &model.schema, &input)?.predictions;
                let terms = preds
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| weighted(tape, y, seed ^ (i as u64 + 1)))
                    .collect::<Result<Vec<_>>>()?;
                tape.add_all(&terms)
            };
            let checks = grad_check_params(loss, &model.params, GRAD_TOL)?;
            let worst = checks.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err));
            let mut o = CheckOutcome::new(
                name.clone(),
                checks.iter().map(|c| c.report.checked).sum(),
                worst.map_or(0.0, |w| w.report.max_rel_err),
                GRAD_TOL,
            );
            o.pass = checks.iter().all(|c| c.report.pass);
            if let Some(w) = worst {
                o.detail = format!(
                    "worst parameter `{}`[{}]: reverse {:+.6e}, difference {:+.6e}",
                    w.key, w.report.worst_index, w.report.worst_ad, w.report.worst_fd
                );
            }
            if let Some(bad) = checks.iter().find(|c| c.report.non_finite_index.is_some()) {
                o.detail = format!("non-finite gradient in `{}`", bad.key);
            }
            Ok(o)
        };
        out.push(CheckOutcome::from_result(&name, run()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_suite_passes() {
        let out = verify_suite(7, 10);
        for o in &out {
            assert!(o.pass, "{o:?}");
        }
    }

    #[test]
    fn permuting_a_rigid_changes_nothing() {
        let sample = random_scene(3);
        let perm = vec![4, 2, 0, 1, 3];
        let moved = permute_object(&sample, 2, &perm).unwrap();
        assert_eq!(moved.rigids[0].points.row(0), sample.rigids[0].points.row(4));
        assert_eq!(moved.loads[1].motion.row(1), sample.loads[1].motion.row(2));
        assert_eq!(moved.deformables, sample.deformables);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // Negative control: a probe whose loss ignores part of the tape value.
        let x = Tensor::new([2], vec![0.3, -0.8]).unwrap();
        let bad = |t: &mut Tape, v: Var| -> Result<Var> {
            let c = t.constant(t.value(v).map(|z| z * z))?;
            let y = t.add(v, c)?;
            t.sum(y)
        };
        assert!(!grad_check(bad, &x, GRAD_TOL).unwrap().pass);
    }
}
