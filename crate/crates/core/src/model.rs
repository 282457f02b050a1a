//! Whole-model assembly: encoders, `L` processor layers and decoders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_points, decoder_prefix, head_forward};
use crate::encoder::{encode_object, EncoderConfig, EncoderParams, GammaMode, ObjectInput, SliceEmbedding};
use crate::error::{Error, Result, ResultExt};
use crate::nn::{Activation, FfnParams, LayerNormParams, LinearParams};
use crate::params::ModelParams;
use crate::processor::{alloc_prefix, contact_prefix, deform_prefix, processor_forward, LayerLayout, ProcessorState};
use crate::rng::{stream, Rng, Stream};
use crate::scene::{build_knn_edges, NormStats, Quantity, SceneSample, GEOMETRY};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `C`.
    pub channels: usize,
    /// Slice count `M`.
    pub slices: usize,
    /// Processor depth `L`.
    pub layers: usize,
    /// Neighbors per point in the edge sets.
    pub k: usize,
    pub heads: usize,
    pub gamma_mode: GammaMode,
    pub activation: Activation,
    /// One encoder per role (deformable, rigid, load) instead of per object.
    pub share_role_encoders: bool,
    /// Softmax over items instead of the normalized linear weights.
    pub allocation_softmax: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 128,
            slices: 32,
            layers: 2,
            k: 3,
            heads: 1,
            gamma_mode: GammaMode::PointsOverEdges,
            activation: Activation::Gelu,
            share_role_encoders: false,
            allocation_softmax: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for quick experiments on a laptop.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 32,
            slices: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.slices == 0 || self.layers == 0 || self.k == 0 {
            return Err(Error::Config("channels, slices, layers and k must all be positive".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} channels cannot be split into {} heads", self.channels, self.heads)));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            gamma_mode: self.gamma_mode,
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSchema {
    pub name: String,
    pub in_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformableSchema {
    pub name: String,
    pub in_channels: usize,
    pub quantities: Vec<Quantity>,
    pub target_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactSchema {
    /// `<nameA>+<nameB>`.
    pub label: String,
    pub a: usize,
    pub b: usize,
}

/// Object names, channel counts and the contact roster a model is built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSchema {
    pub deformables: Vec<DeformableSchema>,
    pub rigids: Vec<ObjectSchema>,
    pub loads: Vec<ObjectSchema>,
    pub contacts: Vec<ContactSchema>,
}

impl SceneSchema {
    pub fn from_sample(sample: &SceneSample) -> Result<Self> {
        sample.validate()?;
        let deformables = sample
            .deformables
            .iter()
            .zip(&sample.targets)
            .map(|(o, t)| DeformableSchema {
                name: o.name.clone(),
                in_channels: 3 + o.property_channels(),
                quantities: t.quantities.clone(),
                target_channels: t.channels(),
            })
            .collect();
        let rigids = sample
            .rigids
            .iter()
            .map(|o| ObjectSchema {
                name: o.name.clone(),
                in_channels: 3 + o.property_channels(),
            })
            .collect();
        let loads = sample
            .loads
            .iter()
            .map(|l| ObjectSchema {
                name: l.name.clone(),
                in_channels: 6,
            })
            .collect();
        let contacts = sample
            .contact_pairs
            .iter()
            .map(|&(a, b)| {
                let (na, nb) = (&sample.object(a).expect("validated").name, &sample.object(b).expect("validated").name);
                ContactSchema {
                    label: format!("{na}+{nb}"),
                    a,
                    b,
                }
            })
            .collect();
        Ok(SceneSchema {
            deformables,
            rigids,
            loads,
            contacts,
        })
    }

    /// Checks that `sample` has the objects, channels and contacts of this schema.
    pub fn check(&self, sample: &SceneSample) -> Result<()> {
        let other = SceneSchema::from_sample(sample)?;
        let mismatch = |what: &str| Err(Error::Config(format!("sample does not match the model schema: {what}")));
        if other.deformables.len() != self.deformables.len() {
            return mismatch("deformable count");
        }
        for (a, b) in self.deformables.iter().zip(&other.deformables) {
            if a.name != b.name || a.in_channels != b.in_channels {
                return mismatch(&format!("deformable `{}`", a.name));
            }
        }
        if self.rigids != other.rigids {
            return mismatch("rigid solids");
        }
        if self.loads != other.loads {
            return mismatch("loads");
        }
        if self.contacts != other.contacts {
            return mismatch("contact pairs");
        }
        Ok(())
    }

    fn deformable_names(&self) -> Vec<String> {
        self.deformables.iter().map(|d| d.name.clone()).collect()
    }

    fn load_names(&self) -> Vec<String> {
        self.loads.iter().map(|d| d.name.clone()).collect()
    }
}

/// Where the encoder of an object lives in the parameter bag.
pub fn encoder_key(config: &ModelConfig, role: &str, name: &str) -> String {
    if config.share_role_encoders {
        format!("encoder/{role}")
    } else {
        format!("encoder/{name}")
    }
}

fn layer_prefix(l: usize) -> String {
    format!("processor/{l}")
}

/// Allocation linears start as a near-constant map with bias 1 so the
/// initial weights are close to `1/n` and the denominator stays away from 0.
fn allocation_linear(c: usize, rng: &mut Rng) -> LinearParams {
    let bound = 0.1 / libm::sqrt(c as f64);
    LinearParams {
        weight: Tensor::new([c, c], (0..c * c).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape"),
        bias: Tensor::ones([c]),
    }
}

fn attention_block(params: &mut ModelParams, prefix: &str, c: usize, rng: &mut Rng) {
    LayerNormParams::unit(c).insert_into(params, &format!("{prefix}/norm"));
    for n in ["q", "k", "v"] {
        LinearParams::init(c, c, rng).insert_into(params, &format!("{prefix}/{n}"));
    }
    params.remove(&format!("{prefix}/k/bias"));
}

/// Fresh parameters for `schema`, drawn from the `Init` stream of `seed`.
pub fn init_params(config: &ModelConfig, schema: &SceneSchema, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (c, m) = (config.channels, config.slices);
    let hidden = 2 * c;
    let mut rng = stream(seed, Stream::Init);
    let mut params = ModelParams::new();

    let mut encoders: Vec<(String, usize)> = Vec::new();
    let roles = [
        ("deformable", self::names_channels(schema.deformables.iter().map(|d| (&d.name, d.in_channels)))),
        ("rigid", self::names_channels(schema.rigids.iter().map(|d| (&d.name, d.in_channels)))),
        ("load", self::names_channels(schema.loads.iter().map(|d| (&d.name, d.in_channels)))),
    ];
    for (role, objects) in &roles {
        for (name, c_raw) in objects {
            let key = encoder_key(config, role, name);
            match encoders.iter().find(|(k, _)| *k == key) {
                Some((_, prev)) if prev != c_raw => {
                    return Err(Error::Config(format!("shared encoder `{key}` sees {prev} and {c_raw} input channels")));
                }
                Some(_) => {}
                None => {
                    EncoderParams::init(*c_raw, c, m, &mut rng).insert_into(&mut params, &key);
                    encoders.push((key, *c_raw));
                }
            }
        }
    }

    for l in 0..config.layers {
        let lp = layer_prefix(l);
        for contact in &schema.contacts {
            attention_block(&mut params, &contact_prefix(&lp, &contact.label), c, &mut rng);
        }
        if !schema.contacts.is_empty() {
            LayerNormParams::unit(c).insert_into(&mut params, &format!("{lp}/contact_ffn/norm"));
            FfnParams::init(c, hidden, c, &mut rng).insert_into(&mut params, &format!("{lp}/contact_ffn/ffn"));
        }
        for d in &schema.deformables {
            if schema.loads.len() > 1 {
                for load in &schema.loads {
                    allocation_linear(c, &mut rng).insert_into(&mut params, &alloc_prefix(&lp, &d.name, "load", &load.name));
                }
            }
            if schema.contacts.len() > 1 {
                for contact in &schema.contacts {
                    allocation_linear(c, &mut rng).insert_into(&mut params, &alloc_prefix(&lp, &d.name, "contact", &contact.label));
                }
            }
            let dp = deform_prefix(&lp, &d.name);
            attention_block(&mut params, &dp, c, &mut rng);
            LayerNormParams::unit(c).insert_into(&mut params, &format!("{dp}/ffn_norm"));
            FfnParams::init(c, hidden, c, &mut rng).insert_into(&mut params, &format!("{dp}/ffn"));
        }
    }

    for d in &schema.deformables {
        let p = decoder_prefix(&d.name);
        LayerNormParams::unit(c).insert_into(&mut params, &format!("{p}/norm"));
        FfnParams::init(c, hidden, c, &mut rng).insert_into(&mut params, &format!("{p}/ffn"));
        LinearParams::init(c, d.target_channels, &mut rng).insert_into(&mut params, &format!("{p}/out"));
    }
    Ok(params)
}

fn names_channels<'a>(it: impl Iterator<Item = (&'a String, usize)>) -> Vec<(String, usize)> {
    it.map(|(n, c)| (n.clone(), c)).collect()
}

/// Checks that `params` has exactly the keys and shapes `init_params` would
/// produce for this configuration and schema.
pub fn check_params(config: &ModelConfig, schema: &SceneSchema, params: &ModelParams) -> Result<()> {
    let expected = init_params(config, schema, 0)?;
    for (key, t) in expected.iter() {
        match params.get(key) {
            None => return Err(Error::MissingParam(key.clone())),
            Some(p) if p.shape() != t.shape() => return Err(Error::shape("check_params", t.shape(), p.shape()).context(key.clone())),
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !expected.contains(k)) {
        return Err(Error::KeyMismatch(extra.clone()));
    }
    Ok(())
}

/// Normalized features and edge sets of every object in a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub deformables: Vec<ObjectInput>,
    pub rigids: Vec<ObjectInput>,
    pub loads: Vec<ObjectInput>,
}

impl ModelInput {
    /// Features are normalized with `stats`; edges come from the raw
    /// coordinates so their attributes stay in data units.
    pub fn prepare(sample: &SceneSample, stats: &NormStats, k: usize) -> Result<Self> {
        let solid = |o: &crate::scene::SolidObject| -> Result<ObjectInput> {
            let features = stats.input(&o.name)?.normalize(&o.features())?;
            ObjectInput::with_knn(features, &o.points, k).context_with(|| format!("object `{}`", o.name))
        };
        let loads = sample
            .loads
            .iter()
            .map(|l| -> Result<ObjectInput> {
                let features = stats.input(&l.name)?.normalize(&l.features())?;
                Ok(ObjectInput {
                    features,
                    edges: build_knn_edges(&l.origin, k).context_with(|| format!("load `{}`", l.name))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelInput {
            deformables: sample.deformables.iter().map(solid).collect::<Result<_>>()?,
            rigids: sample.rigids.iter().map(solid).collect::<Result<_>>()?,
            loads,
        })
    }
}

/// Everything the forward pass produced, for inspection and tests.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `N_i × C_target` prediction per deformable solid (normalized).
    pub predictions: Vec<Var>,
    pub deformable_embeddings: Vec<SliceEmbedding>,
    /// State after encoding, then after each layer.
    pub states: Vec<ProcessorState>,
}

pub fn unisoma_forward(tape: &mut Tape, params: &ModelParams, config: &ModelConfig, schema: &SceneSchema, input: &ModelInput) -> Result<ForwardOutput> {
    if input.deformables.len() != schema.deformables.len() || input.rigids.len() != schema.rigids.len() || input.loads.len() != schema.loads.len() {
        return Err(Error::Config("model input does not match the schema".into()));
    }
    let enc = config.encoder();
    let mut deformable_embeddings = Vec::with_capacity(input.deformables.len());
    for (obj, s) in input.deformables.iter().zip(&schema.deformables) {
        let key = encoder_key(config, "deformable", &s.name);
        deformable_embeddings.push(encode_object(tape, params, &key, obj, enc).context_with(|| format!("encoding `{}`", s.name))?);
    }
    let encode_all = |tape: &mut Tape, objs: &[ObjectInput], names: &[ObjectSchema], role: &str| -> Result<Vec<Var>> {
        objs.iter()
            .zip(names)
            .map(|(obj, s)| {
                let key = encoder_key(config, role, &s.name);
                Ok(encode_object(tape, params, &key, obj, enc).context_with(|| format!("encoding `{}`", s.name))?.tokens)
            })
            .collect()
    };
    let rigids = encode_all(tape, &input.rigids, &schema.rigids, "rigid")?;
    let loads = encode_all(tape, &input.loads, &schema.loads, "load")?;

    let mut state = ProcessorState {
        deformables: deformable_embeddings.iter().map(|e| e.tokens).collect(),
        rigids,
        loads,
        contacts: Vec::new(),
    };
    let deformable_names = schema.deformable_names();
    let load_names = schema.load_names();
    let contacts: Vec<(String, usize, usize)> = schema.contacts.iter().map(|c| (c.label.clone(), c.a, c.b)).collect();
    let mut states = Vec::with_capacity(config.layers + 1);
    states.push(state.clone());
    for l in 0..config.layers {
        let layout = LayerLayout {
            prefix: layer_prefix(l),
            deformables: &deformable_names,
            loads: &load_names,
            contacts: &contacts,
            heads: config.heads,
            activation: config.activation,
            allocation_softmax: config.allocation_softmax,
        };
        state = processor_forward(tape, params, &layout, &state).context_with(|| format!("processor layer {l}"))?;
        states.push(state.clone());
    }

    let mut predictions = Vec::with_capacity(state.deformables.len());
    for ((&tokens, emb), s) in state.deformables.iter().zip(&deformable_embeddings).zip(&schema.deformables) {
        let decoded = decode_points(tape, tokens, emb.point_weights)?;
        let out = head_forward(tape, params, &decoder_prefix(&s.name), decoded, emb.deep_features, config.activation)
            .context_with(|| format!("decoding `{}`", s.name))?;
        predictions.push(out);
    }
    Ok(ForwardOutput {
        predictions,
        deformable_embeddings,
        states,
    })
}

/// How geometry targets are represented while learning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpace {
    /// Targets are learned as given.
    Absolute,
    /// The geometry quantity is learned as an offset from the input points.
    #[default]
    Displacement,
}

/// Copy of `sample` whose targets are expressed in `space`.
pub fn to_learned_space(sample: &SceneSample, space: TargetSpace) -> Result<SceneSample> {
    let mut out = sample.clone();
    if space == TargetSpace::Displacement {
        for (obj, t) in sample.deformables.iter().zip(&mut out.targets) {
            shift_geometry(&mut t.values, &t.quantities, &obj.points, -1.0)?;
        }
    }
    Ok(out)
}

/// Inverse of [`to_learned_space`] for one deformable's prediction.
pub fn from_learned_space(values: &mut Tensor, quantities: &[Quantity], points: &Tensor, space: TargetSpace) -> Result<()> {
    if space == TargetSpace::Displacement {
        shift_geometry(values, quantities, points, 1.0)?;
    }
    Ok(())
}

fn shift_geometry(values: &mut Tensor, quantities: &[Quantity], points: &Tensor, sign: f64) -> Result<()> {
    let Some(q) = quantities.iter().find(|q| q.name == GEOMETRY) else {
        return Ok(());
    };
    if q.len != 3 || values.rows() != points.rows() {
        return Err(Error::Config("geometry targets must be 3 channels with one row per point".into()));
    }
    for r in 0..values.rows() {
        let p = [points.at(r, 0), points.at(r, 1), points.at(r, 2)];
        for (d, v) in values.row_mut(r)[q.start..q.start + 3].iter_mut().enumerate() {
            *v += sign * p[d];
        }
    }
    Ok(())
}

/// A trained or freshly initialized model with everything needed to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unisoma {
    pub config: ModelConfig,
    pub schema: SceneSchema,
    pub stats: NormStats,
    pub target_space: TargetSpace,
    pub params: ModelParams,
}

impl Unisoma {
    pub fn new(config: ModelConfig, schema: SceneSchema, stats: NormStats, target_space: TargetSpace, seed: u64) -> Result<Self> {
        let params = init_params(&config, &schema, seed)?;
        Ok(Unisoma {
            config,
            schema,
            stats,
            target_space,
            params,
        })
    }

    pub fn prepare(&self, sample: &SceneSample) -> Result<ModelInput> {
        self.schema.check(sample)?;
        ModelInput::prepare(sample, &self.stats, self.config.k)
    }

    /// Normalized, learned-space predictions on `tape` using `params`.
    pub fn forward_with(&self, tape: &mut Tape, params: &ModelParams, input: &ModelInput) -> Result<Vec<Var>> {
        Ok(unisoma_forward(tape, params, &self.config, &self.schema, input)?.predictions)
    }

    /// Normalized, learned-space targets of `sample`.
    pub fn normalized_targets(&self, sample: &SceneSample) -> Result<Vec<Tensor>> {
        let learned = to_learned_space(sample, self.target_space)?;
        learned
            .deformables
            .iter()
            .zip(&learned.targets)
            .map(|(o, t)| self.stats.target(&o.name)?.normalize(&t.values))
            .collect()
    }

    /// Predicted targets of every deformable in data units.
    pub fn predict(&self, sample: &SceneSample) -> Result<Vec<Tensor>> {
        let input = self.prepare(sample)?;
        let mut tape = Tape::new();
        let preds = self.forward_with(&mut tape, &self.params, &input)?;
        preds
            .iter()
            .zip(&sample.deformables)
            .zip(&self.schema.deformables)
            .map(|((&v, obj), s)| {
                let mut out = self.stats.target(&obj.name)?.denormalize(tape.value(v))?;
                from_learned_space(&mut out, &s.quantities, &obj.points, self.target_space)?;
                Ok(out)
            })
            .collect()
    }
}
