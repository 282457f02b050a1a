//! Edge-augmented slice tokenization of one object.
//!
//! Every point gets a softmax weight row over `M` slices, every kNN edge gets
//! a row computed from its endpoints' rows, and slice `j` becomes the weighted
//! mean of point features and `γ`-weighted edge features:
//!
//! ```text
//! z_j = (Σ_i w_ij x_i + γ Σ_e w^e_ej e_e) / (Σ_i w_ij + γ Σ_e w^e_ej)
//! ```
//!
//! [`joint_encode`] and [`compose_slices`] expose the algebra relating the
//! joint embedding of two objects to their separate embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, LinearParams};
use crate::params::ModelParams;
use crate::rng::Rng;
use crate::scene::{build_knn_edges, EdgeSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard on the slice mass in the token denominator.
pub const SLICE_MASS_EPS: f64 = 1e-10;

/// How the edge term is weighted against the point term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `γ = N / |E|`, i.e. `1/k` for kNN edges.
    #[default]
    PointsOverEdges,
    /// `γ = k`.
    KValue,
}

impl GammaMode {
    pub fn gamma(self, points: usize, edges: usize, k: usize) -> f64 {
        match self {
            GammaMode::PointsOverEdges if edges == 0 => 0.0,
            GammaMode::PointsOverEdges => points as f64 / edges as f64,
            GammaMode::KValue => k as f64,
        }
    }
}

/// Raw per-point features of one object together with its edges.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInput {
    /// `N × C_raw`.
    pub features: Tensor,
    pub edges: EdgeSet,
}

impl ObjectInput {
    /// Builds kNN edges from `positions` (`N × 3`, data units).
    pub fn with_knn(features: Tensor, positions: &Tensor, k: usize) -> Result<Self> {
        if features.rows() != positions.rows() {
            return Err(Error::shape("object_input", features.shape(), positions.shape()));
        }
        Ok(ObjectInput {
            features,
            edges: build_knn_edges(positions, k)?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reorders points so that new point `i` is old point `perm[i]`, and
    /// relabels the edges to match.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let features = self.features.permute_rows(perm)?;
        let mut new_index = alloc::vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            new_index[p] = i;
        }
        Ok(ObjectInput {
            features,
            edges: self.edges.relabel(&new_index),
        })
    }
}

/// Settings shared by every encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub gamma_mode: GammaMode,
    pub k: usize,
}

/// Parameters of one encoder, all stored under a common prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `C_raw → C`.
    pub input: LinearParams,
    /// `C → M`.
    pub slice: LinearParams,
    /// `3 → C`, lifts relative positions to feature space.
    pub edge_feat: LinearParams,
    /// `M → M`.
    pub edge_slice: LinearParams,
}

impl EncoderParams {
    pub fn init(c_raw: usize, channels: usize, slices: usize, rng: &mut Rng) -> Self {
        EncoderParams {
            input: LinearParams::init(c_raw, channels, rng),
            slice: LinearParams::init(channels, slices, rng),
            edge_feat: LinearParams::init(3, channels, rng),
            edge_slice: LinearParams::init(slices, slices, rng),
        }
    }

    pub fn insert_into(self, params: &mut ModelParams, prefix: &str) {
        self.input.insert_into(params, &format!("{prefix}/in"));
        self.slice.insert_into(params, &format!("{prefix}/slice"));
        self.edge_feat.insert_into(params, &format!("{prefix}/edge_feat"));
        self.edge_slice.insert_into(params, &format!("{prefix}/edge_slice"));
    }
}

/// Tokens of one object and the intermediate quantities the decoder reuses.
#[derive(Clone, Copy, Debug)]
pub struct SliceEmbedding {
    /// `M × C`.
    pub tokens: Var,
    /// `N × M`.
    pub point_weights: Var,
    /// `|E| × M`, absent when the object has no edges.
    pub edge_weights: Option<Var>,
    /// `N × C` projected point features.
    pub deep_features: Var,
    /// `M`: point mass plus `γ`-weighted edge mass of every slice.
    pub mass: Var,
    pub gamma: f64,
}

impl SliceEmbedding {
    /// Slices whose mass fell below the guard; their tokens are zero.
    pub fn empty_slices(&self, tape: &Tape) -> Vec<usize> {
        empty_slices(tape.value(self.mass))
    }
}

fn empty_slices(mass: &Tensor) -> Vec<usize> {
    mass.data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m <= SLICE_MASS_EPS)
        .map(|(j, _)| j)
        .collect()
}

pub fn project_features(tape: &mut Tape, params: &ModelParams, prefix: &str, raw: Var) -> Result<Var> {
    linear(tape, params, &format!("{prefix}/in"), raw)
}

/// `softmax(Linear(x))` over slices, one row per point.
pub fn slice_weights(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let logits = linear(tape, params, &format!("{prefix}/slice"), x)?;
    tape.softmax(logits, 1)
}

/// `softmax(Linear(w_p + w_q))` for every edge `(p, q)`.
pub fn edge_slice_weights(tape: &mut Tape, params: &ModelParams, prefix: &str, w: Var, edges: &EdgeSet) -> Result<Var> {
    let wp = tape.gather_rows(w, &edges.sources())?;
    let wq = tape.gather_rows(w, &edges.targets())?;
    let s = tape.add(wp, wq)?;
    let logits = linear(tape, params, &format!("{prefix}/edge_slice"), s)?;
    tape.softmax(logits, 1)
}

/// Weighted slice means. `edge` is `(e, w^e)` with `e` already lifted to `C`
/// channels. Returns `(tokens M×C, mass M)`.
pub fn encode_tokens(tape: &mut Tape, x: Var, w: Var, edge: Option<(Var, Var)>, gamma: f64) -> Result<(Var, Var)> {
    let (n, m) = (tape.shape(w)[0], tape.shape(w)[1]);
    if tape.shape(x).len() != 2 || tape.shape(x)[0] != n {
        return Err(Error::shape("encode_tokens", tape.shape(x), tape.shape(w)));
    }
    // Numerators are built as C × M so the per-slice mass divides along the
    // trailing axis.
    let xt = tape.transpose(x)?;
    let mut num = tape.matmul(xt, w)?;
    let mut mass = tape.sum_axis(w, 0)?;
    if let Some((e, we)) = edge {
        if tape.shape(we)[1] != m || tape.shape(e)[0] != tape.shape(we)[0] || tape.shape(e)[1] != tape.shape(x)[1] {
            return Err(Error::shape("encode_tokens", tape.shape(e), tape.shape(we)));
        }
        let et = tape.transpose(e)?;
        let edge_num = tape.matmul(et, we)?;
        let edge_num = tape.scale(edge_num, gamma)?;
        num = tape.add(num, edge_num)?;
        let edge_mass = tape.sum_axis(we, 0)?;
        let edge_mass = tape.scale(edge_mass, gamma)?;
        mass = tape.add(mass, edge_mass)?;
    }
    let den = tape.clamp_min(mass, SLICE_MASS_EPS)?;
    let zt = tape.div(num, den)?;
    Ok((tape.transpose(zt)?, mass))
}

fn lift_edges(tape: &mut Tape, params: &ModelParams, prefix: &str, edges: &EdgeSet) -> Result<Var> {
    let attr = tape.constant(edges.attributes.clone())?;
    linear(tape, params, &format!("{prefix}/edge_feat"), attr)
}

/// Encodes one object (solid or load) with the encoder stored at `prefix`.
pub fn encode_object(tape: &mut Tape, params: &ModelParams, prefix: &str, input: &ObjectInput, cfg: EncoderConfig) -> Result<SliceEmbedding> {
    if input.is_empty() {
        return Err(Error::InvalidScene(format!("encoder `{prefix}` got an empty object")));
    }
    let raw = tape.constant(input.features.clone())?;
    let x = project_features(tape, params, prefix, raw)?;
    let w = slice_weights(tape, params, prefix, x)?;
    let gamma = cfg.gamma_mode.gamma(input.len(), input.edges.len(), cfg.k);
    let edge = if input.edges.is_empty() {
        None
    } else {
        let e = lift_edges(tape, params, prefix, &input.edges)?;
        let we = edge_slice_weights(tape, params, prefix, w, &input.edges)?;
        Some((e, we))
    };
    let (tokens, mass) = encode_tokens(tape, x, w, edge, gamma)?;
    Ok(SliceEmbedding {
        tokens,
        point_weights: w,
        edge_weights: edge.map(|(_, we)| we),
        deep_features: x,
        mass,
        gamma,
    })
}

/// Encodes `a` and `b` as one object with shared parameters. With `mask_b`
/// the point and edge weights of `b` are zeroed before aggregation.
pub fn joint_encode(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    a: &ObjectInput,
    b: &ObjectInput,
    mask_b: bool,
    cfg: EncoderConfig,
) -> Result<SliceEmbedding> {
    let features = Tensor::concat(&[&a.features, &b.features], 0)?;
    let mut edges = a.edges.edges.clone();
    edges.extend(b.edges.offset(a.len()).edges);
    let joint = ObjectInput {
        features,
        edges: EdgeSet {
            edges,
            attributes: Tensor::concat(&[&a.edges.attributes, &b.edges.attributes], 0)?,
        },
    };
    if !mask_b {
        return encode_object(tape, params, prefix, &joint, cfg);
    }

    let raw = tape.constant(joint.features.clone())?;
    let x = project_features(tape, params, prefix, raw)?;
    let w = slice_weights(tape, params, prefix, x)?;
    let m = tape.shape(w)[1];
    let keep = |n_a: usize, n_b: usize| {
        let mut t = Tensor::zeros([n_a + n_b, m]);
        t.data_mut()[..n_a * m].fill(1.0);
        t
    };
    let point_mask = tape.constant(keep(a.len(), b.len()))?;
    let w_masked = tape.mul(w, point_mask)?;
    let gamma = cfg.gamma_mode.gamma(joint.len(), joint.edges.len(), cfg.k);
    let edge = if joint.edges.is_empty() {
        None
    } else {
        let e = lift_edges(tape, params, prefix, &joint.edges)?;
        let we = edge_slice_weights(tape, params, prefix, w, &joint.edges)?;
        let edge_mask = tape.constant(keep(a.edges.len(), b.edges.len()))?;
        Some((e, tape.mul(we, edge_mask)?))
    };
    let (tokens, mass) = encode_tokens(tape, x, w_masked, edge, gamma)?;
    Ok(SliceEmbedding {
        tokens,
        point_weights: w_masked,
        edge_weights: edge.map(|(_, we)| we),
        deep_features: x,
        mass,
        gamma,
    })
}

/// Joint tokens from separate embeddings:
/// `z_j = (A_j z^a_j + B_j z^b_j) / (A_j + B_j)` with the exact slice masses.
/// Returns the tokens and the slices where both masses vanish (set to zero).
pub fn compose_slices(tokens_a: &Tensor, mass_a: &Tensor, tokens_b: &Tensor, mass_b: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if tokens_a.shape() != tokens_b.shape() || tokens_a.rank() != 2 {
        return Err(Error::shape("compose_slices", tokens_a.shape(), tokens_b.shape()));
    }
    let m = tokens_a.rows();
    if mass_a.shape() != [m] || mass_b.shape() != [m] {
        return Err(Error::shape("compose_slices", mass_a.shape(), mass_b.shape()));
    }
    let mut out = Tensor::zeros(tokens_a.shape().to_vec());
    let mut empty = Vec::new();
    for j in 0..m {
        let (ma, mb) = (mass_a.data()[j], mass_b.data()[j]);
        let total = ma + mb;
        if total <= SLICE_MASS_EPS {
            empty.push(j);
            continue;
        }
        for (o, (za, zb)) in out.row_mut(j).iter_mut().zip(tokens_a.row(j).iter().zip(tokens_b.row(j))) {
            *o = (ma * za + mb * zb) / total;
        }
    }
    Ok((out, empty))
}

/// Key prefix of the encoder for an object.
pub fn encoder_prefix(name: &str) -> String {
    format!("encoder/{name}")
}
