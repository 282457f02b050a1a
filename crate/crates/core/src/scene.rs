//! Multi-solid scenes in the Lagrangian view.
//!
//! A [`SceneSample`] holds the deformable and rigid solids of one system
//! state, the loads produced by moving solids, the list of solid pairs that
//! may touch, and the target quantities of every deformable solid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::worlds::OracleCertificate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Deformable,
    Rigid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolidObject {
    pub name: String,
    pub role: Role,
    /// `N × 3` positions.
    pub points: Tensor,
    /// `N × P` per-point scalars (material, state).
    pub properties: Tensor,
}

impl SolidObject {
    pub fn new(name: impl Into<String>, role: Role, points: Tensor, properties: Tensor) -> Result<Self> {
        let obj = SolidObject {
            name: name.into(),
            role,
            points,
            properties,
        };
        obj.validate()?;
        Ok(obj)
    }

    /// A solid with no property channels.
    pub fn bare(name: impl Into<String>, role: Role, points: Tensor) -> Result<Self> {
        let n = points.rows();
        Self::new(name, role, points, Tensor::zeros([n, 0]))
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn property_channels(&self) -> usize {
        self.properties.cols()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    /// `N × (3 + P)`: coordinates followed by properties.
    pub fn features(&self) -> Tensor {
        Tensor::concat(&[&self.points, &self.properties], 1).expect("validated shapes")
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::InvalidScene(format!("object `{}`: {msg}", self.name));
        if self.points.rank() != 2 || self.points.cols() != 3 {
            return Err(ctx(format!("points must be N×3, got {:?}", self.points.shape())));
        }
        if self.points.rows() == 0 {
            return Err(ctx("needs at least one point".into()));
        }
        if self.properties.rank() != 2 || self.properties.shape()[0] != self.points.rows() {
            return Err(ctx(format!(
                "properties {:?} do not match {} points",
                self.properties.shape(),
                self.points.rows()
            )));
        }
        if self.points.ensure_finite("points").is_err() || self.properties.ensure_finite("properties").is_err() {
            return Err(ctx("non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Motion rows are displacements `next - prev`.
    #[default]
    Delta,
    /// Motion rows are the next positions.
    Absolute,
}

/// Force-inducing motion of one solid: where its points are and where they go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadObject {
    pub name: String,
    /// Index of the emitting solid in `deformables ++ rigids`.
    pub source: usize,
    /// `N × 3` coordinates of the emitting solid at the current step.
    pub origin: Tensor,
    /// `N × 3` displacement or next position, depending on `mode`.
    pub motion: Tensor,
    pub mode: LoadMode,
}

impl LoadObject {
    pub fn from_positions(name: impl Into<String>, source: usize, prev: &Tensor, next: &Tensor, mode: LoadMode) -> Result<Self> {
        let features = make_load_features(prev, next, mode)?;
        Ok(LoadObject {
            name: name.into(),
            source,
            origin: features.narrow(1, 0, 3)?,
            motion: features.narrow(1, 3, 3)?,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.origin.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `N × 6`: origin followed by motion.
    pub fn features(&self) -> Tensor {
        Tensor::concat(&[&self.origin, &self.motion], 1).expect("validated shapes")
    }
}

/// `concat(prev, next - prev)` in delta mode, `concat(prev, next)` otherwise.
pub fn make_load_features(prev: &Tensor, next: &Tensor, mode: LoadMode) -> Result<Tensor> {
    if prev.rank() != 2 || prev.cols() != 3 || prev.shape() != next.shape() {
        return Err(Error::shape("make_load_features", prev.shape(), next.shape()));
    }
    let motion = match mode {
        LoadMode::Delta => next.sub(prev)?,
        LoadMode::Absolute => next.clone(),
    };
    Tensor::concat(&[prev, &motion], 1)
}

/// Named column range of a target tensor, e.g. `geometry` = columns 0..3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Quantity {
    pub fn new(name: impl Into<String>, start: usize, len: usize) -> Self {
        Quantity {
            name: name.into(),
            start,
            len,
        }
    }
}

pub const GEOMETRY: &str = "geometry";

/// Target values of one deformable solid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    /// `N × C_target`.
    pub values: Tensor,
    pub quantities: Vec<Quantity>,
}

impl Target {
    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        self.quantities.iter().find(|q| q.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub deformables: Vec<SolidObject>,
    pub rigids: Vec<SolidObject>,
    pub loads: Vec<LoadObject>,
    /// Unordered pairs of indices into `deformables ++ rigids`.
    pub contact_pairs: Vec<(usize, usize)>,
    /// One entry per deformable solid.
    pub targets: Vec<Target>,
    pub step_index: usize,
    pub sample_id: u64,
    pub seed: u64,
    /// Data needed to re-verify the oracle equilibrium, when the sample came
    /// from the synthetic generator.
    pub certificate: Option<OracleCertificate>,
}

impl SceneSample {
    pub fn num_objects(&self) -> usize {
        self.deformables.len() + self.rigids.len()
    }

    /// Solid `i` of `deformables ++ rigids`.
    pub fn object(&self, i: usize) -> Option<&SolidObject> {
        if i < self.deformables.len() {
            self.deformables.get(i)
        } else {
            self.rigids.get(i - self.deformables.len())
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = &SolidObject> {
        self.deformables.iter().chain(&self.rigids)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, list) in [(Role::Deformable, &self.deformables), (Role::Rigid, &self.rigids)] {
            for obj in list {
                obj.validate()?;
                if obj.role != role {
                    return Err(Error::InvalidScene(format!("object `{}` is listed under the wrong role", obj.name)));
                }
            }
        }
        let mut names: Vec<&str> = self.objects().map(|o| o.name.as_str()).chain(self.loads.iter().map(|l| l.name.as_str())).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidScene(format!("duplicate name `{}`", w[0])));
        }
        let n = self.num_objects();
        for load in &self.loads {
            let src = self
                .object(load.source)
                .ok_or_else(|| Error::InvalidScene(format!("load `{}` references absent object {}", load.name, load.source)))?;
            if load.origin.shape() != [src.len(), 3] || load.motion.shape() != [src.len(), 3] {
                return Err(Error::InvalidScene(format!(
                    "load `{}` rows do not match its source `{}` ({} points)",
                    load.name,
                    src.name,
                    src.len()
                )));
            }
            if load.origin.ensure_finite("load").is_err() || load.motion.ensure_finite("load").is_err() {
                return Err(Error::InvalidScene(format!("load `{}` has non-finite values", load.name)));
            }
        }
        let mut seen = Vec::with_capacity(self.contact_pairs.len());
        for &(a, b) in &self.contact_pairs {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidScene(format!("contact pair ({a}, {b}) references an absent object")));
            }
            let key = (a.min(b), a.max(b));
            if seen.contains(&key) {
                return Err(Error::InvalidScene(format!("contact pair ({a}, {b}) is listed twice")));
            }
            seen.push(key);
        }
        if self.targets.len() != self.deformables.len() {
            return Err(Error::InvalidScene(format!(
                "{} targets for {} deformable solids",
                self.targets.len(),
                self.deformables.len()
            )));
        }
        for (obj, t) in self.deformables.iter().zip(&self.targets) {
            if t.values.rank() != 2 || t.values.rows() != obj.len() {
                return Err(Error::InvalidScene(format!("target of `{}` has shape {:?}", obj.name, t.values.shape())));
            }
            if t.values.ensure_finite("target").is_err() {
                return Err(Error::InvalidScene(format!("target of `{}` has non-finite values", obj.name)));
            }
            for q in &t.quantities {
                if q.len == 0 || q.start + q.len > t.channels() {
                    return Err(Error::InvalidScene(format!("quantity `{}` of `{}` is out of range", q.name, obj.name)));
                }
            }
        }
        Ok(())
    }
}

/// Directed kNN edges of one object plus their relative-position attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSet {
    /// `(p, q)`: point `p` links to its neighbor `q`.
    pub edges: Vec<(usize, usize)>,
    /// `|E| × 3`, row = position(q) − position(p).
    pub attributes: Tensor,
}

impl EdgeSet {
    pub fn empty() -> Self {
        EdgeSet {
            edges: Vec::new(),
            attributes: Tensor::zeros([0, 3]),
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Relabels points: old point `p` becomes `new_index[p]`. Attributes are
    /// unchanged because they only depend on the endpoints' positions.
    pub fn relabel(&self, new_index: &[usize]) -> EdgeSet {
        EdgeSet {
            edges: self.edges.iter().map(|&(p, q)| (new_index[p], new_index[q])).collect(),
            attributes: self.attributes.clone(),
        }
    }

    /// Copy with point indices shifted by `offset` (for concatenated objects).
    pub fn offset(&self, offset: usize) -> EdgeSet {
        EdgeSet {
            edges: self.edges.iter().map(|&(p, q)| (p + offset, q + offset)).collect(),
            attributes: self.attributes.clone(),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Each point links to its `k` nearest other points by Euclidean distance;
/// equal distances go to the lower index. Produces exactly `k·N` edges.
pub fn build_knn_edges(points: &Tensor, k: usize) -> Result<EdgeSet> {
    if points.rank() != 2 || points.cols() != 3 {
        return Err(Error::shape("build_knn_edges", points.shape(), &[0, 3]));
    }
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("kNN needs 0 < k < N, got k = {k} with N = {n}")));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in 0..n {
        cand.clear();
        let pp = points.row(p);
        cand.extend((0..n).filter(|&q| q != p).map(|q| (dist2(pp, points.row(q)), q)));
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_rank);
            cand.truncate(k);
        }
        cand.sort_by(by_rank);
        edges.extend(cand.iter().map(|&(_, q)| (p, q)));
    }
    let attributes = edge_attributes(points, &edges)?;
    Ok(EdgeSet { edges, attributes })
}

/// Row `e` is `points[q] − points[p]` for edge `e = (p, q)`.
pub fn edge_attributes(points: &Tensor, edges: &[(usize, usize)]) -> Result<Tensor> {
    let n = points.rows();
    let mut data = Vec::with_capacity(edges.len() * 3);
    for &(p, q) in edges {
        for i in [p, q] {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "edge_attributes",
                    index: i,
                    len: n,
                });
            }
        }
        let (a, b) = (points.row(p), points.row(q));
        data.extend((0..3).map(|d| b[d] - a[d]));
    }
    Tensor::new([edges.len(), 3], data)
}

/// Smallest standard deviation used when normalizing a channel.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and (floored) population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over the rows of all `tensors` (same column count).
    pub fn from_rows(tensors: &[&Tensor]) -> Result<Self> {
        let c = tensors.first().map_or(0, |t| t.cols());
        let mut count = 0usize;
        let mut sum = vec![0.0; c];
        for t in tensors {
            if t.cols() != c {
                return Err(Error::shape("channel_stats", &[c], t.shape()));
            }
            for r in 0..t.rows() {
                for (s, v) in sum.iter_mut().zip(t.row(r)) {
                    *s += v;
                }
            }
            count += t.rows();
        }
        if count == 0 {
            return Ok(Self::identity(c));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; c];
        for t in tensors {
            for r in 0..t.rows() {
                for ((v, x), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| libm::sqrt(v / count as f64).max(STD_FLOOR)).collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.channels() {
            return Err(Error::Config(format!(
                "statistics cover {} channels but the data has {}",
                self.channels(),
                t.cols()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let c = self.channels();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let c = self.channels();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = *v * self.std[j] + self.mean[j];
        }
        Ok(out)
    }

    /// Statistics restricted to columns `start..start+len`.
    pub fn columns(&self, start: usize, len: usize) -> ChannelStats {
        ChannelStats {
            mean: self.mean[start..start + len].to_vec(),
            std: self.std[start..start + len].to_vec(),
        }
    }
}

/// Normalization statistics keyed by object name, computed on a training
/// split. Input features are `coords ++ properties` for solids and
/// `origin ++ motion` for loads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: BTreeMap<String, ChannelStats>,
    pub targets: BTreeMap<String, ChannelStats>,
}

impl NormStats {
    pub fn compute(samples: &[SceneSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("normalization statistics need at least one sample".into()))?;
        let mut inputs = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for (i, obj) in first.objects().enumerate() {
            let feats: Vec<Tensor> = samples
                .iter()
                .map(|s| s.object(i).map(SolidObject::features).ok_or_else(|| missing(&obj.name)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = feats.iter().collect();
            inputs.insert(obj.name.clone(), ChannelStats::from_rows(&refs)?);
        }
        for (i, load) in first.loads.iter().enumerate() {
            let feats: Vec<Tensor> = samples
                .iter()
                .map(|s| s.loads.get(i).map(LoadObject::features).ok_or_else(|| missing(&load.name)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = feats.iter().collect();
            inputs.insert(load.name.clone(), ChannelStats::from_rows(&refs)?);
        }
        for (i, obj) in first.deformables.iter().enumerate() {
            let refs: Vec<&Tensor> = samples
                .iter()
                .map(|s| s.targets.get(i).map(|t| &t.values).ok_or_else(|| missing(&obj.name)))
                .collect::<Result<_>>()?;
            targets.insert(obj.name.clone(), ChannelStats::from_rows(&refs)?);
        }
        Ok(NormStats { inputs, targets })
    }

    pub fn input(&self, name: &str) -> Result<&ChannelStats> {
        self.inputs
            .get(name)
            .ok_or_else(|| Error::Config(format!("no input statistics for `{name}`")))
    }

    pub fn target(&self, name: &str) -> Result<&ChannelStats> {
        self.targets
            .get(name)
            .ok_or_else(|| Error::Config(format!("no target statistics for `{name}`")))
    }
}

fn missing(name: &str) -> Error {
    Error::InvalidScene(format!("object `{name}` is missing from a sample"))
}

fn normalize_solid(obj: &SolidObject, stats: &ChannelStats) -> Result<SolidObject> {
    let f = stats.normalize(&obj.features())?;
    Ok(SolidObject {
        name: obj.name.clone(),
        role: obj.role,
        points: f.narrow(1, 0, 3)?,
        properties: f.narrow(1, 3, obj.property_channels())?,
    })
}

/// Normalized copy of `sample`: solid features, load features and targets.
pub fn normalize_scene(sample: &SceneSample, stats: &NormStats) -> Result<SceneSample> {
    let mut out = sample.clone();
    for obj in out.deformables.iter_mut().chain(out.rigids.iter_mut()) {
        *obj = normalize_solid(obj, stats.input(&obj.name)?)?;
    }
    for load in &mut out.loads {
        let f = stats.input(&load.name)?.normalize(&load.features())?;
        load.origin = f.narrow(1, 0, 3)?;
        load.motion = f.narrow(1, 3, 3)?;
    }
    for (obj, t) in sample.deformables.iter().zip(&mut out.targets) {
        t.values = stats.target(&obj.name)?.normalize(&t.values)?;
    }
    Ok(out)
}

/// Maps a normalized prediction of deformable `name` back to data units.
pub fn denormalize_predictions(pred: &Tensor, stats: &NormStats, name: &str) -> Result<Tensor> {
    stats.target(name)?.denormalize(pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 3]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Oracle: all pairwise distances, sorted with the tie rule.
    fn brute_knn(points: &Tensor, k: usize) -> Vec<(usize, usize)> {
        let n = points.rows();
        let mut out = Vec::new();
        for p in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n).filter(|&q| q != p).map(|q| (dist2(points.row(p), points.row(q)), q)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|&(_, q)| (p, q)));
        }
        out
    }

    #[test]
    fn collinear_k1() {
        let p = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let e = build_knn_edges(&p, 1).unwrap();
        assert_eq!(e.edges, vec![(0, 1), (1, 0), (2, 1)]);
        assert_eq!(e.edges, brute_knn(&p, 1));
    }

    #[test]
    fn coincident_tie_goes_to_lower_index() {
        let p = pts(&[[5.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        let e = build_knn_edges(&p, 1).unwrap();
        assert_eq!(e.edges[0], (0, 1));
        assert_eq!(e.edges, build_knn_edges(&p, 1).unwrap().edges);
        assert_eq!(e.attributes.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn k_must_be_below_n() {
        let p = pts(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(build_knn_edges(&p, 2), Err(Error::Config(_))));
        assert!(matches!(build_knn_edges(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn edge_attribute_examples() {
        let p = pts(&[[0.0; 3], [1.0, 2.0, 3.0]]);
        let a = edge_attributes(&p, &[(0, 1)]).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 3.0]);
        assert!(matches!(edge_attributes(&p, &[(0, 5)]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn load_feature_modes() {
        let prev = pts(&[[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]);
        let f = make_load_features(&prev, &prev, LoadMode::Delta).unwrap();
        assert_eq!(f.narrow(1, 3, 3).unwrap(), Tensor::zeros([2, 3]));
        assert_eq!(f.narrow(1, 0, 3).unwrap(), prev);

        let v = pts(&[[4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let f = make_load_features(&Tensor::zeros([2, 3]), &v, LoadMode::Absolute).unwrap();
        assert_eq!(f.narrow(1, 3, 3).unwrap(), v);

        let moved = prev.add(&Tensor::new([3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let f = make_load_features(&prev, &moved, LoadMode::Delta).unwrap();
        for r in 0..2 {
            assert_eq!(&f.row(r)[3..], &[1.0, 0.0, 0.0]);
        }
        assert!(make_load_features(&prev, &Tensor::zeros([3, 3]), LoadMode::Delta).is_err());
    }

    #[test]
    fn zero_variance_channel_is_only_shifted() {
        let t = Tensor::from_rows(&[[2.0, 1.0], [2.0, 3.0]]).unwrap();
        let s = ChannelStats::from_rows(&[&t]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        let n = s.normalize(&t).unwrap();
        assert_eq!(n.at(0, 0), 0.0);
        assert_eq!(s.denormalize(&n).unwrap(), t);
    }

    #[test]
    fn stats_channel_mismatch() {
        let s = ChannelStats::identity(2);
        assert!(matches!(s.normalize(&Tensor::zeros([1, 3])), Err(Error::Config(_))));
    }
}
