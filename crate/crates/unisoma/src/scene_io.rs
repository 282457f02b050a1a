//! Scene files: a JSON header next to a binary payload of little-endian
//! `f64` arrays.
//!
//! `name.json` describes every object, its channel layout and where its
//! arrays live in `name.bin`. A file holds one or more frames, so a whole
//! trajectory fits in one pair of files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unisoma_core::scene::{LoadMode, LoadObject, Quantity, Role, SceneSample, SolidObject, Target};
use unisoma_core::worlds::OracleCertificate;
use unisoma_core::Tensor;

use crate::error::{json_error, Error, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRef {
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ObjectHeader {
    name: String,
    role: Role,
    points: ArrayRef,
    properties: ArrayRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LoadHeader {
    name: String,
    source: usize,
    mode: LoadMode,
    origin: ArrayRef,
    motion: ArrayRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TargetHeader {
    quantities: Vec<Quantity>,
    values: ArrayRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FrameHeader {
    sample_id: u64,
    step_index: usize,
    seed: u64,
    deformables: Vec<ObjectHeader>,
    rigids: Vec<ObjectHeader>,
    loads: Vec<LoadHeader>,
    contact_pairs: Vec<(usize, usize)>,
    targets: Vec<TargetHeader>,
    certificate: Option<OracleCertificate>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    schema_version: u32,
    payload: String,
    payload_bytes: usize,
    frames: Vec<FrameHeader>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, t: &Tensor) -> ArrayRef {
        let offset = self.bytes.len();
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        ArrayRef {
            offset,
            shape: t.shape().to_vec(),
        }
    }

    fn object(&mut self, o: &SolidObject) -> ObjectHeader {
        ObjectHeader {
            name: o.name.clone(),
            role: o.role,
            points: self.push(&o.points),
            properties: self.push(&o.properties),
        }
    }
}

struct PayloadReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl PayloadReader<'_> {
    fn read(&self, r: &ArrayRef) -> Result<Tensor> {
        let len: usize = r.shape.iter().product();
        let end = r.offset.saturating_add(len * 8);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: end - self.bytes.len(),
            });
        }
        let data = self.bytes[r.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(r.shape.clone(), data).map_err(|e| Error::invalid(self.path, e))
    }

    fn object(&self, h: &ObjectHeader) -> Result<SolidObject> {
        Ok(SolidObject {
            name: h.name.clone(),
            role: h.role,
            points: self.read(&h.points)?,
            properties: self.read(&h.properties)?,
        })
    }

    fn frame(&self, h: &FrameHeader) -> Result<SceneSample> {
        let objects = |list: &[ObjectHeader]| list.iter().map(|o| self.object(o)).collect::<Result<Vec<_>>>();
        let loads = h
            .loads
            .iter()
            .map(|l| {
                Ok(LoadObject {
                    name: l.name.clone(),
                    source: l.source,
                    origin: self.read(&l.origin)?,
                    motion: self.read(&l.motion)?,
                    mode: l.mode,
                })
            })
            .collect::<Result<_>>()?;
        let targets = h
            .targets
            .iter()
            .map(|t| {
                Ok(Target {
                    values: self.read(&t.values)?,
                    quantities: t.quantities.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneSample {
            deformables: objects(&h.deformables)?,
            rigids: objects(&h.rigids)?,
            loads,
            contact_pairs: h.contact_pairs.clone(),
            targets,
            step_index: h.step_index,
            sample_id: h.sample_id,
            seed: h.seed,
            certificate: h.certificate.clone(),
        })
    }
}

/// Path of the payload that belongs to the header at `path`.
pub fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes `frames` to `path` (the JSON header) and its `.bin` payload.
pub fn save_trajectory(frames: &[SceneSample], path: &Path) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        f.validate().map_err(|e| Error::invalid(path, e.context(format!("frame {i}"))))?;
    }
    let mut payload = PayloadWriter::default();
    let headers = frames
        .iter()
        .map(|s| FrameHeader {
            sample_id: s.sample_id,
            step_index: s.step_index,
            seed: s.seed,
            deformables: s.deformables.iter().map(|o| payload.object(o)).collect(),
            rigids: s.rigids.iter().map(|o| payload.object(o)).collect(),
            loads: s
                .loads
                .iter()
                .map(|l| LoadHeader {
                    name: l.name.clone(),
                    source: l.source,
                    mode: l.mode,
                    origin: payload.push(&l.origin),
                    motion: payload.push(&l.motion),
                })
                .collect(),
            contact_pairs: s.contact_pairs.clone(),
            targets: s
                .targets
                .iter()
                .map(|t| TargetHeader {
                    quantities: t.quantities.clone(),
                    values: payload.push(&t.values),
                })
                .collect(),
            certificate: s.certificate.clone(),
        })
        .collect();
    let bin = payload_path(path);
    let header = FileHeader {
        schema_version: SCENE_SCHEMA_VERSION,
        payload: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        payload_bytes: payload.bytes.len(),
        frames: headers,
    };
    let text = serde_json::to_string_pretty(&header).expect("scene headers serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    fs::write(&bin, &payload.bytes).map_err(|e| Error::io(&bin, e))
}

/// Reads every frame stored at `path`, validating each one.
pub fn load_trajectory(path: &Path) -> Result<Vec<SceneSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| json_error(path, &text, &e))?;
    if probe.schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: probe.schema_version,
            expected: SCENE_SCHEMA_VERSION,
        });
    }
    let header: FileHeader = serde_json::from_str(&text).map_err(|e| json_error(path, &text, &e))?;
    let bin = path.with_file_name(&header.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() < header.payload_bytes {
        return Err(Error::Truncated {
            path: bin,
            offset: bytes.len(),
            needed: header.payload_bytes - bytes.len(),
        });
    }
    let reader = PayloadReader { path: &bin, bytes: &bytes };
    header
        .frames
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let s = reader.frame(h)?;
            s.validate().map_err(|e| Error::invalid(path, e.context(format!("frame {i}"))))?;
            Ok(s)
        })
        .collect()
}

pub fn save_scene(sample: &SceneSample, path: &Path) -> Result<()> {
    save_trajectory(std::slice::from_ref(sample), path)
}

/// Reads a single-frame scene file.
pub fn load_scene(path: &Path) -> Result<SceneSample> {
    let mut frames = load_trajectory(path)?;
    if frames.len() != 1 {
        return Err(Error::invalid(
            path,
            unisoma_core::Error::InvalidScene(format!("expected one frame, found {}", frames.len())),
        ));
    }
    Ok(frames.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use unisoma_core::worlds::{generate_trajectory, ScenarioConfig};

    fn sample() -> SceneSample {
        let cfg = ScenarioConfig {
            steps: 2,
            ..ScenarioConfig::cavity_grip()
        };
        generate_trajectory(&cfg, 3).unwrap().remove(0)
    }

    #[test]
    fn round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = sample();
        save_scene(&s, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), s);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scene(&sample(), &path).unwrap();
        let bin = payload_path(&path);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 12]).unwrap();
        match load_scene(&path) {
            Err(Error::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, bytes.len() - 12);
                assert_eq!(needed, 12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scene(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..200]).unwrap();
        match load_scene(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 200),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_missing_file_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        assert!(matches!(load_scene(&path), Err(Error::Io { .. })));
        save_scene(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_scene(&path), Err(Error::SchemaVersion { found: 9, .. })));
    }

    #[test]
    fn bad_contact_pair_names_the_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scene(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut v = v;
        v["frames"][0]["contact_pairs"][0] = serde_json::json!([0, 7]);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = load_scene(&path).unwrap_err();
        assert!(matches!(err, Error::Invalid { .. }));
        assert!(err.to_string().contains("(0, 7)"), "{err}");
    }
}
