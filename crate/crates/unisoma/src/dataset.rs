//! Dataset directories: `manifest.json` plus one trajectory file per sample
//! under `samples/`.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unisoma_core::rng::mix;
use unisoma_core::scene::SceneSample;
use unisoma_core::worlds::{generate_trajectory, longtime_sample, ScenarioConfig};

use crate::certify::verify_frames;
use crate::error::{json_error, Error, Result};
use crate::scene_io::{load_trajectory, save_trajectory};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u64,
    pub seed: u64,
    pub file: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[u64]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub samples: Vec<SampleEntry>,
    pub splits: Splits,
    /// Seeds whose trajectories failed to converge and were left out.
    pub skipped: Vec<Skipped>,
    /// Worst certificate residual over all emitted frames.
    pub max_residual: f64,
}

/// Sample counts for `n` samples split by `ratios`; test takes the rest.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    Ok([train, val, n - train - val])
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

fn skippable(e: &Error) -> bool {
    use unisoma_core::Error as Core;
    match e {
        Error::Certificate { .. } => true,
        Error::Core(c) => matches!(c.root(), Core::NonConvergence { .. } | Core::NonFinite { .. }),
        _ => false,
    }
}

/// Generates `n` trajectories into `dir`.
///
/// Candidate `i` uses seed `mix(seed, i)`. Candidates that fail to converge
/// or to certify are recorded in the manifest and replaced by the next
/// ones, so the result depends only on the inputs, not on `jobs`.
pub fn generate_dataset(cfg: &ScenarioConfig, n: usize, ratios: [f64; 3], seed: u64, dir: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    let counts = split_counts(n, ratios)?;
    if n == 0 {
        return Err(Error::Config("`samples` must be at least 1".into()));
    }
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let pool = thread_pool(jobs.max(1))?;
    let max_candidates = 2 * n + 16;
    let mut accepted: Vec<(u64, Vec<SceneSample>)> = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut next = 0usize;
    while accepted.len() < n {
        if next >= max_candidates {
            return Err(Error::Core(unisoma_core::Error::NonConvergence {
                iterations: next,
                residual: f64::NAN,
            }
            .context(format!("only {} of {n} trajectories converged", accepted.len()))));
        }
        let batch: Vec<usize> = (next..(next + n - accepted.len()).min(max_candidates)).collect();
        next += batch.len();
        let results: Vec<(u64, Result<Vec<SceneSample>>)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let s = mix(seed, i as u64);
                    let r = generate_trajectory(cfg, s).map_err(Error::from).and_then(|frames| {
                        verify_frames(&frames, Path::new("<generated>"))?;
                        Ok(frames)
                    });
                    (s, r)
                })
                .collect()
        });
        for (s, r) in results {
            match r {
                Ok(frames) if accepted.len() < n => accepted.push((s, frames)),
                Ok(_) => {}
                Err(e) if skippable(&e) => {
                    warn!("seed {s} skipped: {e}");
                    skipped.push(Skipped { seed: s, reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }
    }
    let mut samples = Vec::with_capacity(n);
    let mut max_residual = 0.0f64;
    let written: Vec<Result<(SampleEntry, f64)>> = pool.install(|| {
        accepted
            .par_iter_mut()
            .enumerate()
            .map(|(id, (s, frames))| {
                for f in frames.iter_mut() {
                    f.sample_id = id as u64;
                }
                let file = format!("samples/{id:05}.json");
                let path = dir.join(&file);
                save_trajectory(frames, &path)?;
                let worst = frames.iter().filter_map(|f| f.certificate.as_ref()).fold(0.0f64, |m, c| m.max(c.residual));
                Ok((
                    SampleEntry {
                        id: id as u64,
                        seed: *s,
                        file,
                        steps: frames.len(),
                    },
                    worst,
                ))
            })
            .collect()
    });
    for w in written {
        let (entry, worst) = w?;
        max_residual = max_residual.max(worst);
        samples.push(entry);
    }
    let ids: Vec<u64> = (0..n as u64).collect();
    let splits = Splits {
        train: ids[..counts[0]].to_vec(),
        val: ids[counts[0]..counts[0] + counts[1]].to_vec(),
        test: ids[counts[0] + counts[1]..].to_vec(),
    };
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        scenario: cfg.clone(),
        samples,
        splits,
        skipped,
        max_residual,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    info!("wrote {n} trajectories to {}, worst residual {max_residual:e}", dir.display());
    Ok(manifest)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(&path, &text, &e))?;
        let found = value.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                path,
                found,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        let manifest = serde_json::from_str(&text).map_err(|e| json_error(&path, &text, &e))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn split_ids(&self, split: &str) -> Result<&[u64]> {
        self.manifest
            .splits
            .get(split)
            .ok_or_else(|| Error::Config(format!("unknown split `{split}`, expected one of {SPLITS:?}")))
    }

    /// Loads one trajectory and re-verifies its certificates.
    pub fn trajectory(&self, id: u64) -> Result<Vec<SceneSample>> {
        let entry = self
            .manifest
            .samples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Config(format!("dataset has no sample {id}")))?;
        let path = self.dir.join(&entry.file);
        let frames = load_trajectory(&path)?;
        verify_frames(&frames, &path)?;
        Ok(frames)
    }

    /// Every trajectory of `split`, in manifest order.
    pub fn trajectories(&self, split: &str) -> Result<Vec<Vec<SceneSample>>> {
        self.split_ids(split)?.par_iter().map(|&id| self.trajectory(id)).collect()
    }

    /// Long-time samples (first input, final target) of `split`.
    pub fn longtime(&self, split: &str) -> Result<Vec<SceneSample>> {
        self.trajectories(split)?
            .iter()
            .map(|t| longtime_sample(t).map_err(Error::from))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            steps: 2,
            ..ScenarioConfig::cavity_grip()
        }
    }

    #[test]
    fn split_counts_follow_ratios() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_counts(80, [0.8, 0.1, 0.1]).unwrap(), [64, 8, 8]);
        assert!(split_counts(10, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn manifest_lists_splits_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), 10, [0.8, 0.1, 0.1], 4, dir.path(), 2).unwrap();
        assert_eq!((m.splits.train.len(), m.splits.val.len(), m.splits.test.len()), (8, 1, 1));
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let test = ds.trajectories("test").unwrap();
        assert_eq!(test[0][0].sample_id, 9);
        assert!(ds.trajectories("nope").is_err());
        let mut seeds: Vec<u64> = m.samples.iter().map(|s| s.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn worker_count_does_not_change_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small(), 3, [1.0, 0.0, 0.0], 9, a.path(), 1).unwrap();
        generate_dataset(&small(), 3, [1.0, 0.0, 0.0], 9, b.path(), 3).unwrap();
        for f in ["manifest.json", "samples/00002.json", "samples/00002.bin"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
