//! On-disk synthetic datasets: one directory per split holding `manifest.json`
//! and a pair of tensor files per sample.

use std::fs;
use std::path::Path;

use geo_repnet_core::synth::{self, SampleRecord, GENERATOR_VERSION, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{json, tensorfile};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub label: usize,
    pub rgb: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub version: u32,
    pub image_size: usize,
    pub counts: Vec<usize>,
    pub files: Vec<SampleFiles>,
}

impl DatasetManifest {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != GENERATOR_VERSION {
            return Err(Error::Data(format!(
                "dataset generator version {} is not supported (expected {GENERATOR_VERSION})",
                self.version
            )));
        }
        if self.counts.len() != NUM_CLASSES {
            return Err(Error::Data(format!("manifest lists {} class counts, expected {NUM_CLASSES}", self.counts.len())));
        }
        if self.total() != self.files.len() {
            return Err(Error::Data(format!(
                "manifest counts sum to {} but {} samples are listed",
                self.total(),
                self.files.len()
            )));
        }
        let mut seen = vec![0usize; NUM_CLASSES];
        for (i, f) in self.files.iter().enumerate() {
            if f.label >= NUM_CLASSES {
                return Err(Error::Data(format!("sample {i}: label {} out of range", f.label)));
            }
            seen[f.label] += 1;
        }
        if seen != self.counts {
            return Err(Error::Data(format!(
                "labels of the listed samples {seen:?} disagree with counts {:?}",
                self.counts
            )));
        }
        Ok(())
    }
}

/// Stable per-split stream id (64-bit FNV-1a of the split name).
pub fn split_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Writes a split to `out_dir`, creating it if needed.
pub fn generate_dataset(counts: &[usize], seed: u64, split: &str, image_size: usize, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if counts.len() != NUM_CLASSES {
        return Err(Error::Usage(format!("expected {NUM_CLASSES} class counts, got {}", counts.len())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stream = split_id(split);
    let mut files = Vec::with_capacity(counts.iter().sum());
    for (i, label) in synth::split_labels(counts).into_iter().enumerate() {
        let sample = synth::generate_sample(label, image_size, &mut synth::sample_rng(seed, stream, i))?;
        let entry = SampleFiles {
            label,
            rgb: format!("{i:06}_rgb.grtf"),
            depth: format!("{i:06}_depth.grtf"),
        };
        tensorfile::write_tensor(&sample.rgb, out_dir.join(&entry.rgb))?;
        tensorfile::write_tensor(&sample.depth, out_dir.join(&entry.depth))?;
        files.push(entry);
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        seed,
        version: GENERATOR_VERSION,
        image_size,
        counts: counts.to_vec(),
        files,
    };
    json::write_canonical(&manifest, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = json::read_json(dir.as_ref().join(MANIFEST_FILE))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads every sample in manifest order, validating each one.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let s = manifest.image_size;
    manifest
        .files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let at = |e: Error| Error::Data(format!("sample {i}: {e}"));
            let rgb = tensorfile::read_tensor(dir.join(&f.rgb)).map_err(at)?;
            let depth = tensorfile::read_tensor(dir.join(&f.depth)).map_err(at)?;
            if rgb.shape() != [3, s, s] || depth.shape() != [s, s] {
                return Err(Error::Data(format!(
                    "sample {i}: shapes {:?} and {:?} do not match image size {s}",
                    rgb.shape(),
                    depth.shape()
                )));
            }
            let record = SampleRecord { rgb, depth, label: f.label };
            record.validate().map_err(|e| Error::Data(format!("sample {i}: {e}")))?;
            Ok(record)
        })
        .collect()
}

/// Generates the same split in memory without touching the filesystem.
pub fn generate_in_memory(counts: &[usize], seed: u64, split: &str, image_size: usize) -> Result<Vec<SampleRecord>> {
    Ok(synth::generate_split(counts, seed, split_id(split), image_size)?)
}

pub use geo_repnet_core::synth::shuffled_order;
