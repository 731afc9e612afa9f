//! On-disk dataset layout:
//!
//! - `manifest.json`: format version, RNG algorithm, scene spec, sample index
//! - `images.bin`: little-endian `f32`, row-major, sample-major
//! - `annotations.json`: per-sample `gt_counts` and `gt_points`

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, SceneSample, SceneSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const RNG_ALGORITHM: &str = "chacha8 (rand_chacha 0.9, seed_from_u64)";

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const ANNOTATIONS: &str = "annotations.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    index: usize,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: String,
    rng_algorithm: String,
    spec: SceneSpec,
    num_samples: usize,
    image_shape: [usize; 3],
    images_file: String,
    annotations_file: String,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    index: usize,
    gt_counts: Vec<u32>,
    gt_points: Vec<Vec<[u32; 2]>>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = dataset.spec.image_size;
    let image_bytes = (3 * s * s * 4) as u64;
    let mut blob = Vec::with_capacity(dataset.len() * image_bytes as usize);
    for sample in &dataset.samples {
        blob.extend(f32_le_bytes(sample.image.data()));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        spec: dataset.spec.clone(),
        num_samples: dataset.len(),
        image_shape: [3, s, s],
        images_file: IMAGES.into(),
        annotations_file: ANNOTATIONS.into(),
        samples: (0..dataset.len())
            .map(|index| SampleEntry {
                index,
                byte_offset: index as u64 * image_bytes,
            })
            .collect(),
    };
    let annotations: Vec<AnnotationEntry> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| AnnotationEntry {
            index,
            gt_counts: s.gt_counts.clone(),
            gt_points: s
                .gt_points
                .iter()
                .map(|pts| pts.iter().map(|&(r, c)| [r, c]).collect())
                .collect(),
        })
        .collect();
    write(&dir.join(IMAGES), &blob)?;
    write(&dir.join(ANNOTATIONS), &serde_json::to_vec(&annotations)?)?;
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw: serde_json::Value =
        serde_json::from_slice(&read(&dir.join(MANIFEST))?).map_err(|e| Error::format("manifest", e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {other:?}, expected {FORMAT_VERSION:?}"),
            ))
        }
        None => return Err(Error::format("format_version", "missing")),
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::format("manifest", e.to_string()))?;
    manifest.spec.validate()?;
    let s = manifest.spec.image_size;
    if manifest.image_shape != [3, s, s] {
        return Err(Error::format(
            "image_shape",
            format!("{:?} does not match image_size {s}", manifest.image_shape),
        ));
    }
    if manifest.samples.len() != manifest.num_samples {
        return Err(Error::format(
            "samples",
            format!(
                "{} entries for num_samples {}",
                manifest.samples.len(),
                manifest.num_samples
            ),
        ));
    }
    let image_len = 3 * s * s;
    let blob = read(&dir.join(&manifest.images_file))?;
    let expected = manifest.num_samples * image_len * 4;
    if blob.len() != expected {
        return Err(Error::format(
            "images_file",
            format!("expected {expected} bytes, found {}", blob.len()),
        ));
    }
    let annotations: Vec<AnnotationEntry> = serde_json::from_slice(&read(&dir.join(&manifest.annotations_file))?)
        .map_err(|e| Error::format("annotations", e.to_string()))?;
    if annotations.len() != manifest.num_samples {
        return Err(Error::format(
            "annotations",
            format!("{} entries for {} samples", annotations.len(), manifest.num_samples),
        ));
    }
    let c = manifest.spec.num_categories;
    let mut samples = Vec::with_capacity(manifest.num_samples);
    for (entry, ann) in manifest.samples.iter().zip(annotations) {
        if ann.index != entry.index {
            return Err(Error::format(
                "annotations.index",
                format!("{} vs {}", ann.index, entry.index),
            ));
        }
        let off = entry.byte_offset as usize;
        if off + image_len * 4 > blob.len() {
            return Err(Error::format(
                "samples.byte_offset",
                format!("sample {} offset {off} past end of blob", entry.index),
            ));
        }
        if ann.gt_counts.len() != c || ann.gt_points.len() != c {
            return Err(Error::format(
                "gt_counts",
                format!(
                    "sample {} has {} categories, expected {c}",
                    entry.index,
                    ann.gt_counts.len()
                ),
            ));
        }
        for (k, pts) in ann.gt_counts.iter().zip(&ann.gt_points) {
            if *k as usize != pts.len() || pts.iter().any(|p| p[0] as usize >= s || p[1] as usize >= s) {
                return Err(Error::format(
                    "gt_points",
                    format!(
                        "sample {} points inconsistent with counts or out of bounds",
                        entry.index
                    ),
                ));
            }
        }
        let image = Tensor::new(vec![3, s, s], f32_from_le(&blob[off..off + image_len * 4]))?;
        samples.push(SceneSample {
            image,
            gt_counts: ann.gt_counts,
            gt_points: ann
                .gt_points
                .into_iter()
                .map(|pts| pts.into_iter().map(|[r, c]| (r, c)).collect())
                .collect(),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        samples,
    })
}

/// SHA-256 over images and counts; identifies a dataset across runs.
pub fn dataset_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for s in &dataset.samples {
        h.update(f32_le_bytes(s.image.data()));
        for c in &s.gt_counts {
            h.update(c.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes every image as binary PPM (`P6`, maxval 255).
pub fn export_ppm(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = dataset.spec.image_size;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let path = dir.join(format!("sample_{i:05}.ppm"));
        let mut buf = Vec::with_capacity(3 * s * s + 32);
        write!(buf, "P6\n{s} {s}\n255\n").expect("write to vec");
        let d = sample.image.data();
        for p in 0..s * s {
            for ch in 0..3 {
                buf.push((d[ch * s * s + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        write(&path, &buf)?;
    }
    Ok(())
}
