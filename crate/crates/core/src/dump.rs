//! On-disk dataset dumps: a JSON manifest plus raw little-endian arrays.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/<dataset_id>/<index>.features.bin   f64 LE, H×W×F row-major
//! <dir>/<split>/<dataset_id>/<index>.labels.bin     u32 LE, H×W local labels
//! <dir>/<split>/<dataset_id>/<index>.fine.bin       u32 LE, H×W fine truth
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Map3;
use crate::labelspace::{DatasetTaxonomy, LabelMap};
use crate::synth::{Dataset, HierarchySpec, Sample};

pub const FORMAT: &str = "uniseg-lab-dump/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub feature_dtype: String,
    pub label_dtype: String,
    pub hierarchy: Option<HierarchySpec>,
    pub datasets: Vec<ManifestDataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub dataset_id: String,
    pub classes: Vec<String>,
    pub split: String,
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub stem: String,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
}

fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_u32(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 8 {
        return Err(Error::Dump(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 8,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u32(path: &Path, expect: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Dump(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes datasets under `dir`, one subdirectory per dataset and split.
pub fn write_dump(
    dir: &Path,
    hierarchy: Option<&HierarchySpec>,
    splits: &[(&str, &[Dataset])],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        format: FORMAT.to_string(),
        feature_dtype: "f64le".to_string(),
        label_dtype: "u32le".to_string(),
        hierarchy: hierarchy.cloned(),
        datasets: Vec::new(),
    };
    for (split, datasets) in splits {
        for dataset in datasets.iter() {
            let sub = dir.join(split).join(dataset.id());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut entries = Vec::with_capacity(dataset.samples.len());
            for (i, sample) in dataset.samples.iter().enumerate() {
                let stem = format!("{i:06}");
                write_f64(
                    &sub.join(format!("{stem}.features.bin")),
                    &sample.features.data,
                )?;
                write_u32(&sub.join(format!("{stem}.labels.bin")), &sample.labels.values)?;
                write_u32(
                    &sub.join(format!("{stem}.fine.bin")),
                    &sample.fine_truth.values,
                )?;
                entries.push(ManifestSample {
                    stem,
                    height: sample.features.height,
                    width: sample.features.width,
                    feature_dim: sample.features.channels,
                });
            }
            manifest.datasets.push(ManifestDataset {
                dataset_id: dataset.id().to_string(),
                classes: dataset.taxonomy.classes.clone(),
                split: split.to_string(),
                samples: entries,
            });
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::Dump(format!("unsupported format `{}`", manifest.format)));
    }
    if manifest.feature_dtype != "f64le" || manifest.label_dtype != "u32le" {
        return Err(Error::Dump("unsupported dtype".into()));
    }
    Ok(manifest)
}

/// Loads every dataset of one split, in manifest order.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Dataset>> {
    let manifest = read_manifest(dir)?;
    manifest
        .datasets
        .iter()
        .filter(|d| d.split == split)
        .map(|d| {
            let taxonomy = DatasetTaxonomy::new(d.dataset_id.clone(), d.classes.iter().cloned())?;
            let sub = dir.join(&d.split).join(&d.dataset_id);
            let samples = d
                .samples
                .iter()
                .map(|s| {
                    let n = s.height * s.width;
                    let features = read_f64(
                        &sub.join(format!("{}.features.bin", s.stem)),
                        n * s.feature_dim,
                    )?;
                    let labels = read_u32(&sub.join(format!("{}.labels.bin", s.stem)), n)?;
                    let fine = read_u32(&sub.join(format!("{}.fine.bin", s.stem)), n)?;
                    let labels = LabelMap::new(s.height, s.width, labels)?;
                    labels.validate(taxonomy.num_classes())?;
                    Ok(Sample {
                        dataset_id: d.dataset_id.clone(),
                        features: Map3::new(s.height, s.width, s.feature_dim, features)?,
                        labels,
                        fine_truth: LabelMap::new(s.height, s.width, fine)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset { taxonomy, samples })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_fixture, generate};

    #[test]
    fn dump_round_trip() {
        let (spec, taxonomies) = default_fixture();
        let datasets: Vec<Dataset> = taxonomies
            .iter()
            .map(|t| Dataset {
                taxonomy: t.clone(),
                samples: generate(&spec, &t.dataset_id, 2, 6, 5, 0).unwrap(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_dump(dir.path(), Some(&spec), &[("train", &datasets)]).unwrap();
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back, datasets);
        assert!(read_split(dir.path(), "test").unwrap().is_empty());
        assert_eq!(read_manifest(dir.path()).unwrap().hierarchy, Some(spec));
    }

    #[test]
    fn truncated_array_is_rejected() {
        let (spec, taxonomies) = default_fixture();
        let datasets = vec![Dataset {
            taxonomy: taxonomies[0].clone(),
            samples: generate(&spec, "COARSE", 1, 4, 4, 0).unwrap(),
        }];
        let dir = tempfile::tempdir().unwrap();
        write_dump(dir.path(), None, &[("train", &datasets)]).unwrap();
        let file = dir.path().join("train/COARSE/000000.labels.bin");
        fs::write(&file, [0u8; 3]).unwrap();
        assert!(matches!(
            read_split(dir.path(), "train"),
            Err(Error::Dump(_))
        ));
    }
}
