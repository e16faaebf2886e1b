//! Synthetic multi-dataset generator with a planted fine/coarse hierarchy.
//!
//! Every image is a random guillotine tiling of rectangles, each rectangle
//! assigned a fine class. Pixel features are drawn from a Gaussian around
//! the fine class mean, so the feature distribution depends on the fine
//! truth only. Each dataset sees the same fine truth through its own
//! coarsening map, which is where the cross-dataset label conflicts come
//! from.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Map3};
use crate::labelspace::{DatasetTaxonomy, LabelMap};

pub const COARSE: &str = "COARSE";
pub const FINE: &str = "FINE";
pub const FINE_B: &str = "FINE_B";

/// One dataset's view of the fine classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub dataset_id: String,
    /// Local taxonomy, in local index order.
    pub classes: Vec<String>,
    /// Fine class name → local class name.
    pub coarsen: BTreeMap<String, String>,
}

impl DatasetView {
    pub fn taxonomy(&self) -> Result<DatasetTaxonomy> {
        DatasetTaxonomy::new(self.dataset_id.clone(), self.classes.iter().cloned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub fine_classes: Vec<String>,
    pub datasets: Vec<DatasetView>,
    pub feature_dim: usize,
    pub cluster_means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    pub min_rect: usize,
    pub max_rect: usize,
    pub seed: u64,
}

/// One synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub dataset_id: String,
    pub features: FeatureMap,
    /// Labels in the dataset's local space.
    pub labels: LabelMap,
    /// Fine-class truth, for diagnostics only.
    pub fine_truth: LabelMap,
}

/// A dataset's taxonomy together with its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: DatasetTaxonomy,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.taxonomy.dataset_id
    }
}

impl HierarchySpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.fine_classes.len();
        if k == 0 {
            return Err(Error::Config("no fine classes".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.cluster_means.len() != k
            || self.cluster_means.iter().any(|m| m.len() != self.feature_dim)
        {
            return Err(Error::Config(format!(
                "need {k} cluster means of dimension {}",
                self.feature_dim
            )));
        }
        for a in 0..k {
            for b in a + 1..k {
                if self.cluster_means[a] == self.cluster_means[b] {
                    return Err(Error::Config(format!(
                        "cluster means of `{}` and `{}` coincide",
                        self.fine_classes[a], self.fine_classes[b]
                    )));
                }
            }
        }
        if !(self.cluster_std >= 0.0) || !self.cluster_std.is_finite() {
            return Err(Error::Config("cluster_std must be finite and >= 0".into()));
        }
        if self.min_rect == 0 || self.max_rect < 2 * self.min_rect {
            return Err(Error::Config(
                "rectangle sizes need min_rect >= 1 and max_rect >= 2 * min_rect".into(),
            ));
        }
        let mut ids = HashSet::new();
        for view in &self.datasets {
            if !ids.insert(view.dataset_id.as_str()) {
                return Err(Error::DuplicateDataset(view.dataset_id.clone()));
            }
            view.taxonomy()?;
            for fine in &self.fine_classes {
                let local = view.coarsen.get(fine).ok_or_else(|| {
                    Error::Config(format!(
                        "dataset `{}` does not map fine class `{fine}`",
                        view.dataset_id
                    ))
                })?;
                if !view.classes.contains(local) {
                    return Err(Error::Config(format!(
                        "dataset `{}` maps `{fine}` to unknown class `{local}`",
                        view.dataset_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn view(&self, dataset_id: &str) -> Result<&DatasetView> {
        self.datasets
            .iter()
            .find(|v| v.dataset_id == dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))
    }

    pub fn taxonomies(&self) -> Result<Vec<DatasetTaxonomy>> {
        self.datasets.iter().map(DatasetView::taxonomy).collect()
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_classes.iter().position(|c| c == name)
    }

    /// Fine index → local index for one dataset.
    pub fn coarsen_table(&self, dataset_id: &str) -> Result<Vec<u32>> {
        let view = self.view(dataset_id)?;
        self.fine_classes
            .iter()
            .map(|fine| {
                let local = &view.coarsen[fine];
                Ok(view.classes.iter().position(|c| c == local).unwrap() as u32)
            })
            .collect()
    }

    /// Fine → coarse pairs of one dataset where the names differ, i.e. the
    /// subset/superset relations a relation-discovery pass should find when
    /// looking from a dataset that keeps the fine name.
    pub fn merged_classes(&self, dataset_id: &str) -> Result<Vec<(String, String)>> {
        let view = self.view(dataset_id)?;
        Ok(view
            .coarsen
            .iter()
            .filter(|(fine, coarse)| fine != coarse)
            .map(|(f, c)| (f.clone(), c.clone()))
            .collect())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn image_seed(seed: u64, split_seed: u64, dataset: &str, image: usize) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ split_seed);
    for b in dataset.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ image as u64)
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    row: usize,
    col: usize,
    height: usize,
    width: usize,
}

fn tile(rng: &mut ChaCha8Rng, rect: Rect, min: usize, max: usize, out: &mut Vec<Rect>) {
    let split_rows = rect.height > max && rect.height >= 2 * min;
    let split_cols = rect.width > max && rect.width >= 2 * min;
    let along_rows = match (split_rows, split_cols) {
        (false, false) => {
            out.push(rect);
            return;
        }
        (true, false) => true,
        (false, true) => false,
        (true, true) => rect.height >= rect.width,
    };
    if along_rows {
        let cut = rng.random_range(min..=rect.height - min);
        tile(rng, Rect { height: cut, ..rect }, min, max, out);
        tile(
            rng,
            Rect {
                row: rect.row + cut,
                height: rect.height - cut,
                ..rect
            },
            min,
            max,
            out,
        );
    } else {
        let cut = rng.random_range(min..=rect.width - min);
        tile(rng, Rect { width: cut, ..rect }, min, max, out);
        tile(
            rng,
            Rect {
                col: rect.col + cut,
                width: rect.width - cut,
                ..rect
            },
            min,
            max,
            out,
        );
    }
}

/// Generates `n_images` samples of one dataset; deterministic per
/// `(spec.seed, split_seed, dataset_id)`.
pub fn generate(
    spec: &HierarchySpec,
    dataset_id: &str,
    n_images: usize,
    height: usize,
    width: usize,
    split_seed: u64,
) -> Result<Vec<Sample>> {
    if n_images == 0 || height == 0 || width == 0 {
        return Err(Error::Config(
            "n_images, height and width must be positive".into(),
        ));
    }
    spec.validate()?;
    let coarsen = spec.coarsen_table(dataset_id)?;
    let n_fine = spec.fine_classes.len();
    let f = spec.feature_dim;
    let noise = Normal::new(0.0, spec.cluster_std)
        .map_err(|e| Error::Config(format!("cluster_std: {e}")))?;

    (0..n_images)
        .map(|image| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(image_seed(spec.seed, split_seed, dataset_id, image));
            let mut rects = Vec::new();
            let min = spec.min_rect.min(height.min(width));
            tile(
                &mut rng,
                Rect {
                    row: 0,
                    col: 0,
                    height,
                    width,
                },
                min,
                spec.max_rect.max(2 * min),
                &mut rects,
            );
            let mut fine = vec![0u32; height * width];
            for rect in &rects {
                let class = rng.random_range(0..n_fine) as u32;
                for r in rect.row..rect.row + rect.height {
                    fine[r * width + rect.col..r * width + rect.col + rect.width].fill(class);
                }
            }
            let mut data = Vec::with_capacity(height * width * f);
            for &class in &fine {
                let mean = &spec.cluster_means[class as usize];
                for &m in mean {
                    data.push(m + noise.sample(&mut rng));
                }
            }
            let labels: Vec<u32> = fine.iter().map(|&c| coarsen[c as usize]).collect();
            Ok(Sample {
                dataset_id: dataset_id.to_string(),
                features: Map3::new(height, width, f, data)?,
                labels: LabelMap::new(height, width, labels)?,
                fine_truth: LabelMap::new(height, width, fine)?,
            })
        })
        .collect()
}

pub const FIXTURE_FINE_CLASSES: [&str; 8] = [
    "road",
    "lane_marking",
    "sidewalk",
    "building",
    "vehicle",
    "motorcyclist",
    "bicyclist",
    "background",
];

fn identity_view(id: &str) -> DatasetView {
    DatasetView {
        dataset_id: id.to_string(),
        classes: FIXTURE_FINE_CLASSES.iter().map(|s| s.to_string()).collect(),
        coarsen: FIXTURE_FINE_CLASSES
            .iter()
            .map(|s| (s.to_string(), s.to_string()))
            .collect(),
    }
}

fn coarse_view() -> DatasetView {
    let classes = ["road", "sidewalk", "building", "vehicle", "rider", "background"];
    let coarsen = FIXTURE_FINE_CLASSES
        .iter()
        .map(|&fine| {
            let local = match fine {
                "lane_marking" => "road",
                "motorcyclist" | "bicyclist" => "rider",
                other => other,
            };
            (fine.to_string(), local.to_string())
        })
        .collect();
    DatasetView {
        dataset_id: COARSE.to_string(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        coarsen,
    }
}

/// Cluster geometry of the fixture: six well separated anchors, with
/// `lane_marking` placed next to `road` and `motorcyclist`/`bicyclist` on
/// either side of a shared rider anchor.
fn fixture_means() -> Vec<Vec<f64>> {
    const DIM: usize = 8;
    const SPREAD: f64 = 3.0;
    const NEAR: f64 = 0.8;
    let axis = |k: usize, v: f64| {
        let mut m = vec![0.0; DIM];
        m[k] = v;
        m
    };
    let road = axis(0, SPREAD);
    let mut lane_marking = road.clone();
    lane_marking[6] = 2.0 * NEAR;
    let rider = axis(4, SPREAD);
    let mut motorcyclist = rider.clone();
    motorcyclist[7] = NEAR;
    let mut bicyclist = rider;
    bicyclist[7] = -NEAR;
    vec![
        road,
        lane_marking,
        axis(1, SPREAD),
        axis(2, SPREAD),
        axis(3, SPREAD),
        motorcyclist,
        bicyclist,
        axis(5, SPREAD),
    ]
}

/// Two-dataset fixture: COARSE merges `lane_marking→road` and
/// `motorcyclist, bicyclist→rider`; FINE keeps all eight fine classes.
pub fn default_fixture() -> (HierarchySpec, Vec<DatasetTaxonomy>) {
    fixture_with(vec![coarse_view(), identity_view(FINE)])
}

/// The default fixture plus FINE_B, a second fine-grained dataset, so that
/// every leave-one-out setting still trains on more than one dataset.
pub fn leave_one_out_fixture() -> (HierarchySpec, Vec<DatasetTaxonomy>) {
    fixture_with(vec![
        coarse_view(),
        identity_view(FINE),
        identity_view(FINE_B),
    ])
}

fn fixture_with(datasets: Vec<DatasetView>) -> (HierarchySpec, Vec<DatasetTaxonomy>) {
    let spec = HierarchySpec {
        fine_classes: FIXTURE_FINE_CLASSES.iter().map(|s| s.to_string()).collect(),
        datasets,
        feature_dim: 8,
        cluster_means: fixture_means(),
        cluster_std: 0.4,
        min_rect: 4,
        max_rect: 12,
        seed: 0,
    };
    let taxonomies = spec.taxonomies().expect("fixture taxonomies are valid");
    (spec, taxonomies)
}
