//! Unified label space across datasets.
//!
//! Each dataset brings its own ordered taxonomy. The unified space is the
//! union of all class names, indexed in first-appearance order (datasets in
//! registration order, classes in local order). Class identity is exact
//! string equality.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: u32 = 255;

/// Ordered class list of one dataset. Local index = position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTaxonomy {
    pub dataset_id: String,
    pub classes: Vec<String>,
}

impl DatasetTaxonomy {
    pub fn new<S: Into<String>>(
        dataset_id: impl Into<String>,
        classes: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let taxonomy = DatasetTaxonomy {
            dataset_id: dataset_id.into(),
            classes: classes.into_iter().map(Into::into).collect(),
        };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::EmptyTaxonomy(self.dataset_id.clone()));
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if !seen.insert(class.as_str()) {
                return Err(Error::DuplicateClass {
                    dataset: self.dataset_id.clone(),
                    class: class.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Reads the `{"dataset_id": ..., "classes": [...]}` taxonomy file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let taxonomy: DatasetTaxonomy =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct DatasetEntry {
    dataset_id: String,
    membership: Vec<bool>,
    remap: Vec<usize>,
}

/// Union of per-dataset taxonomies with membership masks and remap tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedLabelSpace {
    classes: Vec<String>,
    datasets: Vec<DatasetEntry>,
}

/// Builds the unified label space from taxonomies in registration order.
pub fn unify(taxonomies: &[DatasetTaxonomy]) -> Result<UnifiedLabelSpace> {
    if taxonomies.is_empty() {
        return Err(Error::NoTaxonomies);
    }
    let mut ids = HashSet::new();
    for taxonomy in taxonomies {
        taxonomy.validate()?;
        if !ids.insert(taxonomy.dataset_id.as_str()) {
            return Err(Error::DuplicateDataset(taxonomy.dataset_id.clone()));
        }
    }

    let mut classes: Vec<String> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for taxonomy in taxonomies {
        for class in &taxonomy.classes {
            if !index.contains_key(class.as_str()) {
                index.insert(class.as_str(), classes.len());
                classes.push(class.clone());
            }
        }
    }

    let datasets = taxonomies
        .iter()
        .map(|taxonomy| {
            let remap: Vec<usize> = taxonomy
                .classes
                .iter()
                .map(|c| index[c.as_str()])
                .collect();
            let mut membership = vec![false; classes.len()];
            for &u in &remap {
                membership[u] = true;
            }
            DatasetEntry {
                dataset_id: taxonomy.dataset_id.clone(),
                membership,
                remap,
            }
        })
        .collect();

    Ok(UnifiedLabelSpace { classes, datasets })
}

impl UnifiedLabelSpace {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_name(&self, unified: usize) -> &str {
        &self.classes[unified]
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(|d| d.dataset_id.as_str())
    }

    pub fn dataset_index(&self, dataset_id: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.dataset_id == dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))
    }

    fn entry(&self, dataset_id: &str) -> Result<&DatasetEntry> {
        Ok(&self.datasets[self.dataset_index(dataset_id)?])
    }

    /// `membership[u]` is true iff unified class `u` belongs to the dataset.
    pub fn membership(&self, dataset_id: &str) -> Result<&[bool]> {
        Ok(&self.entry(dataset_id)?.membership)
    }

    /// Local index → unified index.
    pub fn remap_table(&self, dataset_id: &str) -> Result<&[usize]> {
        Ok(&self.entry(dataset_id)?.remap)
    }

    /// Unified index → local index, if the class is in the dataset.
    pub fn local_index(&self, dataset_id: &str, unified: usize) -> Result<Option<usize>> {
        Ok(self
            .entry(dataset_id)?
            .remap
            .iter()
            .position(|&u| u == unified))
    }

    pub fn taxonomy(&self, dataset_id: &str) -> Result<DatasetTaxonomy> {
        let entry = self.entry(dataset_id)?;
        Ok(DatasetTaxonomy {
            dataset_id: entry.dataset_id.clone(),
            classes: entry
                .remap
                .iter()
                .map(|&u| self.classes[u].clone())
                .collect(),
        })
    }

    /// Writes `dataset_id,local_index,class,unified_index` rows.
    pub fn write_remap_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["dataset_id", "local_index", "class", "unified_index"])?;
        for entry in &self.datasets {
            for (local, &unified) in entry.remap.iter().enumerate() {
                csv.write_record([
                    entry.dataset_id.as_str(),
                    &local.to_string(),
                    self.classes[unified].as_str(),
                    &unified.to_string(),
                ])?;
            }
        }
        csv.flush().map_err(|e| Error::io("<remap csv>", e))?;
        Ok(())
    }
}

/// H×W grid of class indices (or [`IGNORE`]), row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        LabelMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.values[row * self.width + col]
    }

    /// Every non-sentinel value must be below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (pixel, &value) in self.values.iter().enumerate() {
            if value != IGNORE && value as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    pixel,
                    value,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn flipped_horizontally(&self) -> LabelMap {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        LabelMap {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Replaces every local label with its unified index.
pub fn remap_labels(
    map: &LabelMap,
    dataset_id: &str,
    space: &UnifiedLabelSpace,
) -> Result<LabelMap> {
    let table = space.remap_table(dataset_id)?;
    let values = map
        .values
        .iter()
        .enumerate()
        .map(|(pixel, &value)| {
            if value == IGNORE {
                return Ok(IGNORE);
            }
            table
                .get(value as usize)
                .map(|&u| u as u32)
                .ok_or(Error::LabelOutOfRange {
                    pixel,
                    value,
                    num_classes: table.len(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelMap {
        height: map.height,
        width: map.width,
        values,
    })
}

/// Channels shared by a trained space and a test taxonomy, as
/// `(unified_index, test_local_index)` pairs in test-taxonomy order.
pub fn eval_projection(
    trained: &UnifiedLabelSpace,
    test: &DatasetTaxonomy,
) -> Vec<(usize, usize)> {
    test.classes
        .iter()
        .enumerate()
        .filter_map(|(local, name)| trained.index_of(name).map(|u| (u, local)))
        .collect()
}
