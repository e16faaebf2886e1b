//! Cross-dataset class relationships.
//!
//! A cosine-head model trained with Null BCE is run over every dataset. For
//! each dataset `i` and local class `c`, the mean sigmoid activation over
//! the pixels labelled `c` gives a similarity vector `s_{i,c}` over the
//! unified space. The activation threshold τ is the mean of the top scores
//! of those `(i, c)` whose top class lies outside dataset `i`. A class `c'`
//! outside dataset `i` becomes an extra positive for `(i, c)` when
//! `s_{i,c}[c'] > max(τ, s_{i,c}[c])`.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labelspace::{LabelMap, UnifiedLabelSpace, IGNORE};
use crate::losses::{sigmoid_scalar, TriState, TriStateLabelMap};
use crate::model::{HeadKind, SegModel};
use crate::synth::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityEntry {
    pub dataset_id: String,
    pub local_class: usize,
    /// Unified index of the local class.
    pub class: usize,
    /// Number of non-ignored pixels labelled with this class.
    pub count: u64,
    /// Mean activation per unified channel; `None` when `count == 0`.
    pub scores: Option<Vec<f64>>,
}

/// Per-(dataset, class) similarity vectors in dataset order, then local
/// class order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityTensor {
    pub num_classes: usize,
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityTensor {
    pub fn get(&self, dataset_id: &str, class: usize) -> Option<&SimilarityEntry> {
        self.entries
            .iter()
            .find(|e| e.dataset_id == dataset_id && e.class == class)
    }

    /// Rows `dataset_id,class,unified_class,score,count`; undefined rows
    /// carry an empty score.
    pub fn write_csv<W: Write>(&self, writer: W, space: &UnifiedLabelSpace) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["dataset_id", "class", "unified_class", "score", "count"])?;
        for e in &self.entries {
            let count = e.count.to_string();
            for u in 0..self.num_classes {
                let score = e
                    .scores
                    .as_ref()
                    .map(|s| format!("{:.6}", s[u]))
                    .unwrap_or_default();
                csv.write_record([
                    e.dataset_id.as_str(),
                    space.class_name(e.class),
                    space.class_name(u),
                    &score,
                    &count,
                ])?;
            }
        }
        csv.flush().map_err(|e| Error::io("<similarity csv>", e))?;
        Ok(())
    }
}

/// Mean sigmoid of the cosine logits over each class's pixels.
///
/// Accumulation runs in dataset, image, pixel order.
pub fn compute_similarity(
    model: &SegModel,
    datasets: &[Dataset],
    space: &UnifiedLabelSpace,
) -> Result<SimilarityTensor> {
    if model.spec.head != HeadKind::Cosine {
        return Err(Error::Config(
            "similarity extraction needs a cosine-head model".into(),
        ));
    }
    let k = space.num_classes();
    if model.num_classes() != k {
        return Err(Error::Shape(format!(
            "model has {} classes, space has {k}",
            model.num_classes()
        )));
    }
    let mut entries = Vec::new();
    for dataset in datasets {
        let remap = space.remap_table(dataset.id())?;
        let n_local = remap.len();
        let mut sums = vec![vec![0.0f64; k]; n_local];
        let mut counts = vec![0u64; n_local];
        for sample in &dataset.samples {
            sample.labels.validate(n_local)?;
            let logits = model.forward(&sample.features)?;
            for (p, &label) in sample.labels.values.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let c = label as usize;
                counts[c] += 1;
                for (acc, &o) in sums[c].iter_mut().zip(logits.pixel(p)) {
                    *acc += sigmoid_scalar(o);
                }
            }
        }
        for (local, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
            let scores = (count > 0).then(|| sum.iter().map(|s| s / count as f64).collect());
            entries.push(SimilarityEntry {
                dataset_id: dataset.id().to_string(),
                local_class: local,
                class: remap[local],
                count,
                scores,
            });
        }
    }
    Ok(SimilarityTensor {
        num_classes: k,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauContributor {
    pub dataset_id: String,
    pub class: usize,
    pub argmax: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauEstimate {
    pub value: f64,
    pub contributors: Vec<TauContributor>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean top score over the `(i, c)` whose top class is outside dataset `i`;
/// `None` when no such pair exists.
pub fn auto_tau(sim: &SimilarityTensor, space: &UnifiedLabelSpace) -> Result<Option<TauEstimate>> {
    let mut contributors = Vec::new();
    for e in &sim.entries {
        let Some(scores) = &e.scores else { continue };
        let membership = space.membership(&e.dataset_id)?;
        let top = argmax(scores);
        if !membership[top] {
            contributors.push(TauContributor {
                dataset_id: e.dataset_id.clone(),
                class: e.class,
                argmax: top,
                score: scores[top],
            });
        }
    }
    if contributors.is_empty() {
        return Ok(None);
    }
    let value = contributors.iter().map(|c| c.score).sum::<f64>() / contributors.len() as f64;
    Ok(Some(TauEstimate {
        value,
        contributors,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiLabelEntry {
    pub dataset_id: String,
    pub class: usize,
    /// Unified classes with a positive target, including `class` itself.
    pub active: Vec<usize>,
}

impl MultiLabelEntry {
    pub fn secondaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().copied().filter(move |&u| u != self.class)
    }
}

/// Multi-class targets per (dataset, class).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiLabelTable {
    pub tau: Option<f64>,
    pub entries: Vec<MultiLabelEntry>,
    pub warnings: Vec<String>,
}

impl MultiLabelTable {
    /// Table where every class maps to itself only.
    pub fn self_only(space: &UnifiedLabelSpace) -> Self {
        let entries = space
            .dataset_ids()
            .flat_map(|id| {
                let remap = space.remap_table(id).unwrap();
                remap.iter().map(move |&u| MultiLabelEntry {
                    dataset_id: id.to_string(),
                    class: u,
                    active: vec![u],
                })
            })
            .collect();
        MultiLabelTable {
            tau: None,
            entries,
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, dataset_id: &str, class: usize) -> Option<&MultiLabelEntry> {
        self.entries
            .iter()
            .find(|e| e.dataset_id == dataset_id && e.class == class)
    }

    /// `(dataset_id, primary, secondary)` for every activated secondary.
    pub fn pairs(&self) -> Vec<(String, usize, usize)> {
        self.entries
            .iter()
            .flat_map(|e| e.secondaries().map(move |s| (e.dataset_id.clone(), e.class, s)))
            .collect()
    }

    pub fn named_pairs(&self, space: &UnifiedLabelSpace) -> Vec<(String, String, String)> {
        self.pairs()
            .into_iter()
            .map(|(d, p, s)| {
                (
                    d,
                    space.class_name(p).to_string(),
                    space.class_name(s).to_string(),
                )
            })
            .collect()
    }

    pub fn is_self_only(&self) -> bool {
        self.entries.iter().all(|e| e.active.len() == 1)
    }

    /// Rows `dataset_id,primary_class,secondary_class`.
    pub fn write_csv<W: Write>(&self, writer: W, space: &UnifiedLabelSpace) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["dataset_id", "primary_class", "secondary_class"])?;
        for (d, p, s) in self.named_pairs(space) {
            csv.write_record([d, p, s])?;
        }
        csv.flush().map_err(|e| Error::io("<multilabel csv>", e))?;
        Ok(())
    }

    /// Reads the CSV written by [`Self::write_csv`]. Classes without a row
    /// are self-only.
    pub fn read_csv<R: Read>(reader: R, space: &UnifiedLabelSpace) -> Result<Self> {
        let mut table = MultiLabelTable::self_only(space);
        let mut csv = csv::Reader::from_reader(reader);
        for record in csv.records() {
            let record = record?;
            if record.len() != 3 {
                return Err(Error::Config(format!(
                    "multi-label row needs 3 fields, got {}",
                    record.len()
                )));
            }
            let lookup = |name: &str| {
                space
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownClass(name.to_string()))
            };
            let dataset = &record[0];
            let primary = lookup(&record[1])?;
            let secondary = lookup(&record[2])?;
            if space.membership(dataset)?[secondary] {
                return Err(Error::Config(format!(
                    "secondary `{}` is inside dataset `{dataset}`",
                    &record[2]
                )));
            }
            let entry = table
                .entries
                .iter_mut()
                .find(|e| e.dataset_id == dataset && e.class == primary)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "`{}` is not a class of dataset `{dataset}`",
                        &record[1]
                    ))
                })?;
            if !entry.active.contains(&secondary) {
                entry.active.push(secondary);
                entry.active.sort_unstable();
            }
        }
        Ok(table)
    }
}

/// Builds multi-class targets from similarities.
///
/// For each `(i, c)`, `c'` is active iff `c' == c`, or `c'` lies outside
/// dataset `i` and `s_{i,c}[c'] > max(τ, s_{i,c}[c])`. With `tau == None`,
/// or for an undefined similarity row, the entry is self-only.
pub fn generate_multilabels(
    sim: &SimilarityTensor,
    tau: Option<f64>,
    space: &UnifiedLabelSpace,
) -> Result<MultiLabelTable> {
    let mut entries = Vec::with_capacity(sim.entries.len());
    let mut warnings = Vec::new();
    for e in &sim.entries {
        let membership = space.membership(&e.dataset_id)?;
        let mut active = vec![e.class];
        match (&e.scores, tau) {
            (None, _) => warnings.push(format!(
                "{}/{}: no labelled pixels, similarity undefined; self-only",
                e.dataset_id,
                space.class_name(e.class)
            )),
            (Some(_), None) => {}
            (Some(scores), Some(tau)) => {
                let bar = tau.max(scores[e.class]);
                for (u, &s) in scores.iter().enumerate() {
                    if !membership[u] && s > bar {
                        active.push(u);
                    }
                }
                active.sort_unstable();
            }
        }
        entries.push(MultiLabelEntry {
            dataset_id: e.dataset_id.clone(),
            class: e.class,
            active,
        });
    }
    Ok(MultiLabelTable {
        tau,
        entries,
        warnings,
    })
}

/// Expands a unified-space label map of `dataset_id` into tri-state
/// targets: POSITIVE on the label and its activated secondaries, NEGATIVE on
/// the remaining in-space channels, NULL elsewhere.
pub fn expand_pixel_labels(
    labels: &LabelMap,
    dataset_id: &str,
    table: &MultiLabelTable,
    space: &UnifiedLabelSpace,
) -> Result<TriStateLabelMap> {
    let membership = space.membership(dataset_id)?;
    let k = space.num_classes();
    let mut rows: HashMap<u32, Vec<TriState>> = HashMap::new();
    let mut states = Vec::with_capacity(labels.len() * k);
    let mut ignore = Vec::with_capacity(labels.len());
    for (p, &label) in labels.values.iter().enumerate() {
        if label == IGNORE {
            states.extend(std::iter::repeat_n(TriState::Null, k));
            ignore.push(true);
            continue;
        }
        let c = label as usize;
        if c >= k {
            return Err(Error::LabelOutOfRange {
                pixel: p,
                value: label,
                num_classes: k,
            });
        }
        if !membership[c] {
            return Err(Error::LabelOutsideSpace { pixel: p, class: c });
        }
        let row = rows.entry(label).or_insert_with(|| {
            let mut row: Vec<TriState> = membership
                .iter()
                .map(|&m| if m { TriState::Negative } else { TriState::Null })
                .collect();
            row[c] = TriState::Positive;
            if let Some(entry) = table.get(dataset_id, c) {
                for s in entry.secondaries() {
                    row[s] = TriState::Positive;
                }
            }
            row
        });
        states.extend_from_slice(row);
        ignore.push(false);
    }
    Ok(TriStateLabelMap {
        height: labels.height,
        width: labels.width,
        channels: k,
        states,
        ignore,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::{unify, DatasetTaxonomy};

    fn space() -> UnifiedLabelSpace {
        let a = DatasetTaxonomy::new("A", ["road", "rider"]).unwrap();
        let b = DatasetTaxonomy::new("B", ["road", "motorcyclist", "bicyclist"]).unwrap();
        unify(&[a, b]).unwrap()
    }

    fn entry(dataset: &str, class: usize, scores: &[f64]) -> SimilarityEntry {
        SimilarityEntry {
            dataset_id: dataset.to_string(),
            local_class: 0,
            class,
            count: 10,
            scores: Some(scores.to_vec()),
        }
    }

    // road=0 rider=1 motorcyclist=2 bicyclist=3
    fn sim() -> SimilarityTensor {
        SimilarityTensor {
            num_classes: 4,
            entries: vec![
                entry("A", 0, &[0.95, 0.02, 0.03, 0.03]),
                entry("A", 1, &[0.02, 0.97, 0.55, 0.45]),
                entry("B", 0, &[0.96, 0.02, 0.03, 0.03]),
                entry("B", 2, &[0.02, 0.98, 0.90, 0.10]),
                entry("B", 3, &[0.02, 0.94, 0.12, 0.88]),
            ],
        }
    }

    #[test]
    fn tau_averages_out_of_space_maxima() {
        let s = space();
        let tau = auto_tau(&sim(), &s).unwrap().unwrap();
        assert_eq!(tau.contributors.len(), 2);
        assert!((tau.value - 0.96).abs() < 1e-12);
    }

    #[test]
    fn tau_none_without_conflict() {
        let s = space();
        let mut quiet = sim();
        quiet.entries.truncate(3);
        quiet.entries[1].scores = Some(vec![0.02, 0.97, 0.2, 0.2]);
        assert!(auto_tau(&quiet, &s).unwrap().is_none());
        let table = generate_multilabels(&quiet, None, &s).unwrap();
        assert!(table.is_self_only());
    }

    #[test]
    fn activation_rule() {
        let s = space();
        let table = generate_multilabels(&sim(), Some(0.5), &s).unwrap();
        assert_eq!(
            table.named_pairs(&s),
            vec![
                ("B".into(), "motorcyclist".into(), "rider".into()),
                ("B".into(), "bicyclist".into(), "rider".into()),
            ]
        );
        // asymmetric: A/rider does not pick up motorcyclist
        assert_eq!(table.get("A", 1).unwrap().active, vec![1]);
        // raising tau past a score removes it
        let high = generate_multilabels(&sim(), Some(0.95), &s).unwrap();
        assert_eq!(high.pairs().len(), 1);
        let top = generate_multilabels(&sim(), Some(0.99), &s).unwrap();
        assert!(top.is_self_only());
    }

    #[test]
    fn in_space_classes_never_activate() {
        let s = space();
        let mut sim = sim();
        // B/road scoring motorcyclist above itself: motorcyclist is in B
        sim.entries[2].scores = Some(vec![0.6, 0.02, 0.99, 0.03]);
        let table = generate_multilabels(&sim, Some(0.5), &s).unwrap();
        assert_eq!(table.get("B", 0).unwrap().active, vec![0]);
    }

    #[test]
    fn undefined_rows_are_self_only() {
        let s = space();
        let mut sim = sim();
        sim.entries[3].scores = None;
        sim.entries[3].count = 0;
        let table = generate_multilabels(&sim, Some(0.5), &s).unwrap();
        assert_eq!(table.get("B", 2).unwrap().active, vec![2]);
        assert_eq!(table.warnings.len(), 1);
    }

    #[test]
    fn expansion_states() {
        let s = space();
        let table = generate_multilabels(&sim(), Some(0.5), &s).unwrap();
        let labels = LabelMap::new(1, 3, vec![2, 0, IGNORE]).unwrap();
        let tri = expand_pixel_labels(&labels, "B", &table, &s).unwrap();
        use TriState::*;
        assert_eq!(tri.pixel(0), &[Negative, Positive, Positive, Negative]);
        assert_eq!(tri.pixel(1), &[Positive, Null, Negative, Negative]);
        assert_eq!(tri.ignore, vec![false, false, true]);

        let self_only = MultiLabelTable::self_only(&s);
        let tri = expand_pixel_labels(&labels, "B", &self_only, &s).unwrap();
        assert_eq!(tri.pixel(0), &[Negative, Null, Positive, Negative]);

        let bad = LabelMap::new(1, 1, vec![1]).unwrap();
        assert!(expand_pixel_labels(&bad, "B", &table, &s).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = space();
        let table = generate_multilabels(&sim(), Some(0.5), &s).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf, &s).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "dataset_id,primary_class,secondary_class\nB,motorcyclist,rider\nB,bicyclist,rider\n"
        );
        let back = MultiLabelTable::read_csv(&buf[..], &s).unwrap();
        assert_eq!(back.pairs(), table.pairs());
        let in_space = "dataset_id,primary_class,secondary_class\nB,motorcyclist,road\n";
        assert!(MultiLabelTable::read_csv(in_space.as_bytes(), &s).is_err());
    }
}
