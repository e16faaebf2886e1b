//! IoU evaluation through a label-space projection, and multi-label
//! prediction with out-of-space overrides.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LogitMap};
use crate::labelspace::{eval_projection, LabelMap, UnifiedLabelSpace, IGNORE};
use crate::losses::{normalize, Normalization};
use crate::model::SegModel;
use crate::synth::Dataset;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not IGNORE.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        gt.validate(self.k)?;
        for (p, (&y, &q)) in gt.values.iter().zip(&pred.values).enumerate() {
            if y == IGNORE {
                continue;
            }
            if q as usize >= self.k {
                return Err(Error::LabelOutOfRange {
                    pixel: p,
                    value: q,
                    num_classes: self.k,
                });
            }
            self.counts[y as usize * self.k + q as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` for a zero denominator.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).map(|j| self.get(c, j)).sum::<u64>() - tp;
                let fp: u64 = (0..self.k).map(|i| self.get(i, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class IoU and their mean over classes with a defined IoU.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let per_class = self.iou();
        let all: Vec<usize> = (0..self.k).collect();
        let mean = mean_defined(&per_class, &all)?;
        Ok((per_class, mean))
    }

    /// Mean IoU restricted to `classes`.
    pub fn miou_subset(&self, classes: &[usize]) -> Result<f64> {
        mean_defined(&self.iou(), classes)
    }
}

fn mean_defined(per_class: &[Option<f64>], classes: &[usize]) -> Result<f64> {
    let values: Vec<f64> = classes.iter().filter_map(|&c| per_class[c]).collect();
    if values.is_empty() {
        return Err(Error::NoEvaluableClasses);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Argmax over the projected channels, reported as test-local indices.
/// Ties go to the lowest unified channel.
pub fn predict_logits(logits: &LogitMap, projection: &[(usize, usize)]) -> Result<LabelMap> {
    if projection.is_empty() {
        return Err(Error::EmptyProjection);
    }
    if let Some(&(u, _)) = projection.iter().find(|(u, _)| *u >= logits.channels) {
        return Err(Error::Shape(format!(
            "projected channel {u} outside {} logits",
            logits.channels
        )));
    }
    let values = logits
        .pixels()
        .map(|o| {
            let mut best = projection[0];
            for &(u, local) in &projection[1..] {
                if o[u] > o[best.0] || (o[u] == o[best.0] && u < best.0) {
                    best = (u, local);
                }
            }
            best.1 as u32
        })
        .collect();
    LabelMap::new(logits.height, logits.width, values)
}

pub fn predict(
    model: &SegModel,
    features: &FeatureMap,
    projection: &[(usize, usize)],
) -> Result<LabelMap> {
    predict_logits(&model.forward(features)?, projection)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub class_names: Vec<String>,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

impl EvalReport {
    /// `{per_class: {name: iou}, miou, pixels}`; undefined IoUs are null.
    pub fn metrics_json(&self) -> serde_json::Value {
        let per_class: BTreeMap<&str, Option<f64>> = self
            .class_names
            .iter()
            .map(String::as_str)
            .zip(self.per_class.iter().copied())
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "miou": self.miou,
            "pixels": self.pixels,
        })
    }

    /// Mean IoU over the named classes that exist in the test taxonomy.
    pub fn miou_of(&self, names: &[&str]) -> Result<f64> {
        let idx: Vec<usize> = names
            .iter()
            .filter_map(|n| self.class_names.iter().position(|c| c == n))
            .collect();
        self.confusion.miou_subset(&idx)
    }
}

/// Evaluates `model` on a dataset labelled in its own taxonomy, predicting
/// only among the unified classes that the taxonomy shares by name.
pub fn evaluate(model: &SegModel, test: &Dataset, space: &UnifiedLabelSpace) -> Result<EvalReport> {
    let projection = eval_projection(space, &test.taxonomy);
    let mut confusion = ConfusionMatrix::new(test.taxonomy.num_classes());
    for sample in &test.samples {
        let pred = predict(model, &sample.features, &projection)?;
        confusion.accumulate(&pred, &sample.labels)?;
    }
    let (per_class, miou) = confusion.miou()?;
    Ok(EvalReport {
        dataset_id: test.id().to_string(),
        class_names: test.taxonomy.classes.clone(),
        pixels: confusion.total(),
        confusion,
        per_class,
        miou,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelPrediction {
    /// Top-1 over the in-space channels, as unified indices.
    pub primary: LabelMap,
    /// Out-of-space class and its score, where it cleared the threshold.
    pub overrides: Vec<Option<(usize, f64)>>,
    pub threshold: f64,
}

impl MultiLabelPrediction {
    /// Primary labels with overrides applied.
    pub fn resolved(&self) -> LabelMap {
        let values = self
            .primary
            .values
            .iter()
            .zip(&self.overrides)
            .map(|(&p, o)| o.map_or(p, |(u, _)| u as u32))
            .collect();
        LabelMap {
            values,
            ..self.primary
        }
    }
}

/// Top-1 over `in_space`, replaced by the top out-of-space class wherever
/// that class scores at least `threshold`. Scores are sigmoid or softmax
/// per `normalization`.
pub fn multilabel_predict_logits(
    logits: &LogitMap,
    in_space: &[usize],
    threshold: f64,
    normalization: Normalization,
) -> Result<MultiLabelPrediction> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let k = logits.channels;
    let mut inside = vec![false; k];
    for &u in in_space {
        if u >= k {
            return Err(Error::Shape(format!("in-space channel {u} outside {k}")));
        }
        inside[u] = true;
    }
    if !inside.iter().any(|&b| b) || inside.iter().all(|&b| b) {
        return Err(Error::Config(
            "in-space set must be non-empty and leave an out-of-space channel".into(),
        ));
    }
    let probs = normalize(logits, normalization);
    let mut primary = Vec::with_capacity(logits.num_pixels());
    let mut overrides = Vec::with_capacity(logits.num_pixels());
    for s in probs.map.pixels() {
        let mut best_in: Option<usize> = None;
        let mut best_out: Option<usize> = None;
        for (u, &v) in s.iter().enumerate() {
            let slot = if inside[u] { &mut best_in } else { &mut best_out };
            if slot.is_none_or(|b| v > s[b]) {
                *slot = Some(u);
            }
        }
        let p = best_in.unwrap();
        let o = best_out.unwrap();
        primary.push(p as u32);
        overrides.push((s[o] >= threshold).then_some((o, s[o])));
    }
    Ok(MultiLabelPrediction {
        primary: LabelMap::new(logits.height, logits.width, primary)?,
        overrides,
        threshold,
    })
}

pub fn multilabel_predict(
    model: &SegModel,
    features: &FeatureMap,
    in_space: &[usize],
    threshold: f64,
    normalization: Normalization,
) -> Result<MultiLabelPrediction> {
    multilabel_predict_logits(&model.forward(features)?, in_space, threshold, normalization)
}
