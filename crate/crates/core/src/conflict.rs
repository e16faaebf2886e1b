//! Gradient conflict between two datasets that label identical inputs
//! differently.
//!
//! Dataset A knows `road` and `rider`; dataset B knows `road` and
//! `motorcyclist`. A pixel that A calls `rider` is called `motorcyclist` by
//! B. Both samples share the same logits, since their inputs are identical.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{LogitMap, Map3};
use crate::labelspace::{unify, DatasetTaxonomy, LabelMap, UnifiedLabelSpace};
use crate::losses::{
    ce_loss_terms, conflict_probe, cr_bce_loss_terms, null_bce_loss_terms, ConflictReport,
    LossKind,
};
use crate::relations::{expand_pixel_labels, MultiLabelTable};

pub const OVERLAP_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// The two-dataset space `road, rider, motorcyclist` and the table that
/// adds `rider` to B's `motorcyclist`.
pub fn demo_space() -> (UnifiedLabelSpace, MultiLabelTable) {
    let a = DatasetTaxonomy::new("A", ["road", "rider"]).unwrap();
    let b = DatasetTaxonomy::new("B", ["road", "motorcyclist"]).unwrap();
    let space = unify(&[a, b]).unwrap();
    let mut table = MultiLabelTable::self_only(&space);
    for e in &mut table.entries {
        if e.dataset_id == "B" && e.class == 2 {
            e.active = vec![1, 2];
        }
    }
    (space, table)
}

/// Unnormalized per-sample gradient of `kind` w.r.t. the logits, for
/// unified labels `labels` of `dataset`.
pub fn per_sample_grad(
    kind: LossKind,
    logits: &LogitMap,
    labels: &LabelMap,
    dataset: &str,
    space: &UnifiedLabelSpace,
    table: &MultiLabelTable,
) -> Result<LogitMap> {
    let terms = match kind {
        LossKind::Ce => ce_loss_terms(logits, labels)?,
        LossKind::NullBce => null_bce_loss_terms(logits, labels, space.membership(dataset)?)?,
        LossKind::CrBce => {
            let tri = expand_pixel_labels(labels, dataset, table, space)?;
            cr_bce_loss_terms(logits, &tri)?
        }
    };
    Ok(terms.grad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConflictRow {
    pub loss: LossKind,
    pub channel: String,
    pub report: ConflictReport,
}

/// Gradient contributions on every channel for one identical-input pair
/// labelled `rider` by A and `motorcyclist` by B.
pub fn conflict_rows(logits: &[f64]) -> Result<Vec<ConflictRow>> {
    let (space, table) = demo_space();
    if logits.len() != space.num_classes() {
        return Err(Error::Shape(format!(
            "expected {} logits, got {}",
            space.num_classes(),
            logits.len()
        )));
    }
    let o = Map3::new(1, 1, logits.len(), logits.to_vec())?;
    let first = LabelMap::filled(1, 1, 1);
    let second = LabelMap::filled(1, 1, 2);
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        let g1 = per_sample_grad(kind, &o, &first, "A", &space, &table)?;
        let g2 = per_sample_grad(kind, &o, &second, "B", &space, &table)?;
        for c in 0..space.num_classes() {
            rows.push(ConflictRow {
                loss: kind,
                channel: space.class_name(c).to_string(),
                report: conflict_probe(g1.data[c], g2.data[c]),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub overlap_fraction: f64,
    pub loss: LossKind,
    pub pixels: usize,
    /// Pixels with at least one channel whose two contributions have a
    /// negative product.
    pub conflicting_pixels: usize,
    pub conflict_rate: f64,
}

/// A fraction `f` of `pixels` identical-input pairs are `road` in both
/// datasets; the rest are `rider` in A and `motorcyclist` in B. Logits are
/// standard normal per pixel.
pub fn overlap_sweep(pixels: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let (space, table) = demo_space();
    let k = space.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..pixels * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let logits = Map3::new(1, pixels, k, data)?;
    let mut rows = Vec::new();
    for &f in &OVERLAP_FRACTIONS {
        let shared = (f * pixels as f64).round() as usize;
        let first: Vec<u32> = (0..pixels).map(|p| if p < shared { 0 } else { 1 }).collect();
        let second: Vec<u32> = (0..pixels).map(|p| if p < shared { 0 } else { 2 }).collect();
        let first = LabelMap::new(1, pixels, first)?;
        let second = LabelMap::new(1, pixels, second)?;
        for kind in LossKind::ALL {
            let g1 = per_sample_grad(kind, &logits, &first, "A", &space, &table)?;
            let g2 = per_sample_grad(kind, &logits, &second, "B", &space, &table)?;
            let conflicting = (0..pixels)
                .filter(|&p| {
                    g1.pixel(p)
                        .iter()
                        .zip(g2.pixel(p))
                        .any(|(a, b)| conflict_probe(*a, *b).conflict)
                })
                .count();
            rows.push(SweepRow {
                overlap_fraction: f,
                loss: kind,
                pixels,
                conflicting_pixels: conflicting,
                conflict_rate: conflicting as f64 / pixels as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_conflict_csv<W: Write>(rows: &[ConflictRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "loss",
        "channel",
        "grad_first",
        "grad_second",
        "product",
        "conflict",
    ])?;
    for r in rows {
        csv.write_record([
            r.loss.to_string(),
            r.channel.clone(),
            format!("{:e}", r.report.first),
            format!("{:e}", r.report.second),
            format!("{:e}", r.report.product),
            r.report.conflict.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<conflict csv>", e))?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "overlap_fraction",
        "loss",
        "pixels",
        "conflicting_pixels",
        "conflict_rate",
    ])?;
    for r in rows {
        csv.write_record([
            format!("{}", r.overlap_fraction),
            r.loss.to_string(),
            r.pixels.to_string(),
            r.conflicting_pixels.to_string(),
            format!("{:.6}", r.conflict_rate),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}
