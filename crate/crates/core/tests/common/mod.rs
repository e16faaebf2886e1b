#![allow(dead_code)]

use proptest::prelude::*;
use uniseg_lab::grid::Map3;
use uniseg_lab::labelspace::{DatasetTaxonomy, LabelMap, IGNORE};

pub const POOL: [&str; 10] = [
    "road", "sky", "car", "rider", "lane_marking", "bicyclist", "truck", "pole", "wall", "person",
];

/// One taxonomy: a non-empty subset of `POOL` in random order.
pub fn taxonomy(id: String) -> impl Strategy<Value = DatasetTaxonomy> {
    prop::sample::subsequence(POOL.to_vec(), 1..=POOL.len())
        .prop_shuffle()
        .prop_map(move |classes| DatasetTaxonomy::new(id.clone(), classes).unwrap())
}

/// Two to four taxonomies with ids D0, D1, ...
pub fn taxonomies() -> impl Strategy<Value = Vec<DatasetTaxonomy>> {
    (2usize..=4).prop_flat_map(|n| (0..n).map(|i| taxonomy(format!("D{i}"))).collect::<Vec<_>>())
}

pub fn logits(h: usize, w: usize, k: usize, scale: f64) -> impl Strategy<Value = Map3> {
    prop::collection::vec(-scale..scale, h * w * k)
        .prop_map(move |data| Map3::new(h, w, k, data).unwrap())
}

/// Labels drawn from `allowed`, with roughly one pixel in eight ignored.
pub fn labels(h: usize, w: usize, allowed: Vec<u32>) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec((prop::sample::select(allowed), 0u8..8), h * w).prop_map(move |v| {
        let values = v
            .into_iter()
            .map(|(c, r)| if r == 0 { IGNORE } else { c })
            .collect();
        LabelMap::new(h, w, values).unwrap()
    })
}
