mod common;

use proptest::prelude::*;
use uniseg_lab::eval::{multilabel_predict_logits, predict_logits, ConfusionMatrix};
use uniseg_lab::grid::Map3;
use uniseg_lab::labelspace::{LabelMap, IGNORE};
use uniseg_lab::losses::{normalize, Normalization};

fn naive_iou(pred: &[u32], gt: &[u32], c: u32) -> Option<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE {
            continue;
        }
        tp += (p == c && g == c) as u64;
        fp += (p == c && g != c) as u64;
        fn_ += (p != c && g == c) as u64;
    }
    (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64)
}

fn pair(k: u32) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (
        common::labels(8, 8, (0..k).collect()).prop_map(|mut m| {
            for v in &mut m.values {
                if *v == IGNORE {
                    *v = 0;
                }
            }
            m
        }),
        common::labels(8, 8, (0..k).collect()),
    )
}

proptest! {
    #[test]
    fn iou_matches_pixel_counting((pred, gt) in pair(5)) {
        let mut conf = ConfusionMatrix::new(5);
        conf.accumulate(&pred, &gt).unwrap();
        for (c, iou) in conf.iou().into_iter().enumerate() {
            prop_assert_eq!(iou, naive_iou(&pred.values, &gt.values, c as u32));
            if let Some(v) = iou {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn relabelling_permutes_iou(
        (pred, gt) in pair(5),
        perm in Just((0u32..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let apply = |m: &LabelMap| LabelMap::new(8, 8, m.values.iter().map(|&v| if v == IGNORE { v } else { perm[v as usize] }).collect()).unwrap();
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&apply(&pred), &apply(&gt)).unwrap();
        let (ia, ib) = (a.iou(), b.iou());
        for c in 0..5 {
            prop_assert_eq!(ia[c], ib[perm[c] as usize]);
        }
    }

    #[test]
    fn merged_equals_accumulated((p1, g1) in pair(4), (p2, g2) in pair(4)) {
        let mut whole = ConfusionMatrix::new(4);
        whole.accumulate(&p1, &g1).unwrap();
        whole.accumulate(&p2, &g2).unwrap();
        let mut left = ConfusionMatrix::new(4);
        left.accumulate(&p1, &g1).unwrap();
        let mut right = ConfusionMatrix::new(4);
        right.accumulate(&p2, &g2).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left, whole);
    }

    #[test]
    fn full_projection_is_plain_argmax(o in common::logits(3, 3, 5, 5.0)) {
        let proj: Vec<(usize, usize)> = (0..5).map(|u| (u, u)).collect();
        let pred = predict_logits(&o, &proj).unwrap();
        for (p, px) in o.pixels().enumerate() {
            let best = (0..5).fold(0, |b, u| if px[u] > px[b] { u } else { b });
            prop_assert_eq!(pred.values[p], best as u32);
        }
    }

    #[test]
    fn overrides_follow_the_threshold(o in common::logits(2, 3, 5, 5.0), threshold in 0.05f64..0.95) {
        let in_space = [0usize, 2, 3];
        for kind in [Normalization::Sigmoid, Normalization::Softmax] {
            let out = multilabel_predict_logits(&o, &in_space, threshold, kind).unwrap();
            let probs = normalize(&o, kind);
            for (p, s) in probs.map.pixels().enumerate() {
                prop_assert!(in_space.contains(&(out.primary.values[p] as usize)));
                let top_out = if s[1] >= s[4] { 1 } else { 4 };
                match out.overrides[p] {
                    Some((u, score)) => {
                        prop_assert_eq!(u, top_out);
                        prop_assert!(score >= threshold);
                        prop_assert_eq!(out.resolved().values[p], u as u32);
                    }
                    None => {
                        prop_assert!(s[top_out] < threshold);
                        prop_assert_eq!(out.resolved().values[p], out.primary.values[p]);
                    }
                }
            }
        }
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gt = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
    let pred = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
    let mut conf = ConfusionMatrix::new(4);
    conf.accumulate(&pred, &gt).unwrap();
    let (per_class, miou) = conf.miou().unwrap();
    assert_eq!(per_class[3], None);
    assert_eq!(miou, 1.0);
}

#[test]
fn bad_override_arguments_are_rejected() {
    let o = Map3::zeros(1, 1, 3);
    assert!(multilabel_predict_logits(&o, &[0], 0.0, Normalization::Sigmoid).is_err());
    assert!(multilabel_predict_logits(&o, &[0], 1.0, Normalization::Sigmoid).is_err());
    assert!(multilabel_predict_logits(&o, &[], 0.5, Normalization::Sigmoid).is_err());
    assert!(multilabel_predict_logits(&o, &[0, 1, 2], 0.5, Normalization::Sigmoid).is_err());
}
