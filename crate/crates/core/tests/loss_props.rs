mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use uniseg_lab::conflict::overlap_sweep;
use uniseg_lab::grid::Map3;
use uniseg_lab::labelspace::{LabelMap, IGNORE};
use uniseg_lab::losses::{
    ce_loss_grad, cr_bce_loss_grad, null_bce_loss_grad, null_bce_loss_terms, softmax, LossKind,
    TriState, TriStateLabelMap,
};

const MEMBERSHIP: [bool; 6] = [true, false, true, true, false, true];

fn self_only_tristate(labels: &LabelMap, membership: &[bool]) -> TriStateLabelMap {
    let k = membership.len();
    let mut states = Vec::new();
    let mut ignore = Vec::new();
    for &y in &labels.values {
        ignore.push(y == IGNORE);
        for c in 0..k {
            states.push(if y == IGNORE || !membership[c] {
                TriState::Null
            } else if c == y as usize {
                TriState::Positive
            } else {
                TriState::Negative
            });
        }
    }
    TriStateLabelMap {
        height: labels.height,
        width: labels.width,
        channels: k,
        states,
        ignore,
    }
}

fn members() -> Vec<u32> {
    (0..6u32).filter(|&c| MEMBERSHIP[c as usize]).collect()
}

proptest! {
    #[test]
    fn ce_gradient_is_softmax_minus_onehot(
        o in common::logits(3, 3, 6, 10.0),
        y in common::labels(3, 3, (0..6).collect()),
    ) {
        prop_assume!(y.values.iter().any(|&v| v != IGNORE));
        let out = ce_loss_grad(&o, &y).unwrap();
        let valid = y.values.iter().filter(|&&v| v != IGNORE).count();
        prop_assert_eq!(out.terms, valid);
        prop_assert!(out.loss >= 0.0);
        let p = softmax(&o);
        for (px, &label) in y.values.iter().enumerate() {
            let g = out.grad.pixel(px);
            if label == IGNORE {
                prop_assert!(g.iter().all(|&v| v == 0.0));
                continue;
            }
            for c in 0..6 {
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[c], (p.map.pixel(px)[c] - onehot) / valid as f64, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(g.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn null_bce_ignores_non_member_channels(
        o in common::logits(2, 4, 6, 10.0),
        shift in common::logits(2, 4, 6, 50.0),
        y in common::labels(2, 4, members()),
    ) {
        prop_assume!(y.values.iter().any(|&v| v != IGNORE));
        let a = null_bce_loss_grad(&o, &y, &MEMBERSHIP).unwrap();
        for px in a.grad.pixels() {
            for c in 0..6 {
                if !MEMBERSHIP[c] {
                    prop_assert_eq!(px[c].to_bits(), 0.0f64.to_bits());
                }
            }
        }
        // moving non-member logits changes nothing
        let mut moved = o.clone();
        for (p, s) in moved.data.chunks_mut(6).zip(shift.data.chunks(6)) {
            for c in 0..6 {
                if !MEMBERSHIP[c] {
                    p[c] += s[c];
                }
            }
        }
        let b = null_bce_loss_grad(&moved, &y, &MEMBERSHIP).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn self_only_cr_equals_null(
        o in common::logits(3, 2, 6, 10.0),
        y in common::labels(3, 2, members()),
    ) {
        prop_assume!(y.values.iter().any(|&v| v != IGNORE));
        let null = null_bce_loss_grad(&o, &y, &MEMBERSHIP).unwrap();
        let cr = cr_bce_loss_grad(&o, &self_only_tristate(&y, &MEMBERSHIP)).unwrap();
        prop_assert_eq!(null.loss.to_bits(), cr.loss.to_bits());
        prop_assert_eq!(null.terms, cr.terms);
        prop_assert_eq!(null.grad, cr.grad);
    }

    #[test]
    fn cr_positive_secondary_pulls_up(
        o in common::logits(1, 1, 6, 10.0),
        y in 0u32..6,
        extra in 0usize..6,
    ) {
        prop_assume!(MEMBERSHIP[y as usize] && !MEMBERSHIP[extra]);
        let labels = LabelMap::new(1, 1, vec![y]).unwrap();
        let mut tri = self_only_tristate(&labels, &MEMBERSHIP);
        tri.states[extra] = TriState::Positive;
        let out = cr_bce_loss_grad(&o, &tri).unwrap();
        prop_assert!(out.grad.data[extra] < 0.0);
        prop_assert!(out.grad.data[y as usize] < 0.0);
        prop_assert_eq!(out.terms, 5);
    }

    #[test]
    fn extreme_logits_stay_finite(o in common::logits(2, 2, 6, 1e4), y in common::labels(2, 2, members())) {
        prop_assume!(y.values.iter().any(|&v| v != IGNORE));
        let ce = ce_loss_grad(&o, &y).unwrap();
        let null = null_bce_loss_grad(&o, &y, &MEMBERSHIP).unwrap();
        prop_assert!(ce.loss.is_finite() && ce.grad.is_finite());
        prop_assert!(null.loss.is_finite() && null.grad.is_finite());
    }
}

#[test]
fn all_ignored_is_an_error() {
    let o = Map3::zeros(1, 2, 6);
    let y = LabelMap::filled(1, 2, IGNORE);
    assert!(ce_loss_grad(&o, &y).is_err());
    assert_eq!(null_bce_loss_terms(&o, &y, &MEMBERSHIP).unwrap().terms, 0);
}

#[test]
fn null_bce_rejects_labels_outside_the_dataset() {
    let o = Map3::zeros(1, 1, 6);
    let y = LabelMap::new(1, 1, vec![1]).unwrap();
    assert!(null_bce_loss_grad(&o, &y, &MEMBERSHIP).is_err());
}

#[test]
fn conflict_rate_tracks_overlap() {
    for row in overlap_sweep(200, 3).unwrap() {
        match row.loss {
            LossKind::Ce => assert_abs_diff_eq!(row.conflict_rate, 1.0 - row.overlap_fraction, epsilon = 1e-12),
            _ => assert_eq!(row.conflicting_pixels, 0),
        }
    }
}
