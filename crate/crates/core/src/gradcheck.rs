//! Central finite-difference check of the full loss → model gradient chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::{FeatureMap, Map3};
use crate::labelspace::LabelMap;
use crate::losses::{
    ce_loss_grad, cr_bce_loss_grad, null_bce_loss_grad, LossKind, LossOutput, TriState,
    TriStateLabelMap,
};
use crate::model::{HeadKind, ModelSpec, SegModel, DEFAULT_COSINE_SCALE};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Relative errors divide by `max(|analytic|, |numeric|, REL_FLOOR)`, so
/// entries below the floor are effectively compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

/// Loss inputs for one random image.
#[derive(Clone, Debug)]
pub struct Problem {
    pub features: FeatureMap,
    pub labels: LabelMap,
    pub membership: Vec<bool>,
    pub tristate: TriStateLabelMap,
}

impl Problem {
    /// Random features, a random member subset of size ≥ 2, labels drawn
    /// from it, and tri-state targets with an extra out-of-space positive
    /// on some pixels.
    pub fn random(spec: &ModelSpec, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.num_classes;
        let n = height * width;
        let data = (0..n * spec.in_dim)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let features = Map3::new(height, width, spec.in_dim, data).unwrap();

        let mut membership: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
        membership[0] = true;
        membership[1] = true;
        let members: Vec<usize> = (0..k).filter(|&c| membership[c]).collect();
        let outside: Vec<usize> = (0..k).filter(|&c| !membership[c]).collect();
        let values: Vec<u32> = (0..n)
            .map(|_| members[rng.random_range(0..members.len())] as u32)
            .collect();
        let labels = LabelMap::new(height, width, values.clone()).unwrap();

        let mut states = Vec::with_capacity(n * k);
        for &y in &values {
            let extra = (!outside.is_empty() && rng.random_bool(0.5))
                .then(|| outside[rng.random_range(0..outside.len())]);
            for c in 0..k {
                states.push(if c == y as usize || Some(c) == extra {
                    TriState::Positive
                } else if membership[c] {
                    TriState::Negative
                } else {
                    TriState::Null
                });
            }
        }
        let tristate = TriStateLabelMap {
            height,
            width,
            channels: k,
            states,
            ignore: vec![false; n],
        };
        Problem {
            features,
            labels,
            membership,
            tristate,
        }
    }

    pub fn loss(&self, model: &SegModel, kind: LossKind) -> Result<LossOutput> {
        let logits = model.forward(&self.features)?;
        match kind {
            LossKind::Ce => ce_loss_grad(&logits, &self.labels),
            LossKind::NullBce => null_bce_loss_grad(&logits, &self.labels, &self.membership),
            LossKind::CrBce => cr_bce_loss_grad(&logits, &self.tristate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: &'static str,
    pub worst_index: Option<usize>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub head: HeadKind,
    pub num_params: usize,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<8} {:<6} params={:<4} max_rel={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.loss,
            self.head,
            self.num_params,
            self.max_rel_error
        )?;
        for b in &self.blocks {
            write!(f, "  {}={:.3e}", b.block, b.max_rel_error)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    /// Adds an error to one analytic entry, to show that the check fails.
    pub corrupt: bool,
}

/// The tiny model used by default: 4 → 6 → 5.
pub fn tiny_spec(head: HeadKind) -> ModelSpec {
    ModelSpec {
        in_dim: 4,
        hidden_dim: 6,
        num_classes: 5,
        head,
        cosine_scale: DEFAULT_COSINE_SCALE,
    }
}

/// Compares analytic gradients against central differences with step
/// [`STEP`], for every parameter.
pub fn gradcheck(
    spec: ModelSpec,
    kind: LossKind,
    seed: u64,
    options: GradcheckOptions,
) -> Result<GradcheckReport> {
    let model = SegModel::init(spec, seed)?;
    let problem = Problem::random(&spec, 3, 3, seed.wrapping_add(1));
    let out = problem.loss(&model, kind)?;
    let mut analytic = model.backward(&problem.features, &out.grad)?;
    if options.corrupt {
        analytic.w2[0] += 1e-3;
    }

    let mut probe = model.clone();
    let mut blocks = Vec::new();
    for (b, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        let mut report = BlockReport {
            block: name,
            worst_index: None,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.blocks_mut()[b].1[i];
            probe.blocks_mut()[b].1[i] = original + STEP;
            let plus = problem.loss(&probe, kind)?.loss;
            probe.blocks_mut()[b].1[i] = original - STEP;
            let minus = problem.loss(&probe, kind)?.loss;
            probe.blocks_mut()[b].1[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if report.worst_index.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = Some(i);
            }
        }
        blocks.push(report);
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        loss: kind,
        head: spec.head,
        num_params: model.num_params(),
        blocks,
        max_rel_error,
        passed: max_rel_error < TOLERANCE,
    })
}

/// All three losses with both heads.
pub fn gradcheck_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for head in [HeadKind::Linear, HeadKind::Cosine] {
        for kind in LossKind::ALL {
            out.push(gradcheck(tiny_spec(head), kind, seed, GradcheckOptions::default())?);
        }
    }
    Ok(out)
}
