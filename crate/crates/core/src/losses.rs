//! Training losses over unified-space logits and their analytic gradients.
//!
//! All three losses reduce by the mean over counted terms: valid pixels for
//! cross-entropy, (valid pixel, counted channel) pairs for the BCE variants.
//! Null channels never enter the count and receive an exact `0.0` gradient.
//!
//! The `*_terms` functions return unnormalized sums so a trainer can pool
//! several samples into one global mean; the plain functions normalize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LogitMap, Map3};
use crate::labelspace::{LabelMap, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "NULL_BCE")]
    NullBce,
    #[serde(rename = "CR_BCE")]
    CrBce,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::NullBce, LossKind::CrBce];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::NullBce => "NULL_BCE",
            LossKind::CrBce => "CR_BCE",
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            LossKind::Ce => Normalization::Softmax,
            LossKind::NullBce | LossKind::CrBce => Normalization::Sigmoid,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CE" => Ok(LossKind::Ce),
            "NULL_BCE" => Ok(LossKind::NullBce),
            "CR_BCE" => Ok(LossKind::CrBce),
            other => Err(Error::Config(format!("unknown loss_kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Softmax,
    Sigmoid,
}

/// Probabilities over the unified channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub kind: Normalization,
    pub map: Map3,
}

/// Per-channel target of the class-relational loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriState {
    Positive,
    Negative,
    Null,
}

/// H×W×K tri-state targets plus a per-pixel ignore mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TriStateLabelMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub states: Vec<TriState>,
    pub ignore: Vec<bool>,
}

impl TriStateLabelMap {
    pub fn pixel(&self, p: usize) -> &[TriState] {
        &self.states[p * self.channels..(p + 1) * self.channels]
    }

    /// NULL may only appear on channels outside `membership`.
    pub fn validate(&self, membership: &[bool]) -> Result<()> {
        if membership.len() != self.channels {
            return Err(Error::Shape(format!(
                "membership of length {} for {} channels",
                membership.len(),
                self.channels
            )));
        }
        for (p, px) in self.states.chunks(self.channels).enumerate() {
            if self.ignore[p] {
                continue;
            }
            for (k, state) in px.iter().enumerate() {
                if *state == TriState::Null && membership[k] {
                    return Err(Error::LabelOutsideSpace { pixel: p, class: k });
                }
            }
        }
        Ok(())
    }

    pub fn flipped_horizontally(&self) -> TriStateLabelMap {
        let mut states = Vec::with_capacity(self.states.len());
        let mut ignore = Vec::with_capacity(self.ignore.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                let p = r * self.width + c;
                states.extend_from_slice(self.pixel(p));
                ignore.push(self.ignore[p]);
            }
        }
        TriStateLabelMap {
            states,
            ignore,
            ..*self
        }
    }
}

/// Unnormalized loss sum, unnormalized gradient and the number of terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub sum: f64,
    pub grad: LogitMap,
    pub terms: usize,
}

impl LossTerms {
    /// Divides by the term count; errors if nothing was counted.
    pub fn mean(mut self) -> Result<LossOutput> {
        if self.terms == 0 {
            return Err(Error::EmptyLoss);
        }
        let n = self.terms as f64;
        self.grad.scale(1.0 / n);
        Ok(LossOutput {
            loss: self.sum / n,
            grad: self.grad,
            terms: self.terms,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: LogitMap,
    pub terms: usize,
}

/// Logistic function; exact symmetry `σ(-x) = 1 - σ(x)` up to rounding.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Returns `(σ(x), BCE(x, target))` sharing one exponential.
#[inline]
fn sigmoid_and_bce(x: f64, target: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let q = if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    };
    // softplus(x) - target·x
    let loss = x.max(0.0) + e.ln_1p() - target * x;
    (q, loss)
}

pub fn softmax(logits: &LogitMap) -> ProbMap {
    let mut out = logits.clone();
    for px in out.data.chunks_exact_mut(logits.channels) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in px.iter_mut() {
            *v /= total;
        }
    }
    ProbMap {
        kind: Normalization::Softmax,
        map: out,
    }
}

pub fn sigmoid(logits: &LogitMap) -> ProbMap {
    let mut out = logits.clone();
    for v in &mut out.data {
        *v = sigmoid_scalar(*v);
    }
    ProbMap {
        kind: Normalization::Sigmoid,
        map: out,
    }
}

pub fn normalize(logits: &LogitMap, kind: Normalization) -> ProbMap {
    match kind {
        Normalization::Softmax => softmax(logits),
        Normalization::Sigmoid => sigmoid(logits),
    }
}

fn check_labels(logits: &LogitMap, labels: &LabelMap) -> Result<()> {
    if logits.height != labels.height || logits.width != labels.width {
        return Err(Error::Shape(format!(
            "logits {}x{} vs labels {}x{}",
            logits.height, logits.width, labels.height, labels.width
        )));
    }
    labels.validate(logits.channels)
}

/// Cross-entropy over all unified channels, unnormalized.
pub fn ce_loss_terms(logits: &LogitMap, labels: &LabelMap) -> Result<LossTerms> {
    check_labels(logits, labels)?;
    let k = logits.channels;
    let mut grad = Map3::zeros(logits.height, logits.width, k);
    let mut sum = 0.0;
    let mut terms = 0;
    for (p, &y) in labels.values.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let o = logits.pixel(p);
        let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = o.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - o[y as usize];
        let g = grad.pixel_mut(p);
        for c in 0..k {
            g[c] = (o[c] - lse).exp();
        }
        g[y as usize] -= 1.0;
        terms += 1;
    }
    Ok(LossTerms { sum, grad, terms })
}

/// Mean cross-entropy; gradient `(P - onehot(y)) / N_valid`.
pub fn ce_loss_grad(logits: &LogitMap, labels: &LabelMap) -> Result<LossOutput> {
    ce_loss_terms(logits, labels)?.mean()
}

/// BCE over the member channels only, unnormalized.
pub fn null_bce_loss_terms(
    logits: &LogitMap,
    labels: &LabelMap,
    membership: &[bool],
) -> Result<LossTerms> {
    check_labels(logits, labels)?;
    let k = logits.channels;
    if membership.len() != k {
        return Err(Error::Shape(format!(
            "membership of length {} for {k} channels",
            membership.len()
        )));
    }
    let mut grad = Map3::zeros(logits.height, logits.width, k);
    let mut sum = 0.0;
    let mut terms = 0;
    for (p, &y) in labels.values.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let y = y as usize;
        if !membership[y] {
            return Err(Error::LabelOutsideSpace { pixel: p, class: y });
        }
        let o = logits.pixel(p);
        let g = grad.pixel_mut(p);
        for c in 0..k {
            if !membership[c] {
                continue;
            }
            let target = if c == y { 1.0 } else { 0.0 };
            let (q, loss) = sigmoid_and_bce(o[c], target);
            sum += loss;
            g[c] = q - target;
            terms += 1;
        }
    }
    Ok(LossTerms { sum, grad, terms })
}

/// Mean Null BCE; non-member channels get exactly zero gradient.
pub fn null_bce_loss_grad(
    logits: &LogitMap,
    labels: &LabelMap,
    membership: &[bool],
) -> Result<LossOutput> {
    null_bce_loss_terms(logits, labels, membership)?.mean()
}

/// BCE against tri-state targets, unnormalized.
pub fn cr_bce_loss_terms(logits: &LogitMap, tristate: &TriStateLabelMap) -> Result<LossTerms> {
    if logits.height != tristate.height
        || logits.width != tristate.width
        || logits.channels != tristate.channels
    {
        return Err(Error::Shape(format!(
            "logits {}x{}x{} vs tri-state {}x{}x{}",
            logits.height,
            logits.width,
            logits.channels,
            tristate.height,
            tristate.width,
            tristate.channels
        )));
    }
    let k = logits.channels;
    let mut grad = Map3::zeros(logits.height, logits.width, k);
    let mut sum = 0.0;
    let mut terms = 0;
    for p in 0..logits.num_pixels() {
        if tristate.ignore[p] {
            continue;
        }
        let o = logits.pixel(p);
        let states = tristate.pixel(p);
        let g = grad.pixel_mut(p);
        for c in 0..k {
            let target = match states[c] {
                TriState::Positive => 1.0,
                TriState::Negative => 0.0,
                TriState::Null => continue,
            };
            let (q, loss) = sigmoid_and_bce(o[c], target);
            sum += loss;
            g[c] = q - target;
            terms += 1;
        }
    }
    Ok(LossTerms { sum, grad, terms })
}

/// Mean class-relational BCE; NULL channels get exactly zero gradient.
pub fn cr_bce_loss_grad(logits: &LogitMap, tristate: &TriStateLabelMap) -> Result<LossOutput> {
    cr_bce_loss_terms(logits, tristate)?.mean()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConflictReport {
    pub first: f64,
    pub second: f64,
    pub sign_first: i8,
    pub sign_second: i8,
    pub product: f64,
    pub conflict: bool,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Compares two per-sample gradient contributions on one logit channel.
/// A conflict is a strictly negative product.
pub fn conflict_probe(first: f64, second: f64) -> ConflictReport {
    let product = first * second;
    ConflictReport {
        first,
        second,
        sign_first: sign(first),
        sign_second: sign(second),
        product,
        conflict: product < 0.0,
    }
}
