//! Per-pixel segmentation network: one tanh hidden layer followed by a
//! linear or cosine classifier over the unified label space.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LogitMap, Map3};

/// Added under the square root of every norm inside forward/backward.
pub const NORM_EPS: f64 = 1e-12;

pub const DEFAULT_COSINE_SCALE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "LINEAR")]
    Linear,
    #[serde(rename = "COSINE")]
    Cosine,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "LINEAR",
            HeadKind::Cosine => "COSINE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub head: HeadKind,
    #[serde(default = "default_scale")]
    pub cosine_scale: f64,
}

fn default_scale() -> f64 {
    DEFAULT_COSINE_SCALE
}

/// Model parameters. `w1` is `hidden × in`, `w2` is `classes × hidden`
/// (the cosine head's class vectors φ_c when `head` is cosine), and `b2`
/// is empty for the cosine head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub spec: ModelSpec,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// ∂L/∂θ, laid out exactly like [`SegModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(model: &SegModel) -> Self {
        GradBundle {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Hidden activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub hidden: Map3,
    pub logits: LogitMap,
}

impl SegModel {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.in_dim == 0 || spec.hidden_dim == 0 || spec.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if spec.head == HeadKind::Cosine && !(spec.cosine_scale > 0.0) {
            return Err(Error::Config("cosine scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        let w1 = uniform(spec.in_dim * spec.hidden_dim, spec.in_dim, spec.hidden_dim);
        let w2 = uniform(
            spec.hidden_dim * spec.num_classes,
            spec.hidden_dim,
            spec.num_classes,
        );
        let b2 = match spec.head {
            HeadKind::Linear => vec![0.0; spec.num_classes],
            HeadKind::Cosine => Vec::new(),
        };
        Ok(SegModel {
            spec,
            w1,
            b1: vec![0.0; spec.hidden_dim],
            w2,
            b2,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.channels != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {}",
                self.spec.in_dim, features.channels
            )));
        }
        Ok(())
    }

    fn class_norms(&self) -> Vec<f64> {
        let f = self.spec.hidden_dim;
        self.w2
            .chunks_exact(f)
            .map(|row| (dot(row, row) + NORM_EPS).sqrt())
            .collect()
    }

    fn hidden_into(&self, x: &[f64], h: &mut [f64]) {
        let n_in = self.spec.in_dim;
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * n_in..(j + 1) * n_in];
            *hj = (dot(row, x) + self.b1[j]).tanh();
        }
    }

    fn logits_into(&self, h: &[f64], norms: &[f64], o: &mut [f64]) {
        let f = self.spec.hidden_dim;
        match self.spec.head {
            HeadKind::Linear => {
                for (c, oc) in o.iter_mut().enumerate() {
                    *oc = dot(&self.w2[c * f..(c + 1) * f], h) + self.b2[c];
                }
            }
            HeadKind::Cosine => {
                let t = self.spec.cosine_scale;
                let nh = (dot(h, h) + NORM_EPS).sqrt();
                for (c, oc) in o.iter_mut().enumerate() {
                    *oc = t * dot(&self.w2[c * f..(c + 1) * f], h) / (norms[c] * nh);
                }
            }
        }
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<LogitMap> {
        Ok(self.forward_cached(features)?.logits)
    }

    pub fn forward_cached(&self, features: &FeatureMap) -> Result<ForwardCache> {
        self.check_features(features)?;
        let (rows, cols) = (features.height, features.width);
        let mut hidden = Map3::zeros(rows, cols, self.spec.hidden_dim);
        let mut logits = Map3::zeros(rows, cols, self.spec.num_classes);
        let norms = self.class_norms();
        for p in 0..features.num_pixels() {
            self.hidden_into(features.pixel(p), hidden.pixel_mut(p));
            self.logits_into(hidden.pixel(p), &norms, logits.pixel_mut(p));
        }
        Ok(ForwardCache { hidden, logits })
    }

    /// Parameter gradients for upstream `dl_do = ∂L/∂O`.
    pub fn backward(&self, features: &FeatureMap, dl_do: &LogitMap) -> Result<GradBundle> {
        let cache = self.forward_cached(features)?;
        let mut grads = GradBundle::zeros_like(self);
        self.backward_cached(features, &cache, dl_do, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates into `grads` using activations from [`Self::forward_cached`].
    pub fn backward_cached(
        &self,
        features: &FeatureMap,
        cache: &ForwardCache,
        dl_do: &LogitMap,
        grads: &mut GradBundle,
    ) -> Result<()> {
        self.check_features(features)?;
        if !dl_do.same_shape(&cache.logits) || cache.hidden.num_pixels() != features.num_pixels() {
            return Err(Error::Shape("upstream gradient does not match forward".into()));
        }
        let n_in = self.spec.in_dim;
        let f = self.spec.hidden_dim;
        let k = self.spec.num_classes;
        let norms = self.class_norms();
        let t = self.spec.cosine_scale;
        let mut dh = vec![0.0; f];

        for p in 0..features.num_pixels() {
            let g = dl_do.pixel(p);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let h = cache.hidden.pixel(p);
            dh.iter_mut().for_each(|v| *v = 0.0);

            match self.spec.head {
                HeadKind::Linear => {
                    for c in 0..k {
                        let gc = g[c];
                        if gc == 0.0 {
                            continue;
                        }
                        let row = &self.w2[c * f..(c + 1) * f];
                        let grow = &mut grads.w2[c * f..(c + 1) * f];
                        for j in 0..f {
                            grow[j] += gc * h[j];
                            dh[j] += gc * row[j];
                        }
                        grads.b2[c] += gc;
                    }
                }
                HeadKind::Cosine => {
                    let nh = (dot(h, h) + NORM_EPS).sqrt();
                    let s = cache.logits.pixel(p);
                    let mut weighted_scores = 0.0;
                    for c in 0..k {
                        let gc = g[c];
                        if gc == 0.0 {
                            continue;
                        }
                        let row = &self.w2[c * f..(c + 1) * f];
                        let grow = &mut grads.w2[c * f..(c + 1) * f];
                        let coef = t / (norms[c] * nh);
                        let shrink = s[c] / (norms[c] * norms[c]);
                        for j in 0..f {
                            grow[j] += gc * (coef * h[j] - shrink * row[j]);
                            dh[j] += gc * coef * row[j];
                        }
                        weighted_scores += gc * s[c];
                    }
                    let radial = weighted_scores / (nh * nh);
                    for j in 0..f {
                        dh[j] -= radial * h[j];
                    }
                }
            }

            let x = features.pixel(p);
            for j in 0..f {
                let dz = dh[j] * (1.0 - h[j] * h[j]);
                if dz == 0.0 {
                    continue;
                }
                let grow = &mut grads.w1[j * n_in..(j + 1) * n_in];
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += dz * xi;
                }
                grads.b1[j] += dz;
            }
        }
        Ok(())
    }

    /// Hidden feature vector of one input pixel.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.spec.hidden_dim];
        self.hidden_into(x, &mut h);
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: SegModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let s = model.spec;
        let b2_len = match s.head {
            HeadKind::Linear => s.num_classes,
            HeadKind::Cosine => 0,
        };
        if model.w1.len() != s.in_dim * s.hidden_dim
            || model.b1.len() != s.hidden_dim
            || model.w2.len() != s.hidden_dim * s.num_classes
            || model.b2.len() != b2_len
        {
            return Err(Error::Shape(format!(
                "{}: parameter blocks do not match the declared spec",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// Scaled cosine scores `t · φ̂_cᵀ ĥ` for class rows `weights` (K × F).
///
/// Uses exact norms and fails on a zero-norm feature or class row; the
/// training path uses the guarded norms inside [`SegModel::forward`].
pub fn cosine_scores(weights: &[f64], scale: f64, h: &[f64]) -> Result<Vec<f64>> {
    let f = h.len();
    if f == 0 || !weights.len().is_multiple_of(f) {
        return Err(Error::Shape(format!(
            "{} weights do not split into rows of {f}",
            weights.len()
        )));
    }
    let nh = dot(h, h).sqrt();
    if nh == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    weights
        .chunks_exact(f)
        .map(|row| {
            let nr = dot(row, row).sqrt();
            if nr == 0.0 {
                return Err(Error::DegenerateNorm);
            }
            let cos = (dot(row, h) / (nr * nh)).clamp(-1.0, 1.0);
            Ok(scale * cos)
        })
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(head: HeadKind) -> ModelSpec {
        ModelSpec {
            in_dim: 3,
            hidden_dim: 4,
            num_classes: 5,
            head,
            cosine_scale: 20.0,
        }
    }

    #[test]
    fn zero_linear_model_outputs_zero() {
        let mut m = SegModel::init(spec(HeadKind::Linear), 0).unwrap();
        m.w1.iter_mut().for_each(|v| *v = 0.0);
        m.w2.iter_mut().for_each(|v| *v = 0.0);
        let x = Map3::new(2, 2, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let o = m.forward(&x).unwrap();
        assert_eq!((o.height, o.width, o.channels), (2, 2, 5));
        assert!(o.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_pixel() {
        // in 2, hidden 2, classes 2, linear head
        let m = SegModel {
            spec: ModelSpec {
                in_dim: 2,
                hidden_dim: 2,
                num_classes: 2,
                head: HeadKind::Linear,
                cosine_scale: 20.0,
            },
            w1: vec![0.1, 0.0, 0.0, 0.2],
            b1: vec![0.0, 0.05],
            w2: vec![1.0, -1.0, 0.5, 2.0],
            b2: vec![0.0, 0.1],
        };
        let x = Map3::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let o = m.forward(&x).unwrap();
        let h0 = 0.1f64.tanh();
        let h1 = 0.45f64.tanh();
        assert_abs_diff_eq!(o.data[0], h0 - h1, epsilon = 1e-15);
        assert_abs_diff_eq!(o.data[1], 0.5 * h0 + 2.0 * h1 + 0.1, epsilon = 1e-15);
    }

    #[test]
    fn cosine_score_contract() {
        let phi = [1.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let s = cosine_scores(&phi, 20.0, &[2.0, 4.0, 0.0]).unwrap();
        assert_abs_diff_eq!(s[0], 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-12);
        assert!(matches!(
            cosine_scores(&phi, 20.0, &[0.0, 0.0, 0.0]),
            Err(Error::DegenerateNorm)
        ));
        assert!(matches!(
            cosine_scores(&[0.0, 0.0, 0.0], 20.0, &[1.0, 0.0, 0.0]),
            Err(Error::DegenerateNorm)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        for head in [HeadKind::Linear, HeadKind::Cosine] {
            let m = SegModel::init(spec(head), 3).unwrap();
            let x = Map3::new(1, 2, 3, vec![0.3, -0.2, 1.0, 0.5, 0.5, -1.0]).unwrap();
            let g = m.backward(&x, &Map3::zeros(1, 2, 5)).unwrap();
            assert!(g.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn linear_head_grad_matches_outer_product_loop() {
        let m = SegModel::init(spec(HeadKind::Linear), 5).unwrap();
        let x = Map3::new(
            2,
            2,
            3,
            vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9, 1.0, 1.1, -1.2],
        )
        .unwrap();
        let up = Map3::new(2, 2, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let g = m.backward(&x, &up).unwrap();
        let mut expect = vec![0.0; 20];
        for p in 0..4 {
            let h = m.hidden(x.pixel(p));
            for c in 0..5 {
                for j in 0..4 {
                    expect[c * 4 + j] += up.pixel(p)[c] * h[j];
                }
            }
        }
        for (a, b) in g.w2.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(HeadKind::Cosine);
        let a = SegModel::init(s, 11).unwrap();
        let b = SegModel::init(s, 11).unwrap();
        let c = SegModel::init(s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w1, c.w1);
        let bound1 = (6.0 / 7.0f64).sqrt();
        let bound2 = (6.0 / 9.0f64).sqrt();
        assert!(a.w1.iter().all(|v| v.abs() <= bound1));
        assert!(a.w2.iter().all(|v| v.abs() <= bound2));
        assert!(a.b1.iter().all(|&v| v == 0.0));
        assert!(a.b2.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = SegModel::init(spec(HeadKind::Linear), 1).unwrap();
        m.save(&path).unwrap();
        assert_eq!(SegModel::load(&path).unwrap(), m);

        let mut bad = m.clone();
        bad.b2.pop();
        bad.save(&path).unwrap();
        assert!(SegModel::load(&path).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let m = SegModel::init(spec(HeadKind::Linear), 1).unwrap();
        assert!(m.forward(&Map3::zeros(1, 1, 2)).is_err());
    }
}
