//! SGD training over the concatenation of several datasets, and the
//! two-stage class-relational pipeline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LogitMap};
use crate::labelspace::{remap_labels, LabelMap, UnifiedLabelSpace};
use crate::losses::{
    ce_loss_terms, cr_bce_loss_terms, null_bce_loss_terms, LossKind, LossTerms, TriStateLabelMap,
};
use crate::model::{GradBundle, HeadKind, ModelSpec, SegModel, DEFAULT_COSINE_SCALE};
use crate::relations::{
    auto_tau, compute_similarity, expand_pixel_labels, generate_multilabels, MultiLabelTable,
    SimilarityTensor, TauEstimate,
};
use crate::synth::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub head_kind: HeadKind,
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_cosine_scale")]
    pub cosine_scale: f64,
    /// Stage-1 settings of the class-relational pipeline. When absent, the
    /// stage-1 run reuses this config with Null BCE and a cosine head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Box<TrainConfig>>,
    /// CSV file holding a frozen multi-label table, used by CR_BCE runs
    /// instead of running stage 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multilabel_table: Option<String>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_poly_power() -> f64 {
    0.9
}

fn default_hidden_dim() -> usize {
    16
}

fn default_cosine_scale() -> f64 {
    DEFAULT_COSINE_SCALE
}

impl TrainConfig {
    /// Desk-scale defaults: batch 8, 2000 iterations, lr0 0.05 for a
    /// linear head and 0.1 for a cosine head.
    pub fn new(loss_kind: LossKind, head_kind: HeadKind) -> Self {
        TrainConfig {
            loss_kind,
            head_kind,
            lr0: match head_kind {
                HeadKind::Linear => 0.05,
                HeadKind::Cosine => 0.1,
            },
            momentum: default_momentum(),
            poly_power: default_poly_power(),
            max_iters: 2000,
            batch_size: 8,
            hflip: true,
            seed: 0,
            hidden_dim: default_hidden_dim(),
            cosine_scale: default_cosine_scale(),
            stage1: None,
            multilabel_table: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return fail("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.poly_power > 0.0) {
            return fail("poly_power must be positive");
        }
        if self.max_iters == 0 {
            return fail("max_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be at least 1");
        }
        if let Some(stage1) = &self.stage1 {
            stage1.validate()?;
        }
        Ok(())
    }

    /// The config of stage 1 of the class-relational pipeline.
    pub fn stage1_config(&self) -> TrainConfig {
        match &self.stage1 {
            Some(s) => TrainConfig {
                loss_kind: LossKind::NullBce,
                head_kind: HeadKind::Cosine,
                stage1: None,
                multilabel_table: None,
                ..(**s).clone()
            },
            None => TrainConfig {
                loss_kind: LossKind::NullBce,
                head_kind: HeadKind::Cosine,
                stage1: None,
                multilabel_table: None,
                lr0: if self.head_kind == HeadKind::Cosine {
                    self.lr0
                } else {
                    0.1
                },
                ..self.clone()
            },
        }
    }

    pub fn model_spec(&self, in_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            in_dim,
            hidden_dim: self.hidden_dim,
            num_classes,
            head: self.head_kind,
            cosine_scale: self.cosine_scale,
        }
    }
}

/// `lr0 · (1 − iter/max_iters)^power`.
pub fn poly_lr(lr0: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    let frac = 1.0 - iter as f64 / max_iters as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// `v ← momentum·v + g; θ ← θ − lr·v`. Rejects non-finite gradients before
/// touching the model.
pub fn sgd_step(
    model: &mut SegModel,
    grads: &GradBundle,
    velocity: &mut GradBundle,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, block) in grads.blocks() {
        if let Some(i) = block.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "{name}[{i}] = {}",
                block[i]
            )));
        }
    }
    let params = model.blocks_mut();
    let vel = [
        &mut velocity.w1,
        &mut velocity.b1,
        &mut velocity.w2,
        &mut velocity.b2,
    ];
    for (((_, theta), v), (_, g)) in params.into_iter().zip(vel).zip(grads.blocks()) {
        if theta.len() != g.len() || v.len() != g.len() {
            return Err(Error::Shape("gradient does not match parameters".into()));
        }
        for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g;
            *t -= lr * *v;
        }
    }
    Ok(())
}

/// Per-pixel supervision in the unified space.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(LabelMap),
    TriState(TriStateLabelMap),
}

/// One training image with unified-space targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub dataset: usize,
    pub features: FeatureMap,
    pub target: Target,
}

impl TrainItem {
    pub fn flipped_horizontally(&self) -> TrainItem {
        TrainItem {
            dataset: self.dataset,
            features: self.features.flipped_horizontally(),
            target: match &self.target {
                Target::Hard(l) => Target::Hard(l.flipped_horizontally()),
                Target::TriState(t) => Target::TriState(t.flipped_horizontally()),
            },
        }
    }
}

/// Remaps every sample into the unified space and builds the targets the
/// loss needs. CR_BCE requires a table.
pub fn prepare(
    datasets: &[Dataset],
    space: &UnifiedLabelSpace,
    loss_kind: LossKind,
    table: Option<&MultiLabelTable>,
) -> Result<Vec<TrainItem>> {
    if loss_kind == LossKind::CrBce && table.is_none() {
        return Err(Error::MissingTable);
    }
    let mut items = Vec::new();
    for dataset in datasets {
        let index = space.dataset_index(dataset.id())?;
        for sample in &dataset.samples {
            let unified = remap_labels(&sample.labels, dataset.id(), space)?;
            let target = match (loss_kind, table) {
                (LossKind::CrBce, Some(table)) => Target::TriState(expand_pixel_labels(
                    &unified,
                    dataset.id(),
                    table,
                    space,
                )?),
                _ => Target::Hard(unified),
            };
            items.push(TrainItem {
                dataset: index,
                features: sample.features.clone(),
                target,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(items)
}

fn loss_terms(
    kind: LossKind,
    logits: &LogitMap,
    item: &TrainItem,
    membership: &[bool],
) -> Result<LossTerms> {
    match (kind, &item.target) {
        (LossKind::Ce, Target::Hard(labels)) => ce_loss_terms(logits, labels),
        (LossKind::NullBce, Target::Hard(labels)) => {
            null_bce_loss_terms(logits, labels, membership)
        }
        (LossKind::CrBce, Target::TriState(tri)) => cr_bce_loss_terms(logits, tri),
        _ => Err(Error::Config(format!(
            "target type does not match loss {kind}"
        ))),
    }
}

/// Mean loss and parameter gradient over a batch. The mean runs over every
/// counted term in the batch, not per image.
pub fn batch_loss_grad(
    model: &SegModel,
    batch: &[&TrainItem],
    kind: LossKind,
    space: &UnifiedLabelSpace,
) -> Result<(f64, GradBundle)> {
    let ids: Vec<&str> = space.dataset_ids().collect();
    let mut forward = Vec::with_capacity(batch.len());
    let mut total_terms = 0usize;
    let mut total_sum = 0.0;
    for item in batch {
        let cache = model.forward_cached(&item.features)?;
        let membership = space.membership(ids[item.dataset])?;
        let terms = loss_terms(kind, &cache.logits, item, membership)?;
        total_terms += terms.terms;
        total_sum += terms.sum;
        forward.push((cache, terms.grad));
    }
    if total_terms == 0 {
        return Err(Error::EmptyLoss);
    }
    let scale = 1.0 / total_terms as f64;
    let mut grads = GradBundle::zeros_like(model);
    for (item, (cache, mut dl_do)) in batch.iter().zip(forward) {
        dl_do.scale(scale);
        model.backward_cached(&item.features, &cache, &dl_do, &mut grads)?;
    }
    Ok((total_sum * scale, grads))
}

/// Draws pool indices without replacement, reshuffling at every epoch
/// boundary, plus a flip decision per draw.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(pool: usize, seed: u64) -> Self {
        EpochSampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A_0000_0001),
            order: (0..pool).collect(),
            cursor: pool,
        }
    }

    pub fn next_batch(&mut self, size: usize, hflip: bool) -> Vec<(usize, bool)> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let i = self.order[self.cursor];
                self.cursor += 1;
                (i, hflip && self.rng.random_bool(0.5))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    #[serde(skip)]
    pub model: SegModel,
    /// Seconds; kept out of every deterministic artifact.
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("runs have at least one iteration")
    }
}

/// Trains a fresh model on the concatenation of `datasets`.
///
/// Samples are drawn without replacement from a pool reshuffled at every
/// epoch; a batch may span two epochs. CR_BCE needs `table`.
pub fn train(
    datasets: &[Dataset],
    space: &UnifiedLabelSpace,
    config: &TrainConfig,
    table: Option<&MultiLabelTable>,
) -> Result<RunRecord> {
    config.validate()?;
    let items = prepare(datasets, space, config.loss_kind, table)?;
    let in_dim = items[0].features.channels;
    let mut model = SegModel::init(config.model_spec(in_dim, space.num_classes()), config.seed)?;
    let mut velocity = GradBundle::zeros_like(&model);
    let mut sampler = EpochSampler::new(items.len(), config.seed);

    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.max_iters);
    let mut lrs = Vec::with_capacity(config.max_iters);
    let mut flipped = Vec::with_capacity(config.batch_size);
    for iter in 0..config.max_iters {
        flipped.clear();
        let picks = sampler.next_batch(config.batch_size, config.hflip);
        for &(i, flip) in &picks {
            if flip {
                flipped.push(items[i].flipped_horizontally());
            }
        }
        let mut flipped_iter = flipped.iter();
        let batch: Vec<&TrainItem> = picks
            .iter()
            .map(|&(i, flip)| {
                if flip {
                    flipped_iter.next().unwrap()
                } else {
                    &items[i]
                }
            })
            .collect();

        let (loss, grads) = batch_loss_grad(&model, &batch, config.loss_kind, space)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "loss {loss} at iteration {iter}"
            )));
        }
        let lr = poly_lr(config.lr0, iter, config.max_iters, config.poly_power);
        sgd_step(&mut model, &grads, &mut velocity, lr, config.momentum)?;
        losses.push(loss);
        lrs.push(lr);
        if iter % 500 == 0 {
            log::debug!("iter {iter}: loss {loss:.6} lr {lr:.6}");
        }
    }
    Ok(RunRecord {
        config: config.clone(),
        losses,
        lrs,
        model,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Artifacts of the class-relational pipeline.
#[derive(Clone, Debug)]
pub struct CrPipeline {
    pub stage1: RunRecord,
    pub similarity: SimilarityTensor,
    pub tau: Option<TauEstimate>,
    pub table: MultiLabelTable,
    pub stage2: RunRecord,
}

/// Stage 1 trains a cosine-head model with Null BCE; its similarities give
/// τ and the multi-label table, which is frozen for stage 2, a fresh CR_BCE
/// run.
pub fn run_cr_pipeline(
    datasets: &[Dataset],
    space: &UnifiedLabelSpace,
    config: &TrainConfig,
) -> Result<CrPipeline> {
    let stage1_config = config.stage1_config();
    let stage1 = train(datasets, space, &stage1_config, None)?;
    let (similarity, tau, table) = derive_relations(&stage1.model, datasets, space)?;
    let stage2_config = TrainConfig {
        loss_kind: LossKind::CrBce,
        ..config.clone()
    };
    let stage2 = train(datasets, space, &stage2_config, Some(&table))?;
    Ok(CrPipeline {
        stage1,
        similarity,
        tau,
        table,
        stage2,
    })
}

/// Similarity, τ and multi-label table of a trained cosine-head model.
pub fn derive_relations(
    model: &SegModel,
    datasets: &[Dataset],
    space: &UnifiedLabelSpace,
) -> Result<(SimilarityTensor, Option<TauEstimate>, MultiLabelTable)> {
    let similarity = compute_similarity(model, datasets, space)?;
    let tau = auto_tau(&similarity, space)?;
    let table = generate_multilabels(&similarity, tau.as_ref().map(|t| t.value), space)?;
    Ok((similarity, tau, table))
}
