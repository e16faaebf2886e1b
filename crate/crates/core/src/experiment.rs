//! Leave-one-out experiments comparing losses across seeds.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dump::read_split;
use crate::error::{Error, Result};
use crate::eval::{evaluate, multilabel_predict, EvalReport};
use crate::labelspace::{unify, DatasetTaxonomy};
use crate::losses::LossKind;
use crate::model::{HeadKind, SegModel};
use crate::synth::{default_fixture, generate, leave_one_out_fixture, Dataset, HierarchySpec, Sample};
use crate::trainer::{run_cr_pipeline, train, TrainConfig};

/// Offset added to the seed when generating the test split.
pub const TEST_SPLIT_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    /// COARSE and FINE.
    Default,
    /// COARSE, FINE and FINE_B.
    LeaveOneOut,
}

impl FixtureName {
    pub fn build(self) -> (HierarchySpec, Vec<DatasetTaxonomy>) {
        match self {
            FixtureName::Default => default_fixture(),
            FixtureName::LeaveOneOut => leave_one_out_fixture(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Fixture(FixtureName),
    /// Path to a hierarchy spec JSON file.
    Hierarchy(PathBuf),
    /// Dump directory with `train` and `test` splits; data stays fixed
    /// across seeds.
    Dump(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSize {
    pub train_images: usize,
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataSize {
    fn default() -> Self {
        DataSize {
            train_images: 32,
            test_images: 16,
            height: 16,
            width: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

impl Setting {
    pub fn name(&self) -> String {
        self.train.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Empty means one leave-one-out setting per dataset.
    #[serde(default)]
    pub settings: Vec<Setting>,
    #[serde(default = "all_losses")]
    pub losses: Vec<LossKind>,
    /// Base training config; `loss_kind` is replaced per row.
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataSize,
    /// Classes whose mean IoU is reported separately.
    #[serde(default = "default_subset")]
    pub subset: Vec<String>,
}

fn all_losses() -> Vec<LossKind> {
    LossKind::ALL.to_vec()
}

fn default_train() -> TrainConfig {
    TrainConfig::new(LossKind::Ce, HeadKind::Linear)
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// Classes involved in the fixture's planted conflicts.
pub fn default_subset() -> Vec<String> {
    ["road", "lane_marking", "rider", "motorcyclist", "bicyclist"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl ExperimentConfig {
    pub fn fixture(name: FixtureName) -> Self {
        ExperimentConfig {
            source: DataSource::Fixture(name),
            settings: Vec::new(),
            losses: all_losses(),
            train: default_train(),
            seeds: default_seeds(),
            data: DataSize::default(),
            subset: default_subset(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Settings after filling in the leave-one-out default, validated against
/// the available dataset ids.
pub fn resolve_settings(config: &ExperimentConfig, ids: &[String]) -> Result<Vec<Setting>> {
    let settings = if config.settings.is_empty() {
        ids.iter()
            .map(|held| Setting {
                train: ids.iter().filter(|d| *d != held).cloned().collect(),
                held_out: vec![held.clone()],
            })
            .collect()
    } else {
        config.settings.clone()
    };
    for s in &settings {
        if s.train.is_empty() {
            return Err(Error::Config("a setting has no training datasets".into()));
        }
        let train: BTreeSet<&String> = s.train.iter().collect();
        if s.held_out.iter().any(|h| train.contains(h)) {
            return Err(Error::Config(format!(
                "setting {} holds out one of its own training datasets",
                s.name()
            )));
        }
        for id in s.train.iter().chain(&s.held_out) {
            if !ids.contains(id) {
                return Err(Error::UnknownDataset(id.clone()));
            }
        }
    }
    Ok(settings)
}

/// Train and test data of one seed.
pub struct SeedData {
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

impl SeedData {
    fn pick(list: &[Dataset], ids: &[String]) -> Result<Vec<Dataset>> {
        ids.iter()
            .map(|id| {
                list.iter()
                    .find(|d| d.id() == id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownDataset(id.clone()))
            })
            .collect()
    }
}

fn generate_all(
    spec: &HierarchySpec,
    taxonomies: &[DatasetTaxonomy],
    n_images: usize,
    size: DataSize,
    split_seed: u64,
) -> Result<Vec<Dataset>> {
    taxonomies
        .iter()
        .map(|t| {
            Ok(Dataset {
                taxonomy: t.clone(),
                samples: generate(spec, &t.dataset_id, n_images, size.height, size.width, split_seed)?,
            })
        })
        .collect()
}

/// Loads or generates the data for `seed`. Synthetic sources draw fresh
/// train and test splits per seed.
pub fn load_data(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let synthetic = |spec: HierarchySpec, taxonomies: Vec<DatasetTaxonomy>| -> Result<SeedData> {
        let d = config.data;
        Ok(SeedData {
            train: generate_all(&spec, &taxonomies, d.train_images, d, seed)?,
            test: generate_all(&spec, &taxonomies, d.test_images, d, TEST_SPLIT_OFFSET + seed)?,
        })
    };
    match &config.source {
        DataSource::Fixture(name) => {
            let (spec, taxonomies) = name.build();
            synthetic(spec, taxonomies)
        }
        DataSource::Hierarchy(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: HierarchySpec =
                serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            let taxonomies = spec.taxonomies()?;
            synthetic(spec, taxonomies)
        }
        DataSource::Dump(dir) => Ok(SeedData {
            train: read_split(dir, "train")?,
            test: read_split(dir, "test")?,
        }),
    }
}

/// Trains one model for `loss`; CR_BCE runs the two-stage pipeline.
pub fn train_for_loss(
    datasets: &[Dataset],
    base: &TrainConfig,
    loss: LossKind,
    seed: u64,
) -> Result<SegModel> {
    let taxonomies: Vec<DatasetTaxonomy> = datasets.iter().map(|d| d.taxonomy.clone()).collect();
    let space = unify(&taxonomies)?;
    let config = TrainConfig {
        loss_kind: loss,
        seed,
        ..base.clone()
    };
    Ok(match loss {
        LossKind::CrBce => run_cr_pipeline(datasets, &space, &config)?.stage2.model,
        _ => train(datasets, &space, &config, None)?.model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub train_setting: String,
    pub held_out: String,
    pub loss: LossKind,
    pub test_dataset: String,
    pub seed: u64,
    pub miou: f64,
    /// Mean IoU over the configured subset; `None` when none is evaluable.
    pub subset_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub train_setting: String,
    pub held_out: String,
    pub loss: LossKind,
    pub test_dataset: String,
    pub n: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub subset_mean: Option<f64>,
    pub subset_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub aggregated: Vec<AggregateRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn subset_of(report: &EvalReport, subset: &[String]) -> Option<f64> {
    let names: Vec<&str> = subset.iter().map(String::as_str).collect();
    report.miou_of(&names).ok()
}

struct Cell {
    setting: usize,
    seed: u64,
    loss: usize,
}

/// Runs every (setting, seed, loss) cell on up to `threads` worker
/// threads. Rows come back sorted by setting, loss, test dataset and seed,
/// whatever the thread count.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ExperimentResults> {
    if config.losses.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("experiment needs losses and seeds".into()));
    }
    config.train.validate()?;
    let probe = load_data(config, config.seeds[0])?;
    let ids: Vec<String> = probe.train.iter().map(|d| d.id().to_string()).collect();
    let settings = resolve_settings(config, &ids)?;

    let mut cells = Vec::new();
    for setting in 0..settings.len() {
        for loss in 0..config.losses.len() {
            for &seed in &config.seeds {
                cells.push(Cell { setting, seed, loss });
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<ResultRow>>)>> = Mutex::new(Vec::new());
    let run_cell = |cell: &Cell| -> Result<Vec<ResultRow>> {
        let setting = &settings[cell.setting];
        let loss = config.losses[cell.loss];
        let data = load_data(config, cell.seed)?;
        let train_sets = SeedData::pick(&data.train, &setting.train)?;
        let test_sets = SeedData::pick(&data.test, &setting.held_out)?;
        let taxonomies: Vec<DatasetTaxonomy> =
            train_sets.iter().map(|d| d.taxonomy.clone()).collect();
        let space = unify(&taxonomies)?;
        let model = train_for_loss(&train_sets, &config.train, loss, cell.seed)?;
        test_sets
            .iter()
            .map(|test| {
                let report = evaluate(&model, test, &space)?;
                Ok(ResultRow {
                    train_setting: setting.name(),
                    held_out: setting.held_out.join("+"),
                    loss,
                    test_dataset: test.id().to_string(),
                    seed: cell.seed,
                    miou: report.miou,
                    subset_miou: subset_of(&report, &config.subset),
                })
            })
            .collect()
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let out = run_cell(cell);
                results.lock().unwrap().push((i, out));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::new();
    for (_, out) in results {
        rows.extend(out?);
    }
    let loss_rank = |l: LossKind| config.losses.iter().position(|&x| x == l).unwrap();
    let setting_rank = |name: &str| settings.iter().position(|s| s.name() == name).unwrap();
    rows.sort_by(|a, b| {
        (setting_rank(&a.train_setting), loss_rank(a.loss), &a.test_dataset, a.seed).cmp(&(
            setting_rank(&b.train_setting),
            loss_rank(b.loss),
            &b.test_dataset,
            b.seed,
        ))
    });
    let aggregated = aggregate(&rows);
    Ok(ExperimentResults { rows, aggregated })
}

/// Groups consecutive rows sharing setting, loss and test dataset.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut out: Vec<AggregateRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let key = |r: &ResultRow| (r.train_setting.clone(), r.loss, r.test_dataset.clone());
        let k = key(&rows[start]);
        let end = start + rows[start..].iter().take_while(|r| key(r) == k).count();
        let group = &rows[start..end];
        let mious: Vec<f64> = group.iter().map(|r| r.miou).collect();
        let subsets: Vec<f64> = group.iter().filter_map(|r| r.subset_miou).collect();
        let (miou_mean, miou_std) = mean_std(&mious);
        let (subset_mean, subset_std) = if subsets.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&subsets);
            (Some(m), Some(s))
        };
        out.push(AggregateRow {
            train_setting: k.0,
            held_out: group[0].held_out.clone(),
            loss: k.1,
            test_dataset: k.2,
            n: group.len(),
            miou_mean,
            miou_std,
            subset_mean,
            subset_std,
        });
        start = end;
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_rows_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "train_setting",
        "held_out",
        "loss",
        "test_dataset",
        "seed",
        "miou",
        "subset_miou",
    ])?;
    for r in rows {
        csv.write_record([
            r.train_setting.clone(),
            r.held_out.clone(),
            r.loss.to_string(),
            r.test_dataset.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.miou),
            fmt_opt(r.subset_miou),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<results csv>", e))?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "train_setting",
        "held_out",
        "loss",
        "test_dataset",
        "n",
        "miou_mean",
        "miou_std",
        "subset_mean",
        "subset_std",
    ])?;
    for r in rows {
        csv.write_record([
            r.train_setting.clone(),
            r.held_out.clone(),
            r.loss.to_string(),
            r.test_dataset.clone(),
            r.n.to_string(),
            format!("{:.6}", r.miou_mean),
            format!("{:.6}", r.miou_std),
            fmt_opt(r.subset_mean),
            fmt_opt(r.subset_std),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("<aggregate csv>", e))?;
    Ok(())
}

/// Fraction of pixels with fine truth `fine_class` whose prediction is
/// overridden to unified class `target`.
pub fn override_rate(
    model: &SegModel,
    samples: &[Sample],
    in_space: &[usize],
    threshold: f64,
    loss: LossKind,
    fine_class: u32,
    target: usize,
) -> Result<(usize, usize)> {
    let (mut hits, mut total) = (0, 0);
    for sample in samples {
        let pred = multilabel_predict(
            model,
            &sample.features,
            in_space,
            threshold,
            loss.normalization(),
        )?;
        for (p, &fine) in sample.fine_truth.values.iter().enumerate() {
            if fine != fine_class {
                continue;
            }
            total += 1;
            if pred.overrides[p].is_some_and(|(u, _)| u == target) {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}
