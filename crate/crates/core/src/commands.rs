//! Command implementations behind the `uniseg-lab` binary.
//!
//! Each command writes deterministic artifacts into an output directory.
//! Wall-clock information only goes to `run.log`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::conflict::{conflict_rows, overlap_sweep, write_conflict_csv, write_sweep_csv};
use crate::dump::{read_split, write_dump};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiment::{
    run_experiment, write_aggregate_csv, write_rows_csv, DataSize, ExperimentConfig,
    TEST_SPLIT_OFFSET,
};
use crate::gradcheck::{gradcheck, tiny_spec, GradcheckOptions, GradcheckReport};
use crate::labelspace::{unify, DatasetTaxonomy, UnifiedLabelSpace};
use crate::losses::LossKind;
use crate::model::{HeadKind, ModelSpec, SegModel};
use crate::relations::{MultiLabelTable, SimilarityTensor, TauEstimate};
use crate::synth::{default_fixture, generate, Dataset, HierarchySpec};
use crate::trainer::{derive_relations, run_cr_pipeline, train, RunRecord, TrainConfig};

/// Exit code for a run whose checks failed.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for bad usage or configuration.
pub const EXIT_USAGE: i32 = 2;

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Json { .. }
        | Error::UnknownDataset(_)
        | Error::UnknownClass(_)
        | Error::MissingTable => EXIT_USAGE,
        _ => EXIT_VALIDATION,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Appends a timestamped line to `<dir>/run.log`.
pub fn log_line(dir: &Path, message: &str) -> Result<()> {
    let path = dir.join("run.log");
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(file, "[{stamp:.3}] {message}").map_err(|e| Error::io(&path, e))
}

/// Where training and evaluation data come from.
#[derive(Clone, Debug)]
pub enum DataArg {
    /// Default fixture, generated on the fly.
    Fixture(DataSize),
    /// Dump directory with `train` and optionally `test` splits.
    Dump(PathBuf),
}

impl DataArg {
    pub fn load(&self, seed: u64) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
        match self {
            DataArg::Fixture(size) => {
                let (spec, taxonomies) = default_fixture();
                let make = |n, split_seed| -> Result<Vec<Dataset>> {
                    taxonomies
                        .iter()
                        .map(|t| {
                            Ok(Dataset {
                                taxonomy: t.clone(),
                                samples: generate(
                                    &spec,
                                    &t.dataset_id,
                                    n,
                                    size.height,
                                    size.width,
                                    split_seed,
                                )?,
                            })
                        })
                        .collect()
                };
                Ok((
                    make(size.train_images, seed)?,
                    make(size.test_images, TEST_SPLIT_OFFSET + seed)?,
                ))
            }
            DataArg::Dump(dir) => {
                let train = read_split(dir, "train")?;
                if train.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                Ok((train, read_split(dir, "test")?))
            }
        }
    }
}

fn space_of(datasets: &[Dataset]) -> Result<UnifiedLabelSpace> {
    let taxonomies: Vec<DatasetTaxonomy> = datasets.iter().map(|d| d.taxonomy.clone()).collect();
    unify(&taxonomies)
}

#[derive(Clone, Debug)]
pub struct GenArgs {
    pub spec: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub size: DataSize,
}

/// Writes train and test splits of every dataset in the hierarchy (the
/// default fixture when no spec file is given).
pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec: HierarchySpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => default_fixture().0,
    };
    spec.validate()?;
    let taxonomies = spec.taxonomies()?;
    let make = |n, split_seed| -> Result<Vec<Dataset>> {
        taxonomies
            .iter()
            .map(|t| {
                Ok(Dataset {
                    taxonomy: t.clone(),
                    samples: generate(
                        &spec,
                        &t.dataset_id,
                        n,
                        args.size.height,
                        args.size.width,
                        split_seed,
                    )?,
                })
            })
            .collect()
    };
    let train_sets = make(args.size.train_images, args.seed)?;
    let test_sets = make(args.size.test_images, TEST_SPLIT_OFFSET + args.seed)?;
    let manifest = write_dump(
        &args.out,
        Some(&spec),
        &[("train", &train_sets), ("test", &test_sets)],
    )?;
    println!(
        "wrote {} dataset splits to {}",
        manifest.datasets.len(),
        args.out.display()
    );
    log_line(&args.out, "gen finished")
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: DataArg,
    pub out: PathBuf,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct TauFile<'a> {
    tau: Option<f64>,
    contributors: Vec<TauContributorNamed<'a>>,
}

#[derive(Serialize)]
struct TauContributorNamed<'a> {
    dataset_id: &'a str,
    class: &'a str,
    argmax: &'a str,
    score: f64,
}

fn write_relations(
    out: &Path,
    space: &UnifiedLabelSpace,
    similarity: &SimilarityTensor,
    tau: Option<&TauEstimate>,
    table: &MultiLabelTable,
) -> Result<()> {
    similarity.write_csv(create(&out.join("similarity.csv"))?, space)?;
    table.write_csv(create(&out.join("multilabels.csv"))?, space)?;
    let tau_file = TauFile {
        tau: tau.map(|t| t.value),
        contributors: tau
            .map(|t| {
                t.contributors
                    .iter()
                    .map(|c| TauContributorNamed {
                        dataset_id: &c.dataset_id,
                        class: space.class_name(c.class),
                        argmax: space.class_name(c.argmax),
                        score: c.score,
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    write_json(&out.join("tau.json"), &tau_file)?;
    match tau {
        Some(t) => {
            println!("tau = {:.6}, from:", t.value);
            for c in &t.contributors {
                println!(
                    "  {}/{} -> {} ({:.6})",
                    c.dataset_id,
                    space.class_name(c.class),
                    space.class_name(c.argmax),
                    c.score
                );
            }
        }
        None => println!("tau = NONE (no class peaks outside its own dataset); table is self-only"),
    }
    for warning in &table.warnings {
        println!("warning: {warning}");
    }
    for (d, p, s) in table.named_pairs(space) {
        println!("  {d}: {p} -> {s}");
    }
    Ok(())
}

fn write_loss_curve(path: &Path, run: &RunRecord) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    csv.write_record(["iter", "lr", "loss"])?;
    for (i, (lr, loss)) in run.lrs.iter().zip(&run.losses).enumerate() {
        csv.write_record([i.to_string(), format!("{lr:e}"), format!("{loss:e}")])?;
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

/// Trains per the config; CR_BCE runs both stages unless the config names a
/// frozen table. Writes `checkpoint.json`, `metrics.json` and
/// `loss_curve.csv`, plus the relation artifacts for CR_BCE.
pub fn cmd_train(args: &TrainArgs) -> Result<RunRecord> {
    let mut config: TrainConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let (train_sets, test_sets) = args.data.load(config.seed)?;
    let space = space_of(&train_sets)?;
    mkdir(&args.out)?;

    let run = match (config.loss_kind, &config.multilabel_table) {
        (LossKind::CrBce, Some(table_path)) => {
            let path = Path::new(table_path);
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let table = MultiLabelTable::read_csv(file, &space)?;
            train(&train_sets, &space, &config, Some(&table))?
        }
        (LossKind::CrBce, None) => {
            let out = run_cr_pipeline(&train_sets, &space, &config)?;
            out.stage1.model.save(args.out.join("stage1_checkpoint.json"))?;
            write_loss_curve(&args.out.join("stage1_loss_curve.csv"), &out.stage1)?;
            write_relations(
                &args.out,
                &space,
                &out.similarity,
                out.tau.as_ref(),
                &out.table,
            )?;
            log_line(
                &args.out,
                &format!("stage 1 wall time {:.3}s", out.stage1.wall_time),
            )?;
            out.stage2
        }
        _ => train(&train_sets, &space, &config, None)?,
    };
    run.model.save(args.out.join("checkpoint.json"))?;
    write_loss_curve(&args.out.join("loss_curve.csv"), &run)?;

    let mut eval = serde_json::Map::new();
    for test in test_sets.iter().filter(|t| space.dataset_index(t.id()).is_ok()) {
        eval.insert(test.id().to_string(), evaluate(&run.model, test, &space)?.metrics_json());
    }
    let metrics = serde_json::json!({
        "config": config,
        "iterations": run.losses.len(),
        "initial_loss": run.losses[0],
        "final_loss": run.final_loss(),
        "eval": eval,
    });
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "{}: loss {:.5} -> {:.5} over {} iterations",
        config.loss_kind,
        run.losses[0],
        run.final_loss(),
        run.losses.len()
    );
    for (id, m) in &eval {
        println!("  {id}: mIoU {:.4}", m["miou"].as_f64().unwrap_or(f64::NAN));
    }
    log_line(&args.out, &format!("train wall time {:.3}s", run.wall_time))?;
    Ok(run)
}

#[derive(Clone, Debug)]
pub struct RelationsArgs {
    pub checkpoint: PathBuf,
    pub data: DataArg,
    pub out: PathBuf,
    pub seed: u64,
}

/// Similarities, τ and the multi-label table of a cosine-head checkpoint
/// over the training split.
pub fn cmd_relations(args: &RelationsArgs) -> Result<MultiLabelTable> {
    let model = SegModel::load(&args.checkpoint)?;
    let (train_sets, _) = args.data.load(args.seed)?;
    let space = space_of(&train_sets)?;
    mkdir(&args.out)?;
    let (similarity, tau, table) = derive_relations(&model, &train_sets, &space)?;
    write_relations(&args.out, &space, &similarity, tau.as_ref(), &table)?;
    log_line(&args.out, "relations finished")?;
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct ExperimentArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub threads: usize,
    /// Replaces the config's seed list with `[seed]`.
    pub seed: Option<u64>,
}

/// Writes `results.csv` (one row per seed) and `results_aggregated.csv`
/// (mean and sample std over seeds).
pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_json_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    mkdir(&args.out)?;
    log_line(&args.out, &format!("experiment started, {} threads", args.threads))?;
    let results = run_experiment(&config, args.threads)?;
    write_rows_csv(&results.rows, create(&args.out.join("results.csv"))?)?;
    write_aggregate_csv(
        &results.aggregated,
        create(&args.out.join("results_aggregated.csv"))?,
    )?;
    write_json(&args.out.join("experiment.json"), &config)?;
    println!(
        "{:<20} {:<8} {:<8} {:>14} {:>14}",
        "train", "loss", "test", "mIoU", "subset mIoU"
    );
    for r in &results.aggregated {
        let subset = match (r.subset_mean, r.subset_std) {
            (Some(m), Some(s)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
            _ => "-".to_string(),
        };
        println!(
            "{:<20} {:<8} {:<8} {:>14} {:>14}",
            r.train_setting,
            r.loss.to_string(),
            r.test_dataset,
            format!("{:.2}±{:.2}", 100.0 * r.miou_mean, 100.0 * r.miou_std),
            subset
        );
    }
    log_line(&args.out, "experiment finished")
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    /// JSON [`ModelSpec`]; both heads of the default tiny model when absent.
    pub model_spec: Option<PathBuf>,
    /// All losses when absent.
    pub loss: Option<LossKind>,
    pub seed: u64,
    pub corrupt: bool,
}

/// Prints one PASS/FAIL line per (loss, head); returns the reports.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradcheckReport>> {
    let specs: Vec<ModelSpec> = match &args.model_spec {
        Some(path) => vec![read_json(path)?],
        None => vec![tiny_spec(HeadKind::Linear), tiny_spec(HeadKind::Cosine)],
    };
    let losses = match args.loss {
        Some(l) => vec![l],
        None => LossKind::ALL.to_vec(),
    };
    let options = GradcheckOptions {
        corrupt: args.corrupt,
    };
    let mut reports = Vec::new();
    for spec in &specs {
        for &loss in &losses {
            let report = gradcheck(*spec, loss, args.seed, options)?;
            println!("{report}");
            reports.push(report);
        }
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct ConflictArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub pixels: usize,
}

/// `conflict.csv` for one interior logit vector and `overlap_sweep.csv`.
pub fn cmd_conflict_demo(args: &ConflictArgs) -> Result<()> {
    mkdir(&args.out)?;
    let rows = conflict_rows(&[0.4, 0.1, -0.3])?;
    write_conflict_csv(&rows, create(&args.out.join("conflict.csv"))?)?;
    for r in &rows {
        println!(
            "{:<8} {:<13} {:>+.6} {:>+.6} conflict={}",
            r.loss.to_string(),
            r.channel,
            r.report.first,
            r.report.second,
            r.report.conflict
        );
    }
    let sweep = overlap_sweep(args.pixels, args.seed)?;
    write_sweep_csv(&sweep, create(&args.out.join("overlap_sweep.csv"))?)?;
    log_line(&args.out, "conflict-demo finished")
}
