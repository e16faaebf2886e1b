//! Learn which classes of one dataset hide inside the coarser classes of
//! another: stage-1 cosine model, similarity tensor, τ, multi-label table.
//!
//! `cargo run --release --example class_relations`

use uniseg_lab::commands::DataArg;
use uniseg_lab::experiment::DataSize;
use uniseg_lab::labelspace::{unify, DatasetTaxonomy};
use uniseg_lab::losses::LossKind;
use uniseg_lab::model::HeadKind;
use uniseg_lab::trainer::{run_cr_pipeline, TrainConfig};

fn main() -> uniseg_lab::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let (train_sets, _) = DataArg::Fixture(DataSize::default()).load(seed)?;
    let taxonomies: Vec<DatasetTaxonomy> = train_sets.iter().map(|d| d.taxonomy.clone()).collect();
    let space = unify(&taxonomies)?;
    let config = TrainConfig {
        seed,
        ..TrainConfig::new(LossKind::CrBce, HeadKind::Cosine)
    };
    let out = run_cr_pipeline(&train_sets, &space, &config)?;

    for e in &out.similarity.entries {
        let Some(scores) = &e.scores else { continue };
        let row: Vec<String> = scores.iter().map(|s| format!("{s:.2}")).collect();
        println!("{:<7}{:<14}{}", e.dataset_id, space.class_name(e.class), row.join(" "));
    }
    match &out.tau {
        Some(t) => println!("tau = {:.4} from {} contributors", t.value, t.contributors.len()),
        None => println!("tau = NONE"),
    }
    for (dataset, primary, secondary) in out.table.named_pairs(&space) {
        println!("{dataset}: {primary} also trains {secondary}");
    }
    Ok(())
}
