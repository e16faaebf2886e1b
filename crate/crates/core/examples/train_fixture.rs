//! Train each loss on the two-dataset fixture and score both test splits.
//!
//! `cargo run --release --example train_fixture`

use uniseg_lab::commands::DataArg;
use uniseg_lab::eval::evaluate;
use uniseg_lab::experiment::DataSize;
use uniseg_lab::labelspace::{unify, DatasetTaxonomy};
use uniseg_lab::losses::LossKind;
use uniseg_lab::model::HeadKind;
use uniseg_lab::trainer::{run_cr_pipeline, train, TrainConfig};

fn main() -> uniseg_lab::Result<()> {
    let (train_sets, test_sets) = DataArg::Fixture(DataSize::default()).load(0)?;
    let taxonomies: Vec<DatasetTaxonomy> = train_sets.iter().map(|d| d.taxonomy.clone()).collect();
    let space = unify(&taxonomies)?;

    for loss in LossKind::ALL {
        let config = TrainConfig::new(loss, HeadKind::Linear);
        let run = match loss {
            LossKind::CrBce => run_cr_pipeline(&train_sets, &space, &config)?.stage2,
            _ => train(&train_sets, &space, &config, None)?,
        };
        print!(
            "{:<9} loss {:.4} -> {:.4} in {:.1}s",
            loss.to_string(),
            run.losses[0],
            run.final_loss(),
            run.wall_time
        );
        for test in &test_sets {
            let report = evaluate(&run.model, test, &space)?;
            print!("  {} mIoU {:.3}", test.id(), report.miou);
        }
        println!();
    }
    Ok(())
}
