//! Predict in COARSE's taxonomy, but let a confident out-of-space class
//! override the label. Motorcyclist pixels that COARSE calls `rider` are
//! the interesting ones.
//!
//! `cargo run --release --example multilabel_predict`

use uniseg_lab::commands::DataArg;
use uniseg_lab::experiment::{override_rate, DataSize};
use uniseg_lab::labelspace::{unify, DatasetTaxonomy};
use uniseg_lab::losses::LossKind;
use uniseg_lab::model::HeadKind;
use uniseg_lab::synth::{default_fixture, COARSE};
use uniseg_lab::trainer::{run_cr_pipeline, train, TrainConfig};

fn main() -> uniseg_lab::Result<()> {
    let (train_sets, test_sets) = DataArg::Fixture(DataSize::default()).load(0)?;
    let taxonomies: Vec<DatasetTaxonomy> = train_sets.iter().map(|d| d.taxonomy.clone()).collect();
    let space = unify(&taxonomies)?;
    let coarse = &test_sets.iter().find(|d| d.id() == COARSE).unwrap().samples;
    let in_space = space.remap_table(COARSE)?.to_vec();
    let motorcyclist = space.index_of("motorcyclist").unwrap();
    let fine = default_fixture().0.fine_index("motorcyclist").unwrap() as u32;

    for loss in LossKind::ALL {
        let config = TrainConfig::new(loss, HeadKind::Linear);
        let model = match loss {
            LossKind::CrBce => run_cr_pipeline(&train_sets, &space, &config)?.stage2.model,
            _ => train(&train_sets, &space, &config, None)?.model,
        };
        for threshold in [0.1, 0.5, 0.9] {
            let (hits, total) =
                override_rate(&model, coarse, &in_space, threshold, loss, fine, motorcyclist)?;
            println!(
                "{:<9} threshold {threshold:.1}: {hits}/{total} motorcyclist pixels overridden",
                loss.to_string()
            );
        }
    }
    Ok(())
}
