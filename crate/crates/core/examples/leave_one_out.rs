//! Hold one dataset out, train on the rest with each loss, and compare
//! mean IoU on the held-out taxonomy.
//!
//! `cargo run --release --example leave_one_out -- 3` runs three seeds.

use uniseg_lab::experiment::{run_experiment, ExperimentConfig, FixtureName};

fn main() -> uniseg_lab::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(2, |s| s.parse().expect("seed count"));
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let config = ExperimentConfig {
        seeds: (0..seeds).collect(),
        ..ExperimentConfig::fixture(FixtureName::LeaveOneOut)
    };
    let results = run_experiment(&config, threads)?;
    println!("{:<16}{:<10}{:>14}{:>16}", "held out", "loss", "mIoU", "subset mIoU");
    for row in &results.aggregated {
        let subset = row
            .subset_mean
            .map_or("-".into(), |m| format!("{:.3} ± {:.3}", m, row.subset_std.unwrap_or(0.0)));
        println!(
            "{:<16}{:<10}{:>7.3} ± {:.3}{:>16}",
            row.held_out,
            row.loss.to_string(),
            row.miou_mean,
            row.miou_std,
            subset
        );
    }
    Ok(())
}
