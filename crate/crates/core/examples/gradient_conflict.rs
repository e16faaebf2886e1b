//! Two datasets label the same pixel `rider` and `motorcyclist`. Compare the
//! per-channel gradients each loss sends back for the pair.

use uniseg_lab::conflict::{conflict_rows, overlap_sweep};

fn main() -> uniseg_lab::Result<()> {
    println!("{:<9}{:<14}{:>10}{:>10}  conflict", "loss", "channel", "A", "B");
    for row in conflict_rows(&[0.4, -0.3, 0.8])? {
        println!(
            "{:<9}{:<14}{:>+10.4}{:>+10.4}  {}",
            row.loss.to_string(),
            row.channel,
            row.report.first,
            row.report.second,
            row.report.conflict
        );
    }
    println!();
    println!("share of road pixels vs conflicting pixels:");
    for row in overlap_sweep(400, 0)? {
        println!(
            "  overlap {:.2}  {:<9}{:>4}/{} conflicting",
            row.overlap_fraction,
            row.loss.to_string(),
            row.conflicting_pixels,
            row.pixels
        );
    }
    Ok(())
}
