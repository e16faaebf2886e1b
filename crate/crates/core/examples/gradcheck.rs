//! Central-difference check of every loss against both classifier heads.

use uniseg_lab::gradcheck::{gradcheck, gradcheck_all, tiny_spec, GradcheckOptions};
use uniseg_lab::losses::LossKind;
use uniseg_lab::model::HeadKind;

fn main() -> uniseg_lab::Result<()> {
    for report in gradcheck_all(0)? {
        println!("{report}");
    }
    let broken = gradcheck(
        tiny_spec(HeadKind::Linear),
        LossKind::Ce,
        0,
        GradcheckOptions { corrupt: true },
    )?;
    println!("with a perturbed gradient:\n{broken}");
    Ok(())
}
