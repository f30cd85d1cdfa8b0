//! Finite-difference check of every parameter group's gradient in 64-bit.

use boxseg::model::ModelConfig;
use boxseg::train::grad_check;

fn main() -> boxseg::Result<()> {
    let report = grad_check(&ModelConfig::micro())?;
    for g in &report.groups {
        println!("{:<40} {:>4} checked  max rel error {:.2e}", g.group, g.checked, g.max_rel_error);
    }
    println!("worst {:.2e}", report.max_error());
    Ok(())
}
