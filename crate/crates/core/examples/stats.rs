//! Paired Wilcoxon signed-rank tests, exact and approximate.

use boxseg::metrics::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, Method};

fn main() -> boxseg::Result<()> {
    let a = [0.91, 0.88, 0.95, 0.79, 0.85, 0.90];
    let b = [0.87, 0.86, 0.90, 0.70, 0.84, 0.82];
    let r = wilcoxon_signed_rank(&a, &b)?;
    println!("n={} W={} p={:.5} ({:?})", r.n_effective, r.statistic, r.p_value, r.method);

    let x: Vec<f64> = (0..25).map(|i| ((i * 37 % 23) as f64).sin()).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 0.1 - 0.02 * (i % 7) as f64).collect();
    for m in [Method::Exact, Method::NormalApprox] {
        let r = wilcoxon_signed_rank_with(&x, &y, Some(m))?;
        println!("{m:?}: p={:.4}", r.p_value);
    }

    let same = wilcoxon_signed_rank(&a, &a)?;
    println!("identical runs: p={} degenerate={}", same.p_value, same.degenerate);
    Ok(())
}
