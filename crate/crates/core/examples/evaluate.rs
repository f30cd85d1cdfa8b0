//! Scores predictions against ground truth and summarizes per task.

use boxseg::metrics::{evaluate_run, evaluate_with, write_csv, EvalOptions};
use boxseg::model::{init_params, ModelConfig};
use boxseg::synth::{generate_dataset, Sample, SynthSpec};

fn main() -> boxseg::Result<()> {
    let ds = generate_dataset(&SynthSpec::default(), 9)?;
    let samples: Vec<&Sample> = ds.samples.iter().collect();

    let oracle = evaluate_with(&samples, 2.0, |case| Ok(case.ground_truth().clone()))?;
    println!("oracle: median dsc {} nsd {}", oracle.overall().dsc.median, oracle.overall().nsd.median);

    let cfg = ModelConfig::default();
    let params = init_params(&cfg)?;
    let opts = EvalOptions {
        perturb_max: 2,
        ..EvalOptions::default()
    };
    let report = evaluate_run(&samples, &params, &cfg, &opts)?;
    for s in &report.summary {
        println!(
            "{:<8} dsc {:.3} [{:.3}, {:.3}]  nsd {:.3}",
            s.task, s.dsc.median, s.dsc.q25, s.dsc.q75, s.nsd.median
        );
    }
    write_csv(&report.records, std::io::stdout().lock())?;
    Ok(())
}
