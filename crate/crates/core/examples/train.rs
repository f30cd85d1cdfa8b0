//! Trains the default model on a small synthetic set and saves a checkpoint.
//!
//! `cargo run --release --example train -- [images] [epochs]`

use boxseg::iohub::save_checkpoint;
use boxseg::metrics::{evaluate_run, EvalOptions};
use boxseg::model::ModelConfig;
use boxseg::synth::{generate_dataset, Sample, SynthSpec};
use boxseg::train::{split_dataset, train_split, TrainConfig};

fn main() -> boxseg::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let images = args.next().unwrap_or(300);
    let epochs = args.next().unwrap_or(10);

    let ds = generate_dataset(&SynthSpec::default(), images)?;
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        epochs,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let split = split_dataset(&ds.group_ids(), cfg.fractions, cfg.seed)?;
    let out = train_split(&ds, &split.train, &split.tune, &model, &cfg, |log| {
        println!("epoch {:>3} loss {:.4} tune dsc {:?}", log.epoch, log.mean_loss, log.tune_dsc_median);
    })?;

    let val: Vec<&Sample> = split.val.iter().map(|&i| &ds.samples[i]).collect();
    let report = evaluate_run(&val, &out.params, &model, &EvalOptions::default())?;
    for s in &report.summary {
        println!("{:<8} n={:<3} dsc {:.3} nsd {:.3}", s.task, s.cases, s.dsc.median, s.nsd.median);
    }

    let path = std::env::temp_dir().join("boxseg-example.bsck");
    save_checkpoint(&path, &out.params, &model)?;
    println!("checkpoint {} ({})", path.display(), out.params.content_hash());
    Ok(())
}
