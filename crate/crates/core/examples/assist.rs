//! Marker-driven volume segmentation on a synthetic tumor: a few linear
//! markers, box interpolation between them, one prediction per slice.
//!
//! `cargo run --release --example assist -- [checkpoint]`

use std::path::Path;

use boxseg::annotate::{marker_from_mask, time_saving, AnnotationSession};
use boxseg::imgproc::normalize_volume;
use boxseg::iohub::load_checkpoint;
use boxseg::metrics::dsc;
use boxseg::model::{init_params, ModelConfig};
use boxseg::synth::{generate_tumor_volume, SynthSpec};

fn main() -> boxseg::Result<()> {
    let (cfg, params) = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(Path::new(&p))?,
        None => {
            let cfg = ModelConfig::default();
            let params = init_params(&cfg)?;
            (cfg, params)
        }
    };
    let (raw, truth) = generate_tumor_volume(&SynthSpec::default(), 24)?;
    let volume = normalize_volume(&raw)?.output;

    let tumor: Vec<usize> = (0..truth.depth()).filter(|&k| truth.slice(k).unwrap().count() > 0).collect();
    let (first, last) = (tumor[0], tumor[tumor.len() - 1]);
    let mut marked: Vec<usize> = (first..last).step_by(5).collect();
    marked.push(last);
    let markers: Vec<_> = marked
        .iter()
        .filter_map(|&k| marker_from_mask(&truth.slice(k).unwrap(), k))
        .collect();

    let mut session = AnnotationSession::new(&volume);
    session.add_markers(&markers, 4.0 * markers.len() as f64)?;
    let segmented = session.run_assist(&volume, &params, &cfg)?;
    for &k in &segmented {
        let got = session.current_mask(k).expect("segmented");
        println!("slice {k:>2}: dsc {:.3}", dsc(&truth.slice(k)?, got)?.value);
    }

    let totals = session.totals();
    let manual = 30.0 * tumor.len() as f64;
    println!(
        "marked {} of {} tumor slices; assisted {:.1} s vs manual {manual:.0} s, saving {:.1}%",
        markers.len(),
        tumor.len(),
        totals.total,
        100.0 * time_saving(totals.total, manual)?
    );
    Ok(())
}
