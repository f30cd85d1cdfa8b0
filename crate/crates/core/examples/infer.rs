//! Segments one object from a box prompt, reusing the image embedding for a
//! second prompt.
//!
//! `cargo run --release --example infer -- [checkpoint]`; without a
//! checkpoint the freshly initialized model is used.

use std::path::Path;
use std::time::Instant;

use boxseg::iohub::{load_checkpoint, mask_to_plane, write_png};
use boxseg::metrics::dsc;
use boxseg::model::{decode_mask, encode_box, encode_image, init_params, ModelConfig};
use boxseg::synth::{render_sample, SynthSpec};
use boxseg::train::simulate_box;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> boxseg::Result<()> {
    let (cfg, params) = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(Path::new(&p))?,
        None => {
            let cfg = ModelConfig::default();
            let params = init_params(&cfg)?;
            (cfg, params)
        }
    };
    let (sample, _) = render_sample(&SynthSpec::default(), 7)?;
    let truth = &sample.masks[0];

    let t = Instant::now();
    let embedding = encode_image(&sample.image, &params, &cfg)?;
    let encode_ms = t.elapsed().as_secs_f64() * 1e3;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for perturb in [0, 3] {
        let b = simulate_box(truth, perturb, &mut rng)?;
        let t = Instant::now();
        let out = decode_mask(&embedding, &encode_box(&b, &cfg, &params)?, &params, &cfg)?;
        println!(
            "box {:?} -> dsc {:.3}, confidence {:.3}, decode {:.2} ms (encode {encode_ms:.2} ms)",
            (b.x_min, b.y_min, b.x_max, b.y_max),
            dsc(truth, &out.mask)?.value,
            out.confidence,
            t.elapsed().as_secs_f64() * 1e3,
        );
        let path = std::env::temp_dir().join(format!("boxseg-infer-{perturb}.png"));
        write_png(&path, &mask_to_plane(&out.mask)?)?;
    }
    Ok(())
}
