//! Generates a small mixed-style dataset and a CT-like tumor volume, and
//! writes both to a scratch directory.

use boxseg::iohub::{save_dataset, write_volume, VolumeContainer};
use boxseg::synth::{generate_dataset, generate_tumor_volume, SynthSpec};

fn main() -> boxseg::Result<()> {
    let spec = SynthSpec::default();
    let ds = generate_dataset(&spec, 12)?;
    for s in &ds.samples {
        let areas: Vec<usize> = s.masks.iter().map(|m| m.count()).collect();
        println!("{} group {} {:<8} object areas {areas:?}", s.id, s.group_id, s.style.name());
    }

    let dir = std::env::temp_dir().join("boxseg-synth");
    save_dataset(&dir, &ds)?;
    println!("dataset hash {} written to {}", ds.content_hash(), dir.display());

    let (volume, truth) = generate_tumor_volume(&spec, 16)?;
    let voxels = truth.count();
    write_volume(&dir.join("volume.miv"), &VolumeContainer::from_volume(&volume))?;
    println!("tumor volume {}x{}x{}, {voxels} tumor voxels", volume.depth(), volume.height(), volume.width());
    Ok(())
}
