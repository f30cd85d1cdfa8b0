//! Intensity normalization per modality, resizing and tiling.

use boxseg::imgproc::{
    normalize_rgb, normalize_volume, prepare_plane, reassemble_tiles, resize_image, Fit, ImagePlane, Modality,
    PlaneSource, Volume, WindowSpec,
};
use boxseg::iohub::write_png;

fn main() -> boxseg::Result<()> {
    // A CT ramp from air to bone, shown in the soft tissue window.
    let hu: Vec<f32> = (0..32 * 32).map(|i| -1000.0 + 2000.0 * (i % 32) as f32 / 31.0).collect();
    let ct = Volume::new(1, 32, 32, hu, Modality::Ct { window: WindowSpec::SOFT_TISSUE })?;
    let ct = normalize_volume(&ct)?.output;
    let row = &ct.slice_data(0)?[..32];
    println!("ct row after windowing: {:?}", &row[12..20]);

    // Percentile clipping for MR; a single hot voxel does not squash the rest.
    let mut mr: Vec<f32> = (0..400).map(|i| i as f32).collect();
    mr[0] = 1e6;
    let mr = normalize_volume(&Volume::new(1, 20, 20, mr, Modality::Mr)?)?;
    println!("mr degenerate={} max={}", mr.degenerate, mr.output.data().iter().cloned().fold(0.0, f32::max));

    // 12-bit RGB is rescaled jointly; 8-bit RGB is left alone.
    let deep = ImagePlane::new(2, 1, 3, vec![0.0, 1000.0, 4095.0, 2048.0, 10.0, 300.0])?;
    println!("rgb rescaled: {:?}", normalize_rgb(&deep)?.output.data());

    let big = resize_image(&ct.slice(0)?.to_rgb(), 100, 70)?;
    let tiles = prepare_plane(PlaneSource::Image(&big), 64, Fit::Tile)?;
    for t in &tiles {
        println!("tile at ({}, {})", t.x0, t.y0);
    }
    assert_eq!(reassemble_tiles(&tiles, 100, 70)?, big);

    let out = std::env::temp_dir().join("boxseg-ct-window.png");
    write_png(&out, &big)?;
    println!("wrote {}", out.display());
    Ok(())
}
