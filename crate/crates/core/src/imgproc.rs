//! Per-modality intensity normalization, resizing, channel replication and
//! patch tiling.
//!
//! Every normalizer maps into `[0, 255]` and rounds half away from zero.
//! Constant inputs do not error: they map to zeros and set
//! [`Normalized::degenerate`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// CT display window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl WindowSpec {
    pub const SOFT_TISSUE: WindowSpec = WindowSpec {
        width: 400.0,
        level: 40.0,
    };
    pub const LUNG: WindowSpec = WindowSpec {
        width: 1500.0,
        level: -160.0,
    };
    pub const BRAIN: WindowSpec = WindowSpec {
        width: 80.0,
        level: 40.0,
    };

    pub fn new(width: f64, level: f64) -> Result<Self> {
        if !(width > 0.0) || !level.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "window width must be > 0 (got W={width}, L={level})"
            )));
        }
        Ok(Self { width, level })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modality {
    Ct { window: WindowSpec },
    Mr,
    Xray,
    Ultrasound,
    Mammography,
    Oct,
    Rgb,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Ct { .. } => "ct",
            Modality::Mr => "mr",
            Modality::Xray => "xray",
            Modality::Ultrasound => "ultrasound",
            Modality::Mammography => "mammography",
            Modality::Oct => "oct",
            Modality::Rgb => "rgb",
        }
    }

    fn uses_percentile_clip(&self) -> bool {
        matches!(
            self,
            Modality::Mr
                | Modality::Xray
                | Modality::Ultrasound
                | Modality::Mammography
                | Modality::Oct
        )
    }
}

/// A 2-D image, row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!("{width}x{height} plane")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidDimensions(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "plane data length {} != {width}*{height}*{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Gray planes become three identical channels; RGB planes are returned as is.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// A scalar volume stored slice-major (`[depth][height][width]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub modality: Modality,
    /// Physical voxel size `(z, y, x)`; carried along, never used for resampling.
    pub spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        modality: Modality,
    ) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "{depth}x{height}x{width} volume"
            )));
        }
        if data.len() != depth * height * width {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} != {depth}*{height}*{width}",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
            modality,
            spacing: None,
        })
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice_data(&self, k: usize) -> Result<&[f32]> {
        if k >= self.depth {
            return Err(Error::SliceOutOfRange {
                index: k,
                depth: self.depth,
            });
        }
        let n = self.height * self.width;
        Ok(&self.data[k * n..(k + 1) * n])
    }

    /// Slice `k` as a single-channel plane.
    pub fn slice(&self, k: usize) -> Result<ImagePlane> {
        let d = self.slice_data(k)?.to_vec();
        ImagePlane::new(self.width, self.height, 1, d)
    }

    fn with_data(&self, data: Vec<f32>) -> Volume {
        Volume {
            data,
            ..self.clone()
        }
    }
}

/// Normalizer output plus the zero-dynamic-range flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized<T> {
    pub output: T,
    pub degenerate: bool,
}

#[inline]
fn to_byte_range(v: f64) -> f32 {
    v.clamp(0.0, 255.0).round() as f32
}

/// Maps `[L - W/2, L + W/2]` linearly onto `[0, 255]`, clamping outside.
pub fn normalize_ct(volume: &Volume, window: WindowSpec) -> Result<Volume> {
    if !matches!(volume.modality, Modality::Ct { .. }) {
        return Err(Error::ModalityMismatch {
            expected: "ct".into(),
            found: volume.modality.name().into(),
        });
    }
    let window = WindowSpec::new(window.width, window.level)?;
    let lo = window.level - window.width / 2.0;
    let data = volume
        .data
        .iter()
        .map(|&hu| to_byte_range((hu as f64 - lo) / window.width * 255.0))
        .collect();
    Ok(volume.with_data(data))
}

/// Percentile of already sorted values by inclusive linear interpolation
/// (rank `p/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn clip_rescale(values: &[f32], lo: f64, hi: f64) -> Normalized<Vec<f32>> {
    if !(hi > lo) {
        return Normalized {
            output: vec![0.0; values.len()],
            degenerate: true,
        };
    }
    let span = hi - lo;
    let output = values
        .iter()
        .map(|&v| to_byte_range(((v as f64).clamp(lo, hi) - lo) / span * 255.0))
        .collect();
    Normalized {
        output,
        degenerate: false,
    }
}

/// Clips to the whole-volume `[p0.5, p99.5]` range then rescales to `[0, 255]`.
pub fn normalize_percentile(volume: &Volume) -> Result<Normalized<Volume>> {
    if !volume.modality.uses_percentile_clip() {
        return Err(Error::ModalityMismatch {
            expected: "mr|xray|ultrasound|mammography|oct".into(),
            found: volume.modality.name().into(),
        });
    }
    let mut sorted: Vec<f64> = volume.data.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, 0.5);
    let hi = percentile_sorted(&sorted, 99.5);
    let n = clip_rescale(&volume.data, lo, hi);
    Ok(Normalized {
        output: volume.with_data(n.output),
        degenerate: n.degenerate,
    })
}

/// Leaves in-range RGB untouched, otherwise rescales jointly over all
/// channels by max-min.
pub fn normalize_rgb(image: &ImagePlane) -> Result<Normalized<ImagePlane>> {
    if image.channels != 3 {
        return Err(Error::ModalityMismatch {
            expected: "rgb (3 channels)".into(),
            found: format!("{} channel(s)", image.channels),
        });
    }
    let (min, max) = image
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if min == max {
        return Ok(Normalized {
            output: ImagePlane {
                data: vec![0.0; image.data.len()],
                ..image.clone()
            },
            degenerate: true,
        });
    }
    if min >= 0.0 && max <= 255.0 {
        return Ok(Normalized {
            output: image.clone(),
            degenerate: false,
        });
    }
    let n = clip_rescale(&image.data, min, max);
    Ok(Normalized {
        output: ImagePlane {
            data: n.output,
            ..image.clone()
        },
        degenerate: false,
    })
}

/// Dispatches on the volume's modality. RGB volumes are rejected; use
/// [`normalize_rgb`] on planes.
pub fn normalize_volume(volume: &Volume) -> Result<Normalized<Volume>> {
    match volume.modality {
        Modality::Ct { window } => Ok(Normalized {
            output: normalize_ct(volume, window)?,
            degenerate: false,
        }),
        Modality::Rgb => Err(Error::ModalityMismatch {
            expected: "scalar modality".into(),
            found: "rgb".into(),
        }),
        _ => normalize_percentile(volume),
    }
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Source coordinate of destination pixel `i` with pixel centers at
/// half-integers and the outer corners of both grids aligned.
#[inline]
pub fn source_coord(i: usize, src_len: usize, dst_len: usize) -> f64 {
    (i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Per-destination taps of a 1-D cubic resampler, edge-replicated.
fn cubic_taps(src_len: usize, dst_len: usize) -> Vec<[(usize, f64); 4]> {
    (0..dst_len)
        .map(|i| {
            let s = source_coord(i, src_len, dst_len);
            let base = s.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let k = base - 1 + j as isize;
                let idx = k.clamp(0, src_len as isize - 1) as usize;
                *tap = (idx, catmull_rom(s - k as f64));
            }
            taps
        })
        .collect()
}

fn check_target(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidDimensions(format!("resize target {w}x{h}")));
    }
    Ok(())
}

/// Bicubic (Catmull-Rom) resize; output clamped to `[0, 255]`.
pub fn resize_image(plane: &ImagePlane, target_w: usize, target_h: usize) -> Result<ImagePlane> {
    check_target(target_w, target_h)?;
    if target_w == plane.width && target_h == plane.height {
        return Ok(plane.clone());
    }
    let ch = plane.channels;
    let xt = cubic_taps(plane.width, target_w);
    let yt = cubic_taps(plane.height, target_h);
    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; plane.height * target_w * ch];
    for y in 0..plane.height {
        for (x, taps) in xt.iter().enumerate() {
            for c in 0..ch {
                tmp[(y * target_w + x) * ch + c] = taps
                    .iter()
                    .map(|&(i, w)| w * plane.get(i, y, c) as f64)
                    .sum();
            }
        }
    }
    let mut out = ImagePlane::zeros(target_w, target_h, ch);
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..target_w {
            for c in 0..ch {
                let v: f64 = taps
                    .iter()
                    .map(|&(i, w)| w * tmp[(i * target_w + x) * ch + c])
                    .sum();
                out.set(x, y, c, v.clamp(0.0, 255.0) as f32);
            }
        }
    }
    Ok(out)
}

#[inline]
fn nearest_index(i: usize, src_len: usize, dst_len: usize) -> usize {
    let s = (i as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (s.floor() as usize).min(src_len - 1)
}

/// Nearest-neighbour resize of a 2-D mask.
pub fn resize_mask(mask: &BinaryMask, target_w: usize, target_h: usize) -> Result<BinaryMask> {
    check_target(target_w, target_h)?;
    if mask.dims().len() != 2 {
        return Err(Error::InvalidDimensions("resize_mask expects a 2-D mask".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros_2d(target_h, target_w);
    for y in 0..target_h {
        let sy = nearest_index(y, h, target_h);
        for x in 0..target_w {
            let sx = nearest_index(x, w, target_w);
            out.set2(y, x, mask.get2(sy, sx));
        }
    }
    Ok(out)
}

/// Where model-ready planes come from.
#[derive(Clone, Copy, Debug)]
pub enum PlaneSource<'a> {
    Slice { volume: &'a Volume, index: usize },
    Image(&'a ImagePlane),
}

/// How a source is brought to the model's square input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fit {
    /// Bicubic resize to `model_size x model_size`.
    Resize,
    /// Non-overlapping `model_size` patches, zero padded at the right and bottom.
    Tile,
}

/// A model-ready plane and the source offset of its top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub x0: usize,
    pub y0: usize,
    pub plane: ImagePlane,
}

/// Converts a normalized slice or image into 3-channel `model_size` planes.
pub fn prepare_plane(source: PlaneSource<'_>, model_size: usize, fit: Fit) -> Result<Vec<Tile>> {
    if model_size == 0 {
        return Err(Error::InvalidDimensions("model size 0".into()));
    }
    let rgb = match source {
        PlaneSource::Slice { volume, index } => volume.slice(index)?.to_rgb(),
        PlaneSource::Image(img) => img.to_rgb(),
    };
    match fit {
        Fit::Resize => Ok(vec![Tile {
            x0: 0,
            y0: 0,
            plane: resize_image(&rgb, model_size, model_size)?,
        }]),
        Fit::Tile => Ok(tile(&rgb, model_size)),
    }
}

fn tile(img: &ImagePlane, size: usize) -> Vec<Tile> {
    let nx = img.width.div_ceil(size);
    let ny = img.height.div_ceil(size);
    let ch = img.channels;
    let mut tiles = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            let (x0, y0) = (tx * size, ty * size);
            let mut plane = ImagePlane::zeros(size, size, ch);
            for y in 0..size.min(img.height - y0) {
                for x in 0..size.min(img.width - x0) {
                    for c in 0..ch {
                        plane.set(x, y, c, img.get(x0 + x, y0 + y, c));
                    }
                }
            }
            tiles.push(Tile { x0, y0, plane });
        }
    }
    tiles
}

/// Inverse of tiling: pastes tiles back and crops the padding.
pub fn reassemble_tiles(tiles: &[Tile], width: usize, height: usize) -> Result<ImagePlane> {
    let ch = tiles
        .first()
        .map(|t| t.plane.channels)
        .ok_or_else(|| Error::EmptyInput("no tiles".into()))?;
    let mut out = ImagePlane::zeros(width, height, ch);
    for t in tiles {
        for y in 0..t.plane.height {
            for x in 0..t.plane.width {
                let (gx, gy) = (t.x0 + x, t.y0 + y);
                if gx < width && gy < height {
                    for c in 0..ch {
                        out.set(gx, gy, c, t.plane.get(x, y, c));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ct(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(
            1,
            1,
            n,
            values,
            Modality::Ct {
                window: WindowSpec::SOFT_TISSUE,
            },
        )
        .unwrap()
    }

    #[test]
    fn ct_window_endpoints_midpoint_and_clamp() {
        let v = ct(vec![-160.0, 240.0, -2000.0, 40.0, 3000.0]);
        let out = normalize_ct(&v, WindowSpec::SOFT_TISSUE).unwrap();
        assert_eq!(out.data(), &[0.0, 255.0, 0.0, 128.0, 255.0]);
    }

    #[test]
    fn ct_rejects_other_modalities_and_bad_window() {
        let mut v = ct(vec![0.0]);
        assert!(normalize_ct(&v, WindowSpec { width: 0.0, level: 0.0 }).is_err());
        v.modality = Modality::Mr;
        assert!(matches!(
            normalize_ct(&v, WindowSpec::SOFT_TISSUE),
            Err(Error::ModalityMismatch { .. })
        ));
    }

    #[test]
    fn percentile_constant_volume_is_degenerate() {
        let v = Volume::new(2, 2, 2, vec![7.0; 8], Modality::Mr).unwrap();
        let n = normalize_percentile(&v).unwrap();
        assert!(n.degenerate);
        assert!(n.output.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn percentile_on_known_multiset() {
        // Sorted values 0..999: rank(0.5%) = 4.995, rank(99.5%) = 994.005.
        let data: Vec<f32> = (0..1000).rev().map(|v| v as f32).collect();
        let v = Volume::new(10, 10, 10, data.clone(), Modality::Xray).unwrap();
        let n = normalize_percentile(&v).unwrap();
        assert!(!n.degenerate);
        let (lo, hi) = (4.995, 994.005);
        for (&x, &y) in data.iter().zip(n.output.data()) {
            let want = ((x as f64).clamp(lo, hi) - lo) / (hi - lo) * 255.0;
            assert_eq!(y, want.round() as f32);
        }
        assert_eq!(n.output.data()[999], 0.0);
        assert_eq!(n.output.data()[0], 255.0);
    }

    #[test]
    fn percentile_rejects_ct_and_rgb() {
        assert!(normalize_percentile(&ct(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn rgb_rules() {
        let inrange = ImagePlane::new(2, 1, 3, vec![10.0, 50.0, 200.0, 30.0, 90.0, 120.0]).unwrap();
        let n = normalize_rgb(&inrange).unwrap();
        assert_eq!(n.output, inrange);
        assert!(!n.degenerate);

        let wide = ImagePlane::new(2, 1, 3, vec![0.0, 4095.0, 2047.5, 1.0, 2.0, 3.0]).unwrap();
        let n = normalize_rgb(&wide).unwrap();
        assert_eq!(n.output.data()[0], 0.0);
        assert_eq!(n.output.data()[1], 255.0);
        assert_eq!(n.output.data()[2], 128.0);

        let flat = ImagePlane::new(1, 1, 3, vec![300.0; 3]).unwrap();
        let n = normalize_rgb(&flat).unwrap();
        assert!(n.degenerate);
        assert_eq!(n.output.data(), &[0.0; 3]);

        let gray = ImagePlane::zeros(1, 1, 1);
        assert!(normalize_rgb(&gray).is_err());
    }

    #[test]
    fn resize_identity_is_bit_identical() {
        let p = ImagePlane::new(3, 2, 1, vec![1.5, 2.0, 3.0, 4.0, 5.0, 6.25]).unwrap();
        assert_eq!(resize_image(&p, 3, 2).unwrap(), p);
        assert!(resize_image(&p, 0, 2).is_err());
    }

    #[test]
    fn nearest_upscale_replicates_blocks() {
        let m = BinaryMask::new(vec![2, 2], vec![1, 0, 0, 1]).unwrap();
        let up = resize_mask(&m, 4, 4).unwrap();
        let want = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1];
        assert_eq!(up.data(), &want);
    }

    #[test]
    fn prepare_replicates_gray_and_tiles() {
        let v = Volume::new(1, 64, 64, (0..4096).map(|i| (i % 255) as f32).collect(), Modality::Mr)
            .unwrap();
        let t = prepare_plane(PlaneSource::Slice { volume: &v, index: 0 }, 64, Fit::Resize).unwrap();
        let p = &t[0].plane;
        assert_eq!((p.width(), p.height(), p.channels()), (64, 64, 3));
        for px in p.data().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        assert!(prepare_plane(PlaneSource::Slice { volume: &v, index: 1 }, 64, Fit::Resize).is_err());

        let img = ImagePlane::new(100, 70, 3, vec![9.0; 100 * 70 * 3]).unwrap();
        let tiles = prepare_plane(PlaneSource::Image(&img), 64, Fit::Tile).unwrap();
        assert_eq!(tiles.len(), 4);
        let br = &tiles[3];
        assert_eq!((br.x0, br.y0), (64, 64));
        assert_eq!(br.plane.get(35, 5, 0), 9.0);
        assert_eq!(br.plane.get(36, 5, 0), 0.0);
        assert_eq!(br.plane.get(0, 6, 0), 0.0);

        let exact = ImagePlane::new(64, 64, 3, vec![3.0; 64 * 64 * 3]).unwrap();
        let t = prepare_plane(PlaneSource::Image(&exact), 64, Fit::Resize).unwrap();
        assert_eq!(t[0].plane, exact);
    }
}
