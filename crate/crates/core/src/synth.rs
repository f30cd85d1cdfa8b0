//! Deterministic synthetic images, per-object masks and tumor volumes.
//!
//! These are openly artificial stand-ins for real scans: randomized smooth
//! blobs rendered in one of three styles. They exist so that training, the
//! metrics and the annotation pipeline can be exercised end to end.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgproc::{ImagePlane, Modality, Volume, WindowSpec};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    /// Low contrast gray, additive Gaussian noise.
    CtLike,
    /// Multiplicative speckle followed by a small blur.
    UsLike,
    /// Colored background, textured colored objects.
    RgbLike,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::CtLike, Style::UsLike, Style::RgbLike];

    pub fn name(self) -> &'static str {
        match self {
            Style::CtLike => "ct-like",
            Style::UsLike => "us-like",
            Style::RgbLike => "rgb-like",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleMix {
    Single(Style),
    /// Round-robin over all styles, so counts differ by at most one.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub style: StyleMix,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Width of the soft halo around objects, in pixels.
    pub blur_sigma: f64,
    /// Minimum mean intensity difference between any object and background.
    pub contrast_gap: f64,
    /// Consecutive images sharing one group id (a "scan").
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            style: StyleMix::Mixed,
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            blur_sigma: 1.0,
            contrast_gap: 40.0,
            group_size: 5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.contrast_gap > 0.0) {
            return bad("contrast_gap must be > 0");
        }
        if !(self.blur_sigma >= 0.0) {
            return bad("blur_sigma must be >= 0");
        }
        if self.min_objects < 1 || self.max_objects > 3 || self.min_objects > self.max_objects {
            return bad("object count must satisfy 1 <= min <= max <= 3");
        }
        if self.group_size == 0 {
            return bad("group_size must be >= 1");
        }
        if self.image_size < 16 {
            return Err(Error::Infeasible(format!(
                "image_size {} too small to place objects",
                self.image_size
            )));
        }
        if self.contrast_gap * 1.6 > 110.0 {
            return Err(Error::Infeasible(format!(
                "contrast_gap {} does not fit the 8-bit range",
                self.contrast_gap
            )));
        }
        Ok(())
    }

    fn style_of(&self, index: usize) -> Style {
        match self.style {
            StyleMix::Single(s) => s,
            StyleMix::Mixed => Style::ALL[index % 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub group_id: u32,
    pub style: Style,
    /// Three-channel, values in `[0, 255]`.
    pub image: ImagePlane,
    /// One exact mask per object, pairwise disjoint.
    pub masks: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn group_ids(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.group_id).collect()
    }

    /// SHA-256 over images, masks and group ids.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(s.group_id.to_le_bytes());
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
            for m in &s.masks {
                h.update((m.len() as u64).to_le_bytes());
                h.update(m.data());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A star-shaped blob: an ellipse whose radius is modulated by one harmonic.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    k: f64,
    amp: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64, rmin: f64, rmax: f64) -> Blob {
        let a = rng.random_range(rmin..rmax) * size;
        let b = rng.random_range(rmin..rmax) * size;
        let amp = rng.random_range(0.0..0.18);
        let reach = a.max(b) * (1.0 + amp) + 2.0;
        Blob {
            cx: rng.random_range(reach..size - reach),
            cy: rng.random_range(reach..size - reach),
            a,
            b,
            angle: rng.random_range(0.0..PI),
            k: rng.random_range(2..=4) as f64,
            amp,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Approximate signed distance in pixels (negative inside) at scale `s`.
    fn signed_distance(&self, x: f64, y: f64, s: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = (cos * dx + sin * dy) / (self.a * s);
        let v = (-sin * dx + cos * dy) / (self.b * s);
        let r = (u * u + v * v).sqrt();
        let edge = 1.0 + self.amp * (self.k * v.atan2(u) + self.phase).sin();
        (r - edge) * self.a.min(self.b) * s
    }

    fn rasterize(&self, size: usize, s: f64) -> BinaryMask {
        BinaryMask::from_bools(
            vec![size, size],
            (0..size * size).map(|i| {
                let (y, x) = (i / size, i % size);
                self.signed_distance(x as f64 + 0.5, y as f64 + 0.5, s) <= 0.0
            }),
        )
        .expect("square mask")
    }

    /// Coverage used for shading: 1 inside, Gaussian halo outside.
    fn shade(&self, x: f64, y: f64, sigma: f64, s: f64) -> f64 {
        let d = self.signed_distance(x, y, s);
        if d <= 0.0 {
            1.0
        } else if sigma > 0.0 {
            (-d * d / (2.0 * sigma * sigma)).exp()
        } else {
            0.0
        }
    }
}

fn too_close(mask: &BinaryMask, taken: &[u8], size: usize, margin: usize) -> bool {
    for y in 0..size {
        for x in 0..size {
            if !mask.get2(y, x) {
                continue;
            }
            for yy in y.saturating_sub(margin)..(y + margin + 1).min(size) {
                for xx in x.saturating_sub(margin)..(x + margin + 1).min(size) {
                    if taken[yy * size + xx] != 0 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn place_blobs(
    rng: &mut ChaCha8Rng,
    size: usize,
    count: usize,
) -> Result<Vec<(Blob, BinaryMask)>> {
    let min_area = (0.005 * (size * size) as f64).ceil() as usize;
    let mut taken = vec![0u8; size * size];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..200 {
            let blob = Blob::random(rng, size as f64, 0.07, 0.2);
            let mask = blob.rasterize(size, 1.0);
            if mask.count() < min_area || too_close(&mask, &taken, size, 2) {
                continue;
            }
            for (t, &m) in taken.iter_mut().zip(mask.data()) {
                *t |= m;
            }
            out.push((blob, mask));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place {count} disjoint objects in {size}x{size}"
            )));
        }
    }
    Ok(out)
}

/// Picks an object level at least `gap` away from `base`, inside `[0, 255]`.
fn object_level(rng: &mut ChaCha8Rng, base: f64, gap: f64) -> f64 {
    let delta = gap * rng.random_range(1.2..1.6);
    let up = base + delta <= 245.0;
    let down = base - delta >= 10.0;
    let brighter = match (up, down) {
        (true, true) => rng.random_bool(0.5),
        (u, _) => u,
    };
    if brighter {
        base + delta
    } else {
        base - delta
    }
}

/// Renders one sample and also returns its noise-free image.
pub fn render_sample(spec: &SynthSpec, index: usize) -> Result<(Sample, ImagePlane)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let style = spec.style_of(index);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let blobs = place_blobs(&mut rng, size, count)?;

    let base: [f64; 3] = match style {
        Style::CtLike => [rng.random_range(70.0..150.0); 3],
        Style::UsLike => [rng.random_range(60.0..120.0); 3],
        Style::RgbLike => [
            rng.random_range(60.0..190.0),
            rng.random_range(60.0..190.0),
            rng.random_range(60.0..190.0),
        ],
    };
    let mean_base = base.iter().sum::<f64>() / 3.0;
    let levels: Vec<[f64; 3]> = blobs
        .iter()
        .map(|_| {
            let target = object_level(&mut rng, mean_base, spec.contrast_gap);
            let shift = target - mean_base;
            match style {
                Style::RgbLike => {
                    let tint = [
                        rng.random_range(-15.0..15.0),
                        rng.random_range(-15.0..15.0),
                        rng.random_range(-15.0..15.0),
                    ];
                    let mean_tint = tint.iter().sum::<f64>() / 3.0;
                    [0, 1, 2].map(|c| base[c] + shift + tint[c] - mean_tint)
                }
                _ => [target; 3],
            }
        })
        .collect();
    let gradient = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    let texture_freq = rng.random_range(0.5..1.1);

    let mut clean = ImagePlane::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let ramp = gradient.0 * (fx / size as f64 - 0.5) + gradient.1 * (fy / size as f64 - 0.5);
            let mut px = base.map(|b| b + ramp);
            for ((blob, mask), level) in blobs.iter().zip(&levels) {
                let w = blob.shade(fx, fy, spec.blur_sigma, 1.0);
                if w == 0.0 {
                    continue;
                }
                let tex = if style == Style::RgbLike && mask.get2(y, x) {
                    6.0 * (texture_freq * fx).sin() * (texture_freq * fy).sin()
                } else {
                    0.0
                };
                for c in 0..3 {
                    px[c] += w * (level[c] + tex - px[c]);
                }
            }
            for (c, v) in px.iter().enumerate() {
                clean.set(x, y, c, v.clamp(0.0, 255.0) as f32);
            }
        }
    }

    let image = match style {
        Style::CtLike => add_noise(&clean, &mut rng, 10.0),
        Style::RgbLike => add_noise(&clean, &mut rng, 3.0),
        Style::UsLike => speckle(&clean, &mut rng, 0.25),
    };
    let sample = Sample {
        id: format!("img{index:05}"),
        group_id: (index / spec.group_size) as u32,
        style,
        image,
        masks: blobs.into_iter().map(|(_, m)| m).collect(),
    };
    Ok((sample, clean))
}

fn add_noise(clean: &ImagePlane, rng: &mut ChaCha8Rng, sd: f64) -> ImagePlane {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let mut out = clean.clone();
    let (w, h) = (clean.width(), clean.height());
    for y in 0..h {
        for x in 0..w {
            let n = normal.sample(rng);
            let gray = clean.get(x, y, 0) == clean.get(x, y, 1) && clean.get(x, y, 1) == clean.get(x, y, 2);
            for c in 0..3 {
                let nc = if gray { n } else { normal.sample(rng) };
                let v = clean.get(x, y, c) as f64 + nc;
                out.set(x, y, c, v.clamp(0.0, 255.0).round() as f32);
            }
        }
    }
    out
}

fn speckle(clean: &ImagePlane, rng: &mut ChaCha8Rng, strength: f64) -> ImagePlane {
    let normal = Normal::new(0.0, strength).expect("positive strength");
    let (w, h) = (clean.width(), clean.height());
    let noisy: Vec<f64> = (0..w * h)
        .map(|i| clean.get(i % w, i / w, 0) as f64 * (1.0 + normal.sample(rng)))
        .collect();
    let mut out = ImagePlane::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += noisy[yy * w + xx];
                    n += 1.0;
                }
            }
            let v = (s / n).clamp(0.0, 255.0).round() as f32;
            for c in 0..3 {
                out.set(x, y, c, v);
            }
        }
    }
    out
}

/// Generates `n` samples; item `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &SynthSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("dataset size must be >= 1".into()));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| render_sample(spec, i).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

pub const MIN_TUMOR_DEPTH: usize = 5;

/// HU values whose soft-tissue windowing lands on byte value `b`.
fn byte_to_hu(b: f64) -> f64 {
    let w = WindowSpec::SOFT_TISSUE;
    b / 255.0 * w.width + w.level - w.width / 2.0
}

/// A CT-like volume in Hounsfield units with one smooth 3-D tumor.
///
/// The cross-section scale follows `0.35 + 0.65 (1 - t^2)` inside the
/// tumor's axial extent and the centre drifts slowly, so adjacent tight
/// boxes change by a few pixels at most.
pub fn generate_tumor_volume(spec: &SynthSpec, depth: usize) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    if depth < MIN_TUMOR_DEPTH {
        return Err(Error::InvalidDimensions(format!(
            "tumor volume depth {depth} < {MIN_TUMOR_DEPTH}"
        )));
    }
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7475_6d6f_7200_0000);
    let sz = size as f64;
    let drift = 1.5;
    let mut blob = Blob::random(&mut rng, sz, 0.1, 0.18);
    let reach = blob.a.max(blob.b) * (1.0 + blob.amp) + drift + 2.0;
    blob.cx = rng.random_range(reach..sz - reach);
    blob.cy = rng.random_range(reach..sz - reach);
    let cz = (depth as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5);
    let rz = depth as f64 * rng.random_range(0.3..0.4);
    let drift_phase = rng.random_range(0.0..2.0 * PI);

    let base = rng.random_range(70.0..150.0);
    let level = object_level(&mut rng, base, spec.contrast_gap);
    let normal = Normal::new(0.0, 10.0).expect("positive sd");
    let gradient = rng.random_range(-5.0..5.0);

    let mut data = Vec::with_capacity(depth * size * size);
    let mut slices = Vec::with_capacity(depth);
    for z in 0..depth {
        let t = (z as f64 - cz) / rz;
        let scale = if t.abs() <= 1.0 {
            0.35 + 0.65 * (1.0 - t * t)
        } else {
            0.0
        };
        let turn = 2.0 * PI * z as f64 / depth as f64 + drift_phase;
        let b = Blob {
            cx: blob.cx + drift * turn.cos(),
            cy: blob.cy + drift * turn.sin(),
            ..blob
        };
        let mask = if scale > 0.0 {
            b.rasterize(size, scale)
        } else {
            BinaryMask::zeros_2d(size, size)
        };
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = base + gradient * (fy / sz - 0.5);
                if scale > 0.0 {
                    let w = b.shade(fx, fy, spec.blur_sigma, scale);
                    v += w * (level - v);
                }
                let v = (v + normal.sample(&mut rng)).clamp(0.0, 255.0);
                data.push(byte_to_hu(v) as f32);
            }
        }
        slices.push(mask);
    }
    let volume = Volume::new(
        depth,
        size,
        size,
        data,
        Modality::Ct {
            window: WindowSpec::SOFT_TISSUE,
        },
    )?
    .with_spacing([1.0, 1.0, 1.0]);
    Ok((volume, BinaryMask::stack(&slices)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let spec = SynthSpec::default();
        let a = generate_dataset(&spec, 12).unwrap();
        let b = generate_dataset(&spec, 12).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let other = generate_dataset(&SynthSpec { seed: 1, ..spec.clone() }, 12).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
        let min_area = (0.005 * 64.0 * 64.0) as usize;
        for s in &a.samples {
            assert!((1..=3).contains(&s.masks.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=255.0).contains(v)));
            for m in &s.masks {
                assert_eq!(m.dims(), &[64, 64]);
                assert!(m.count() >= min_area);
            }
        }
        // mixed styles are balanced
        let ct = a.samples.iter().filter(|s| s.style == Style::CtLike).count();
        assert_eq!(ct, 4);
        assert_eq!(a.group_ids()[..6], [0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn clean_contrast_gap_holds() {
        for style in Style::ALL {
            let spec = SynthSpec {
                style: StyleMix::Single(style),
                ..SynthSpec::default()
            };
            for i in 0..30 {
                let (s, clean) = render_sample(&spec, i).unwrap();
                let gray = |j: usize| {
                    let (x, y) = (j % 64, j / 64);
                    (0..3).map(|c| clean.get(x, y, c) as f64).sum::<f64>() / 3.0
                };
                let mut union = vec![0u8; 64 * 64];
                for m in &s.masks {
                    for (u, &v) in union.iter_mut().zip(m.data()) {
                        *u |= v;
                    }
                }
                let bg: Vec<f64> = (0..64 * 64).filter(|&j| union[j] == 0).map(gray).collect();
                let bg_mean = bg.iter().sum::<f64>() / bg.len() as f64;
                for m in &s.masks {
                    let fg: Vec<f64> = (0..64 * 64).filter(|&j| m.data()[j] != 0).map(gray).collect();
                    let fg_mean = fg.iter().sum::<f64>() / fg.len() as f64;
                    assert!(
                        (fg_mean - bg_mean).abs() >= spec.contrast_gap,
                        "{style:?} sample {i}: gap {}",
                        (fg_mean - bg_mean).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let tiny = SynthSpec {
            image_size: 8,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_dataset(&tiny, 1), Err(Error::Infeasible(_))));
        let bad_gap = SynthSpec {
            contrast_gap: 0.0,
            ..SynthSpec::default()
        };
        assert!(generate_dataset(&bad_gap, 1).is_err());
        assert!(generate_dataset(&SynthSpec::default(), 0).is_err());
    }

    #[test]
    fn tumor_volume_is_smooth_and_contiguous() {
        for seed in 0..10 {
            let spec = SynthSpec {
                seed,
                ..SynthSpec::default()
            };
            let (vol, mask) = generate_tumor_volume(&spec, 20).unwrap();
            assert_eq!((vol.depth(), vol.height(), vol.width()), (20, 64, 64));
            assert_eq!(mask.dims(), &[20, 64, 64]);
            let boxes: Vec<_> = (0..20).map(|k| mask.slice(k).unwrap().bounding_box()).collect();
            let first = boxes.iter().position(Option::is_some).unwrap();
            let last = boxes.iter().rposition(Option::is_some).unwrap();
            assert!(boxes[first..=last].iter().all(Option::is_some), "seed {seed}");
            for w in boxes[first..=last].windows(2) {
                let (a, b) = (w[0].unwrap(), w[1].unwrap());
                for (p, q) in [
                    (a.x_min, b.x_min),
                    (a.y_min, b.y_min),
                    (a.x_max, b.x_max),
                    (a.y_max, b.y_max),
                ] {
                    assert!(p.abs_diff(q) <= 4, "seed {seed}: {a:?} -> {b:?}");
                }
            }
            let again = generate_tumor_volume(&spec, 20).unwrap();
            assert_eq!(again.1, mask);
            assert_eq!(again.0, vol);
        }
        assert!(generate_tumor_volume(&SynthSpec::default(), 4).is_err());
    }
}
