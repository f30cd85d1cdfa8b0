//! On-disk and wire formats.
//!
//! * `MIV1` volume container: `b"MIV1"`, little-endian `u32` header length,
//!   UTF-8 JSON header `{dims, dtype, spacing, modality}`, raw little-endian
//!   payload.
//! * Checkpoint: `b"BSCK"`, little-endian `u32` manifest length, JSON
//!   manifest (format version, model config, parameter table, SHA-256 of the
//!   blob), then the little-endian `f32` blob.
//! * Run-length masks: alternating run counts over the row-major mask,
//!   starting with the zero run.
//!
//! Decoders never panic on malformed input; every failure is a
//! [`FormatError`]. Files are published atomically (temp file + rename).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::imgproc::{ImagePlane, Modality, Volume};
use crate::mask::BinaryMask;
use crate::model::{param_specs, ModelConfig, ParameterSet, Params};
use crate::synth::{Dataset, Sample, Style, SynthSpec};
use crate::tensor::Mat;

pub const VOLUME_MAGIC: &[u8; 4] = b"MIV1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Largest mask an RLE payload may expand to.
pub const RLE_MAX_ELEMENTS: u64 = 1 << 30;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn split_framed<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            needed: 8,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let end = 8usize.saturating_add(len);
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok((&bytes[8..end], &bytes[end..]))
}

fn frame(magic: &[u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

// ---------------------------------------------------------------- volumes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub spacing: Option<[f32; 3]>,
    /// `None` for label volumes.
    pub modality: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeContainer {
    pub header: VolumeHeader,
    pub payload: Payload,
}

impl VolumeContainer {
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            header: VolumeHeader {
                dims: vec![v.depth(), v.height(), v.width()],
                dtype: Dtype::F32,
                spacing: v.spacing,
                modality: Some(v.modality),
            },
            payload: Payload::F32(v.data().to_vec()),
        }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Self {
            header: VolumeHeader {
                dims: m.dims().to_vec(),
                dtype: Dtype::U8,
                spacing: None,
                modality: None,
            },
            payload: Payload::U8(m.data().to_vec()),
        }
    }

    /// A scalar volume; 2-D containers become depth 1.
    pub fn to_volume(&self) -> Result<Volume> {
        let modality = self
            .header
            .modality
            .ok_or_else(|| FormatError::Header("container has no modality".into()))?;
        let (d, h, w) = match self.header.dims[..] {
            [h, w] => (1, h, w),
            [d, h, w] => (d, h, w),
            _ => {
                return Err(FormatError::Header(format!(
                    "volume needs 2 or 3 dims, got {:?}",
                    self.header.dims
                ))
                .into())
            }
        };
        let data = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&b| b as f32).collect(),
        };
        let vol = Volume::new(d, h, w, data, modality)?;
        Ok(match self.header.spacing {
            Some(s) => vol.with_spacing(s),
            None => vol,
        })
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        match &self.payload {
            Payload::U8(v) => BinaryMask::new(self.header.dims.clone(), v.clone())
                .map_err(|e| FormatError::Inconsistent(e.to_string()).into()),
            Payload::F32(_) => Err(FormatError::Header("mask container must be u8".into()).into()),
        }
    }
}

pub fn encode_volume(c: &VolumeContainer) -> Vec<u8> {
    let header = serde_json::to_vec(&c.header).expect("header serializes");
    let (n, size) = match &c.payload {
        Payload::U8(v) => (v.len(), 1),
        Payload::F32(v) => (v.len(), 4),
    };
    let mut out = frame(VOLUME_MAGIC, &header, n * size);
    match &c.payload {
        Payload::U8(v) => out.extend_from_slice(v),
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeContainer, FormatError> {
    let (header, payload) = split_framed(bytes, VOLUME_MAGIC)?;
    let header: VolumeHeader =
        serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.dims.is_empty() || header.dims.len() > 3 || header.dims.contains(&0) {
        return Err(FormatError::Header(format!("invalid dims {:?}", header.dims)));
    }
    let count = header
        .dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| FormatError::Inconsistent("dims product overflows".into()))?;
    let needed = count
        .checked_mul(header.dtype.size())
        .ok_or_else(|| FormatError::Inconsistent("payload size overflows".into()))?;
    if payload.len() < needed {
        return Err(FormatError::Truncated {
            needed: bytes.len() - payload.len() + needed,
            available: bytes.len(),
        });
    }
    if payload.len() > needed {
        return Err(FormatError::Inconsistent(format!(
            "dims {:?} describe {needed} payload bytes, found {}",
            header.dims,
            payload.len()
        )));
    }
    let payload = match header.dtype {
        Dtype::U8 => Payload::U8(payload.to_vec()),
        Dtype::F32 => Payload::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok(VolumeContainer { header, payload })
}

pub fn write_volume(path: &Path, c: &VolumeContainer) -> Result<()> {
    write_atomic(path, &encode_volume(c))
}

pub fn read_volume(path: &Path) -> Result<VolumeContainer> {
    Ok(decode_volume(&std::fs::read(path)?)?)
}

// ------------------------------------------------------------ checkpoints

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// In `f32` elements from the start of the blob.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub parameters: Vec<ParamEntry>,
    /// SHA-256 of the blob, hex.
    pub content_hash: String,
}

pub fn checkpoint_manifest(params: &ParameterSet, cfg: &ModelConfig) -> CheckpointManifest {
    let mut offset = 0;
    let parameters = params
        .specs()
        .iter()
        .map(|s| {
            let e = ParamEntry {
                name: s.name.clone(),
                shape: [s.rows, s.cols],
                offset,
                length: s.len(),
            };
            offset += s.len();
            e
        })
        .collect();
    CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        model_config: cfg.clone(),
        parameters,
        content_hash: params.content_hash(),
    }
}

pub fn encode_checkpoint(params: &ParameterSet, cfg: &ModelConfig) -> Vec<u8> {
    encode_checkpoint_with(&checkpoint_manifest(params, cfg), &params.to_le_bytes())
}

/// Frames an arbitrary manifest and blob; lets tests build broken files.
pub fn encode_checkpoint_with(manifest: &CheckpointManifest, blob: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = frame(CHECKPOINT_MAGIC, &header, blob.len());
    out.extend_from_slice(blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet), FormatError> {
    let (header, blob) = split_framed(bytes, CHECKPOINT_MAGIC)?;
    let value: serde_json::Value =
        serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::Header("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(FormatError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let manifest: CheckpointManifest =
        serde_json::from_value(value).map_err(|e| FormatError::Header(e.to_string()))?;
    let actual = hex::encode(Sha256::digest(blob));
    if actual != manifest.content_hash {
        return Err(FormatError::HashMismatch {
            expected: manifest.content_hash,
            actual,
        });
    }
    let cfg = manifest.model_config;
    cfg.validate()
        .map_err(|e| FormatError::Header(format!("model config: {e}")))?;
    if blob.len() % 4 != 0 {
        return Err(FormatError::Inconsistent(format!("blob length {} is not a multiple of 4", blob.len())));
    }
    let n = blob.len() / 4;
    let mut entries = manifest.parameters.clone();
    entries.sort_by_key(|e| e.offset);
    let mut cursor = 0usize;
    for e in &entries {
        if e.offset != cursor {
            return Err(FormatError::Inconsistent(format!(
                "parameter `{}` at offset {} leaves a gap or overlap at {cursor}",
                e.name, e.offset
            )));
        }
        if e.shape[0].checked_mul(e.shape[1]) != Some(e.length) {
            return Err(FormatError::Inconsistent(format!("`{}` shape/length disagree", e.name)));
        }
        cursor = cursor
            .checked_add(e.length)
            .filter(|&c| c <= n)
            .ok_or_else(|| FormatError::Inconsistent(format!("`{}` runs past the blob", e.name)))?;
    }
    if cursor != n {
        return Err(FormatError::Inconsistent(format!(
            "parameter table covers {cursor} of {n} blob values"
        )));
    }
    let specs = param_specs(&cfg);
    let mut arrays = Vec::with_capacity(specs.len());
    for s in &specs {
        let e = manifest
            .parameters
            .iter()
            .find(|e| e.name == s.name)
            .ok_or_else(|| FormatError::MissingParameter(s.name.clone()))?;
        if e.shape != [s.rows, s.cols] {
            return Err(FormatError::Inconsistent(format!(
                "`{}` has shape {:?}, config expects [{}, {}]",
                s.name, e.shape, s.rows, s.cols
            )));
        }
        let data = blob[e.offset * 4..(e.offset + e.length) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(Mat::from_vec(s.rows, s.cols, data));
    }
    if manifest.parameters.len() != specs.len() {
        let extra = manifest
            .parameters
            .iter()
            .find(|e| !specs.iter().any(|s| s.name == e.name))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(FormatError::Inconsistent(format!("unexpected parameter `{extra}`")));
    }
    let params = Params::from_arrays(specs, arrays).map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, cfg: &ModelConfig) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    Ok(decode_checkpoint(&std::fs::read(path)?)?)
}

// -------------------------------------------------------------------- RLE

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub dims: Vec<usize>,
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for &v in mask.data() {
        if v == current {
            run += 1;
        } else {
            counts.push(run);
            current = v;
            run = 1;
        }
    }
    counts.push(run);
    RleMask {
        dims: mask.dims().to_vec(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, FormatError> {
    if rle.dims.is_empty() || rle.dims.len() > 3 || rle.dims.contains(&0) {
        return Err(FormatError::RleCounts(format!("invalid dims {:?}", rle.dims)));
    }
    let total = rle
        .dims
        .iter()
        .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
        .ok_or_else(|| FormatError::RleCounts("dims product overflows".into()))?;
    if total > RLE_MAX_ELEMENTS {
        return Err(FormatError::RleCounts(format!("{total} elements exceeds the limit")));
    }
    if rle.counts.is_empty() {
        return Err(FormatError::RleCounts("no counts".into()));
    }
    if let Some(i) = rle.counts.iter().skip(1).position(|&c| c == 0) {
        return Err(FormatError::RleCounts(format!("run {} is empty", i + 1)));
    }
    let sum = rle
        .counts
        .iter()
        .try_fold(0u64, |a, &c| a.checked_add(c))
        .ok_or_else(|| FormatError::RleCounts("counts overflow".into()))?;
    if sum != total {
        return Err(FormatError::RleCounts(format!(
            "counts sum to {sum}, dims {:?} need {total}",
            rle.dims
        )));
    }
    let mut data = Vec::with_capacity(total as usize);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    BinaryMask::new(rle.dims.clone(), data).map_err(|e| FormatError::RleCounts(e.to_string()))
}

// -------------------------------------------------------------------- PNG

/// 8-bit gray (1 channel) or RGB (3 channels); values are rounded and
/// clamped to `[0, 255]`.
pub fn encode_png(plane: &ImagePlane) -> Result<Vec<u8>> {
    let color = match plane.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(FormatError::Png(format!("{c} channels not supported")).into()),
    };
    let bytes: Vec<u8> = plane
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &bytes,
        plane.width() as u32,
        plane.height() as u32,
        color,
    )
    .map_err(|e| FormatError::Png(e.to_string()))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImagePlane> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| FormatError::Png(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = match img {
        image::DynamicImage::ImageLuma8(g) => {
            ImagePlane::new(w, h, 1, g.into_raw().into_iter().map(f32::from).collect())?
        }
        other => ImagePlane::new(
            w,
            h,
            3,
            other.to_rgb8().into_raw().into_iter().map(f32::from).collect(),
        )?,
    };
    Ok(plane)
}

/// Foreground 255, background 0.
pub fn mask_to_plane(mask: &BinaryMask) -> Result<ImagePlane> {
    if mask.dims().len() != 2 {
        return Err(Error::InvalidDimensions("PNG masks must be 2-D".into()));
    }
    ImagePlane::new(
        mask.width(),
        mask.height(),
        1,
        mask.data().iter().map(|&v| v as f32 * 255.0).collect(),
    )
}

pub fn write_png(path: &Path, plane: &ImagePlane) -> Result<()> {
    write_atomic(path, &encode_png(plane)?)
}

pub fn read_png(path: &Path) -> Result<ImagePlane> {
    decode_png(&std::fs::read(path)?)
}

// --------------------------------------------------------------- datasets

pub const DATASET_INDEX: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub group_id: u32,
    pub style: Style,
    pub objects: usize,
}

/// `dataset.json` plus, per sample, `<id>.image.miv` (channel-planar
/// `[3, h, w]` f32) and `<id>.masks.miv` (`[objects, h, w]` u8).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: SynthSpec,
    pub content_hash: String,
    pub samples: Vec<SampleEntry>,
}

fn image_container(img: &ImagePlane) -> VolumeContainer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut planar = Vec::with_capacity(w * h * c);
    for ch in 0..c {
        planar.extend(img.data().iter().skip(ch).step_by(c));
    }
    VolumeContainer {
        header: VolumeHeader {
            dims: vec![c, h, w],
            dtype: Dtype::F32,
            spacing: None,
            modality: Some(Modality::Rgb),
        },
        payload: Payload::F32(planar),
    }
}

fn image_from_container(c: &VolumeContainer) -> Result<ImagePlane> {
    let (ch, h, w) = match (&c.header.dims[..], &c.payload) {
        (&[ch, h, w], Payload::F32(_)) if ch == 1 || ch == 3 => (ch, h, w),
        _ => return Err(FormatError::Header("expected a [1|3, h, w] f32 image".into()).into()),
    };
    let Payload::F32(planar) = &c.payload else { unreachable!() };
    let n = w * h;
    let data = (0..n * ch).map(|i| planar[(i % ch) * n + i / ch]).collect();
    ImagePlane::new(w, h, ch, data)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in &ds.samples {
        write_volume(&dir.join(format!("{}.image.miv", s.id)), &image_container(&s.image))?;
        write_mask_stack(&dir.join(format!("{}.masks.miv", s.id)), &s.masks, s.image.height(), s.image.width())?;
    }
    let index = DatasetIndex {
        spec: ds.spec.clone(),
        content_hash: ds.content_hash(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleEntry {
                id: s.id.clone(),
                group_id: s.group_id,
                style: s.style,
                objects: s.masks.len(),
            })
            .collect(),
    };
    write_atomic(&dir.join(DATASET_INDEX), &serde_json::to_vec_pretty(&index).expect("index serializes"))
}

/// Per-object masks of one image as a `[objects, h, w]` label stack.
pub fn write_mask_stack(path: &Path, masks: &[BinaryMask], height: usize, width: usize) -> Result<()> {
    let mut data = Vec::with_capacity(masks.len() * height * width);
    for m in masks {
        if m.dims() != [height, width] {
            return Err(Error::ShapeMismatch(format!("mask {:?} in a {height}x{width} stack", m.dims())));
        }
        data.extend_from_slice(m.data());
    }
    let c = VolumeContainer {
        header: VolumeHeader {
            dims: vec![masks.len().max(1), height, width],
            dtype: Dtype::U8,
            spacing: None,
            modality: None,
        },
        payload: Payload::U8(if masks.is_empty() { vec![0; height * width] } else { data }),
    };
    write_volume(path, &c)
}

pub fn read_mask_stack(path: &Path, objects: usize) -> Result<Vec<BinaryMask>> {
    let stack = read_volume(path)?.to_mask()?;
    match stack.dims() {
        &[k, _, _] if k == objects.max(1) => (0..objects).map(|i| stack.slice(i)).collect(),
        d => Err(FormatError::Inconsistent(format!("mask stack {d:?} for {objects} objects")).into()),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index: DatasetIndex = serde_json::from_slice(&std::fs::read(dir.join(DATASET_INDEX))?)
        .map_err(|e| FormatError::Header(format!("{DATASET_INDEX}: {e}")))?;
    let samples = index
        .samples
        .iter()
        .map(|e| {
            let image = image_from_container(&read_volume(&dir.join(format!("{}.image.miv", e.id)))?)?;
            let masks = read_mask_stack(&dir.join(format!("{}.masks.miv", e.id)), e.objects)?;
            Ok(Sample {
                id: e.id.clone(),
                group_id: e.group_id,
                style: e.style,
                image,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        spec: index.spec,
        samples,
    };
    let actual = ds.content_hash();
    if actual != index.content_hash {
        return Err(FormatError::HashMismatch {
            expected: index.content_hash,
            actual,
        }
        .into());
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::WindowSpec;
    use crate::model::init_params;

    fn ct_volume() -> Volume {
        let data = (0..2 * 3 * 4).map(|i| i as f32 * 1.5 - 7.25).collect();
        Volume::new(2, 3, 4, data, Modality::Ct { window: WindowSpec::LUNG })
            .unwrap()
            .with_spacing([2.5, 0.7, 0.7])
    }

    #[test]
    fn volume_roundtrip_and_errors() {
        let c = VolumeContainer::from_volume(&ct_volume());
        let bytes = encode_volume(&c);
        assert_eq!(&bytes[..4], b"MIV1");
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_volume().unwrap(), ct_volume());

        assert!(matches!(decode_volume(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_volume(&wrong), Err(FormatError::BadMagic { .. })));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_volume(&extra), Err(FormatError::Inconsistent(_))));
    }

    #[test]
    fn rle_examples() {
        let m = BinaryMask::new(vec![1, 5], vec![0, 0, 1, 1, 0]).unwrap();
        let r = rle_encode(&m);
        assert_eq!(r.counts, vec![2, 2, 1]);
        assert_eq!(rle_decode(&r).unwrap(), m);
        let ones = BinaryMask::new(vec![2, 2], vec![1; 4]).unwrap();
        assert_eq!(rle_encode(&ones).counts, vec![0, 4]);
        assert!(rle_decode(&RleMask { dims: vec![2, 2], counts: vec![1, 2] }).is_err());
        assert!(rle_decode(&RleMask { dims: vec![2, 2], counts: vec![1, 0, 3] }).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_rejections() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg).unwrap();
        let bytes = encode_checkpoint(&params, &cfg);
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!((c2, p2.to_le_bytes()), (cfg.clone(), params.to_le_bytes()));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(FormatError::HashMismatch { .. })));

        let mut m = checkpoint_manifest(&params, &cfg);
        m.format_version = 7;
        assert_eq!(
            decode_checkpoint(&encode_checkpoint_with(&m, &params.to_le_bytes())).unwrap_err(),
            FormatError::VersionMismatch { expected: 1, found: 7 }
        );
    }

    #[test]
    fn dataset_roundtrip() {
        let ds = crate::synth::generate_dataset(&SynthSpec { image_size: 24, ..SynthSpec::default() }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn png_roundtrip() {
        let g = ImagePlane::new(3, 2, 1, vec![0.0, 10.0, 255.0, 7.0, 8.0, 9.0]).unwrap();
        assert_eq!(decode_png(&encode_png(&g).unwrap()).unwrap(), g);
        let rgb = ImagePlane::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(decode_png(&encode_png(&rgb).unwrap()).unwrap(), rgb);
        assert!(decode_png(b"not a png").is_err());
    }
}
