//! Marker-driven annotation assist: rectangles from long/short axis
//! markers, inter-slice box interpolation, box-prompted segmentation of
//! every slice, refinement bookkeeping and timing.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{prepare_plane, Fit, ImagePlane, PlaneSource, Volume};
use crate::iohub::{encode_volume, VolumeContainer};
use crate::mask::BinaryMask;
use crate::model::{decode_mask, encode_box, encode_image, BoundingBox, ImageEmbedding, ModelConfig, ParameterSet};

/// Boxes derived from degenerate markers are grown to at least this side.
pub const MIN_BOX_SIDE: u32 = 3;

/// A point in continuous image coordinates; pixel `(i, j)` covers
/// `[i, i+1) x [j, j+1)`.
pub type Point = [f64; 2];

/// Long and short axis line segments drawn on one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMarker {
    pub slice: usize,
    pub long_axis: [Point; 2],
    pub short_axis: [Point; 2],
}

impl LinearMarker {
    pub fn endpoints(&self) -> [Point; 4] {
        [self.long_axis[0], self.long_axis[1], self.short_axis[0], self.short_axis[1]]
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in self.endpoints() {
            let inside = p[0].is_finite()
                && p[1].is_finite()
                && (0.0..=width as f64).contains(&p[0])
                && (0.0..=height as f64).contains(&p[1]);
            if !inside {
                return Err(Error::InvalidMarker(format!(
                    "endpoint {p:?} on slice {} outside {width}x{height}",
                    self.slice
                )));
            }
        }
        let same = |a: [Point; 2], b: [Point; 2]| a == b || a == [b[1], b[0]];
        if same(self.long_axis, self.short_axis) {
            return Err(Error::InvalidMarker(format!(
                "long and short axis coincide on slice {}",
                self.slice
            )));
        }
        Ok(())
    }
}

/// Smallest pixel box covering both axes, grown to [`MIN_BOX_SIDE`] when
/// thinner and clamped to the slice.
pub fn rect_from_marker(marker: &LinearMarker, width: usize, height: usize) -> Result<BoundingBox> {
    marker.validate(width, height)?;
    let pts = marker.endpoints();
    let lo = |i: usize| pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min).floor() as u32;
    let hi = |i: usize| pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max).ceil() as u32;
    let (x0, x1) = widen(lo(0), hi(0), width as u32);
    let (y0, y1) = widen(lo(1), hi(1), height as u32);
    Ok(BoundingBox::new(x0, y0, x1, y1))
}

fn widen(lo: u32, hi: u32, limit: u32) -> (u32, u32) {
    let side = MIN_BOX_SIDE.min(limit);
    if hi - lo >= side {
        return (lo, hi);
    }
    let need = side - (hi - lo);
    let lo = lo.saturating_sub(need / 2);
    let hi = (lo + side).min(limit);
    (hi - side, hi)
}

/// Fills every slice of `range` with a box: linear per-coordinate
/// interpolation between the bracketing labeled slices (rounded half away
/// from zero), nearest labeled box outside the labeled span.
pub fn interpolate_boxes(
    labeled: &BTreeMap<usize, BoundingBox>,
    range: RangeInclusive<usize>,
) -> Result<BTreeMap<usize, BoundingBox>> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput("no labeled slices to interpolate".into()));
    }
    let mut out = BTreeMap::new();
    for k in range {
        let below = labeled.range(..=k).next_back();
        let above = labeled.range(k..).next();
        let b = match (below, above) {
            (Some((&a, ba)), Some((&c, bc))) if a != c => {
                let (wa, wc) = ((c - k) as u64, (k - a) as u64);
                let den = (c - a) as u64;
                // Coordinates are non-negative, so half away from zero is half up.
                let lerp = |u: u32, v: u32| ((2 * (u as u64 * wa + v as u64 * wc) + den) / (2 * den)) as u32;
                BoundingBox::new(
                    lerp(ba.x_min, bc.x_min),
                    lerp(ba.y_min, bc.y_min),
                    lerp(ba.x_max, bc.x_max),
                    lerp(ba.y_max, bc.y_max),
                )
            }
            (Some((_, b)), _) | (None, Some((_, b))) => *b,
            (None, None) => unreachable!("label map is nonempty"),
        };
        out.insert(k, b);
    }
    Ok(out)
}

/// Model-ready plane of one normalized slice.
pub fn slice_plane(volume: &Volume, k: usize, cfg: &ModelConfig) -> Result<ImagePlane> {
    let mut tiles = prepare_plane(PlaneSource::Slice { volume, index: k }, cfg.image_size, Fit::Resize)?;
    Ok(tiles.remove(0).plane)
}

pub fn slice_embedding(volume: &Volume, k: usize, params: &ParameterSet, cfg: &ModelConfig) -> Result<ImageEmbedding> {
    encode_image(&slice_plane(volume, k, cfg)?, params, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMask {
    /// Slice-sized (`height x width`).
    pub mask: BinaryMask,
    pub confidence: f32,
}

/// Decodes a box given in slice pixels against a slice embedding and maps
/// the mask back to slice size.
pub fn segment_embedded(
    embedding: &ImageEmbedding,
    b: &BoundingBox,
    width: usize,
    height: usize,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<SliceMask> {
    b.validate(width, height)?;
    let s = cfg.image_size;
    let model_box = b.rescale((width, height), (s, s));
    let out = decode_mask(embedding, &encode_box(&model_box, cfg, params)?, params, cfg)?;
    Ok(SliceMask {
        mask: crate::imgproc::resize_mask(&out.mask, width, height)?,
        confidence: out.confidence,
    })
}

pub fn segment_slice(
    volume: &Volume,
    k: usize,
    b: &BoundingBox,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<SliceMask> {
    b.validate(volume.width(), volume.height())?;
    let emb = slice_embedding(volume, k, params, cfg)?;
    segment_embedded(&emb, b, volume.width(), volume.height(), params, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssistOutput {
    pub boxes: BTreeMap<usize, BoundingBox>,
    pub masks: BTreeMap<usize, SliceMask>,
    pub inference_seconds: f64,
}

/// Markers to rectangles, rectangles interpolated over the marked span,
/// then one box-prompted prediction per slice. `volume` must already be
/// normalized to `[0, 255]`.
pub fn assist_segment(
    volume: &Volume,
    markers: &[LinearMarker],
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<AssistOutput> {
    let labeled = marker_boxes(volume, markers)?;
    let first = *labeled.keys().next().expect("nonempty");
    let last = *labeled.keys().next_back().expect("nonempty");
    let boxes = interpolate_boxes(&labeled, first..=last)?;
    let start = Instant::now();
    let masks = boxes
        .par_iter()
        .map(|(&k, b)| Ok((k, segment_slice(volume, k, b, params, cfg)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();
    Ok(AssistOutput {
        boxes,
        masks,
        inference_seconds: start.elapsed().as_secs_f64(),
    })
}

fn marker_boxes(volume: &Volume, markers: &[LinearMarker]) -> Result<BTreeMap<usize, BoundingBox>> {
    if markers.is_empty() {
        return Err(Error::EmptyInput("assist needs at least one marker".into()));
    }
    let mut labeled = BTreeMap::new();
    for m in markers {
        if m.slice >= volume.depth() {
            return Err(Error::SliceOutOfRange {
                index: m.slice,
                depth: volume.depth(),
            });
        }
        labeled.insert(m.slice, rect_from_marker(m, volume.width(), volume.height())?);
    }
    Ok(labeled)
}

/// Axis-aligned long and short axes spanning a lesion's full extent on one
/// slice, as a stand-in for a reader's markers. `None` for empty slices.
pub fn marker_from_mask(mask: &BinaryMask, slice: usize) -> Option<LinearMarker> {
    let b = mask.bounding_box()?;
    let (x0, y0, x1, y1) = (b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let horizontal = [[x0, cy], [x1, cy]];
    let vertical = [[cx, y0], [cx, y1]];
    let (long_axis, short_axis) = if b.width() >= b.height() {
        (horizontal, vertical)
    } else {
        (vertical, horizontal)
    };
    Some(LinearMarker {
        slice,
        long_axis,
        short_axis,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Marking,
    Inference,
    Refinement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub phase: Phase,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub marking: f64,
    pub inference: f64,
    pub refinement: f64,
    pub total: f64,
}

/// `1 - assisted / manual`.
pub fn time_saving(assisted_seconds: f64, manual_seconds: f64) -> Result<f64> {
    if !(manual_seconds > 0.0) || !(assisted_seconds >= 0.0) || !manual_seconds.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "time saving needs manual > 0 and assisted >= 0 (got {assisted_seconds}, {manual_seconds})"
        )));
    }
    Ok(1.0 - assisted_seconds / manual_seconds)
}

/// State of one annotated volume. The volume itself is owned by the caller;
/// the session keeps its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSession {
    depth: usize,
    height: usize,
    width: usize,
    markers: BTreeMap<usize, LinearMarker>,
    boxes: BTreeMap<usize, BoundingBox>,
    model_masks: BTreeMap<usize, SliceMask>,
    refined: BTreeMap<usize, BinaryMask>,
    timing: Vec<TimingEntry>,
}

impl AnnotationSession {
    pub fn new(volume: &Volume) -> Self {
        Self {
            depth: volume.depth(),
            height: volume.height(),
            width: volume.width(),
            markers: BTreeMap::new(),
            boxes: BTreeMap::new(),
            model_masks: BTreeMap::new(),
            refined: BTreeMap::new(),
            timing: Vec::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn markers(&self) -> &BTreeMap<usize, LinearMarker> {
        &self.markers
    }

    pub fn boxes(&self) -> &BTreeMap<usize, BoundingBox> {
        &self.boxes
    }

    pub fn model_masks(&self) -> &BTreeMap<usize, SliceMask> {
        &self.model_masks
    }

    pub fn refined(&self) -> &BTreeMap<usize, BinaryMask> {
        &self.refined
    }

    pub fn timing(&self) -> &[TimingEntry] {
        &self.timing
    }

    pub fn log(&mut self, phase: Phase, seconds: f64) -> Result<()> {
        if !(seconds >= 0.0) || !seconds.is_finite() {
            return Err(Error::InvalidConfig(format!("duration {seconds} must be finite and >= 0")));
        }
        self.timing.push(TimingEntry { phase, seconds });
        Ok(())
    }

    fn check_slice(&self, k: usize) -> Result<()> {
        if k >= self.depth {
            return Err(Error::SliceOutOfRange {
                index: k,
                depth: self.depth,
            });
        }
        Ok(())
    }

    /// Validates all markers before storing any; a marker on an already
    /// marked slice replaces it.
    pub fn add_markers(&mut self, markers: &[LinearMarker], seconds: f64) -> Result<()> {
        for m in markers {
            self.check_slice(m.slice)?;
            m.validate(self.width, self.height)?;
        }
        self.log(Phase::Marking, seconds)?;
        for m in markers {
            self.markers.insert(m.slice, m.clone());
        }
        Ok(())
    }

    /// Stores a single box-prompted result. A refined slice keeps its
    /// refinement.
    pub fn record_segmentation(&mut self, k: usize, b: BoundingBox, result: SliceMask, seconds: f64) -> Result<()> {
        self.check_slice(k)?;
        self.check_dims(&result.mask)?;
        self.log(Phase::Inference, seconds)?;
        self.boxes.insert(k, b);
        self.model_masks.insert(k, result);
        Ok(())
    }

    /// Runs the assist pipeline on the stored markers. Refined slices are
    /// left untouched. Returns the slices that received a new model mask.
    pub fn run_assist(&mut self, volume: &Volume, params: &ParameterSet, cfg: &ModelConfig) -> Result<Vec<usize>> {
        if (volume.depth(), volume.height(), volume.width()) != self.dims() {
            return Err(Error::ShapeMismatch("volume does not match the session".into()));
        }
        let markers: Vec<LinearMarker> = self.markers.values().cloned().collect();
        let out = assist_segment(volume, &markers, params, cfg)?;
        self.log(Phase::Inference, out.inference_seconds)?;
        let mut updated = Vec::new();
        for (k, m) in out.masks {
            if self.refined.contains_key(&k) {
                continue;
            }
            self.boxes.insert(k, out.boxes[&k]);
            self.model_masks.insert(k, m);
            updated.push(k);
        }
        Ok(updated)
    }

    pub fn record_refinement(&mut self, k: usize, mask: BinaryMask, seconds: f64) -> Result<()> {
        self.check_slice(k)?;
        if !self.model_masks.contains_key(&k) {
            return Err(Error::NotSegmented(k));
        }
        self.check_dims(&mask)?;
        self.log(Phase::Refinement, seconds)?;
        self.refined.insert(k, mask);
        Ok(())
    }

    fn check_dims(&self, mask: &BinaryMask) -> Result<()> {
        if mask.dims() != [self.height, self.width] {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} on a {}x{} slice",
                mask.dims(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn totals(&self) -> PhaseTotals {
        let mut t = PhaseTotals::default();
        for e in &self.timing {
            match e.phase {
                Phase::Marking => t.marking += e.seconds,
                Phase::Inference => t.inference += e.seconds,
                Phase::Refinement => t.refinement += e.seconds,
            }
            t.total += e.seconds;
        }
        t
    }

    /// Refined mask where present, else the model mask, else empty.
    pub fn current_mask(&self, k: usize) -> Option<&BinaryMask> {
        self.refined
            .get(&k)
            .or_else(|| self.model_masks.get(&k).map(|m| &m.mask))
    }

    /// Whole-volume label mask from [`Self::current_mask`].
    pub fn label_volume(&self) -> BinaryMask {
        let mut data = Vec::with_capacity(self.depth * self.height * self.width);
        for k in 0..self.depth {
            match self.current_mask(k) {
                Some(m) => data.extend_from_slice(m.data()),
                None => data.resize(data.len() + self.height * self.width, 0),
            }
        }
        BinaryMask::new(vec![self.depth, self.height, self.width], data).expect("slices match session dims")
    }

    pub fn manifest(&self) -> SessionManifest {
        SessionManifest {
            dims: [self.depth, self.height, self.width],
            markers: self.markers.values().cloned().collect(),
            boxes: self.boxes.iter().map(|(&slice, &b)| SliceBox { slice, bbox: b }).collect(),
            segmented: self.model_masks.keys().copied().collect(),
            refined: self.refined.keys().copied().collect(),
            timing: self.timing.clone(),
            totals: self.totals(),
        }
    }

    /// JSON manifest and the label volume in the MIV1 container.
    pub fn export(&self) -> (SessionManifest, Vec<u8>) {
        (
            self.manifest(),
            encode_volume(&VolumeContainer::from_mask(&self.label_volume())),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceBox {
    pub slice: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub dims: [usize; 3],
    pub markers: Vec<LinearMarker>,
    pub boxes: Vec<SliceBox>,
    pub segmented: Vec<usize>,
    pub refined: Vec<usize>,
    pub timing: Vec<TimingEntry>,
    pub totals: PhaseTotals,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::Modality;
    use crate::model::init_params;

    fn marker(slice: usize, long: [Point; 2], short: [Point; 2]) -> LinearMarker {
        LinearMarker {
            slice,
            long_axis: long,
            short_axis: short,
        }
    }

    #[test]
    fn rect_from_marker_examples() {
        let m = marker(0, [[5.0, 10.0], [25.0, 30.0]], [[10.0, 25.0], [20.0, 15.0]]);
        assert_eq!(rect_from_marker(&m, 64, 64).unwrap(), BoundingBox::new(5, 10, 25, 30));
        let flat = marker(0, [[5.0, 10.0], [25.0, 10.0]], [[12.0, 10.0], [18.0, 10.0]]);
        let b = rect_from_marker(&flat, 64, 64).unwrap();
        assert_eq!((b.height(), b.y_min), (3, 9));
        let corner = marker(0, [[0.0, 0.0], [4.0, 0.0]], [[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(rect_from_marker(&corner, 64, 64).unwrap(), BoundingBox::new(0, 0, 4, 3));
        let out = marker(0, [[0.0, 0.0], [70.0, 0.0]], [[1.0, 0.0], [2.0, 5.0]]);
        assert!(matches!(rect_from_marker(&out, 64, 64), Err(Error::InvalidMarker(_))));
        let twin = marker(0, [[1.0, 1.0], [5.0, 5.0]], [[5.0, 5.0], [1.0, 1.0]]);
        assert!(twin.validate(64, 64).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let labeled = BTreeMap::from([(0, BoundingBox::new(10, 10, 20, 20)), (4, BoundingBox::new(18, 10, 28, 24))]);
        let all = interpolate_boxes(&labeled, 0..=6).unwrap();
        assert_eq!(all[&2], BoundingBox::new(14, 10, 24, 22));
        assert_eq!(all[&0], labeled[&0]);
        assert_eq!(all[&4], labeled[&4]);
        assert_eq!(all[&6], labeled[&4]);
        // 10 + 8 * 1/4 = 12, 20 + 4 * 1/4 = 21, 20 + 4 * 3/4 = 23
        assert_eq!(all[&1], BoundingBox::new(12, 10, 22, 21));
        assert_eq!(all[&3], BoundingBox::new(16, 10, 26, 23));
        let one = BTreeMap::from([(3, BoundingBox::new(1, 2, 3, 4))]);
        assert!(interpolate_boxes(&one, 0..=5).unwrap().values().all(|b| *b == one[&3]));
        assert!(interpolate_boxes(&BTreeMap::new(), 0..=1).is_err());
        // 0.5 rounds up
        let half = BTreeMap::from([(0, BoundingBox::new(0, 0, 1, 1)), (2, BoundingBox::new(1, 1, 2, 2))]);
        assert_eq!(interpolate_boxes(&half, 1..=1).unwrap()[&1], BoundingBox::new(1, 1, 2, 2));
    }

    fn volume(depth: usize) -> Volume {
        let data = (0..depth * 20 * 24).map(|i| ((i * 37) % 256) as f32).collect();
        Volume::new(depth, 20, 24, data, Modality::Mr).unwrap()
    }

    #[test]
    fn assist_on_every_slice_matches_slicewise_predict() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg).unwrap();
        let vol = volume(3);
        let markers: Vec<LinearMarker> = (0..3)
            .map(|k| marker(k, [[2.0 + k as f64, 3.0], [15.0, 12.0]], [[4.0, 10.0], [9.0, 4.0]]))
            .collect();
        let out = assist_segment(&vol, &markers, &params, &cfg).unwrap();
        assert_eq!(out.masks.len(), 3);
        for m in &markers {
            let b = rect_from_marker(m, 24, 20).unwrap();
            assert_eq!(out.boxes[&m.slice], b);
            let direct = segment_slice(&vol, m.slice, &b, &params, &cfg).unwrap();
            assert_eq!(out.masks[&m.slice], direct);
            assert_eq!(direct.mask.dims(), &[20, 24]);
        }
        assert!(assist_segment(&vol, &[], &params, &cfg).is_err());
    }

    #[test]
    fn session_bookkeeping() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg).unwrap();
        let vol = volume(11);
        let mut s = AnnotationSession::new(&vol);
        let ms: Vec<LinearMarker> = [0, 5, 10]
            .iter()
            .map(|&k| marker(k, [[2.0, 3.0], [15.0, 12.0]], [[4.0, 10.0], [9.0, 4.0]]))
            .collect();
        assert!(s.add_markers(&[marker(11, [[2.0, 3.0], [5.0, 5.0]], [[1.0, 1.0], [2.0, 2.0]])], 1.0).is_err());
        s.add_markers(&ms, 12.5).unwrap();
        assert!(matches!(
            s.record_refinement(3, BinaryMask::zeros_2d(20, 24), 1.0),
            Err(Error::NotSegmented(3))
        ));
        assert_eq!(s.run_assist(&vol, &params, &cfg).unwrap(), (0..=10).collect::<Vec<_>>());
        let model = s.model_masks()[&3].mask.clone();
        s.record_refinement(3, model.clone(), 4.0).unwrap();
        assert_eq!(crate::metrics::dsc(&model, &s.refined()[&3]).unwrap().value, 1.0);
        let updated = s.run_assist(&vol, &params, &cfg).unwrap();
        assert!(!updated.contains(&3));
        let t = s.totals();
        assert_eq!(t.total, s.timing().iter().map(|e| e.seconds).sum::<f64>());
        assert_eq!((t.marking, t.refinement), (12.5, 4.0));
        assert!(s.log(Phase::Marking, -1.0).is_err());
        let (manifest, bytes) = s.export();
        assert_eq!(manifest.segmented.len(), 11);
        let back = crate::iohub::decode_volume(&bytes).unwrap().to_mask().unwrap();
        assert_eq!(back, s.label_volume());
        assert!((time_saving(18.0, 100.0).unwrap() - 0.82).abs() < 1e-15);
    }

    #[test]
    fn marker_from_mask_recovers_tight_box() {
        let mut m = BinaryMask::zeros_2d(16, 16);
        for y in 4..9 {
            for x in 2..12 {
                m.set2(y, x, true);
            }
        }
        let mk = marker_from_mask(&m, 0).unwrap();
        assert_eq!(rect_from_marker(&mk, 16, 16).unwrap(), m.bounding_box().unwrap());
        assert!(marker_from_mask(&BinaryMask::zeros_2d(4, 4), 0).is_none());
    }
}
