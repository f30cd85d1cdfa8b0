//! Box-prompted segmentation network.
//!
//! Three stages: a patch-embedding transformer encodes the image once into a
//! `grid x grid` token map; a box is turned into two tokens by Fourier
//! encoding its corners; a two-way attention decoder fuses both and upsamples
//! the image tokens with two stride-2 transposed convolutions before taking
//! a per-pixel dot product with the output token.
//!
//! Inference runs in `f32`. The same graph is generic over [`Scalar`] so the
//! gradient check can run a bit-for-bit analogous `f64` replica.

mod net;
mod params;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

pub use net::{box_corners, fourier_features, Net};
pub use params::{init_params, param_specs, Init, ParamSpec, ParameterSet, Params};

use crate::autodiff::{ResampleMap, Tape, Var};
use crate::error::{Error, Result};
use crate::imgproc::ImagePlane;
use crate::mask::BinaryMask;
use crate::tensor::{Mat, Scalar};

/// Probabilities strictly above this are foreground.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub pe_frequencies: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            decoder_depth: 2,
            pe_frequencies: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 16x16 input, 4x4 patches; small enough for exhaustive finite differences.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_depth: 2,
            pe_frequencies: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size == 0 || self.patch_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of 4", self.embed_dim));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 || self.pe_frequencies == 0 {
            return bad("mlp_ratio and pe_frequencies must be positive".into());
        }
        Ok(())
    }

    pub fn prompt_dim(&self) -> usize {
        self.embed_dim
    }

    /// Side of the image-embedding token grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Side of the mask map after the two transposed convolutions.
    pub fn upscaled_side(&self) -> usize {
        4 * self.grid_side()
    }
}

/// Half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidBox(format!("{self:?} has zero area")));
        }
        if self.x_max as usize > width || self.y_max as usize > height {
            return Err(Error::InvalidBox(format!(
                "{self:?} exceeds {width}x{height} bounds"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Maps the box between square frames of different side length, rounding
    /// outward so the scaled box still covers the original extent.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        let x0 = (self.x_min as f64 * sx).floor() as u32;
        let y0 = (self.y_min as f64 * sy).floor() as u32;
        let x1 = ((self.x_max as f64 * sx).ceil() as u32).clamp(x0 + 1, to.0 as u32);
        let y1 = ((self.y_max as f64 * sy).ceil() as u32).clamp(y0 + 1, to.1 as u32);
        BoundingBox::new(x0.min(x1 - 1), y0.min(y1 - 1), x1, y1)
    }
}

/// Encoded image tokens (`grid^2 x embed_dim`), reusable across prompts,
/// with the matching dense positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub tokens: Mat<f32>,
    pub pe: Mat<f32>,
}

/// The two box tokens (top-left, bottom-right), `2 x embed_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub tokens: Mat<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub size: usize,
    /// Row-major `size x size` probabilities.
    pub probs: Vec<f32>,
    pub mask: BinaryMask,
    pub confidence: f32,
}

impl SegmentationOutput {
    fn from_parts(size: usize, probs: Vec<f32>, confidence: f32) -> Self {
        let mask = BinaryMask::from_bools(vec![size, size], probs.iter().map(|&p| p > MASK_THRESHOLD))
            .expect("probability map matches its size");
        Self {
            size,
            probs,
            mask,
            confidence,
        }
    }
}

/// Shared bilinear map from the upscaled mask side to the input side.
pub(crate) fn upsample_map(cfg: &ModelConfig) -> Arc<ResampleMap> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<ResampleMap>>>> = OnceLock::new();
    let key = (cfg.upscaled_side(), cfg.image_size);
    let mut cache = CACHE.get_or_init(Default::default).lock().expect("cache lock");
    cache
        .entry(key)
        .or_insert_with(|| Arc::new(net::bilinear_map(key.0, key.1)))
        .clone()
}

fn cached_specs(cfg: &ModelConfig) -> Arc<Vec<ParamSpec>> {
    static CACHE: OnceLock<Mutex<HashMap<ModelConfig, Arc<Vec<ParamSpec>>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().expect("cache lock");
    if cache.len() > 64 {
        cache.clear();
    }
    cache
        .entry(cfg.clone())
        .or_insert_with(|| Arc::new(param_specs(cfg)))
        .clone()
}

fn check_params<T: Scalar>(params: &Params<T>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let specs = cached_specs(cfg);
    if specs.len() != params.len()
        || specs
            .iter()
            .zip(params.specs())
            .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
    {
        return Err(Error::ShapeMismatch(
            "parameter set does not match the model configuration".into(),
        ));
    }
    Ok(())
}

fn check_plane(plane: &ImagePlane, cfg: &ModelConfig) -> Result<()> {
    if plane.width() != cfg.image_size || plane.height() != cfg.image_size || plane.channels() != 3
    {
        return Err(Error::ShapeMismatch(format!(
            "plane {}x{}x{} but model expects {s}x{s}x3",
            plane.width(),
            plane.height(),
            plane.channels(),
            s = cfg.image_size
        )));
    }
    Ok(())
}

/// Runs the image encoder.
pub fn encode_image(
    plane: &ImagePlane,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<ImageEmbedding> {
    check_params(params, cfg)?;
    check_plane(plane, cfg)?;
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let e = net::encode(&mut tape, &net, cfg, net::patchify(plane, cfg));
    let pe = net::dense_pe(&mut tape, &net, cfg);
    Ok(ImageEmbedding {
        tokens: tape.value(e).clone(),
        pe: tape.value(pe).clone(),
    })
}

/// Turns a box into its two prompt tokens.
pub fn encode_box(b: &BoundingBox, cfg: &ModelConfig, params: &ParameterSet) -> Result<PromptTokens> {
    check_params(params, cfg)?;
    b.validate(cfg.image_size, cfg.image_size)?;
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let t = net::prompt_tokens(&mut tape, &net, cfg, b);
    Ok(PromptTokens {
        tokens: tape.value(t).clone(),
    })
}

pub fn decode_mask(
    embedding: &ImageEmbedding,
    prompt: &PromptTokens,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<SegmentationOutput> {
    check_params(params, cfg)?;
    for m in [&embedding.tokens, &embedding.pe] {
        if m.shape() != (cfg.num_tokens(), cfg.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "embedding {:?}, expected ({}, {})",
                m.shape(),
                cfg.num_tokens(),
                cfg.embed_dim
            )));
        }
    }
    if prompt.tokens.shape() != (2, cfg.embed_dim) {
        return Err(Error::ShapeMismatch(format!(
            "prompt tokens {:?}, expected (2, {})",
            prompt.tokens.shape(),
            cfg.embed_dim
        )));
    }
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, params, false);
    let image = tape.bind(&embedding.tokens, false);
    let tokens = tape.bind(&prompt.tokens, false);
    let pe = tape.bind(&embedding.pe, false);
    let out = net::decode(&mut tape, &net, cfg, image, pe, tokens, &upsample_map(cfg));
    Ok(SegmentationOutput::from_parts(
        cfg.image_size,
        tape.value(out.probs).data().to_vec(),
        tape.value(out.confidence).get(0, 0),
    ))
}

/// Encode, prompt and decode in one call.
pub fn predict(
    plane: &ImagePlane,
    b: &BoundingBox,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<SegmentationOutput> {
    let emb = encode_image(plane, params, cfg)?;
    let prompt = encode_box(b, cfg, params)?;
    decode_mask(&emb, &prompt, params, cfg)
}

/// Graph handles for one image and several boxes sharing its encoding.
pub struct Forward {
    pub embedding: Var,
    pub cases: Vec<net::Decoded>,
}

/// Builds the differentiable forward pass of one image with several boxes.
/// `net` decides which parameters carry gradients.
pub fn forward<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    net: &Net<'p, T>,
    cfg: &ModelConfig,
    plane: &ImagePlane,
    boxes: &[BoundingBox],
) -> Result<Forward> {
    check_plane(plane, cfg)?;
    for b in boxes {
        b.validate(cfg.image_size, cfg.image_size)?;
    }
    let embedding = net::encode(tape, net, cfg, net::patchify(plane, cfg));
    let pe = net::dense_pe(tape, net, cfg);
    let up = upsample_map(cfg);
    let cases = boxes
        .iter()
        .map(|b| {
            let prompt = net::prompt_tokens(tape, net, cfg, b);
            net::decode(tape, net, cfg, embedding, pe, prompt, &up)
        })
        .collect();
    Ok(Forward { embedding, cases })
}

pub use net::Decoded;
