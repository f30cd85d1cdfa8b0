use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    /// Standard normal, never updated by the optimizer.
    FrozenNormal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn trainable(&self) -> bool {
        self.init != Init::FrozenNormal
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        });
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.push(format!("{prefix}.w"), input, output, Init::TruncNormal);
        self.push(format!("{prefix}.b"), 1, output, Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.g"), 1, dim, Init::Ones);
        self.push(format!("{prefix}.b"), 1, dim, Init::Zeros);
    }

    /// The key projection has no bias: softmax cancels it, so it could
    /// never receive a gradient.
    fn attention(&mut self, prefix: &str, dim: usize) {
        for p in ["q", "k", "v", "o"] {
            if p == "k" {
                self.push(format!("{prefix}.k.w"), dim, dim, Init::TruncNormal);
            } else {
                self.linear(&format!("{prefix}.{p}"), dim, dim);
            }
        }
    }

    fn mlp(&mut self, prefix: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, dim);
    }
}

/// Every array of the network, in canonical order. Shapes depend on the
/// configuration alone.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let mut s = Specs(Vec::new());

    s.linear("encoder.patch", cfg.patch_dim(), d);
    s.push("encoder.pos", cfg.num_tokens(), d, Init::TruncNormal);
    for i in 0..cfg.encoder_depth {
        let p = format!("encoder.blocks.{i}");
        s.norm(&format!("{p}.ln1"), d);
        s.attention(&format!("{p}.attn"), d);
        s.norm(&format!("{p}.ln2"), d);
        s.mlp(&format!("{p}.mlp"), d, hidden);
    }
    s.norm("encoder.neck", d);

    s.push("prompt.freq", 2, cfg.pe_frequencies, Init::FrozenNormal);
    s.linear("prompt.proj", 2 * cfg.pe_frequencies, d);
    s.push("prompt.corner_tl", 1, d, Init::TruncNormal);
    s.push("prompt.corner_br", 1, d, Init::TruncNormal);

    s.push("decoder.out_token", 1, d, Init::TruncNormal);
    for i in 0..cfg.decoder_depth {
        let p = format!("decoder.layers.{i}");
        s.attention(&format!("{p}.self_attn"), d);
        s.norm(&format!("{p}.norm1"), d);
        s.attention(&format!("{p}.cross_t2i"), d);
        s.norm(&format!("{p}.norm2"), d);
        s.mlp(&format!("{p}.mlp"), d, hidden);
        s.norm(&format!("{p}.norm3"), d);
        s.attention(&format!("{p}.cross_i2t"), d);
        s.norm(&format!("{p}.norm4"), d);
    }
    s.attention("decoder.final_attn", d);
    s.norm("decoder.final_norm", d);
    s.push("decoder.up1.w", d, 4 * (d / 2), Init::TruncNormal);
    s.push("decoder.up1.b", 1, d / 2, Init::Zeros);
    s.push("decoder.up2.w", d / 2, 4 * (d / 4), Init::TruncNormal);
    s.push("decoder.up2.b", 1, d / 4, Init::Zeros);
    s.linear("decoder.hyper.fc1", d, d);
    s.linear("decoder.hyper.fc2", d, d);
    s.linear("decoder.hyper.fc3", d, d / 4);
    s.linear("decoder.conf.fc1", d, d);
    s.linear("decoder.conf.fc2", d, 1);
    s.0
}

/// Named parameter arrays of the segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    specs: Vec<ParamSpec>,
    arrays: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

/// The `f32` parameter set used for training and inference.
pub type ParameterSet = Params<f32>;

impl<T: Scalar> Params<T> {
    /// Assembles a parameter set from arrays in canonical order.
    pub fn from_arrays(specs: Vec<ParamSpec>, arrays: Vec<Mat<T>>) -> Result<Self> {
        if specs.len() != arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} specs but {} arrays",
                specs.len(),
                arrays.len()
            )));
        }
        for (s, a) in specs.iter().zip(&arrays) {
            if a.shape() != (s.rows, s.cols) {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` is {:?}, expected ({}, {})",
                    s.name,
                    a.shape(),
                    s.rows,
                    s.cols
                )));
            }
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(Self {
            specs,
            arrays,
            index,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn arrays(&self) -> &[Mat<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.position(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat<T>> {
        self.position(name).map(|i| &mut self.arrays[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Mat::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            specs: self.specs.clone(),
            arrays: self.arrays.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }
}

impl Params<f32> {
    /// Little-endian `f32` concatenation of all arrays in canonical order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for a in &self.arrays {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of [`Params::to_le_bytes`], hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization from `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ParameterSet> {
    cfg.validate()?;
    let specs = param_specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arrays = specs
        .iter()
        .map(|s| {
            let data = (0..s.len())
                .map(|_| match s.init {
                    Init::TruncNormal => trunc_normal(&mut rng, 0.02) as f32,
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::FrozenNormal => rng.sample::<f64, _>(StandardNormal) as f32,
                })
                .collect();
            Mat::from_vec(s.rows, s.cols, data)
        })
        .collect();
    Params::from_arrays(specs, arrays)
}
