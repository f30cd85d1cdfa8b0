//! The segmenter as a computation graph on a [`Tape`].

use std::f64::consts::PI;
use std::sync::Arc;

use super::params::Params;
use super::{BoundingBox, ModelConfig};
use crate::autodiff::{ResampleMap, Tape, Var};
use crate::imgproc::ImagePlane;
use crate::tensor::{Mat, Scalar};

/// A parameter set bound to a tape, one [`Var`] per array.
pub struct Net<'p, T: Scalar> {
    params: &'p Params<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> Net<'p, T> {
    /// Frozen arrays never require gradients; the rest do iff `trainable`.
    pub fn bind(tape: &mut Tape<'p, T>, params: &'p Params<T>, trainable: bool) -> Self {
        let vars = params
            .arrays()
            .iter()
            .zip(params.specs())
            .map(|(a, s)| tape.bind(a, trainable && s.trainable()))
            .collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn value(&self, name: &str) -> &'p Mat<T> {
        self.params.get(name).expect("parameter present")
    }
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, net: &Net<'_, T>, x: Var, prefix: &str) -> Var {
    let w = net.var(&format!("{prefix}.w"));
    let b = net.var(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<'_, T>, net: &Net<'_, T>, x: Var, prefix: &str) -> Var {
    let g = net.var(&format!("{prefix}.g"));
    let b = net.var(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

fn mlp<T: Scalar>(tape: &mut Tape<'_, T>, net: &Net<'_, T>, x: Var, prefix: &str) -> Var {
    let h = linear(tape, net, x, &format!("{prefix}.fc1"));
    let h = tape.gelu(h);
    linear(tape, net, h, &format!("{prefix}.fc2"))
}

/// Multi-head scaled dot-product attention with separate query, key and
/// value inputs.
fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_, T>,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
) -> Var {
    let q = linear(tape, net, q_in, &format!("{prefix}.q"));
    let kw = net.var(&format!("{prefix}.k.w"));
    let k = tape.matmul(k_in, kw);
    let v = linear(tape, net, v_in, &format!("{prefix}.v"));
    let dim = tape.value(q).cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.col_slice(q, h * dh, dh),
                tape.col_slice(k, h * dh, dh),
                tape.col_slice(v, h * dh, dh),
            )
        };
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, scale);
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh));
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    linear(tape, net, cat, &format!("{prefix}.o"))
}

/// Flattens a model-size RGB plane into `num_tokens x patch_dim` rows,
/// scaled to `[0, 1]`. Patch vectors are ordered `(py, px, channel)`.
pub fn patchify<T: Scalar>(plane: &ImagePlane, cfg: &ModelConfig) -> Mat<T> {
    let p = cfg.patch_size;
    let g = cfg.grid_side();
    let inv = T::of(1.0 / 255.0);
    Mat::from_fn(g * g, cfg.patch_dim(), |tok, j| {
        let (gy, gx) = (tok / g, tok % g);
        let c = j % 3;
        let px = (j / 3) % p;
        let py = j / (3 * p);
        T::of(plane.get(gx * p + px, gy * p + py, c) as f64) * inv
    })
}

pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_, T>,
    cfg: &ModelConfig,
    patches: Mat<T>,
) -> Var {
    let x = tape.constant(patches);
    let x = linear(tape, net, x, "encoder.patch");
    let pos = net.var("encoder.pos");
    let mut x = tape.add(x, pos);
    for i in 0..cfg.encoder_depth {
        let p = format!("encoder.blocks.{i}");
        let h = norm(tape, net, x, &format!("{p}.ln1"));
        let a = attention(tape, net, &format!("{p}.attn"), h, h, h, cfg.num_heads);
        x = tape.add(x, a);
        let h = norm(tape, net, x, &format!("{p}.ln2"));
        let m = mlp(tape, net, h, &format!("{p}.mlp"));
        x = tape.add(x, m);
    }
    norm(tape, net, x, "encoder.neck")
}

/// `[sin(2 pi c F), cos(2 pi c F)]` for each row `c` of `coords` (`n x 2`).
pub fn fourier_features<T: Scalar>(coords: &[[f64; 2]], freq: &Mat<T>) -> Mat<T> {
    let nf = freq.cols();
    let mut out = Mat::zeros(coords.len(), 2 * nf);
    for (r, c) in coords.iter().enumerate() {
        for j in 0..nf {
            let t = 2.0 * PI * (c[0] * freq.get(0, j).f64() + c[1] * freq.get(1, j).f64());
            out.set(r, j, T::of(t.sin()));
            out.set(r, nf + j, T::of(t.cos()));
        }
    }
    out
}

/// Box corners normalized to `[0, 1]^2`: top-left then bottom-right.
pub fn box_corners(b: &BoundingBox, image_size: usize) -> [[f64; 2]; 2] {
    let s = image_size as f64;
    [
        [b.x_min as f64 / s, b.y_min as f64 / s],
        [b.x_max as f64 / s, b.y_max as f64 / s],
    ]
}

pub fn prompt_tokens<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_, T>,
    cfg: &ModelConfig,
    b: &BoundingBox,
) -> Var {
    let feats = fourier_features(&box_corners(b, cfg.image_size), net.value("prompt.freq"));
    let f = tape.constant(feats);
    let t = linear(tape, net, f, "prompt.proj");
    let tl = net.var("prompt.corner_tl");
    let br = net.var("prompt.corner_br");
    let corners = tape.concat_rows(&[tl, br]);
    tape.add(t, corners)
}

/// Positional encoding of every embedding-grid cell center, in the same
/// Fourier frame as the box corners.
pub fn dense_pe<T: Scalar>(tape: &mut Tape<'_, T>, net: &Net<'_, T>, cfg: &ModelConfig) -> Var {
    let g = cfg.grid_side();
    let coords: Vec<[f64; 2]> = (0..g * g)
        .map(|i| {
            [
                ((i % g) as f64 + 0.5) / g as f64,
                ((i / g) as f64 + 0.5) / g as f64,
            ]
        })
        .collect();
    let f = tape.constant(fourier_features(&coords, net.value("prompt.freq")));
    linear(tape, net, f, "prompt.proj")
}

/// Bilinear resize of a square `src x src` map to `dst x dst` with
/// half-pixel centers, edge clamped.
pub fn bilinear_map(src: usize, dst: usize) -> ResampleMap {
    let axis = |o: usize| -> [(usize, f64); 2] {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let f = s - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    let mut taps = Vec::with_capacity(dst * dst);
    for y in 0..dst {
        let ay = axis(y);
        for x in 0..dst {
            let ax = axis(x);
            let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(iy, wy) in &ay {
                for &(ix, wx) in &ax {
                    let w = wy * wx;
                    if w != 0.0 {
                        t.push((iy * src + ix, w));
                    }
                }
            }
            taps.push(t);
        }
    }
    ResampleMap {
        in_rows: src * src,
        taps,
    }
}

/// Decoder outputs: per-pixel probabilities (`image_size^2 x 1`) and the
/// `1 x 1` confidence.
pub struct Decoded {
    pub probs: Var,
    pub confidence: Var,
}

pub fn decode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Net<'_, T>,
    cfg: &ModelConfig,
    image: Var,
    image_pe: Var,
    prompt: Var,
    upsample: &Arc<ResampleMap>,
) -> Decoded {
    let heads = cfg.num_heads;
    let out_tok = net.var("decoder.out_token");
    let tokens0 = tape.concat_rows(&[out_tok, prompt]);
    let mut q = tokens0;
    let mut keys = image;
    for i in 0..cfg.decoder_depth {
        let p = format!("decoder.layers.{i}");
        let sa = if i == 0 {
            attention(tape, net, &format!("{p}.self_attn"), q, q, q, heads)
        } else {
            let qp = tape.add(q, tokens0);
            attention(tape, net, &format!("{p}.self_attn"), qp, qp, q, heads)
        };
        let r = tape.add(q, sa);
        q = norm(tape, net, r, &format!("{p}.norm1"));

        let qp = tape.add(q, tokens0);
        let kp = tape.add(keys, image_pe);
        let ca = attention(tape, net, &format!("{p}.cross_t2i"), qp, kp, keys, heads);
        let r = tape.add(q, ca);
        q = norm(tape, net, r, &format!("{p}.norm2"));

        let m = mlp(tape, net, q, &format!("{p}.mlp"));
        let r = tape.add(q, m);
        q = norm(tape, net, r, &format!("{p}.norm3"));

        let qp = tape.add(q, tokens0);
        let kp = tape.add(keys, image_pe);
        let ci = attention(tape, net, &format!("{p}.cross_i2t"), kp, qp, q, heads);
        let r = tape.add(keys, ci);
        keys = norm(tape, net, r, &format!("{p}.norm4"));
    }
    let qp = tape.add(q, tokens0);
    let kp = tape.add(keys, image_pe);
    let fa = attention(tape, net, "decoder.final_attn", qp, kp, keys, heads);
    let r = tape.add(q, fa);
    q = norm(tape, net, r, "decoder.final_norm");
    let token = tape.row_slice(q, 0, 1);

    let d = cfg.embed_dim;
    let g = cfg.grid_side();
    let w1 = net.var("decoder.up1.w");
    let u = tape.matmul(keys, w1);
    let u = tape.pixel_shuffle(u, g, d / 2);
    let b1 = net.var("decoder.up1.b");
    let u = tape.add_row(u, b1);
    let u = tape.gelu(u);
    let w2 = net.var("decoder.up2.w");
    let u = tape.matmul(u, w2);
    let u = tape.pixel_shuffle(u, 2 * g, d / 4);
    let b2 = net.var("decoder.up2.b");
    let u = tape.add_row(u, b2);
    let u = tape.gelu(u);

    let h = linear(tape, net, token, "decoder.hyper.fc1");
    let h = tape.gelu(h);
    let h = linear(tape, net, h, "decoder.hyper.fc2");
    let h = tape.gelu(h);
    let h = linear(tape, net, h, "decoder.hyper.fc3");

    let logits = tape.matmul_nt(u, h);
    let low = tape.sigmoid(logits);
    let probs = tape.resample(low, upsample.clone());

    let c = linear(tape, net, token, "decoder.conf.fc1");
    let c = tape.gelu(c);
    let c = linear(tape, net, c, "decoder.conf.fc2");
    let confidence = tape.sigmoid(c);
    Decoded { probs, confidence }
}
