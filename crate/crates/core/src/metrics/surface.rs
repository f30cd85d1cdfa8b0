//! Region and boundary agreement: DSC, inner boundaries, exact Euclidean
//! distance transform and NSD.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// A metric value plus whether it came from the both-empty convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub empty_pair: bool,
}

fn same_dims(g: &BinaryMask, s: &BinaryMask) -> Result<()> {
    if g.dims() != s.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} vs {:?}",
            g.dims(),
            s.dims()
        )));
    }
    Ok(())
}

/// `2|G∩S| / (|G| + |S|)`; two empty masks score 1.
pub fn dsc(g: &BinaryMask, s: &BinaryMask) -> Result<Score> {
    same_dims(g, s)?;
    let (mut inter, mut ng, mut ns) = (0u64, 0u64, 0u64);
    for (&a, &b) in g.data().iter().zip(s.data()) {
        inter += (a & b) as u64;
        ng += a as u64;
        ns += b as u64;
    }
    if ng + ns == 0 {
        return Ok(Score {
            value: 1.0,
            empty_pair: true,
        });
    }
    Ok(Score {
        value: (2 * inter) as f64 / (ng + ns) as f64,
        empty_pair: false,
    })
}

/// `|G∩S| / |G∪S|`; two empty masks score 1.
pub fn iou(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    same_dims(g, s)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&a, &b) in g.data().iter().zip(s.data()) {
        inter += (a & b) as u64;
        union += (a | b) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Foreground elements with at least one background face neighbour; the
/// outside of the array counts as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let dims = mask.dims();
    let st = strides(dims);
    let data = mask.data();
    let mut out = vec![0u8; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        if data[i] == 0 {
            continue;
        }
        let mut edge = false;
        for (axis, &len) in dims.iter().enumerate() {
            let coord = (i / st[axis]) % len;
            if coord == 0 || coord + 1 == len {
                edge = true;
                break;
            }
            if data[i - st[axis]] == 0 || data[i + st[axis]] == 0 {
                edge = true;
                break;
            }
        }
        *o = u8::from(edge);
    }
    BinaryMask::new(dims.to_vec(), out).expect("same dims as input")
}

/// Squared Euclidean distance from every element to the nearest feature
/// element (`f64::INFINITY` when there are none). Separable lower-envelope
/// transform, exact on the integer grid.
pub fn squared_distance_transform(features: &BinaryMask) -> Vec<f64> {
    let dims = features.dims().to_vec();
    let st = strides(&dims);
    let mut f: Vec<f64> = features
        .data()
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let total = f.len();
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    for (axis, &len) in dims.iter().enumerate() {
        let stride = st[axis];
        for start in 0..total {
            // Visit each line once, from its first element.
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|k| f[start + k * stride]));
            out_line.clear();
            out_line.resize(len, 0.0);
            lower_envelope_1d(&line, &mut out_line);
            for (k, &v) in out_line.iter().enumerate() {
                f[start + k * stride] = v;
            }
        }
    }
    f
}

fn lower_envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Normalized surface distance at tolerance `tau` (element units).
pub fn nsd(g: &BinaryMask, s: &BinaryMask, tau: f64) -> Result<Score> {
    same_dims(g, s)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance {tau} must be >= 0")));
    }
    let bg = boundary(g);
    let bs = boundary(s);
    let ng = bg.count();
    let ns = bs.count();
    if ng + ns == 0 {
        return Ok(Score {
            value: 1.0,
            empty_pair: true,
        });
    }
    let tau2 = tau * tau;
    let dist_to_s = squared_distance_transform(&bs);
    let dist_to_g = squared_distance_transform(&bg);
    let covered = |b: &BinaryMask, dist: &[f64]| -> usize {
        b.data()
            .iter()
            .zip(dist)
            .filter(|(&m, &d)| m != 0 && d <= tau2)
            .count()
    };
    let hits = covered(&bg, &dist_to_s) + covered(&bs, &dist_to_g);
    Ok(Score {
        value: hits as f64 / (ng + ns) as f64,
        empty_pair: false,
    })
}
