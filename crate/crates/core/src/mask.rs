//! Binary masks in 2-D (`[height, width]`) or 3-D (`[depth, height, width]`),
//! row-major with the last axis fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BoundingBox;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDimensions(format!("mask dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} != product of dims {n}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidDimensions("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0; n],
        }
    }

    pub fn zeros_2d(height: usize, width: usize) -> Self {
        Self::zeros(vec![height, width])
    }

    /// Builds a mask from any per-element predicate output.
    pub fn from_bools(dims: Vec<usize>, values: impl IntoIterator<Item = bool>) -> Result<Self> {
        let data = values.into_iter().map(u8::from).collect();
        Self::new(dims, data)
    }

    pub fn from_box(height: usize, width: usize, b: &BoundingBox) -> Self {
        let mut m = Self::zeros_2d(height, width);
        for y in b.y_min as usize..(b.y_max as usize).min(height) {
            for x in b.x_min as usize..(b.x_max as usize).min(width) {
                m.data[y * width + x] = 1;
            }
        }
        m
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn height(&self) -> usize {
        self.dims[self.dims.len() - 2.min(self.dims.len())]
    }

    pub fn width(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    #[inline]
    pub fn get2(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width() + x] != 0
    }

    #[inline]
    pub fn set2(&mut self, y: usize, x: usize, v: bool) {
        let w = self.width();
        self.data[y * w + x] = u8::from(v);
    }

    /// Number of 2-D slices along the first axis of a 3-D mask (1 for 2-D).
    pub fn depth(&self) -> usize {
        if self.dims.len() == 3 {
            self.dims[0]
        } else {
            1
        }
    }

    /// 2-D slice `k` of a 3-D mask; the mask itself for 2-D.
    pub fn slice(&self, k: usize) -> Result<BinaryMask> {
        if self.dims.len() != 3 {
            return if k == 0 {
                Ok(self.clone())
            } else {
                Err(Error::SliceOutOfRange { index: k, depth: 1 })
            };
        }
        let (d, h, w) = (self.dims[0], self.dims[1], self.dims[2]);
        if k >= d {
            return Err(Error::SliceOutOfRange { index: k, depth: d });
        }
        Ok(Self {
            dims: vec![h, w],
            data: self.data[k * h * w..(k + 1) * h * w].to_vec(),
        })
    }

    /// Stacks equally sized 2-D masks into a 3-D mask.
    pub fn stack(slices: &[BinaryMask]) -> Result<BinaryMask> {
        let first = slices
            .first()
            .ok_or_else(|| Error::EmptyInput("no slices to stack".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.dims() != [h, w] {
                return Err(Error::ShapeMismatch(format!(
                    "slice dims {:?} != [{h}, {w}]",
                    s.dims()
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            dims: vec![slices.len(), h, w],
            data,
        })
    }

    /// Tight `[min, max)` bounding box of the foreground of a 2-D mask.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let (h, w) = (self.height(), self.width());
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if self.data[y * w + x] != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x_min: x0 as u32,
            y_min: y0 as u32,
            x_max: x1 as u32,
            y_max: y1 as u32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_and_wrong_length() {
        assert!(BinaryMask::new(vec![2, 2], vec![0, 1, 2, 0]).is_err());
        assert!(BinaryMask::new(vec![2, 2], vec![0, 1, 0]).is_err());
        assert!(BinaryMask::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn tight_box_is_half_open() {
        let mut m = BinaryMask::zeros_2d(8, 8);
        m.set2(2, 3, true);
        m.set2(4, 5, true);
        let b = m.bounding_box().unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (3, 2, 6, 5));
        assert!(BinaryMask::zeros_2d(3, 3).bounding_box().is_none());
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let mut a = BinaryMask::zeros_2d(2, 3);
        a.set2(1, 2, true);
        let b = BinaryMask::zeros_2d(2, 3);
        let v = BinaryMask::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(v.dims(), &[2, 2, 3]);
        assert_eq!(v.slice(0).unwrap(), a);
        assert_eq!(v.slice(1).unwrap(), b);
        assert!(v.slice(2).is_err());
    }
}
