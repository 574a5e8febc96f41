//! Domain wrappers around [`Tensor`]: images with an explicit unit, sinograms,
//! and the boolean metal mask / metal trace grids.

use crate::geometry::Geometry;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Unit of an image's values: linear attenuation (per mm) or Hounsfield.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Mu,
    Hu,
}

/// H×W image with an explicit unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub tensor: Tensor,
    pub unit: Unit,
}

impl Image {
    pub fn new(tensor: Tensor, unit: Unit) -> Self {
        assert_eq!(tensor.shape().len(), 2, "image tensor must be 2-D");
        Self { tensor, unit }
    }

    pub fn zeros(geometry: &Geometry, unit: Unit) -> Self {
        let (h, w) = geometry.image_size;
        Self::new(Tensor::zeros(&[h, w]), unit)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tensor.dims2()
    }

    pub fn matches(&self, geometry: &Geometry) -> bool {
        self.dims() == geometry.image_size
    }
}

/// N×D array of projection values; rows are views, columns detector bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub tensor: Tensor,
}

impl Sinogram {
    pub fn new(tensor: Tensor) -> Self {
        assert_eq!(tensor.shape().len(), 2, "sinogram tensor must be 2-D");
        Self { tensor }
    }

    pub fn zeros(geometry: &Geometry) -> Self {
        let (n, d) = geometry.sinogram_shape();
        Self::new(Tensor::zeros(&[n, d]))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tensor.dims2()
    }

    pub fn matches(&self, geometry: &Geometry) -> bool {
        self.dims() == geometry.sinogram_shape()
    }
}

/// Rectangular boolean grid shared by masks and traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    /// Row `r` as a slice of bools.
    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn union(&self, other: &BitGrid) -> BitGrid {
        assert_eq!(self.dims(), other.dims());
        BitGrid {
            rows: self.rows,
            cols: self.cols,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a | b)
                .collect(),
        }
    }

    /// 0/1 tensor of the same shape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("finite by construction")
    }
}

/// Image-domain metal support M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetalMask(pub BitGrid);

impl MetalMask {
    pub fn empty(geometry: &Geometry) -> Self {
        let (h, w) = geometry.image_size;
        Self(BitGrid::new(h, w))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn pixel_count(&self) -> usize {
        self.0.count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.any()
    }
}

/// Sinogram-domain metal footprint Tr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetalTrace(pub BitGrid);

impl MetalTrace {
    pub fn empty(geometry: &Geometry) -> Self {
        let (n, d) = geometry.sinogram_shape();
        Self(BitGrid::new(n, d))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.any()
    }
}
