//! Acquisition geometry: how many views and detector bins, how large the
//! reconstruction grid is, and where sources and detectors sit.
//!
//! Two kinds are supported: parallel beam (views evenly spread over half a
//! turn) and equidistant fan beam with a flat detector (views over a full
//! turn). Distances and spacings are millimetres, angles radians.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("need at least 2 projection views, got {0}")]
    TooFewViews(usize),
    #[error("need at least 2 detector bins, got {0}")]
    TooFewDetectors(usize),
    #[error("image must be at least 4x4 pixels, got {0}x{1}")]
    ImageTooSmall(usize, usize),
    #[error("spacings must be positive")]
    NonPositiveSpacing,
    #[error("fan beam requires 0 < source_to_center < source_to_detector")]
    BadFanDistances,
    #[error("angles must be strictly increasing")]
    AnglesNotIncreasing,
    #[error("expected {expected} angles, got {actual}")]
    AnglesLengthMismatch { expected: usize, actual: usize },
    #[error("angular range must be positive and finite")]
    BadAngularRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    Parallel,
    FanEquidistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub kind: GeometryKind,
    pub num_views: usize,
    pub num_detectors: usize,
    /// (rows, cols) of the reconstruction grid.
    pub image_size: (usize, usize),
    pub pixel_spacing: f32,
    pub detector_spacing: f32,
    /// Source to rotation center distance; fan beam only (0 for parallel).
    pub source_to_center: f32,
    /// Source to detector distance; fan beam only (0 for parallel).
    pub source_to_detector: f32,
    pub angular_range: f32,
    pub angles: Vec<f32>,
}

impl Geometry {
    /// Parallel beam with `num_views` evenly spaced over [0, pi).
    pub fn parallel(
        num_views: usize,
        num_detectors: usize,
        image_size: (usize, usize),
        pixel_spacing: f32,
        detector_spacing: f32,
    ) -> Result<Self, GeometryError> {
        let range = std::f32::consts::PI;
        let angles = even_angles(num_views, range);
        let g = Self {
            kind: GeometryKind::Parallel,
            num_views,
            num_detectors,
            image_size,
            pixel_spacing,
            detector_spacing,
            source_to_center: 0.0,
            source_to_detector: 0.0,
            angular_range: range,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// Equidistant (flat detector) fan beam over a full turn.
    pub fn fan(
        num_views: usize,
        num_detectors: usize,
        image_size: (usize, usize),
        pixel_spacing: f32,
        detector_spacing: f32,
        source_to_center: f32,
        source_to_detector: f32,
    ) -> Result<Self, GeometryError> {
        let range = std::f32::consts::TAU;
        let angles = even_angles(num_views, range);
        let g = Self {
            kind: GeometryKind::FanEquidistant,
            num_views,
            num_detectors,
            image_size,
            pixel_spacing,
            detector_spacing,
            source_to_center,
            source_to_detector,
            angular_range: range,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// Desk-scale parallel geometry: 128x128 image, 180 views, 185 detectors,
    /// 1 mm spacings. Small enough that every operator test runs in seconds.
    pub fn parallel_desk() -> Self {
        Self::parallel(180, 185, (128, 128), 1.0, 1.0).expect("valid preset")
    }

    /// Desk-scale fan geometry: 128x128 image, 360 views over a full turn.
    /// Source distances are artifact defaults, not values from any scanner.
    pub fn fan_desk() -> Self {
        Self::fan(360, 185, (128, 128), 1.0, 2.2, 300.0, 600.0).expect("valid preset")
    }

    /// Full-scale fan preset: 416x416 image, 640 views, 641 detector bins.
    /// Too heavy for the test suite; exposed for completeness.
    pub fn fan_full_scale() -> Self {
        Self::fan(640, 641, (416, 416), 1.0, 2.2, 600.0, 1200.0).expect("valid preset")
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.num_views < 2 {
            return Err(GeometryError::TooFewViews(self.num_views));
        }
        if self.num_detectors < 2 {
            return Err(GeometryError::TooFewDetectors(self.num_detectors));
        }
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(GeometryError::ImageTooSmall(h, w));
        }
        if !(self.pixel_spacing > 0.0) || !(self.detector_spacing > 0.0) {
            return Err(GeometryError::NonPositiveSpacing);
        }
        if self.kind == GeometryKind::FanEquidistant
            && !(self.source_to_center > 0.0 && self.source_to_center < self.source_to_detector)
        {
            return Err(GeometryError::BadFanDistances);
        }
        if !(self.angular_range > 0.0) || !self.angular_range.is_finite() {
            return Err(GeometryError::BadAngularRange);
        }
        if self.angles.len() != self.num_views {
            return Err(GeometryError::AnglesLengthMismatch {
                expected: self.num_views,
                actual: self.angles.len(),
            });
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeometryError::AnglesNotIncreasing);
        }
        Ok(())
    }

    /// Sinogram shape (views, detectors).
    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.num_views, self.num_detectors)
    }

    /// Signed detector coordinate of bin `k`, centered on the array.
    #[inline]
    pub fn detector_offset(&self, k: usize) -> f32 {
        (k as f32 - (self.num_detectors as f32 - 1.0) / 2.0) * self.detector_spacing
    }
}

fn even_angles(n: usize, range: f32) -> Vec<f32> {
    (0..n).map(|i| i as f32 * range / n as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        Geometry::parallel_desk().validate().unwrap();
        Geometry::fan_desk().validate().unwrap();
        Geometry::fan_full_scale().validate().unwrap();
    }

    #[test]
    fn rejects_each_constraint_violation_distinctly() {
        assert_eq!(
            Geometry::parallel(1, 8, (16, 16), 1.0, 1.0).unwrap_err(),
            GeometryError::TooFewViews(1)
        );
        assert_eq!(
            Geometry::parallel(8, 1, (16, 16), 1.0, 1.0).unwrap_err(),
            GeometryError::TooFewDetectors(1)
        );
        assert_eq!(
            Geometry::parallel(8, 8, (3, 16), 1.0, 1.0).unwrap_err(),
            GeometryError::ImageTooSmall(3, 16)
        );
        assert_eq!(
            Geometry::parallel(8, 8, (16, 16), 0.0, 1.0).unwrap_err(),
            GeometryError::NonPositiveSpacing
        );
        assert_eq!(
            Geometry::fan(8, 8, (16, 16), 1.0, 1.0, 500.0, 400.0).unwrap_err(),
            GeometryError::BadFanDistances
        );

        let mut g = Geometry::parallel_desk();
        g.angles[5] = g.angles[4];
        assert_eq!(g.validate().unwrap_err(), GeometryError::AnglesNotIncreasing);

        let mut g = Geometry::parallel_desk();
        g.angles.pop();
        assert_eq!(
            g.validate().unwrap_err(),
            GeometryError::AnglesLengthMismatch {
                expected: 180,
                actual: 179
            }
        );
    }

    #[test]
    fn detector_offsets_are_centered() {
        let g = Geometry::parallel(4, 5, (16, 16), 1.0, 2.0).unwrap();
        assert_eq!(g.detector_offset(2), 0.0);
        assert_eq!(g.detector_offset(0), -4.0);
        assert_eq!(g.detector_offset(4), 4.0);
    }
}
