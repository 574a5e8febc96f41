//! Ray and footprint enumeration shared by the linear operators.
//!
//! Forward projection and its adjoint share [`march_ray`]; filtered
//! backprojection and its adjoint share [`pixel_footprint`]. Each pair
//! enumerates identical (index, weight) sets, gathered in one direction and
//! scattered in the other, so the operator pairs are exact matrix transposes.

use crate::geometry::{Geometry, GeometryKind};

/// A ray as an origin point and unit direction, both in mm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ray {
    pub origin: (f64, f64),
    pub dir: (f64, f64),
}

/// Ray for (view, detector). Parallel rays pass through the detector offset
/// on the axis through the origin; fan rays run from the source point to the
/// detector cell center.
pub(crate) fn ray_for(geom: &Geometry, view: usize, det: usize) -> Ray {
    let theta = geom.angles[view] as f64;
    let (sin_t, cos_t) = theta.sin_cos();
    let offset = det_offset(geom, det);
    match geom.kind {
        GeometryKind::Parallel => Ray {
            origin: (offset * cos_t, offset * sin_t),
            dir: (-sin_t, cos_t),
        },
        GeometryKind::FanEquidistant => {
            let r_so = geom.source_to_center as f64;
            let r_sd = geom.source_to_detector as f64;
            let src = (r_so * cos_t, r_so * sin_t);
            // Flat detector centered on the ray through the origin, at
            // distance r_sd from the source.
            let det_center = ((r_so - r_sd) * cos_t, (r_so - r_sd) * sin_t);
            let cell = (det_center.0 - offset * sin_t, det_center.1 + offset * cos_t);
            let d = (cell.0 - src.0, cell.1 - src.1);
            let n = (d.0 * d.0 + d.1 * d.1).sqrt();
            Ray {
                origin: src,
                dir: (d.0 / n, d.1 / n),
            }
        }
    }
}

#[inline]
pub(crate) fn det_offset(geom: &Geometry, det: usize) -> f64 {
    (det as f64 - (geom.num_detectors as f64 - 1.0) / 2.0) * geom.detector_spacing as f64
}

/// Joseph sampling: march along the dominant axis of the ray and split each
/// sample linearly across the two neighboring pixels of the other axis.
/// Calls `visit(flat_pixel_index, weight_mm)` for every touched pixel.
#[inline(always)]
pub(crate) fn march_ray(
    ray: Ray,
    h: usize,
    w: usize,
    spacing: f64,
    mut visit: impl FnMut(usize, f64),
) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (ox, oy) = ray.origin;
    let (dx, dy) = ray.dir;
    if dx.abs() >= dy.abs() {
        // Mostly horizontal: one sample per image column.
        let step = spacing / dx.abs();
        for c in 0..w {
            let x = (c as f64 - cx) * spacing;
            let t = (x - ox) / dx;
            let rf = (oy + t * dy) / spacing + cy;
            let r0 = rf.floor();
            let frac = rf - r0;
            let r0 = r0 as isize;
            if r0 >= 0 && (r0 as usize) < h {
                visit(r0 as usize * w + c, (1.0 - frac) * step);
            }
            let r1 = r0 + 1;
            if r1 >= 0 && (r1 as usize) < h {
                visit(r1 as usize * w + c, frac * step);
            }
        }
    } else {
        // Mostly vertical: one sample per image row.
        let step = spacing / dy.abs();
        for r in 0..h {
            let y = (r as f64 - cy) * spacing;
            let t = (y - oy) / dy;
            let cf = (ox + t * dx) / spacing + cx;
            let c0 = cf.floor();
            let frac = cf - c0;
            let c0 = c0 as isize;
            if c0 >= 0 && (c0 as usize) < w {
                visit(r * w + c0 as usize, (1.0 - frac) * step);
            }
            let c1 = c0 + 1;
            if c1 >= 0 && (c1 as usize) < w {
                visit(r * w + c1 as usize, frac * step);
            }
        }
    }
}

/// Per-view trigonometry cached for the pixel-driven backprojection.
pub(crate) struct ViewBasis {
    pub sin_t: f64,
    pub cos_t: f64,
}

pub(crate) fn view_bases(geom: &Geometry) -> Vec<ViewBasis> {
    geom.angles
        .iter()
        .map(|&a| {
            let (sin_t, cos_t) = (a as f64).sin_cos();
            ViewBasis { sin_t, cos_t }
        })
        .collect()
}

/// Fractional detector index and backprojection weight for a pixel seen from
/// one view. `None` when the pixel sits on or behind the fan source plane.
///
/// Parallel: index of the pixel's signed offset along the detector axis,
/// weight 1. Fan: index of the central-plane (virtual detector) coordinate
/// with the classical inverse-square magnification weight.
#[inline(always)]
pub(crate) fn pixel_footprint(
    geom: &Geometry,
    basis: &ViewBasis,
    x: f64,
    y: f64,
) -> Option<(f64, f64)> {
    let half = (geom.num_detectors as f64 - 1.0) / 2.0;
    match geom.kind {
        GeometryKind::Parallel => {
            let s = x * basis.cos_t + y * basis.sin_t;
            Some((s / geom.detector_spacing as f64 + half, 1.0))
        }
        GeometryKind::FanEquidistant => {
            let r_so = geom.source_to_center as f64;
            let r_sd = geom.source_to_detector as f64;
            let along_u = -x * basis.sin_t + y * basis.cos_t;
            let along_s = x * basis.cos_t + y * basis.sin_t;
            let mag = (r_so - along_s) / r_so;
            if mag <= 1e-9 {
                return None;
            }
            let s_virtual = along_u / mag;
            let virtual_spacing = geom.detector_spacing as f64 * r_so / r_sd;
            Some((s_virtual / virtual_spacing + half, 1.0 / (mag * mag)))
        }
    }
}

/// Detector spacing in the filtering domain: physical spacing for parallel
/// beam, the spacing rescaled to the virtual detector through the rotation
/// center for fan beam.
pub(crate) fn filter_spacing(geom: &Geometry) -> f64 {
    match geom.kind {
        GeometryKind::Parallel => geom.detector_spacing as f64,
        GeometryKind::FanEquidistant => {
            geom.detector_spacing as f64 * geom.source_to_center as f64
                / geom.source_to_detector as f64
        }
    }
}

/// Cosine pre-weight applied to each detector bin before filtering in the
/// fan-beam case; 1 for parallel beam.
pub(crate) fn preweights(geom: &Geometry) -> Vec<f64> {
    match geom.kind {
        GeometryKind::Parallel => vec![1.0; geom.num_detectors],
        GeometryKind::FanEquidistant => {
            let r_so = geom.source_to_center as f64;
            let r_sd = geom.source_to_detector as f64;
            (0..geom.num_detectors)
                .map(|k| {
                    let s = det_offset(geom, k) * r_so / r_sd;
                    r_so / (r_so * r_so + s * s).sqrt()
                })
                .collect()
        }
    }
}
