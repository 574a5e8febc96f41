//! Linear tomography operators: forward projection, its exact adjoint,
//! filtered backprojection, and the vector-Jacobian products of both, so a
//! loss can be differentiated through reconstruction.
//!
//! All operators are pure linear maps. `forward_project` / `back_project`
//! share one weight enumeration (gathered vs scattered), and `fbp` /
//! `fbp_vjp` share another, so each pair satisfies the adjoint identity
//! `<A x, y> == <x, A' y>` to floating-point rounding rather than to
//! discretization error. Internals run in f64; the public API speaks f32
//! tensors.

mod filter;
mod kernels;

pub use filter::{FilterWindow, RampFilter};

use crate::domain::{Image, Sinogram, Unit};
use crate::geometry::Geometry;
use crate::tensor::Tensor;
use kernels::{filter_spacing, march_ray, pixel_footprint, preweights, ray_for, view_bases};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectorError {
    #[error("{what} shape {actual:?} does not match geometry {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("forward projection expects attenuation (mu) images, got HU")]
    UnitMismatch,
}

/// Number of view chunks the adjoint scatter is split into. Fixed, so the
/// partial-sum order (and therefore the result) does not depend on thread
/// count.
const ADJOINT_CHUNKS: usize = 16;

// ---------------------------------------------------------------------------
// f64 kernels; shared by the public API and the autodiff graph.
// ---------------------------------------------------------------------------

pub(crate) fn forward_project_f64(img: &[f64], geom: &Geometry, out: &mut [f64]) {
    let (h, w) = geom.image_size;
    let d = geom.num_detectors;
    let spacing = geom.pixel_spacing as f64;
    debug_assert_eq!(img.len(), h * w);
    debug_assert_eq!(out.len(), geom.num_views * d);
    out.par_chunks_mut(d).enumerate().for_each(|(view, row)| {
        for (det, value) in row.iter_mut().enumerate() {
            let ray = ray_for(geom, view, det);
            let mut acc = 0.0;
            march_ray(ray, h, w, spacing, |idx, wgt| {
                acc += wgt * img[idx];
            });
            *value = acc;
        }
    });
}

pub(crate) fn back_project_f64(sino: &[f64], geom: &Geometry, out: &mut [f64]) {
    let (h, w) = geom.image_size;
    let d = geom.num_detectors;
    let spacing = geom.pixel_spacing as f64;
    debug_assert_eq!(sino.len(), geom.num_views * d);
    debug_assert_eq!(out.len(), h * w);

    let chunk = geom.num_views.div_ceil(ADJOINT_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..geom.num_views.div_ceil(chunk))
        .into_par_iter()
        .map(|ci| {
            let mut img = vec![0.0f64; h * w];
            let lo = ci * chunk;
            let hi = (lo + chunk).min(geom.num_views);
            for view in lo..hi {
                for det in 0..d {
                    let v = sino[view * d + det];
                    if v == 0.0 {
                        continue;
                    }
                    let ray = ray_for(geom, view, det);
                    march_ray(ray, h, w, spacing, |idx, wgt| {
                        img[idx] += wgt * v;
                    });
                }
            }
            img
        })
        .collect();

    out.fill(0.0);
    for partial in &partials {
        for (o, p) in out.iter_mut().zip(partial) {
            *o += p;
        }
    }
}

fn filter_views_in_place(sino: &mut [f64], geom: &Geometry, window: FilterWindow) {
    let d = geom.num_detectors;
    let ramp = RampFilter::new(d, filter_spacing(geom), window);
    let weights = preweights(geom);
    sino.par_chunks_mut(d).for_each(|row| {
        for (v, &w) in row.iter_mut().zip(&weights) {
            *v *= w;
        }
        ramp.apply_row(row);
    });
}

/// Adjoint of [`filter_views_in_place`]: the ramp convolution is self-adjoint
/// (real even response) and the pre-weighting is diagonal, so the transpose
/// applies them in reverse order.
fn filter_views_adjoint_in_place(sino: &mut [f64], geom: &Geometry, window: FilterWindow) {
    let d = geom.num_detectors;
    let ramp = RampFilter::new(d, filter_spacing(geom), window);
    let weights = preweights(geom);
    sino.par_chunks_mut(d).for_each(|row| {
        ramp.apply_row(row);
        for (v, &w) in row.iter_mut().zip(&weights) {
            *v *= w;
        }
    });
}

/// Backprojection scale: the angular step, halved for fan beam because a
/// full-turn fan acquisition measures every line twice.
fn fbp_scale(geom: &Geometry) -> f64 {
    let step = geom.angular_range as f64 / geom.num_views as f64;
    match geom.kind {
        crate::geometry::GeometryKind::Parallel => step,
        crate::geometry::GeometryKind::FanEquidistant => 0.5 * step,
    }
}

/// Pixel-driven weighted backprojection of filtered views.
fn backproject_filtered(filtered: &[f64], geom: &Geometry, out: &mut [f64]) {
    let (h, w) = geom.image_size;
    let d = geom.num_detectors;
    let spacing = geom.pixel_spacing as f64;
    let bases = view_bases(geom);
    let scale = fbp_scale(geom);
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let y = (r as f64 - (h as f64 - 1.0) / 2.0) * spacing;
        for (c, value) in row.iter_mut().enumerate() {
            let x = (c as f64 - (w as f64 - 1.0) / 2.0) * spacing;
            let mut acc = 0.0;
            for (view, basis) in bases.iter().enumerate() {
                let Some((kf, wgt)) = pixel_footprint(geom, basis, x, y) else {
                    continue;
                };
                let k0 = kf.floor();
                let frac = kf - k0;
                let k0 = k0 as isize;
                let row_base = view * d;
                if k0 >= 0 && (k0 as usize) < d {
                    acc += wgt * (1.0 - frac) * filtered[row_base + k0 as usize];
                }
                let k1 = k0 + 1;
                if k1 >= 0 && (k1 as usize) < d {
                    acc += wgt * frac * filtered[row_base + k1 as usize];
                }
            }
            *value = acc * scale;
        }
    });
}

/// Exact transpose of [`backproject_filtered`]: scatter each pixel's adjoint
/// value into the detector bins it interpolated from. Views are independent
/// rows of the output, so this parallelizes without races.
fn backproject_filtered_adjoint(img: &[f64], geom: &Geometry, out: &mut [f64]) {
    let (h, w) = geom.image_size;
    let d = geom.num_detectors;
    let spacing = geom.pixel_spacing as f64;
    let bases = view_bases(geom);
    let scale = fbp_scale(geom);
    out.par_chunks_mut(d).enumerate().for_each(|(view, row)| {
        let basis = &bases[view];
        for r in 0..h {
            let y = (r as f64 - (h as f64 - 1.0) / 2.0) * spacing;
            for c in 0..w {
                let v = img[r * w + c] * scale;
                if v == 0.0 {
                    continue;
                }
                let x = (c as f64 - (w as f64 - 1.0) / 2.0) * spacing;
                let Some((kf, wgt)) = pixel_footprint(geom, basis, x, y) else {
                    continue;
                };
                let k0 = kf.floor();
                let frac = kf - k0;
                let k0 = k0 as isize;
                if k0 >= 0 && (k0 as usize) < d {
                    row[k0 as usize] += wgt * (1.0 - frac) * v;
                }
                let k1 = k0 + 1;
                if k1 >= 0 && (k1 as usize) < d {
                    row[k1 as usize] += wgt * frac * v;
                }
            }
        }
    });
}

pub(crate) fn fbp_f64(sino: &[f64], geom: &Geometry, window: FilterWindow, out: &mut [f64]) {
    let mut filtered = sino.to_vec();
    filter_views_in_place(&mut filtered, geom, window);
    backproject_filtered(&filtered, geom, out);
}

pub(crate) fn fbp_vjp_f64(img: &[f64], geom: &Geometry, window: FilterWindow, out: &mut [f64]) {
    backproject_filtered_adjoint(img, geom, out);
    filter_views_adjoint_in_place(out, geom, window);
}

// ---------------------------------------------------------------------------
// Public f32 operations.
// ---------------------------------------------------------------------------

fn check_image(image: &Image, geom: &Geometry) -> Result<(), ProjectorError> {
    if image.dims() != geom.image_size {
        return Err(ProjectorError::ShapeMismatch {
            what: "image",
            expected: geom.image_size,
            actual: image.dims(),
        });
    }
    Ok(())
}

fn check_sinogram(sino: &Sinogram, geom: &Geometry) -> Result<(), ProjectorError> {
    if sino.dims() != geom.sinogram_shape() {
        return Err(ProjectorError::ShapeMismatch {
            what: "sinogram",
            expected: geom.sinogram_shape(),
            actual: sino.dims(),
        });
    }
    Ok(())
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn tensor_from_f64(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect())
        .expect("kernel produced non-finite values")
}

/// Line integrals of an attenuation image along every (view, detector) ray.
pub fn forward_project(image: &Image, geom: &Geometry) -> Result<Sinogram, ProjectorError> {
    if image.unit != Unit::Mu {
        return Err(ProjectorError::UnitMismatch);
    }
    check_image(image, geom)?;
    let img = to_f64(&image.tensor);
    let (n, d) = geom.sinogram_shape();
    let mut out = vec![0.0f64; n * d];
    forward_project_f64(&img, geom, &mut out);
    Ok(Sinogram::new(tensor_from_f64(&[n, d], &out)))
}

/// Forward projection of a raw 2-D tensor, unit-agnostic. Used for masks and
/// other indicator images where attenuation units do not apply.
pub fn forward_project_tensor(t: &Tensor, geom: &Geometry) -> Result<Sinogram, ProjectorError> {
    let img = Image::new(t.clone(), Unit::Mu);
    forward_project(&img, geom)
}

/// Exact matrix adjoint of [`forward_project`]: the same Joseph weights,
/// scattered instead of gathered. This is also the vector-Jacobian product of
/// the forward projection.
pub fn back_project(sino: &Sinogram, geom: &Geometry) -> Result<Image, ProjectorError> {
    check_sinogram(sino, geom)?;
    let s = to_f64(&sino.tensor);
    let (h, w) = geom.image_size;
    let mut out = vec![0.0f64; h * w];
    back_project_f64(&s, geom, &mut out);
    Ok(Image::new(tensor_from_f64(&[h, w], &out), Unit::Mu))
}

/// Gradient contract of [`forward_project`]: for L(s) with upstream adjoint
/// u = dL/ds, the image-domain gradient is the backprojection of u.
pub fn forward_project_vjp(upstream: &Sinogram, geom: &Geometry) -> Result<Image, ProjectorError> {
    back_project(upstream, geom)
}

/// Filtered backprojection with the Ram-Lak window.
pub fn fbp(sino: &Sinogram, geom: &Geometry) -> Result<Image, ProjectorError> {
    fbp_with_window(sino, geom, FilterWindow::RamLak)
}

/// Filtered backprojection: cosine pre-weight (fan only), ramp-filter each
/// view, pixel-driven backprojection weighted by the inverse squared
/// magnification (fan only), scaled by angular_range / num_views.
pub fn fbp_with_window(
    sino: &Sinogram,
    geom: &Geometry,
    window: FilterWindow,
) -> Result<Image, ProjectorError> {
    check_sinogram(sino, geom)?;
    let s = to_f64(&sino.tensor);
    let (h, w) = geom.image_size;
    let mut out = vec![0.0f64; h * w];
    fbp_f64(&s, geom, window, &mut out);
    Ok(Image::new(tensor_from_f64(&[h, w], &out), Unit::Mu))
}

/// Exact adjoint of the [`fbp`] linear map: adjoint-backproject the upstream
/// image, then apply the self-adjoint ramp filter and the transposed
/// pre-weighting, in reverse composition order.
pub fn fbp_vjp(upstream: &Image, geom: &Geometry) -> Result<Sinogram, ProjectorError> {
    fbp_vjp_with_window(upstream, geom, FilterWindow::RamLak)
}

pub fn fbp_vjp_with_window(
    upstream: &Image,
    geom: &Geometry,
    window: FilterWindow,
) -> Result<Sinogram, ProjectorError> {
    check_image(upstream, geom)?;
    let img = to_f64(&upstream.tensor);
    let (n, d) = geom.sinogram_shape();
    let mut out = vec![0.0f64; n * d];
    fbp_vjp_f64(&img, geom, window, &mut out);
    Ok(Sinogram::new(tensor_from_f64(&[n, d], &out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;

    fn small_parallel() -> Geometry {
        Geometry::parallel(45, 49, (32, 32), 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let geom = small_parallel();
        let img = Image::zeros(&geom, Unit::Mu);
        let sino = forward_project(&img, &geom).unwrap();
        assert!(sino.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sinogram_backprojects_to_zero() {
        let geom = small_parallel();
        let sino = Sinogram::zeros(&geom);
        let img = back_project(&sino, &geom).unwrap();
        assert!(img.tensor.data().iter().all(|&v| v == 0.0));
        let img = fbp(&sino, &geom).unwrap();
        assert!(img.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hu_image_is_rejected() {
        let geom = small_parallel();
        let img = Image::zeros(&geom, Unit::Hu);
        assert_eq!(
            forward_project(&img, &geom).unwrap_err(),
            ProjectorError::UnitMismatch
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let geom = small_parallel();
        let img = Image::new(Tensor::zeros(&[16, 16]), Unit::Mu);
        assert!(matches!(
            forward_project(&img, &geom).unwrap_err(),
            ProjectorError::ShapeMismatch { what: "image", .. }
        ));
        let sino = Sinogram::new(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            fbp(&sino, &geom).unwrap_err(),
            ProjectorError::ShapeMismatch { what: "sinogram", .. }
        ));
    }

    #[test]
    fn forward_projection_is_additive() {
        let geom = small_parallel();
        let (h, w) = geom.image_size;
        let a = Image::new(
            Tensor::from_fn2(h, w, |r, c| ((r * 7 + c * 3) % 11) as f32 * 0.01),
            Unit::Mu,
        );
        let b = Image::new(
            Tensor::from_fn2(h, w, |r, c| ((r * 5 + c * 13) % 7) as f32 * 0.02),
            Unit::Mu,
        );
        let sum = Image::new(
            Tensor::from_fn2(h, w, |r, c| a.tensor.at2(r, c) + b.tensor.at2(r, c)),
            Unit::Mu,
        );
        let pa = forward_project(&a, &geom).unwrap();
        let pb = forward_project(&b, &geom).unwrap();
        let psum = forward_project(&sum, &geom).unwrap();
        let max = psum
            .tensor
            .data()
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        for i in 0..psum.tensor.len() {
            let lin = pa.tensor.data()[i] + pb.tensor.data()[i];
            assert!((psum.tensor.data()[i] - lin).abs() <= 1e-5 * max.max(1.0));
        }
    }

    #[test]
    fn vjp_is_back_project_bitwise() {
        let geom = small_parallel();
        let (n, d) = geom.sinogram_shape();
        let sino = Sinogram::new(Tensor::from_fn2(n, d, |r, c| {
            ((r * 31 + c * 17) % 23) as f32 * 0.1 - 1.0
        }));
        let a = back_project(&sino, &geom).unwrap();
        let b = forward_project_vjp(&sino, &geom).unwrap();
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fbp_scales_exactly_by_powers_of_two() {
        // Doubling is exact in IEEE arithmetic, so the whole linear pipeline
        // scales bit-exactly by 2.
        let geom = small_parallel();
        let (n, d) = geom.sinogram_shape();
        let s1 = Sinogram::new(Tensor::from_fn2(n, d, |r, c| {
            (((r * 13 + c * 7) % 19) as f32 - 9.0) * 0.25
        }));
        let s2 = Sinogram::new(Tensor::new(
            vec![n, d],
            s1.tensor.data().iter().map(|v| v * 2.0).collect(),
        )
        .unwrap());
        let f1 = fbp(&s1, &geom).unwrap();
        let f2 = fbp(&s2, &geom).unwrap();
        for (a, b) in f1.tensor.data().iter().zip(f2.tensor.data()) {
            assert_eq!((a * 2.0).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_bin_adjoint_matches_materialized_matrix_row() {
        // On an 8x8 grid, scatter of a single sinogram bin must equal the
        // explicitly materialized row of the forward matrix.
        let geom = Geometry::parallel(10, 11, (8, 8), 1.0, 1.0).unwrap();
        let (h, w) = geom.image_size;
        let (view, det) = (3, 5);

        // Build the forward matrix row by projecting each basis image.
        let mut row = vec![0.0f32; h * w];
        for p in 0..h * w {
            let mut data = vec![0.0f32; h * w];
            data[p] = 1.0;
            let img = Image::new(Tensor::new(vec![h, w], data).unwrap(), Unit::Mu);
            let sino = forward_project(&img, &geom).unwrap();
            row[p] = sino.tensor.at2(view, det);
        }

        let mut s = Tensor::zeros(&[geom.num_views, geom.num_detectors]);
        s.set2(view, det, 1.0);
        let img = back_project(&Sinogram::new(s), &geom).unwrap();
        for p in 0..h * w {
            assert!(
                (img.tensor.data()[p] - row[p]).abs() < 1e-6,
                "pixel {p}: adjoint {} vs matrix {}",
                img.tensor.data()[p],
                row[p]
            );
        }
    }
}
