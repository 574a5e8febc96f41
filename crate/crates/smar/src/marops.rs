//! Non-learned sinogram-domain algorithms: metal trace computation, per-view
//! linear interpolation, completion compositing, and prior-image metal trace
//! replacement.
//!
//! Linear interpolation fills each run of traced bins in a view from its two
//! untraced neighbors:
//!
//! ```
//! use smar::marops::li_interpolate;
//! use smar::{BitGrid, MetalTrace, Sinogram, Tensor};
//!
//! let sino = Sinogram::new(Tensor::new(vec![1, 4], vec![2.0, 0.0, 0.0, 8.0]).unwrap());
//! let trace = MetalTrace(BitGrid::from_fn(1, 4, |_, c| c == 1 || c == 2));
//! let filled = li_interpolate(&sino, &trace).unwrap();
//! assert_eq!(filled.tensor.data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

use crate::domain::{MetalMask, MetalTrace, Sinogram};
use crate::geometry::Geometry;
use crate::projector;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarOpsError {
    #[error("{what} shape {actual:?} does not match {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("view {0} is entirely inside the metal trace; interpolation has no anchors")]
    FullRowTraced(usize),
    #[error(transparent)]
    Projector(#[from] projector::ProjectorError),
}

/// Sinogram-domain footprint of a metal mask: forward-project the indicator
/// image and keep bins above a small threshold tied to the pixel spacing
/// (a strict `> 0` would pick up interpolation dust).
pub fn compute_trace(mask: &MetalMask, geom: &Geometry) -> Result<MetalTrace, MarOpsError> {
    if mask.dims() != geom.image_size {
        return Err(MarOpsError::ShapeMismatch {
            what: "mask",
            expected: geom.image_size,
            actual: mask.dims(),
        });
    }
    let sino = projector::forward_project_tensor(&mask.0.to_tensor(), geom)?;
    let tau = 1e-6 * geom.pixel_spacing;
    let (n, d) = sino.dims();
    let data = sino.tensor.data();
    let grid = crate::domain::BitGrid::from_fn(n, d, |r, c| data[r * d + c] > tau);
    Ok(MetalTrace(grid))
}

/// Replaces every traced bin by per-view linear interpolation of its untraced
/// neighbors. A run touching the detector edge is filled by constant
/// extrapolation from its single available neighbor. Untraced bins are copied
/// bit-for-bit.
pub fn li_interpolate(sino: &Sinogram, trace: &MetalTrace) -> Result<Sinogram, MarOpsError> {
    check_same("sinogram vs trace", sino.dims(), trace.dims())?;
    let (n, d) = sino.dims();
    let mut out = sino.tensor.clone();
    for view in 0..n {
        let row_bits = trace.0.row(view);
        if row_bits.iter().all(|&b| b) {
            return Err(MarOpsError::FullRowTraced(view));
        }
        let mut k = 0;
        while k < d {
            if !row_bits[k] {
                k += 1;
                continue;
            }
            // Traced run [k, end).
            let start = k;
            let mut end = k;
            while end < d && row_bits[end] {
                end += 1;
            }
            let left = start.checked_sub(1).map(|j| sino.tensor.at2(view, j));
            let right = (end < d).then(|| sino.tensor.at2(view, end));
            match (left, right) {
                (Some(lv), Some(rv)) => {
                    // Left anchor at start-1, right anchor at end; the run
                    // spans delta = end - start bins.
                    let delta = (end - start) as f32;
                    let slope = (rv - lv) / (delta + 1.0);
                    for kk in start..end {
                        let steps = (kk - (start - 1)) as f32;
                        out.set2(view, kk, lv + slope * steps);
                    }
                }
                (Some(lv), None) => {
                    for kk in start..end {
                        out.set2(view, kk, lv);
                    }
                }
                (None, Some(rv)) => {
                    for kk in start..end {
                        out.set2(view, kk, rv);
                    }
                }
                (None, None) => unreachable!("full rows rejected above"),
            }
            k = end;
        }
    }
    Ok(Sinogram::new(out))
}

/// Completion compositing: network output inside the trace, interpolated
/// sinogram outside. Untraced bins equal `s_li` bit-for-bit.
pub fn composite_completion(
    net_output: &Sinogram,
    s_li: &Sinogram,
    trace: &MetalTrace,
) -> Result<Sinogram, MarOpsError> {
    check_same("net output vs s_li", net_output.dims(), s_li.dims())?;
    check_same("sinogram vs trace", s_li.dims(), trace.dims())?;
    let (n, d) = s_li.dims();
    let mut out = s_li.tensor.clone();
    for view in 0..n {
        for det in 0..d {
            if trace.0.get(view, det) {
                out.set2(view, det, net_output.at2(view, det));
            }
        }
    }
    Ok(Sinogram::new(out))
}

trait At2 {
    fn at2(&self, r: usize, c: usize) -> f32;
}
impl At2 for Sinogram {
    fn at2(&self, r: usize, c: usize) -> f32 {
        self.tensor.at2(r, c)
    }
}

/// Prior-image metal trace replacement: fill the trace with the prior
/// sinogram plus a linearly interpolated residual so replaced data connects
/// continuously to its untraced neighborhood. Untraced bins are copied
/// bit-for-bit from `s_li`.
pub fn metal_trace_replacement(
    s_li: &Sinogram,
    s_prior: &Sinogram,
    trace: &MetalTrace,
) -> Result<Sinogram, MarOpsError> {
    check_same("s_li vs s_prior", s_li.dims(), s_prior.dims())?;
    check_same("sinogram vs trace", s_li.dims(), trace.dims())?;
    let (n, d) = s_li.dims();
    let residual = Sinogram::new(
        Tensor::new(
            vec![n, d],
            s_li.tensor
                .data()
                .iter()
                .zip(s_prior.tensor.data())
                .map(|(a, b)| a - b)
                .collect(),
        )
        .expect("finite residual"),
    );
    let res_li = li_interpolate(&residual, trace)?;
    let mut out = s_li.tensor.clone();
    for view in 0..n {
        for det in 0..d {
            if trace.0.get(view, det) {
                out.set2(view, det, s_prior.tensor.at2(view, det) + res_li.tensor.at2(view, det));
            }
        }
    }
    Ok(Sinogram::new(out))
}

/// Zeroes every traced bin; untraced bins are copied.
pub fn zero_trace(sino: &Sinogram, trace: &MetalTrace) -> Result<Sinogram, MarOpsError> {
    check_same("sinogram vs trace", sino.dims(), trace.dims())?;
    let (n, d) = sino.dims();
    let mut out = sino.tensor.clone();
    for view in 0..n {
        for det in 0..d {
            if trace.0.get(view, det) {
                out.set2(view, det, 0.0);
            }
        }
    }
    Ok(Sinogram::new(out))
}

fn check_same(
    what: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<(), MarOpsError> {
    if expected != actual {
        return Err(MarOpsError::ShapeMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
