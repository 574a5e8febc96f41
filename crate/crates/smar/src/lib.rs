//! Self-supervised cross-domain metal artifact reduction for 2D CT.
//!
//! The toolkit covers the full path from raw projections to corrected
//! images:
//!
//! - [`tensor`], [`geometry`], [`domain`], [`container`] — shared data types
//!   and the SMAR binary tensor format.
//! - [`projector`] — forward projection, its exact adjoint, filtered
//!   backprojection, and vector-Jacobian products for all of them.
//! - [`simulate`] — procedural CT phantoms, metal masks, polychromatic
//!   artifact synthesis, and threshold segmentation.
//! - [`marops`] — the non-learned sinogram algorithms: metal traces,
//!   per-view linear interpolation, compositing, and metal trace replacement.
//! - [`nn`] — a small reverse-mode autodiff engine plus the sinogram
//!   completion network (SinoNet) and residual image refiner (ImgNet).
//! - [`train`] — the self-supervised losses, paired-trace batch sampling,
//!   Adam, and the joint training loop.
//! - [`metrics`] — RMSE in Hounsfield units and SSIM.
//! - [`pipeline`] — the end-to-end test-time correction procedure.
//!
//! The companion guide under `book/` walks through the concepts chapter by
//! chapter; its code snippets are kept in sync with the doc-tests in these
//! modules.

pub mod container;
pub mod domain;
pub mod geometry;
pub mod marops;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod projector;
pub mod simulate;
pub mod tensor;
pub mod train;

pub use domain::{BitGrid, Image, MetalMask, MetalTrace, Sinogram, Unit};
pub use geometry::{Geometry, GeometryKind};
pub use tensor::Tensor;
