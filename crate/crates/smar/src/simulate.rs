//! Procedural phantoms, metal masks, unit conversion, polychromatic
//! metal-artifact synthesis, and threshold segmentation.
//!
//! Phantoms stand in for clinical slices: a soft-tissue body ellipse on an
//! air background with randomly placed ellipses of lung, soft-tissue, and
//! bone density. Everything is a pure function of (spec, geometry); equal
//! seeds give bit-identical outputs.
//!
//! Hounsfield and attenuation units convert through the water coefficient:
//!
//! ```
//! use smar::simulate::{hu_to_mu, mu_to_hu, MU_WATER};
//! use smar::{Image, Tensor, Unit};
//!
//! let hu = Image::new(Tensor::new(vec![1, 2], vec![0.0, 1000.0]).unwrap(), Unit::Hu);
//! let mu = hu_to_mu(&hu);
//! assert_eq!(mu.tensor.data(), &[MU_WATER, 2.0 * MU_WATER]);
//! let back = mu_to_hu(&mu);
//! assert!((back.tensor.data()[1] - 1000.0).abs() < 1e-3);
//! ```

use crate::domain::{BitGrid, Image, MetalMask, Sinogram, Unit};
use crate::geometry::Geometry;
use crate::projector;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Linear attenuation of water at the reference energy, per mm.
pub const MU_WATER: f32 = 0.0192;

/// Default attenuation inserted for metal pixels, per mm.
pub const DEFAULT_METAL_MU: f32 = 0.15;

/// Default segmentation threshold for metal in reconstructed images.
pub const DEFAULT_METAL_THRESHOLD_HU: f32 = 2000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("mask placement failed after {0} attempts (no valid interior position)")]
    PlacementFailed(usize),
    #[error("metal mask is empty")]
    EmptyMask,
    #[error("spectrum is invalid: {0}")]
    BadSpectrum(&'static str),
    #[error(transparent)]
    Projector(#[from] projector::ProjectorError),
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Number of interior tissue ellipses; the body outline is extra.
    pub num_ellipses: usize,
    pub soft_tissue_hu: (f32, f32),
    pub bone_hu: (f32, f32),
    pub lung_hu: (f32, f32),
    /// Body half-axes as a fraction of the half image size.
    pub body_axes: (f32, f32),
    pub body_hu: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_ellipses: 5,
            soft_tissue_hu: (-100.0, 100.0),
            bone_hu: (300.0, 1200.0),
            lung_hu: (-900.0, -500.0),
            body_axes: (0.82, 0.68),
            body_hu: 30.0,
        }
    }
}

struct Ellipse {
    center: (f32, f32),
    axes: (f32, f32),
    angle: f32,
    value: f32,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

/// Air background, soft-tissue body ellipse, then `num_ellipses` tissue
/// ellipses composited last-writer-wins. Deterministic in the seed.
pub fn make_phantom(spec: &PhantomSpec, geom: &Geometry) -> Image {
    let (h, w) = geom.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half_w = (w as f32 - 1.0) / 2.0;
    let half_h = (h as f32 - 1.0) / 2.0;

    let body = Ellipse {
        center: (0.0, 0.0),
        axes: (spec.body_axes.0 * half_w, spec.body_axes.1 * half_h),
        angle: 0.0,
        value: spec.body_hu,
    };

    let mut ellipses = Vec::with_capacity(spec.num_ellipses);
    for _ in 0..spec.num_ellipses {
        let class = rng.gen_range(0..3u32);
        let range = match class {
            0 => spec.soft_tissue_hu,
            1 => spec.bone_hu,
            _ => spec.lung_hu,
        };
        let value = rng.gen_range(range.0..=range.1);
        // Center well inside the body so most of the ellipse stays interior.
        let cx = rng.gen_range(-0.55..0.55) * body.axes.0;
        let cy = rng.gen_range(-0.55..0.55) * body.axes.1;
        let ax = rng.gen_range(0.06..0.30) * half_w;
        let ay = rng.gen_range(0.06..0.30) * half_h;
        let angle = rng.gen_range(0.0..std::f32::consts::PI);
        ellipses.push(Ellipse {
            center: (cx, cy),
            axes: (ax, ay),
            angle,
            value,
        });
    }

    let tensor = Tensor::from_fn2(h, w, |r, c| {
        let x = c as f32 - half_w;
        let y = r as f32 - half_h;
        if !body.contains(x, y) {
            return -1000.0;
        }
        let mut v = body.value;
        for e in &ellipses {
            if e.contains(x, y) {
                v = e.value;
            }
        }
        v
    });
    Image::new(tensor, Unit::Hu)
}

// ---------------------------------------------------------------------------
// Metal masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskShape {
    Ellipse,
    RoundedRect,
    ScrewPair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub seed: u64,
    pub shape: MaskShape,
    /// Inclusive pixel-count range the generated mask must fall into.
    pub pixel_count: (usize, usize),
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: MaskShape::Ellipse,
            pixel_count: (40, 400),
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Interior of the body: above air by a wide margin.
fn body_interior(body: &Image) -> Vec<(usize, usize)> {
    let (h, w) = body.dims();
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if body.tensor.at2(r, c) > -300.0 {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Places a metal shape of the requested pixel count inside the body
/// interior. Rejection-samples placement and size for up to 100 attempts.
pub fn make_metal_mask(
    spec: &MaskSpec,
    geom: &Geometry,
    body: &Image,
) -> Result<MetalMask, SimulateError> {
    assert_eq!(body.dims(), geom.image_size, "body must match geometry");
    let (h, w) = geom.image_size;
    let interior = body_interior(body);
    if interior.is_empty() {
        return Err(SimulateError::PlacementFailed(0));
    }
    let (min_px, max_px) = spec.pixel_count;
    assert!(min_px >= 1 && min_px <= max_px, "bad pixel count range");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let target = rng.gen_range(min_px..=max_px) as f32;
        let (cr, cc) = interior[rng.gen_range(0..interior.len())];
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let grid = rasterize_shape(spec.shape, target, (cr, cc), angle, h, w, &mut rng);

        let count = grid.count();
        if count < min_px || count > max_px {
            continue;
        }
        // Must sit fully inside the body interior.
        let mut inside = true;
        'check: for r in 0..h {
            for c in 0..w {
                if grid.get(r, c) && body.tensor.at2(r, c) <= -300.0 {
                    inside = false;
                    break 'check;
                }
            }
        }
        if inside {
            return Ok(MetalMask(grid));
        }
    }
    Err(SimulateError::PlacementFailed(MAX_PLACEMENT_ATTEMPTS))
}

fn rasterize_shape(
    shape: MaskShape,
    target_px: f32,
    center: (usize, usize),
    angle: f32,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> BitGrid {
    let (cr, cc) = (center.0 as f32, center.1 as f32);
    let (sin_a, cos_a) = angle.sin_cos();
    let elong: f32 = rng.gen_range(1.0..3.0f32);
    match shape {
        MaskShape::Ellipse => {
            // area = pi a b with b = a / elong
            let a = (target_px * elong / std::f32::consts::PI).sqrt();
            let b = a / elong;
            BitGrid::from_fn(h, w, |r, c| {
                let dr = r as f32 - cr;
                let dc = c as f32 - cc;
                let u = dc * cos_a + dr * sin_a;
                let v = -dc * sin_a + dr * cos_a;
                (u / a.max(0.5)).powi(2) + (v / b.max(0.5)).powi(2) <= 1.0
            })
        }
        MaskShape::RoundedRect => {
            let a = (target_px * elong).sqrt() / 2.0;
            let b = a / elong;
            let round = b.min(1.5);
            BitGrid::from_fn(h, w, |r, c| {
                let dr = r as f32 - cr;
                let dc = c as f32 - cc;
                let u = (dc * cos_a + dr * sin_a).abs();
                let v = (-dc * sin_a + dr * cos_a).abs();
                let du = (u - (a - round)).max(0.0);
                let dv = (v - (b - round)).max(0.0);
                u <= a && v <= b && du * du + dv * dv <= round * round
            })
        }
        MaskShape::ScrewPair => {
            // Two parallel thin rods separated across the minor axis.
            let half_target = target_px / 2.0;
            let b = (half_target / 8.0).sqrt().clamp(0.5, 3.0);
            let a = half_target / (4.0 * b);
            let gap = rng.gen_range(2.0..6.0f32) + b * 2.0;
            BitGrid::from_fn(h, w, |r, c| {
                let dr = r as f32 - cr;
                let dc = c as f32 - cc;
                let u = dc * cos_a + dr * sin_a;
                let v = -dc * sin_a + dr * cos_a;
                let v1 = (v - gap / 2.0).abs();
                let v2 = (v + gap / 2.0).abs();
                u.abs() <= a && (v1 <= b || v2 <= b)
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Units
// ---------------------------------------------------------------------------

/// HU to linear attenuation: mu = MU_WATER * (1 + HU/1000).
pub fn hu_to_mu(image: &Image) -> Image {
    assert_eq!(image.unit, Unit::Hu, "input must be HU");
    let (h, w) = image.dims();
    let data = image
        .tensor
        .data()
        .iter()
        .map(|&v| MU_WATER * (1.0 + v / 1000.0))
        .collect();
    Image::new(Tensor::new(vec![h, w], data).expect("finite"), Unit::Mu)
}

/// Inverse of [`hu_to_mu`] up to float rounding.
pub fn mu_to_hu(image: &Image) -> Image {
    assert_eq!(image.unit, Unit::Mu, "input must be mu");
    let (h, w) = image.dims();
    let data = image
        .tensor
        .data()
        .iter()
        .map(|&v| (v / MU_WATER - 1.0) * 1000.0)
        .collect();
    Image::new(Tensor::new(vec![h, w], data).expect("finite"), Unit::Hu)
}

// ---------------------------------------------------------------------------
// Polychromatic synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpectrumBin {
    pub weight: f32,
    pub tissue_scale: f32,
    pub metal_scale: f32,
}

/// Discrete energy-bin mixture for Beer-Lambert attenuation. Metal scales
/// decrease with energy (beam hardening); tissue scales stay near 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrum {
    pub bins: Vec<SpectrumBin>,
}

impl Default for Spectrum {
    fn default() -> Self {
        Self {
            bins: vec![
                SpectrumBin { weight: 0.3, tissue_scale: 1.0, metal_scale: 1.6 },
                SpectrumBin { weight: 0.5, tissue_scale: 1.0, metal_scale: 1.0 },
                SpectrumBin { weight: 0.2, tissue_scale: 1.0, metal_scale: 0.55 },
            ],
        }
    }
}

impl Spectrum {
    /// Single reference bin; the monochromatic limit.
    pub fn monochromatic() -> Self {
        Self {
            bins: vec![SpectrumBin { weight: 1.0, tissue_scale: 1.0, metal_scale: 1.0 }],
        }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.bins.is_empty() {
            return Err(SimulateError::BadSpectrum("no energy bins"));
        }
        let total: f32 = self.bins.iter().map(|b| b.weight).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(SimulateError::BadSpectrum("weights must sum to 1"));
        }
        if self.bins.iter().any(|b| b.weight <= 0.0) {
            return Err(SimulateError::BadSpectrum("weights must be positive"));
        }
        if self
            .bins
            .windows(2)
            .any(|w| w[1].metal_scale >= w[0].metal_scale)
        {
            return Err(SimulateError::BadSpectrum(
                "metal scales must strictly decrease with energy",
            ));
        }
        if self
            .bins
            .iter()
            .any(|b| !(0.9..=1.1).contains(&b.tissue_scale))
        {
            return Err(SimulateError::BadSpectrum("tissue scales must be in [0.9, 1.1]"));
        }
        Ok(())
    }
}

/// Synthesizes a metal-corrupted sinogram from a clean HU image and a metal
/// mask: tissue inside the mask is replaced by `metal_mu`, then the
/// polychromatic Beer-Lambert mixture is evaluated per bin:
///
/// S(i,k) = -ln sum_e w_e exp(-(t_e P(mu_tissue) + m_e P(metal))(i,k))
///
/// With a single unit bin this reduces to the monochromatic projection of the
/// metal-inserted image.
pub fn synthesize_metal_sinogram(
    clean: &Image,
    mask: &MetalMask,
    spectrum: &Spectrum,
    metal_mu: f32,
    geom: &Geometry,
) -> Result<Sinogram, SimulateError> {
    assert_eq!(clean.unit, Unit::Hu, "clean image must be HU");
    if mask.is_empty() {
        return Err(SimulateError::EmptyMask);
    }
    spectrum.validate()?;

    let (h, w) = clean.dims();
    let mu = hu_to_mu(clean);
    let mut tissue = mu.tensor.into_data();
    let mut metal = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.0.get(r, c) {
                tissue[r * w + c] = 0.0;
                metal[r * w + c] = metal_mu;
            }
        }
    }
    let p_tissue = projector::forward_project_tensor(
        &Tensor::new(vec![h, w], tissue).expect("finite"),
        geom,
    )?;
    let p_metal = projector::forward_project_tensor(
        &Tensor::new(vec![h, w], metal).expect("finite"),
        geom,
    )?;

    let (n, d) = geom.sinogram_shape();
    let mut out = Vec::with_capacity(n * d);
    for (pt, pm) in p_tissue.tensor.data().iter().zip(p_metal.tensor.data()) {
        let mut transmitted = 0.0f64;
        for bin in &spectrum.bins {
            let atten = bin.tissue_scale as f64 * *pt as f64 + bin.metal_scale as f64 * *pm as f64;
            transmitted += bin.weight as f64 * (-atten).exp();
        }
        out.push(-(transmitted.ln()) as f32);
    }
    Ok(Sinogram::new(Tensor::new(vec![n, d], out).expect("finite")))
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Threshold segmentation of metal from a reconstructed HU image.
pub fn segment_metal(image: &Image, threshold_hu: f32) -> MetalMask {
    assert_eq!(image.unit, Unit::Hu, "segmentation operates on HU images");
    let (h, w) = image.dims();
    MetalMask(BitGrid::from_fn(h, w, |r, c| {
        image.tensor.at2(r, c) > threshold_hu
    }))
}
