//! The end-to-end test-time correction procedure.
//!
//! From a metal-corrupted sinogram (or an already reconstructed image, which
//! is forward-projected first): reconstruct, segment metal by threshold,
//! forward-project the mask into a trace, interpolate the trace away, run
//! SinoNet and composite, reconstruct, optionally refine with ImgNet, and
//! finally replace the metal trace with the forward projection of the refined
//! image plus an interpolated residual. Earlier ablation modes stop at their
//! stage and reconstruct from there.

use crate::domain::{Image, MetalMask, MetalTrace, Sinogram};
use crate::geometry::Geometry;
use crate::marops::{self, MarOpsError};
use crate::nn::{imgnet_forward, sinonet_forward, ImgNetModel, NnError, SinoNetModel};
use crate::projector::{self, ProjectorError};
use crate::simulate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    MarOps(#[from] MarOpsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("mode {0} needs an image refinement model, but the checkpoint has none")]
    MissingImgNet(AblationMode),
}

/// The four ablation rows. Earlier modes stop the pipeline earlier; the last
/// two share a checkpoint and differ only in the final reconstruction step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "sinonet")]
    Sinonet,
    #[serde(rename = "sinonet+fbp")]
    SinonetFbp,
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "joint+mtr")]
    JointMtr,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Sinonet,
        AblationMode::SinonetFbp,
        AblationMode::Joint,
        AblationMode::JointMtr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Sinonet => "sinonet",
            AblationMode::SinonetFbp => "sinonet+fbp",
            AblationMode::Joint => "joint",
            AblationMode::JointMtr => "joint+mtr",
        }
    }

    /// Whether inference for this mode runs the refinement network.
    pub fn uses_imgnet(&self) -> bool {
        matches!(self, AblationMode::Joint | AblationMode::JointMtr)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinonet" => Ok(AblationMode::Sinonet),
            "sinonet+fbp" => Ok(AblationMode::SinonetFbp),
            "joint" => Ok(AblationMode::Joint),
            "joint+mtr" => Ok(AblationMode::JointMtr),
            other => Err(format!(
                "unknown mode {other:?} (expected sinonet, sinonet+fbp, joint, joint+mtr)"
            )),
        }
    }
}

pub enum PipelineInput {
    /// A measured (or synthesized) metal-corrupted sinogram.
    Sinogram(Sinogram),
    /// A reconstructed HU image with real artifacts; it is forward-projected
    /// to obtain the working sinogram.
    ImageHu(Image),
}

pub struct PipelineOptions {
    pub mode: AblationMode,
    pub segment_threshold_hu: f32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: AblationMode::JointMtr,
            segment_threshold_hu: simulate::DEFAULT_METAL_THRESHOLD_HU,
        }
    }
}

/// Everything the pipeline produced, including intermediates that invariant
/// checks and reports want to look at.
#[derive(Debug)]
pub struct PipelineOutput {
    /// Final corrected image in HU.
    pub image: Image,
    /// True when segmentation found no metal and the output is the plain
    /// reconstruction of the input.
    pub passthrough: bool,
    pub mask: MetalMask,
    pub trace: Option<MetalTrace>,
    pub s_ma: Sinogram,
    pub s_li: Option<Sinogram>,
    pub s_sn: Option<Sinogram>,
    pub s_corr: Option<Sinogram>,
}

/// Runs the full correction procedure for one input.
pub fn run_mar(
    input: PipelineInput,
    sinonet: &SinoNetModel,
    imgnet: Option<&ImgNetModel>,
    geometry: &Geometry,
    options: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    if options.mode.uses_imgnet() && imgnet.is_none() {
        return Err(PipelineError::MissingImgNet(options.mode));
    }

    let s_ma = match input {
        PipelineInput::Sinogram(s) => s,
        PipelineInput::ImageHu(img) => {
            let mu = simulate::hu_to_mu(&img);
            projector::forward_project(&mu, geometry)?
        }
    };

    let recon_ma = projector::fbp(&s_ma, geometry)?;
    let recon_hu = simulate::mu_to_hu(&recon_ma);
    let mask = simulate::segment_metal(&recon_hu, options.segment_threshold_hu);

    if mask.is_empty() {
        return Ok(PipelineOutput {
            image: recon_hu,
            passthrough: true,
            mask,
            trace: None,
            s_ma,
            s_li: None,
            s_sn: None,
            s_corr: None,
        });
    }

    let trace = marops::compute_trace(&mask, geometry)?;
    let s_zeroed = marops::zero_trace(&s_ma, &trace)?;
    let s_li = marops::li_interpolate(&s_zeroed, &trace)?;

    let raw = sinonet_forward(sinonet, &s_li, &trace)?;
    let s_sn = marops::composite_completion(&raw, &s_li, &trace)?;
    let recon_sn = projector::fbp(&s_sn, geometry)?;

    let (image, s_corr) = match options.mode {
        AblationMode::Sinonet | AblationMode::SinonetFbp => {
            (simulate::mu_to_hu(&recon_sn), None)
        }
        AblationMode::Joint => {
            let x_out = imgnet_forward(imgnet.expect("checked above"), &recon_sn)?;
            (simulate::mu_to_hu(&x_out), None)
        }
        AblationMode::JointMtr => {
            let x_out = imgnet_forward(imgnet.expect("checked above"), &recon_sn)?;
            let s_prior = projector::forward_project(&x_out, geometry)?;
            let s_corr = marops::metal_trace_replacement(&s_li, &s_prior, &trace)?;
            let final_recon = projector::fbp(&s_corr, geometry)?;
            (simulate::mu_to_hu(&final_recon), Some(s_corr))
        }
    };

    Ok(PipelineOutput {
        image,
        passthrough: false,
        mask,
        trace: Some(trace),
        s_ma,
        s_li: Some(s_li),
        s_sn: Some(s_sn),
        s_corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_imgnet, init_sinonet, ImgNetConfig, SinoNetConfig};
    use crate::simulate::{
        make_metal_mask, make_phantom, synthesize_metal_sinogram, MaskShape, MaskSpec,
        PhantomSpec, Spectrum, DEFAULT_METAL_MU,
    };

    fn small_geom() -> Geometry {
        Geometry::parallel(40, 49, (32, 32), 1.0, 1.0).unwrap()
    }

    fn fresh_models() -> (SinoNetModel, ImgNetModel) {
        (
            init_sinonet(&SinoNetConfig { depth: 2, base_channels: 4 }, 1.0, 5),
            init_imgnet(&ImgNetConfig { depth: 2, base_channels: 2 }, 0.0576, 6),
        )
    }

    #[test]
    fn no_metal_passes_through_to_plain_fbp() {
        let geom = small_geom();
        let phantom = make_phantom(&PhantomSpec { seed: 4, ..Default::default() }, &geom);
        let mu = simulate::hu_to_mu(&phantom);
        let sino = projector::forward_project(&mu, &geom).unwrap();

        let (sn, im) = fresh_models();
        let out = run_mar(
            PipelineInput::Sinogram(sino.clone()),
            &sn,
            Some(&im),
            &geom,
            &PipelineOptions::default(),
        )
        .unwrap();
        assert!(out.passthrough);

        let plain = simulate::mu_to_hu(&projector::fbp(&sino, &geom).unwrap());
        let max = out.image.tensor.max_abs_diff(&plain.tensor);
        assert!(max <= 1e-6, "pass-through differs from plain FBP by {max}");
    }

    #[test]
    fn modes_produce_different_outputs_on_a_metal_case() {
        let geom = small_geom();
        let phantom = make_phantom(&PhantomSpec { seed: 9, ..Default::default() }, &geom);
        let mask = make_metal_mask(
            &MaskSpec { seed: 3, shape: MaskShape::Ellipse, pixel_count: (12, 30) },
            &geom,
            &phantom,
        )
        .unwrap();
        let s_ma = synthesize_metal_sinogram(
            &phantom,
            &mask,
            &Spectrum::default(),
            DEFAULT_METAL_MU,
            &geom,
        )
        .unwrap();

        let (sn, im) = fresh_models();
        let run = |mode: AblationMode| {
            run_mar(
                PipelineInput::Sinogram(s_ma.clone()),
                &sn,
                Some(&im),
                &geom,
                &PipelineOptions { mode, ..Default::default() },
            )
            .unwrap()
        };
        let a = run(AblationMode::Sinonet);
        let d = run(AblationMode::JointMtr);
        assert!(!a.passthrough && !d.passthrough);
        assert!(a.image.tensor.max_abs_diff(&d.image.tensor) > 0.0);
    }

    #[test]
    fn mtr_mode_keeps_untraced_bins_bitwise() {
        let geom = small_geom();
        let phantom = make_phantom(&PhantomSpec { seed: 9, ..Default::default() }, &geom);
        let mask = make_metal_mask(
            &MaskSpec { seed: 3, shape: MaskShape::Ellipse, pixel_count: (12, 30) },
            &geom,
            &phantom,
        )
        .unwrap();
        let s_ma = synthesize_metal_sinogram(
            &phantom,
            &mask,
            &Spectrum::default(),
            DEFAULT_METAL_MU,
            &geom,
        )
        .unwrap();

        let (sn, im) = fresh_models();
        let out = run_mar(
            PipelineInput::Sinogram(s_ma),
            &sn,
            Some(&im),
            &geom,
            &PipelineOptions::default(),
        )
        .unwrap();
        let trace = out.trace.unwrap();
        let s_corr = out.s_corr.unwrap();
        let s_li = out.s_li.unwrap();
        let (n, d) = s_corr.dims();
        for v in 0..n {
            for k in 0..d {
                if !trace.0.get(v, k) {
                    assert_eq!(
                        s_corr.tensor.at2(v, k).to_bits(),
                        s_li.tensor.at2(v, k).to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn joint_mode_without_imgnet_is_an_error() {
        let geom = small_geom();
        let (sn, _) = fresh_models();
        let err = run_mar(
            PipelineInput::Sinogram(Sinogram::zeros(&geom)),
            &sn,
            None,
            &geom,
            &PipelineOptions { mode: AblationMode::Joint, ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::MissingImgNet(AblationMode::Joint)));
    }

    #[test]
    fn image_input_is_forward_projected() {
        let geom = small_geom();
        let phantom = make_phantom(&PhantomSpec { seed: 2, ..Default::default() }, &geom);
        let (sn, im) = fresh_models();
        let out = run_mar(
            PipelineInput::ImageHu(phantom.clone()),
            &sn,
            Some(&im),
            &geom,
            &PipelineOptions::default(),
        )
        .unwrap();
        // No metal in the phantom: output is FBP(P(phantom)).
        assert!(out.passthrough);
        let mu = simulate::hu_to_mu(&phantom);
        let expected = simulate::mu_to_hu(
            &projector::fbp(&projector::forward_project(&mu, &geom).unwrap(), &geom).unwrap(),
        );
        assert!(out.image.tensor.max_abs_diff(&expected.tensor) <= 1e-6);
    }
}
