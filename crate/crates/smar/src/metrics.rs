//! Image-quality metrics: RMSE in Hounsfield units and SSIM, plus batch
//! evaluation with a JSON report.

use crate::domain::{Image, MetalMask, Unit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what} shape {actual:?} does not match {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("every pixel is excluded from the metric")]
    AllPixelsExcluded,
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    ImageTooSmall(usize, usize, usize),
    #[error("dynamic range must be positive, got {0}")]
    BadDynamicRange(f64),
    #[error("metric expects HU images")]
    UnitMismatch,
    #[error("no cases to evaluate")]
    NoCases,
    #[error("pipeline failed on case {id}: {message}")]
    PipelineFailed { id: String, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Root mean square error over pixels not excluded by the mask,
/// f64-accumulated.
pub fn rmse_hu(pred: &Image, reference: &Image, exclude: &MetalMask) -> Result<f64, MetricsError> {
    if pred.unit != Unit::Hu || reference.unit != Unit::Hu {
        return Err(MetricsError::UnitMismatch);
    }
    if pred.dims() != reference.dims() {
        return Err(MetricsError::ShapeMismatch {
            what: "prediction",
            expected: reference.dims(),
            actual: pred.dims(),
        });
    }
    if exclude.dims() != reference.dims() {
        return Err(MetricsError::ShapeMismatch {
            what: "exclusion mask",
            expected: reference.dims(),
            actual: exclude.dims(),
        });
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ((p, r), &m) in pred
        .tensor
        .data()
        .iter()
        .zip(reference.tensor.data())
        .zip(exclude.0.bits())
    {
        if m {
            continue;
        }
        let d = *p as f64 - *r as f64;
        acc += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::AllPixelsExcluded);
    }
    Ok((acc / count as f64).sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5) and
/// constants K1 = 0.01, K2 = 0.03, evaluated over fully interior windows.
pub fn ssim(pred: &Image, reference: &Image, dynamic_range: f64) -> Result<f64, MetricsError> {
    if pred.unit != Unit::Hu || reference.unit != Unit::Hu {
        return Err(MetricsError::UnitMismatch);
    }
    if pred.dims() != reference.dims() {
        return Err(MetricsError::ShapeMismatch {
            what: "prediction",
            expected: reference.dims(),
            actual: pred.dims(),
        });
    }
    if !(dynamic_range > 0.0) {
        return Err(MetricsError::BadDynamicRange(dynamic_range));
    }
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall(h, w, SSIM_WINDOW));
    }

    let window = gaussian_window();
    let x: Vec<f64> = pred.tensor.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.tensor.data().iter().map(|&v| v as f64).collect();

    // Separable Gaussian filtering of x, y, x^2, y^2, xy.
    let filt = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..=w - SSIM_WINDOW {
                let mut acc = 0.0;
                for (k, wk) in window.iter().enumerate() {
                    acc += wk * src[r * w + c + k];
                }
                tmp[r * w + c] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for r in 0..=h - SSIM_WINDOW {
            for c in 0..=w - SSIM_WINDOW {
                let mut acc = 0.0;
                for (k, wk) in window.iter().enumerate() {
                    acc += wk * tmp[(r + k) * w + c];
                }
                out[r * w + c] = acc;
            }
        }
        out
    };

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

    let mu_x = filt(&x);
    let mu_y = filt(&y);
    let m_xx = filt(&xx);
    let m_yy = filt(&yy);
    let m_xy = filt(&xy);

    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);

    let mut acc = 0.0f64;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let i = r * w + c;
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = m_xx[i] - mx * mx;
            let vy = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

/// One synthetic evaluation case: a corrupted sinogram, the reference
/// reconstruction of the clean sinogram, and the true metal mask used to
/// exclude meaningless pixels from RMSE.
pub struct EvalCase {
    pub id: String,
    pub s_ma: crate::domain::Sinogram,
    pub reference: Image,
    pub metal: MetalMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub rmse_hu: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_rmse_hu: f64,
    pub std_rmse_hu: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let n = cases.len() as f64;
        let mean_rmse = cases.iter().map(|c| c.rmse_hu).sum::<f64>() / n;
        let var =
            cases.iter().map(|c| (c.rmse_hu - mean_rmse).powi(2)).sum::<f64>() / n;
        let mean_ssim = cases.iter().map(|c| c.ssim).sum::<f64>() / n;
        Self {
            cases,
            mean_rmse_hu: mean_rmse,
            std_rmse_hu: var.sqrt(),
            mean_ssim,
        }
    }
}

/// Runs `pipeline` on every case, scores it against the reference (RMSE
/// excluding metal pixels; SSIM over the reference data range), and
/// optionally writes the JSON report. Cases are processed in parallel but
/// aggregated in input order.
pub fn evaluate_cases<F>(
    cases: &[EvalCase],
    pipeline: F,
    report_path: Option<&Path>,
) -> Result<EvalReport, MetricsError>
where
    F: Fn(&EvalCase) -> Result<Image, String> + Sync,
{
    if cases.is_empty() {
        return Err(MetricsError::NoCases);
    }
    let metrics: Vec<CaseMetrics> = cases
        .par_iter()
        .map(|case| {
            let out = pipeline(case).map_err(|message| MetricsError::PipelineFailed {
                id: case.id.clone(),
                message,
            })?;
            let rmse = rmse_hu(&out, &case.reference, &case.metal)?;
            let range = data_range(&case.reference);
            let s = ssim(&out, &case.reference, range)?;
            Ok(CaseMetrics {
                id: case.id.clone(),
                rmse_hu: rmse,
                ssim: s,
            })
        })
        .collect::<Result<_, MetricsError>>()?;

    let report = EvalReport::from_cases(metrics);
    if let Some(path) = report_path {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Data range of an image, floored to 1 HU to keep SSIM defined on constant
/// images.
pub fn data_range(image: &Image) -> f64 {
    let lo = image.tensor.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = image.tensor.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    ((hi - lo) as f64).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BitGrid;
    use crate::tensor::Tensor;

    fn img(data: Vec<f32>, h: usize, w: usize) -> Image {
        Image::new(Tensor::new(vec![h, w], data).unwrap(), Unit::Hu)
    }

    fn empty_mask(h: usize, w: usize) -> MetalMask {
        MetalMask(BitGrid::new(h, w))
    }

    #[test]
    fn rmse_basic_cases() {
        let a = img(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(rmse_hu(&a, &a, &empty_mask(2, 2)).unwrap(), 0.0);

        let b = img(vec![11.0, 12.0, 13.0, 14.0], 2, 2);
        assert!((rmse_hu(&b, &a, &empty_mask(2, 2)).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_matches_scalar_reference() {
        let p = img(vec![0.5, -3.0, 7.0, 2.0, 0.0, 1.0], 2, 3);
        let r = img(vec![0.0, -1.0, 7.5, 2.0, -2.0, 1.5], 2, 3);
        let mut mask = BitGrid::new(2, 3);
        mask.set(0, 1, true);
        let got = rmse_hu(&p, &r, &MetalMask(mask)).unwrap();
        let expect = ((0.25 + 0.25 + 0.0 + 4.0 + 0.25) / 5.0f64).sqrt();
        assert!((got - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn rmse_is_symmetric_and_detects_exclusion() {
        let p = img(vec![1.0, 5.0, 2.0, 8.0], 2, 2);
        let r = img(vec![2.0, 3.0, 2.0, 9.0], 2, 2);
        let m = empty_mask(2, 2);
        assert_eq!(rmse_hu(&p, &r, &m).unwrap(), rmse_hu(&r, &p, &m).unwrap());

        let all = MetalMask(BitGrid::from_fn(2, 2, |_, _| true));
        assert!(matches!(
            rmse_hu(&p, &r, &all).unwrap_err(),
            MetricsError::AllPixelsExcluded
        ));
    }

    fn structured(h: usize, w: usize) -> Image {
        Image::new(
            Tensor::from_fn2(h, w, |r, c| {
                (((r as f32 * 0.7).sin() + (c as f32 * 0.4).cos()) * 100.0) as f32
            }),
            Unit::Hu,
        )
    }

    #[test]
    fn ssim_self_is_one() {
        let x = structured(24, 24);
        let s = ssim(&x, &x, data_range(&x)).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "self-SSIM {s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = structured(20, 20);
        let y = Image::new(
            Tensor::from_fn2(20, 20, |r, c| x.tensor.at2(r, c) * 0.8 + 12.0),
            Unit::Hu,
        );
        let range = data_range(&x);
        let a = ssim(&x, &y, range).unwrap();
        let b = ssim(&y, &x, range).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_detects_structure_inversion() {
        // Zero-mean structure z, reference 300 + z, prediction 300 - z
        // (pred = -ref + constant): local means agree, local covariance is
        // -var(z), so every window scores negative.
        let x = structured(24, 24);
        let mean: f32 = x.tensor.data().iter().sum::<f32>() / x.tensor.len() as f32;
        let reference = Image::new(
            Tensor::new(
                vec![24, 24],
                x.tensor.data().iter().map(|v| 300.0 + (v - mean)).collect(),
            )
            .unwrap(),
            Unit::Hu,
        );
        let inv = Image::new(
            Tensor::new(
                vec![24, 24],
                x.tensor.data().iter().map(|v| 300.0 - (v - mean)).collect(),
            )
            .unwrap(),
            Unit::Hu,
        );
        let s = ssim(&inv, &reference, data_range(&reference)).unwrap();
        assert!(s < 0.0, "inverted structure must score negative, got {s}");
    }

    #[test]
    fn ssim_constant_images_match_luminance_closed_form() {
        let h = 16;
        let (a, b) = (100.0f64, 140.0f64);
        let x = img(vec![a as f32; h * h], h, h);
        let y = img(vec![b as f32; h * h], h, h);
        let range = 200.0;
        let c1 = (SSIM_K1 * range).powi(2);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&x, &y, range).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_range() {
        let x = structured(8, 8);
        assert!(matches!(
            ssim(&x, &x, 100.0).unwrap_err(),
            MetricsError::ImageTooSmall(8, 8, 11)
        ));
        let y = structured(16, 16);
        assert!(matches!(
            ssim(&y, &y, 0.0).unwrap_err(),
            MetricsError::BadDynamicRange(_)
        ));
    }

    #[test]
    fn evaluate_identity_pipeline_is_perfect() {
        let geom = crate::geometry::Geometry::parallel(16, 23, (16, 16), 1.0, 1.0).unwrap();
        let reference = structured(16, 16);
        let cases = vec![EvalCase {
            id: "case0".into(),
            s_ma: crate::domain::Sinogram::zeros(&geom),
            reference: reference.clone(),
            metal: empty_mask(16, 16),
        }];
        let report =
            evaluate_cases(&cases, |c| Ok(c.reference.clone()), None).unwrap();
        assert_eq!(report.cases.len(), 1);
        assert_eq!(report.cases[0].rmse_hu, 0.0);
        assert!((report.cases[0].ssim - 1.0).abs() < 1e-9);
        // Single case: aggregate equals the case.
        assert_eq!(report.mean_rmse_hu, 0.0);
        assert_eq!(report.std_rmse_hu, 0.0);
    }

    #[test]
    fn evaluation_order_does_not_change_values() {
        let reference = structured(16, 16);
        let noisy = Image::new(
            Tensor::from_fn2(16, 16, |r, c| reference.tensor.at2(r, c) + ((r * c) % 5) as f32),
            Unit::Hu,
        );
        let geom = crate::geometry::Geometry::parallel(16, 23, (16, 16), 1.0, 1.0).unwrap();
        let make_case = |id: &str| EvalCase {
            id: id.into(),
            s_ma: crate::domain::Sinogram::zeros(&geom),
            reference: reference.clone(),
            metal: empty_mask(16, 16),
        };
        let cases = vec![make_case("a"), make_case("b"), make_case("c")];
        let rev_cases = vec![make_case("c"), make_case("b"), make_case("a")];
        let run = |cs: &[EvalCase]| {
            evaluate_cases(cs, |_| Ok(noisy.clone()), None).unwrap()
        };
        let fwd = run(&cases);
        let rev = run(&rev_cases);
        assert_eq!(fwd.mean_rmse_hu.to_bits(), rev.mean_rmse_hu.to_bits());
        for (x, y) in fwd.cases.iter().zip(rev.cases.iter().rev()) {
            assert_eq!(x.rmse_hu.to_bits(), y.rmse_hu.to_bits());
        }
    }

    #[test]
    fn report_json_shape() {
        let reference = structured(16, 16);
        let geom = crate::geometry::Geometry::parallel(16, 23, (16, 16), 1.0, 1.0).unwrap();
        let cases = vec![EvalCase {
            id: "c0".into(),
            s_ma: crate::domain::Sinogram::zeros(&geom),
            reference: reference.clone(),
            metal: empty_mask(16, 16),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        evaluate_cases(&cases, |c| Ok(c.reference.clone()), Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["cases"].is_array());
        assert!(v["cases"][0]["rmse_hu"].is_number());
        assert!(v["cases"][0]["ssim"].is_number());
        assert!(v["mean_rmse_hu"].is_number());
        assert!(v["std_rmse_hu"].is_number());
        assert!(v["mean_ssim"].is_number());
    }
}
