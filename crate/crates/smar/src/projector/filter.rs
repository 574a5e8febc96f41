//! Frequency-domain ramp filter for filtered backprojection.
//!
//! The filter is built as the DFT of the circularly-even discrete Ram-Lak
//! impulse response on a zero-padded length (next power of two at least 2D),
//! which leaves a small positive DC bin instead of zeroing it; zero DC causes
//! a cupped reconstruction. The response is real and even in frequency, so
//! applying the filter is a self-adjoint linear map on each view.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterWindow {
    RamLak,
    Hann,
}

pub struct RampFilter {
    response: Vec<f64>,
    padded_len: usize,
    num_detectors: usize,
    spacing: f64,
    window: FilterWindow,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    /// Builds the filter for rows of `num_detectors` bins sampled `spacing`
    /// millimetres apart.
    pub fn new(num_detectors: usize, spacing: f64, window: FilterWindow) -> Self {
        assert!(num_detectors >= 2 && spacing > 0.0);
        let padded_len = (2 * num_detectors).next_power_of_two();
        let l = padded_len;

        // Discrete Ram-Lak impulse response, circularly even on length l.
        let mut h = vec![0.0f64; l];
        h[0] = 1.0 / (4.0 * spacing * spacing);
        let mut n = 1usize;
        while n < l / 2 {
            let v = -1.0 / (std::f64::consts::PI * n as f64 * spacing).powi(2);
            h[n] = v;
            h[l - n] = v;
            n += 2;
        }

        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(l);
        let inv = planner.plan_fft_inverse(l);

        let mut buf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fwd.process(&mut buf);
        let mut response: Vec<f64> = buf.iter().map(|c| c.re).collect();

        if window == FilterWindow::Hann {
            let half = (l / 2) as f64;
            for (j, r) in response.iter_mut().enumerate() {
                let k = j.min(l - j) as f64;
                *r *= 0.5 * (1.0 + (std::f64::consts::PI * k / half).cos());
            }
        }

        Self {
            response,
            padded_len,
            num_detectors,
            spacing,
            window,
            fwd,
            inv,
        }
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    pub fn window(&self) -> FilterWindow {
        self.window
    }

    /// Convolves one view row with the ramp kernel (times the detector
    /// spacing, approximating the continuous convolution integral).
    pub fn apply_row(&self, row: &mut [f64]) {
        assert_eq!(row.len(), self.num_detectors);
        let l = self.padded_len;
        let mut buf = vec![Complex::new(0.0, 0.0); l];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(self.response.iter()) {
            *b *= r;
        }
        self.inv.process(&mut buf);
        let norm = self.spacing / l as f64;
        for (v, b) in row.iter_mut().zip(buf.iter()) {
            *v = b.re * norm;
        }
    }
}
