//! Full-image quality metrics on the `[0, 255]` float scale.

mod report;
mod ssim;
mod uqi;

pub use report::{evaluate, EvalConfig, MetricReport, MetricRow};
pub use ssim::{ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use uqi::{uqi, UQI_EPS, UQI_WINDOW};

use crate::{Error, Result};

/// Dynamic range used by PSNR and SSIM.
pub const PEAK: f64 = 255.0;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Maps signed `[-1, 1]` values onto `[0, 255]`.
pub fn signed_to_255(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| (v + 1.0) * 0.5 * PEAK).collect()
}

pub(crate) fn check_pair(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<()> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::Shape(format!(
            "metric inputs of {} and {} values for a {height}x{width} image",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse inputs differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    psnr_from_mse(mse(a, b))
}
