//! Spatial filtering primitives with replicate (edge-clamp) padding.
//!
//! Shared by the Gaussian low-frequency extractor, the filtering attacks, and
//! the perceptual-threshold map. Replicate padding avoids the dark halos that
//! zero padding would inject into low-frequency bands.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sampled, normalized 1D Gaussian kernel of odd length `k`.
pub fn gaussian_kernel_1d(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd, got {k}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let half = (k / 2) as isize;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    Ok(kernel)
}

/// Default sigma for a given Gaussian kernel size when none is specified
/// (the common `0.3 * ((k - 1) / 2 - 1) + 0.8` rule).
pub fn default_gaussian_sigma(k: usize) -> f64 {
    0.3 * (((k - 1) as f64) * 0.5 - 1.0) + 0.8
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Horizontal pass of a separable filter with replicate padding.
fn filter_rows(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let half = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = clamp_index(j as isize + t as isize - half, w);
                acc += kv * src[[i, jj]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Vertical pass of a separable filter with replicate padding.
fn filter_cols(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let half = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = clamp_index(i as isize + t as isize - half, h);
                acc += kv * src[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Separable filter: applies `kernel` along rows then columns.
pub fn separable_filter(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    filter_cols(&filter_rows(src, kernel), kernel)
}

/// Adjoint of the horizontal pass: scatter-add with the same index clamping.
fn filter_rows_adjoint(grad: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = grad.dim();
    let half = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gv = grad[[i, j]];
            for (t, &kv) in kernel.iter().enumerate() {
                let jj = clamp_index(j as isize + t as isize - half, w);
                out[[i, jj]] += kv * gv;
            }
        }
    }
    out
}

/// Adjoint of the vertical pass.
fn filter_cols_adjoint(grad: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = grad.dim();
    let half = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gv = grad[[i, j]];
            for (t, &kv) in kernel.iter().enumerate() {
                let ii = clamp_index(i as isize + t as isize - half, h);
                out[[ii, j]] += kv * gv;
            }
        }
    }
    out
}

/// Adjoint of [`separable_filter`]: rows-adjoint of cols-adjoint.
pub fn separable_filter_adjoint(grad: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    filter_rows_adjoint(&filter_cols_adjoint(grad, kernel), kernel)
}

/// Gaussian blur with replicate padding.
pub fn gaussian_blur(src: &Array2<f64>, k: usize, sigma: f64) -> Result<Array2<f64>> {
    Ok(separable_filter(src, &gaussian_kernel_1d(k, sigma)?))
}

/// k x k mean (box) filter with replicate padding.
pub fn mean_filter(src: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "mean filter kernel must be odd, got {k}"
        )));
    }
    let kernel = vec![1.0 / k as f64; k];
    Ok(separable_filter(src, &kernel))
}

/// k x k median filter with replicate padding.
pub fn median_filter(src: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "median filter kernel must be odd, got {k}"
        )));
    }
    let (h, w) = src.dim();
    let half = (k / 2) as isize;
    let mut out = Array2::zeros((h, w));
    let mut window = Vec::with_capacity(k * k);
    for i in 0..h {
        for j in 0..w {
            window.clear();
            for di in -half..=half {
                for dj in -half..=half {
                    let ii = clamp_index(i as isize + di, h);
                    let jj = clamp_index(j as isize + dj, w);
                    window.push(src[[ii, jj]]);
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
            out[[i, j]] = window[window.len() / 2];
        }
    }
    Ok(out)
}

/// Central-difference gradient magnitude with replicate padding.
pub fn gradient_magnitude(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gx = 0.5
                * (src[[i, clamp_index(j as isize + 1, w)]]
                    - src[[i, clamp_index(j as isize - 1, w)]]);
            let gy = 0.5
                * (src[[clamp_index(i as isize + 1, h), j]]
                    - src[[clamp_index(i as isize - 1, h), j]]);
            out[[i, j]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}
