//! The pixel-domain image type: a 3-channel floating-point raster in [0, 1].
//!
//! All modules exchange images in this form; 8-bit quantization happens only
//! at file boundaries (PNG/JPEG) and inside the JPEG attack.

use ndarray::{Array3, Axis};
use std::path::Path;

use crate::error::{Error, Result};

/// 3-channel floating-point raster, shape (3, H, W), values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub(crate) data: Array3<f64>,
}

impl Image {
    /// Wrap a raster, validating the channel count, finiteness, and range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput("image pixels outside [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Wrap a raster that may stray outside [0, 1], clamping it in.
    /// Non-finite values are still rejected.
    pub fn from_raster_clamped(mut data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self { data })
    }

    /// Uniform image of the given value.
    pub fn constant(value: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// BT.601 luma, shape (H, W).
    pub fn luma(&self) -> ndarray::Array2<f64> {
        let r = self.data.index_axis(Axis(0), 0);
        let g = self.data.index_axis(Axis(0), 1);
        let b = self.data.index_axis(Axis(0), 2);
        let mut y = r.to_owned();
        y.zip_mut_with(&g, |y, &g| *y = 0.299 * *y + 0.587 * g);
        y.zip_mut_with(&b, |y, &b| *y += 0.114 * b);
        y
    }

    /// Quantize to interleaved 8-bit RGB, rounding half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; h * w * 3];
        for c in 0..3 {
            let ch = self.data.index_axis(Axis(0), c);
            for i in 0..h {
                for j in 0..w {
                    out[(i * w + j) * 3 + c] = (ch[[i, j]] * 255.0).round() as u8;
                }
            }
        }
        out
    }

    /// Build from interleaved 8-bit RGB.
    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "rgb8 buffer length {} does not match {}x{}x3",
                bytes.len(),
                height,
                width
            )));
        }
        let mut data = Array3::zeros((3, height, width));
        for i in 0..height {
            for j in 0..width {
                for c in 0..3 {
                    data[[c, i, j]] = bytes[(i * width + j) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Ok(Self { data })
    }

    /// Load from a PNG/JPEG file, converting to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(img.as_raw(), h as usize, w as usize)
    }

    /// Write as PNG (lossless).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.to_rgb8(),
        )
        .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resize to (height, width).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize target must be non-zero".into()));
        }
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let rows = bilinear_axis_weights(self.height(), height);
        let cols = bilinear_axis_weights(self.width(), width);
        let mut out = Array3::zeros((3, height, width));
        for c in 0..3 {
            let src = self.data.index_axis(Axis(0), c);
            for (i, &(r0, r1, rf)) in rows.iter().enumerate() {
                for (j, &(c0, c1, cf)) in cols.iter().enumerate() {
                    let v = src[[r0, c0]] * (1.0 - rf) * (1.0 - cf)
                        + src[[r0, c1]] * (1.0 - rf) * cf
                        + src[[r1, c0]] * rf * (1.0 - cf)
                        + src[[r1, c1]] * rf * cf;
                    out[[c, i, j]] = v;
                }
            }
        }
        Image::from_raster_clamped(out)
    }
}

/// Per-output-index sampling weights for bilinear resampling along one axis
/// (half-pixel centers, clamped at the borders). Returns (i0, i1, frac) with
/// `out = in[i0] * (1 - frac) + in[i1] * frac`.
pub(crate) fn bilinear_axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let clamped = center.clamp(0.0, (in_len - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

/// Peak signal-to-noise ratio in dB between two equally-shaped images,
/// capped at `PSNR_CAP` for the zero-MSE case.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::InvalidArgument("psnr: shape mismatch".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Reported PSNR for identical images (avoids infinities in reports).
pub const PSNR_CAP: f64 = 99.0;
