//! The signal-processing attack suite, the built-in random-dropout edit, and
//! the adapter contract for external editing attacks.
//!
//! Every attack maps an image in [0, 1] to an image in [0, 1]. Stochastic
//! attacks are reproducible: the same (image, spec, seed) yields the same
//! output. Noise is added in floating point and clamped afterwards; only the
//! JPEG attack quantizes through 8-bit samples, because the codec is defined
//! on them.

use std::io::Cursor;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ExternalError, Result};
use crate::filters;
use crate::image::Image;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

fn default_dropout_min() -> f64 {
    0.10
}
fn default_dropout_max() -> f64 {
    0.30
}

/// Attack family plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    Identity,
    /// i.i.d. N(0, sigma^2) added per sample.
    GaussianNoise { sigma: f64 },
    /// A `density` fraction of pixels forced to 0 or 1 with equal probability.
    SaltPepper { density: f64 },
    /// Round trip through a standards-compliant JPEG codec.
    Jpeg { quality: u8 },
    /// Affine stretch about mid-gray: p -> (p - 0.5) * (1 + factor) + 0.5.
    Contrast { factor: f64 },
    /// Multiplicative gain: p -> p * (1 + factor).
    Brightness { factor: f64 },
    /// k x k Gaussian blur, replicate padding, sigma from the kernel size.
    GaussianFilter { kernel: usize },
    /// k x k box blur, replicate padding.
    MeanFilter { kernel: usize },
    /// k x k median, replicate padding.
    MedianFilter { kernel: usize },
    /// Zero out a random axis-aligned rectangle covering a fraction of the
    /// area drawn uniformly from [min_fraction, max_fraction].
    RandomDropout {
        #[serde(default = "default_dropout_min")]
        min_fraction: f64,
        #[serde(default = "default_dropout_max")]
        max_fraction: f64,
    },
    /// Defer to a configured external editing command.
    External { adapter: String },
}

impl AttackKind {
    /// Short stable label used in report rows and file names.
    pub fn label(&self) -> String {
        match self {
            AttackKind::Identity => "identity".into(),
            AttackKind::GaussianNoise { sigma } => format!("gaussian_noise(sigma={sigma})"),
            AttackKind::SaltPepper { density } => format!("salt_pepper(d={density})"),
            AttackKind::Jpeg { quality } => format!("jpeg(q={quality})"),
            AttackKind::Contrast { factor } => format!("contrast(r={factor})"),
            AttackKind::Brightness { factor } => format!("brightness(r={factor})"),
            AttackKind::GaussianFilter { kernel } => format!("gaussian_filter(k={kernel})"),
            AttackKind::MeanFilter { kernel } => format!("mean_filter(k={kernel})"),
            AttackKind::MedianFilter { kernel } => format!("median_filter(k={kernel})"),
            AttackKind::RandomDropout { min_fraction, max_fraction } => {
                format!("random_dropout({min_fraction}..{max_fraction})")
            }
            AttackKind::External { adapter } => format!("external({adapter})"),
        }
    }
}

/// An attack instance: kind, parameters, and an optional seed for the
/// stochastic ones. (`deny_unknown_fields` cannot combine with `flatten`;
/// unknown keys are still rejected by the tagged params enum.)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self { kind, seed: None }
    }

    pub fn with_seed(kind: AttackKind, seed: u64) -> Self {
        Self { kind, seed: Some(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            AttackKind::Identity => {}
            AttackKind::GaussianNoise { sigma } => {
                if sigma <= 0.0 {
                    return err(format!("gaussian noise sigma must be > 0, got {sigma}"));
                }
            }
            AttackKind::SaltPepper { density } => {
                if !(density > 0.0 && density < 1.0) {
                    return err(format!("salt-pepper density must be in (0,1), got {density}"));
                }
            }
            AttackKind::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return err(format!("jpeg quality must be in [1,100], got {quality}"));
                }
            }
            AttackKind::Contrast { factor } | AttackKind::Brightness { factor } => {
                if !(factor > -1.0 && factor < 1.0) {
                    return err(format!("photometric factor must be in (-1,1), got {factor}"));
                }
            }
            AttackKind::GaussianFilter { kernel }
            | AttackKind::MeanFilter { kernel }
            | AttackKind::MedianFilter { kernel } => {
                if kernel < 3 || kernel % 2 == 0 {
                    return err(format!("filter kernel must be odd and >= 3, got {kernel}"));
                }
            }
            AttackKind::RandomDropout { min_fraction, max_fraction } => {
                if !(min_fraction > 0.0
                    && min_fraction <= max_fraction
                    && max_fraction < 1.0)
                {
                    return err(format!(
                        "dropout fraction range must satisfy 0 < min <= max < 1, got {min_fraction}..{max_fraction}"
                    ));
                }
            }
            AttackKind::External { ref adapter } => {
                if adapter.is_empty() {
                    return err("external adapter name must be non-empty".into());
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Built-in attacks
// ---------------------------------------------------------------------------

fn rng_for(spec: &AttackSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0))
}

/// Apply a built-in attack. `External` kinds must go through
/// [`run_external`] with a configured adapter and are rejected here.
pub fn apply(image: &Image, spec: &AttackSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    match spec.kind {
        AttackKind::Identity => Ok(image.clone()),
        AttackKind::GaussianNoise { sigma } => {
            let mut rng = rng_for(spec);
            let normal = Normal::new(0.0, sigma).expect("sigma validated");
            let mut data = image.data().clone();
            data.mapv_inplace(|v| v + normal.sample(&mut rng));
            Image::from_raster_clamped(data)
        }
        AttackKind::SaltPepper { density } => {
            let mut rng = rng_for(spec);
            let mut data = image.data().clone();
            for i in 0..h {
                for j in 0..w {
                    if rng.gen_bool(density) {
                        let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                        for c in 0..3 {
                            data[[c, i, j]] = v;
                        }
                    }
                }
            }
            Image::new(data)
        }
        AttackKind::Jpeg { quality } => jpeg_round_trip(image, quality),
        AttackKind::Contrast { factor } => {
            let mut data = image.data().clone();
            data.mapv_inplace(|p| (p - 0.5) * (1.0 + factor) + 0.5);
            Image::from_raster_clamped(data)
        }
        AttackKind::Brightness { factor } => {
            let mut data = image.data().clone();
            data.mapv_inplace(|p| p * (1.0 + factor));
            Image::from_raster_clamped(data)
        }
        AttackKind::GaussianFilter { kernel } => {
            let sigma = filters::default_gaussian_sigma(kernel);
            per_channel(image, |ch| filters::gaussian_blur(ch, kernel, sigma))
        }
        AttackKind::MeanFilter { kernel } => per_channel(image, |ch| filters::mean_filter(ch, kernel)),
        AttackKind::MedianFilter { kernel } => {
            per_channel(image, |ch| filters::median_filter(ch, kernel))
        }
        AttackKind::RandomDropout { min_fraction, max_fraction } => {
            let mut rng = rng_for(spec);
            let fraction = rng.gen_range(min_fraction..=max_fraction);
            // Aspect jitter, then solve for the rectangle that hits the area.
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let area = fraction * (h * w) as f64;
            let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let rw = ((area / rh as f64).round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            let mut data = image.data().clone();
            for c in 0..3 {
                for i in y0..y0 + rh {
                    for j in x0..x0 + rw {
                        data[[c, i, j]] = 0.0;
                    }
                }
            }
            Image::new(data)
        }
        AttackKind::External { ref adapter } => Err(ExternalError::Launch(format!(
            "external attack '{adapter}' requires a configured adapter"
        ))
        .into()),
    }
}

fn per_channel(
    image: &Image,
    f: impl Fn(&ndarray::Array2<f64>) -> Result<ndarray::Array2<f64>>,
) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        let ch = image.data().index_axis(Axis(0), c).to_owned();
        out.index_axis_mut(Axis(0), c).assign(&f(&ch)?);
    }
    Image::from_raster_clamped(out)
}

fn jpeg_round_trip(image: &Image, quality: u8) -> Result<Image> {
    let rgb = image.to_rgb8();
    let mut encoded = Vec::new();
    let mut encoder =
        image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut encoded), quality);
    encoder.encode(
        &rgb,
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)?
        .into_rgb8();
    if decoded.dimensions() != (image.width() as u32, image.height() as u32) {
        return Err(Error::Internal("jpeg round trip changed dimensions".into()));
    }
    Image::from_rgb8(decoded.as_raw(), image.height(), image.width())
}

// ---------------------------------------------------------------------------
// External adapter
// ---------------------------------------------------------------------------

/// Configuration of one external editing command. The command template must
/// contain `{input}` and `{output}` placeholders; it is invoked via the shell
/// with those replaced by PNG paths, must exit zero, and must write an output
/// image with unchanged dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAdapter {
    pub command: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

/// Provenance and timing of one adapter invocation, for run metadata.
/// Latency is wall-clock and intentionally kept out of deterministic reports.
#[derive(Clone, Debug, Serialize)]
pub struct ExternalRunMeta {
    pub adapter: String,
    pub command: String,
    pub latency_ms: u128,
}

/// Run an external editing attack through its adapter.
pub fn run_external(
    image: &Image,
    spec: &AttackSpec,
    adapter: &ExternalAdapter,
) -> Result<(Image, ExternalRunMeta)> {
    let AttackKind::External { adapter: name } = &spec.kind else {
        return Err(Error::InvalidArgument(
            "run_external requires an external attack spec".into(),
        ));
    };
    let dir = tempfile::tempdir()?;
    let in_path = dir.path().join("input.png");
    let out_path = dir.path().join("output.png");
    image.save_png(&in_path)?;

    let command = adapter
        .command
        .replace("{input}", &in_path.display().to_string())
        .replace("{output}", &out_path.display().to_string());

    let started = Instant::now();
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .spawn()
        .map_err(|e| ExternalError::Launch(format!("{command}: {e}")))?;

    let timeout = Duration::from_secs(adapter.timeout_secs);
    let status = loop {
        match child.try_wait().map_err(|e| ExternalError::Launch(e.to_string()))? {
            Some(status) => break status,
            None => {
                if started.elapsed() > timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(ExternalError::Timeout(adapter.timeout_secs).into());
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    };
    if !status.success() {
        return Err(ExternalError::Failed(format!("{command}: {status}")).into());
    }

    let edited = load_external_output(&out_path)?;
    if edited.height() != image.height() || edited.width() != image.width() {
        return Err(ExternalError::SizeMismatch {
            expected: format!("{}x{}", image.height(), image.width()),
            got: format!("{}x{}", edited.height(), edited.width()),
        }
        .into());
    }
    let meta = ExternalRunMeta {
        adapter: name.clone(),
        command: adapter.command.clone(),
        latency_ms: started.elapsed().as_millis(),
    };
    Ok((edited, meta))
}

fn load_external_output(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(ExternalError::MalformedOutput("no output file written".into()).into());
    }
    match Image::load(path) {
        Ok(img) => Ok(img),
        Err(e) => Err(ExternalError::MalformedOutput(e.to_string()).into()),
    }
}
