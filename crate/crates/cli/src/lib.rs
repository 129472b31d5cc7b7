//! Command implementations behind the `lowmark` binary.
//!
//! Every command validates its full configuration before doing any work,
//! writes all artifacts under the configured output directory, and never
//! mutates its inputs. Given the same configuration, seed, and dataset,
//! every artifact is byte-identical across runs.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use lowmark::attacks::AttackSpec;
use lowmark::checkpoint::ModelCheckpoint;
use lowmark::codec::{pretrain_tiny_autoencoder, CodecHandle, CodecSpec};
use lowmark::error::Error;
use lowmark::image::Image;
use lowmark::pipeline::{self, WatermarkModel};
use lowmark::stability;
use lowmark::trainer::Trainer;
use lowmark::watermark::WatermarkBits;

pub use config::RunConfig;

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// Command failure with its process exit code. Validation and usage problems
/// exit 2; training non-convergence exits 3; other runtime failures exit 1.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self { exit_code: 2, message }
    }

    pub fn from_validation(e: Error) -> Self {
        Self { exit_code: 2, message: e.to_string() }
    }

    pub fn runtime(message: String) -> Self {
        Self { exit_code: 1, message }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit_code = match &e {
            Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Checkpoint(_) => 2,
            Error::NonConvergence { .. } => 3,
            _ => 1,
        };
        Self { exit_code, message: e.to_string() }
    }
}

pub type CliResult = Result<(), CliError>;

// ---------------------------------------------------------------------------
// Dataset ingestion
// ---------------------------------------------------------------------------

/// Load the configured dataset: a sorted walk of the directory tree resized
/// to the configured square size, or the deterministic synthetic corpus when
/// no directory is configured.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Image>, CliError> {
    let size = cfg.dataset.image_size;
    if cfg.dataset.dir.as_os_str().is_empty() {
        let count = match cfg.dataset.limit {
            0 => cfg.dataset.synthetic_count,
            n => n.min(cfg.dataset.synthetic_count),
        };
        return lowmark::synth::natural_dataset(cfg.seed, count, size, size)
            .map_err(CliError::from);
    }
    if !cfg.dataset.dir.is_dir() {
        return Err(CliError::validation(format!(
            "dataset directory {} does not exist",
            cfg.dataset.dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(&cfg.dataset.dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref ext) if ["png", "jpg", "jpeg"].contains(&ext.as_str())
            )
        })
        .collect();
    paths.sort();
    if cfg.dataset.limit > 0 {
        paths.truncate(cfg.dataset.limit);
    }
    if paths.is_empty() {
        return Err(CliError::validation(format!(
            "dataset directory {} contains no PNG/JPEG images",
            cfg.dataset.dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| Ok(Image::load(p)?.resize_bilinear(size, size)?))
        .collect()
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::runtime(format!("cannot create output dir: {e}")))
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// CSV artifacts carry the config fingerprint as a leading comment line.
fn write_csv_with_fingerprint(path: &Path, fingerprint: &str, csv_body: &[u8]) -> Result<(), CliError> {
    let mut out = Vec::with_capacity(csv_body.len() + 80);
    writeln!(out, "# config_fingerprint={fingerprint}").expect("vec write");
    out.extend_from_slice(csv_body);
    std::fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Codec acquisition
// ---------------------------------------------------------------------------

/// Load or pre-train the configured codec, writing a fresh pre-trained codec
/// to the output directory.
pub fn acquire_codec(cfg: &RunConfig, dataset: &[Image]) -> Result<CodecHandle, CliError> {
    let spec = cfg.codec.spec()?;
    match spec {
        CodecSpec::Identity => Ok(CodecHandle::identity()),
        CodecSpec::ExternalVae { .. } => {
            if cfg.codec.checkpoint.as_os_str().is_empty() {
                return Err(CliError::validation(
                    "codec.kind external_vae requires codec.checkpoint".into(),
                ));
            }
            Ok(CodecHandle::load(&cfg.codec.checkpoint)?)
        }
        CodecSpec::TinyAe { .. } => {
            if !cfg.codec.checkpoint.as_os_str().is_empty() {
                return Ok(CodecHandle::load(&cfg.codec.checkpoint)?);
            }
            let mut pre = cfg.codec.pretrain.clone();
            pre.seed = cfg.seed;
            eprintln!(
                "pre-training tiny codec ({} iterations on {} images)",
                pre.iterations,
                dataset.len()
            );
            let handle = pretrain_tiny_autoencoder(dataset, &cfg.extractor, &spec, &pre)?;
            ensure_output_dir(cfg)?;
            let path = cfg.output_dir.join("codec.lwck");
            handle.save(&path)?;
            eprintln!(
                "codec written to {} (reconstruction rms {:.5})",
                path.display(),
                handle.pretrain_rms.unwrap_or(f64::NAN)
            );
            Ok(handle)
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Frequency-band stability study over the dataset and configured attacks.
pub fn cmd_analyze_stability(cfg: &RunConfig) -> CliResult {
    if cfg.stability.attacks.is_empty() {
        return Err(CliError::validation("stability.attacks must be non-empty".into()));
    }
    let dataset = load_dataset(cfg)?;
    let report = stability::analyze(&dataset, &cfg.stability.attacks, cfg.stability.radius_fraction)?;
    ensure_output_dir(cfg)?;
    let fingerprint = cfg.fingerprint();

    let mut csv = Vec::new();
    stability::write_records_csv(&report, &mut csv)?;
    write_csv_with_fingerprint(&cfg.output_dir.join("stability_records.csv"), &fingerprint, &csv)?;

    let wrapped = serde_json::json!({
        "config_fingerprint": fingerprint,
        "report": report,
    });
    write_text(
        &cfg.output_dir.join("stability_report.json"),
        &serde_json::to_string_pretty(&wrapped).expect("serializable"),
    )?;

    for a in &report.per_attack {
        eprintln!(
            "{}: e_low {:.4} vs e_high {:.4} (p {:?}, skipped {})",
            a.attack, a.mean_e_low, a.mean_e_high, a.low_vs_high.p_value, a.skipped
        );
    }
    if report.skipped_total > 0 {
        eprintln!("warning: {} (image, attack) cells skipped", report.skipped_total);
    }
    Ok(())
}

/// Pre-train the tiny codec and write its parameter file.
pub fn cmd_pretrain_codec(cfg: &RunConfig) -> CliResult {
    let spec = cfg.codec.spec()?;
    if !matches!(spec, CodecSpec::TinyAe { .. }) {
        return Err(CliError::validation(
            "pretrain-codec applies to codec.kind = \"tiny_ae\"".into(),
        ));
    }
    let dataset = load_dataset(cfg)?;
    let mut pre = cfg.codec.pretrain.clone();
    pre.seed = cfg.seed;
    let handle = pretrain_tiny_autoencoder(&dataset, &cfg.extractor, &spec, &pre)?;
    ensure_output_dir(cfg)?;
    let path = cfg.output_dir.join("codec.lwck");
    handle.save(&path)?;
    eprintln!(
        "codec written to {} (reconstruction rms {:.5})",
        path.display(),
        handle.pretrain_rms.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn default_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.lwck")
}

fn snapshot_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("snapshot_latest.lwck")
}

/// Two-stage watermark training; writes the checkpoint and metric log.
/// `resume` continues from the latest snapshot in the output directory.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> CliResult {
    let dataset = load_dataset(cfg)?;
    ensure_output_dir(cfg)?;
    let fingerprint = cfg.fingerprint();

    let mut trainer = if resume {
        let snap = snapshot_path(cfg);
        if !snap.exists() {
            return Err(CliError::validation(format!(
                "no snapshot to resume from at {}",
                snap.display()
            )));
        }
        Trainer::resume(&snap)?
    } else {
        let codec = acquire_codec(cfg, &dataset)?;
        let mut t = Trainer::new(cfg.train_config(), &codec)?;
        t.config_fingerprint = Some(fingerprint.clone());
        t
    };

    let snapshot = (cfg.train.snapshot_interval > 0)
        .then(|| (cfg.output_dir.as_path(), cfg.train.snapshot_interval));
    let mut progress = |row: &lowmark::trainer::MetricRow| {
        if row.iteration % 100 == 0 || row.heldout_bit_accuracy.is_some() {
            eprintln!(
                "iter {:5} stage {} loss_w {:.4} (smoothed {:.4}) heldout {}",
                row.iteration,
                row.stage,
                row.watermark,
                row.smoothed_watermark,
                row.heldout_bit_accuracy
                    .map(|v| format!("{v:.2}%"))
                    .unwrap_or_else(|| "-".into())
            );
        }
    };
    let outcome = trainer.run(&dataset, snapshot, Some(&mut progress));

    // The metric log is written even when training fails so the loss curve
    // survives as an artifact.
    let write_metrics = |ckpt: &ModelCheckpoint| -> CliResult {
        let mut csv = Vec::new();
        ckpt.write_metric_csv(&mut csv)?;
        write_csv_with_fingerprint(&cfg.output_dir.join("metrics.csv"), &fingerprint, &csv)
    };

    match outcome {
        Ok(()) => {
            let ckpt = trainer.into_checkpoint();
            write_metrics(&ckpt)?;
            let path = default_checkpoint_path(cfg);
            ckpt.save(&path)?;
            eprintln!(
                "checkpoint written to {} (stage 1 converged at iteration {:?}, {} total)",
                path.display(),
                ckpt.meta.stage1_iterations,
                ckpt.meta.total_iterations
            );
            Ok(())
        }
        Err(Error::NonConvergence { message, loss_curve }) => {
            let ckpt = trainer.into_checkpoint();
            write_metrics(&ckpt)?;
            write_text(
                &cfg.output_dir.join("loss_curve.json"),
                &serde_json::to_string_pretty(&serde_json::json!({
                    "config_fingerprint": fingerprint,
                    "smoothed_extraction_loss": loss_curve,
                }))
                .expect("serializable"),
            )?;
            Err(CliError { exit_code: 3, message })
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_message(message: &str, expected_len: usize) -> Result<WatermarkBits, CliError> {
    let bits = if message.chars().all(|c| c == '0' || c == '1') && message.len() == expected_len {
        WatermarkBits::from_bitstring(message)
    } else {
        WatermarkBits::from_hex(message)
    }
    .map_err(CliError::from_validation)?;
    if bits.len() != expected_len {
        return Err(CliError::validation(format!(
            "message is {} bits; the model embeds {expected_len}",
            bits.len()
        )));
    }
    Ok(bits)
}

fn load_model(checkpoint: &Path) -> Result<WatermarkModel, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::validation(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    Ok(WatermarkModel::load(checkpoint)?)
}

/// Embed a message into one image; output is always lossless PNG.
pub fn cmd_embed(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    output: &Path,
    message: &str,
) -> CliResult {
    let default_ckpt = default_checkpoint_path(cfg);
    let model = load_model(checkpoint.unwrap_or(&default_ckpt))?;
    let bits = parse_message(message, model.meta.watermark_length)?;
    let image = Image::load(input).map_err(CliError::from_validation)?;
    let size = model.meta.image_size;
    if image.height() != size || image.width() != size {
        eprintln!(
            "note: resizing {}x{} input to the model size {size}x{size}",
            image.height(),
            image.width()
        );
    }
    let image = image.resize_bilinear(size, size)?;
    let watermarked = pipeline::embed(&model, &image, &bits)?;

    let output = enforce_lossless(output);
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    watermarked.save_png(&output)?;
    eprintln!("watermarked image written to {}", output.display());
    Ok(())
}

/// Lossless output is mandatory; lossy extensions are rewritten to .png with
/// a warning.
fn enforce_lossless(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "png" => path.to_path_buf(),
        Some(ext) if ["jpg", "jpeg", "webp"].contains(&ext.as_str()) => {
            let switched = path.with_extension("png");
            eprintln!(
                "warning: lossy output format .{ext} would destroy the watermark; writing {}",
                switched.display()
            );
            switched
        }
        _ => {
            let switched = path.with_extension("png");
            if switched != path {
                eprintln!("note: writing PNG to {}", switched.display());
            }
            switched
        }
    }
}

/// Extract the message from one image; prints bitstring (and hex when the
/// length permits), plus bit accuracy when the true message is supplied.
pub fn cmd_extract(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    input: &Path,
    expect: Option<&str>,
) -> CliResult {
    let default_ckpt = default_checkpoint_path(cfg);
    let model = load_model(checkpoint.unwrap_or(&default_ckpt))?;
    let image = Image::load(input).map_err(CliError::from_validation)?;
    let size = model.meta.image_size;
    let image = image.resize_bilinear(size, size)?;
    let bits = pipeline::extract(&model, &image)?;
    println!("bits: {}", bits.to_bitstring());
    if let Ok(hex) = bits.to_hex() {
        println!("hex:  {hex}");
    }
    if let Some(expected) = expect {
        let truth = parse_message(expected, model.meta.watermark_length)?;
        let acc = pipeline::bit_accuracy(&truth, &bits)?;
        println!("bit accuracy: {acc:.4}%");
    }
    Ok(())
}

/// Apply one attack to one image.
pub fn cmd_attack(
    cfg: &RunConfig,
    spec: &AttackSpec,
    input: &Path,
    output: &Path,
) -> CliResult {
    spec.validate().map_err(CliError::from_validation)?;
    let image = Image::load(input).map_err(CliError::from_validation)?;
    let attacked = match &spec.kind {
        lowmark::attacks::AttackKind::External { adapter } => {
            let adapter_cfg = cfg.external.adapters.get(adapter).ok_or_else(|| {
                CliError::validation(format!("no adapter configured for '{adapter}'"))
            })?;
            lowmark::attacks::run_external(&image, spec, adapter_cfg)?.0
        }
        _ => lowmark::attacks::apply(&image, spec)?,
    };
    attacked.save_png(output)?;
    eprintln!("attacked image written to {}", output.display());
    Ok(())
}

/// Run the attack-grid evaluation and write the report files.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult {
    let default_ckpt = default_checkpoint_path(cfg);
    let model = load_model(checkpoint.unwrap_or(&default_ckpt))?;
    let mut dataset = load_dataset(cfg)?;
    if cfg.eval.limit > 0 {
        dataset.truncate(cfg.eval.limit);
    }
    let report = pipeline::evaluate(
        &model,
        &dataset,
        &cfg.eval.attacks,
        &cfg.external.adapters,
        cfg.eval.seed_base,
    )?;
    ensure_output_dir(cfg)?;
    let fingerprint = cfg.fingerprint();
    let mut wrapped = serde_json::to_value(&report).expect("serializable");
    wrapped["config_fingerprint"] = serde_json::Value::String(fingerprint.clone());

    write_text(
        &cfg.output_dir.join("eval_report.json"),
        &serde_json::to_string_pretty(&wrapped).expect("serializable"),
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_csv_with_fingerprint(&cfg.output_dir.join("eval_report.csv"), &fingerprint, &csv)?;
    if cfg.eval.chart {
        write_text(&cfg.output_dir.join("eval_report.svg"), &report.to_svg_chart())?;
    }

    for row in &report.rows {
        eprintln!(
            "{:44} {:7.3}%{}",
            row.attack,
            row.mean_bit_accuracy_pct,
            if row.skipped > 0 { format!("  ({} skipped)", row.skipped) } else { String::new() }
        );
    }
    let evaluated: usize = report.rows.iter().map(|r| r.images_evaluated).sum();
    if evaluated == 0 {
        eprintln!(
            "warning: every attack cell was skipped (external adapters missing?); \
             the report contains no measured rows"
        );
    } else if report.skipped_total > 0 {
        eprintln!("warning: {} cells skipped", report.skipped_total);
    }
    eprintln!(
        "clean psnr {:.2} dB, ssim {:.4}; report written to {}",
        report.clean_psnr_db,
        report.clean_ssim,
        cfg.output_dir.join("eval_report.json").display()
    );
    Ok(())
}
