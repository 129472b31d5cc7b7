//! Declarative run configuration.
//!
//! One TOML document drives every subcommand. All keys are typed, defaulted,
//! and documented; unknown keys are rejected. A SHA-256 fingerprint of the
//! fully resolved configuration is embedded in every output artifact so
//! results are traceable to the exact settings that produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lowmark::attacks::{AttackKind, AttackSpec, ExternalAdapter};
use lowmark::codec::{CodecSpec, PretrainConfig};
use lowmark::embednet::EmbedConfig;
use lowmark::extractnet::ExtractNetConfig;
use lowmark::freq::ExtractorKind;
use lowmark::losses::LossWeights;
use lowmark::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stochastic choice derives from it.
    pub seed: u64,
    /// All outputs land under this directory.
    pub output_dir: PathBuf,
    /// Worker-thread cap; 0 uses every core.
    pub jobs: usize,
    pub dataset: DatasetSection,
    pub extractor: ExtractorKind,
    pub codec: CodecSection,
    pub embedder: EmbedConfig,
    pub extractor_net: ExtractNetConfig,
    pub train: TrainSection,
    pub stability: StabilitySection,
    pub eval: EvalSection,
    pub external: ExternalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            jobs: 0,
            dataset: DatasetSection::default(),
            extractor: ExtractorKind::default(),
            codec: CodecSection::default(),
            embedder: EmbedConfig::default(),
            extractor_net: ExtractNetConfig::default(),
            train: TrainSection::default(),
            stability: StabilitySection::default(),
            eval: EvalSection::default(),
            external: ExternalSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory tree of PNG/JPEG images. When empty, a deterministic
    /// synthetic corpus with natural-image statistics is generated instead.
    pub dir: PathBuf,
    /// Square side length images are resized to (bilinear).
    pub image_size: usize,
    /// Cap on the number of images (0 = no cap).
    pub limit: usize,
    /// Size of the synthetic corpus when `dir` is empty.
    pub synthetic_count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { dir: PathBuf::new(), image_size: 64, limit: 0, synthetic_count: 208 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    /// identity | tiny_ae | external_vae
    pub kind: String,
    pub downsample_factor: usize,
    /// Hidden conv widths (tiny_ae / external_vae).
    pub widths: Vec<usize>,
    /// Parameter file. Required for external_vae; optional for tiny_ae
    /// (pre-trained on the fly when absent).
    pub checkpoint: PathBuf,
    pub pretrain: PretrainConfig,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            kind: "tiny_ae".into(),
            downsample_factor: 2,
            widths: vec![16],
            checkpoint: PathBuf::new(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl CodecSection {
    pub fn spec(&self) -> Result<CodecSpec, CliError> {
        let spec = match self.kind.as_str() {
            "identity" => CodecSpec::Identity,
            "tiny_ae" => CodecSpec::TinyAe {
                downsample_factor: self.downsample_factor,
                widths: self.widths.clone(),
            },
            "external_vae" => CodecSpec::ExternalVae {
                downsample_factor: self.downsample_factor,
                widths: self.widths.clone(),
            },
            other => {
                return Err(CliError::validation(format!(
                    "codec.kind must be identity | tiny_ae | external_vae, got '{other}'"
                )))
            }
        };
        spec.validate().map_err(CliError::from_validation)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub watermark_length: usize,
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
    pub stage_switch_threshold: f64,
    pub smooth_window: usize,
    pub max_iterations: usize,
    pub stage2_iterations: usize,
    pub heldout_count: usize,
    pub eval_interval: usize,
    /// Iterations between resumable snapshots (0 disables).
    pub snapshot_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            watermark_length: t.watermark_length,
            stage1_weights: t.stage1_weights,
            stage2_weights: t.stage2_weights,
            stage_switch_threshold: t.stage_switch_threshold,
            smooth_window: t.smooth_window,
            max_iterations: t.max_iterations,
            stage2_iterations: t.stage2_iterations,
            heldout_count: t.heldout_count,
            eval_interval: t.eval_interval,
            snapshot_interval: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    /// Circular mask radius as a fraction of the half-side.
    pub radius_fraction: f64,
    /// Attacks of the study; must be non-empty.
    pub attacks: Vec<AttackSpec>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            radius_fraction: 0.2,
            attacks: vec![
                AttackSpec::new(AttackKind::GaussianNoise { sigma: 0.1 }),
                AttackSpec::new(AttackKind::Jpeg { quality: 50 }),
                AttackSpec::new(AttackKind::GaussianFilter { kernel: 3 }),
            ],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed_base: u64,
    /// Evaluation image cap (0 = use the whole dataset).
    pub limit: usize,
    /// Emit a static SVG bar chart next to the report.
    pub chart: bool,
    pub attacks: Vec<AttackSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed_base: 1, limit: 0, chart: false, attacks: conventional_grid() }
    }
}

/// The conventional signal-processing grid at its published operating
/// points, plus the built-in random-dropout edit.
pub fn conventional_grid() -> Vec<AttackSpec> {
    let mut grid = vec![AttackSpec::new(AttackKind::Identity)];
    for sigma in [0.1, 0.15, 0.2] {
        grid.push(AttackSpec::new(AttackKind::GaussianNoise { sigma }));
    }
    for density in [0.1, 0.15, 0.2] {
        grid.push(AttackSpec::new(AttackKind::SaltPepper { density }));
    }
    for quality in [10u8, 30, 50, 70] {
        grid.push(AttackSpec::new(AttackKind::Jpeg { quality }));
    }
    for factor in [0.2, -0.2, 0.4, -0.4] {
        grid.push(AttackSpec::new(AttackKind::Contrast { factor }));
    }
    for factor in [0.15, -0.15, 0.3, -0.3] {
        grid.push(AttackSpec::new(AttackKind::Brightness { factor }));
    }
    for kernel in [5usize, 7] {
        grid.push(AttackSpec::new(AttackKind::GaussianFilter { kernel }));
        grid.push(AttackSpec::new(AttackKind::MeanFilter { kernel }));
        grid.push(AttackSpec::new(AttackKind::MedianFilter { kernel }));
    }
    grid.push(AttackSpec::new(AttackKind::RandomDropout {
        min_fraction: 0.1,
        max_fraction: 0.3,
    }));
    grid
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalSection {
    /// Adapter name -> command template with {input}/{output} placeholders.
    pub adapters: BTreeMap<String, ExternalAdapter>,
    /// Cap on concurrently running adapters (informational; evaluation runs
    /// adapters sequentially per image).
    pub max_concurrent: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full validation before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.extractor.validate().map_err(CliError::from_validation)?;
        self.codec.spec()?;
        self.embedder.validate().map_err(CliError::from_validation)?;
        self.extractor_net.validate().map_err(CliError::from_validation)?;
        self.train_config().validate(&self.codec.spec()?).map_err(CliError::from_validation)?;
        if self.dataset.image_size < 8 {
            return Err(CliError::validation("dataset.image_size must be at least 8".into()));
        }
        if self.dataset.dir.as_os_str().is_empty() && self.dataset.synthetic_count < 2 {
            return Err(CliError::validation(
                "dataset.synthetic_count must be at least 2 when no directory is given".into(),
            ));
        }
        for spec in self.stability.attacks.iter().chain(self.eval.attacks.iter()) {
            spec.validate().map_err(CliError::from_validation)?;
        }
        if !(self.stability.radius_fraction > 0.0 && self.stability.radius_fraction <= 1.0) {
            return Err(CliError::validation(
                "stability.radius_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// The assembled training configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            image_size: self.dataset.image_size,
            watermark_length: self.train.watermark_length,
            stage1_weights: self.train.stage1_weights,
            stage2_weights: self.train.stage2_weights,
            stage_switch_threshold: self.train.stage_switch_threshold,
            smooth_window: self.train.smooth_window,
            max_iterations: self.train.max_iterations,
            stage2_iterations: self.train.stage2_iterations,
            heldout_count: self.train.heldout_count,
            eval_interval: self.train.eval_interval,
            seed: self.seed,
            extractor: self.extractor.clone(),
            embedder: self.embedder.clone(),
            extractor_net: self.extractor_net.clone(),
        }
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let toml = "seed = 1\nnot_a_key = 2\n";
        let parsed: Result<RunConfig, _> = toml::from_str(toml);
        assert!(parsed.is_err());
        let toml = "[train]\nlearning_rate = 0.1\nbogus = true\n";
        let parsed: Result<RunConfig, _> = toml::from_str(toml);
        assert!(parsed.is_err());
    }

    #[test]
    fn fingerprint_changes_with_any_key() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = RunConfig::default();
        c.train.learning_rate = 2e-4;
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), RunConfig::default().fingerprint());
    }

    #[test]
    fn attack_specs_parse_from_toml() {
        let toml = r#"
            [[eval.attacks]]
            kind = "gaussian_noise"
            sigma = 0.1
            seed = 5

            [[eval.attacks]]
            kind = "jpeg"
            quality = 50

            [[eval.attacks]]
            kind = "external"
            adapter = "lama"
        "#;
        let cfg: RunConfig = toml::from_str(toml).unwrap();
        assert_eq!(cfg.eval.attacks.len(), 3);
        assert_eq!(
            cfg.eval.attacks[0].kind,
            AttackKind::GaussianNoise { sigma: 0.1 }
        );
        assert_eq!(cfg.eval.attacks[0].seed, Some(5));
        assert!(matches!(cfg.eval.attacks[2].kind, AttackKind::External { .. }));
    }

    #[test]
    fn extractor_kinds_parse() {
        let cfg: RunConfig = toml::from_str(
            "[extractor]\nkind = \"dct\"\ncoefficient_fraction = 0.15\n",
        )
        .unwrap();
        assert_eq!(cfg.extractor, ExtractorKind::Dct { coefficient_fraction: 0.15 });
    }

    #[test]
    fn bad_codec_kind_is_validation_error() {
        let mut cfg = RunConfig::default();
        cfg.codec.kind = "warp".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conventional_grid_covers_every_family() {
        let grid = conventional_grid();
        // identity + 3 noise + 3 salt-pepper + 4 jpeg + 4 contrast +
        // 4 brightness + 6 filters + dropout
        assert_eq!(grid.len(), 26);
        assert!(grid.iter().any(|s| matches!(s.kind, AttackKind::MedianFilter { kernel: 7 })));
    }

    #[test]
    fn unknown_attack_params_rejected() {
        let toml = "[[eval.attacks]]\nkind = \"jpeg\"\nquality = 50\nbogus = 1\n";
        let parsed: Result<RunConfig, _> = toml::from_str(toml);
        assert!(parsed.is_err(), "unknown attack key must be rejected");
    }
}
