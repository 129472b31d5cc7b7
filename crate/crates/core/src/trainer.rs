//! Two-stage end-to-end training of the embedding and extraction networks
//! with the codec frozen.
//!
//! No attack of any kind runs inside the loop (this module does not touch
//! the attack suite); robustness comes from where the watermark lives, not
//! from simulating distortions. Stage 1 weights the objective toward
//! extraction accuracy and runs until the smoothed extraction loss drops
//! below the switch threshold; stage 2 re-weights toward fidelity for a
//! configured budget (defaulting to the iteration count stage 1 consumed).
//!
//! Determinism: batch sampling and message draws come from a stateless
//! per-iteration seed, so a run is reproducible and a resumed run replays
//! the identical trajectory.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, ModelMeta, SnapshotState};
use crate::codec::{Codec, CodecHandle, CodecSpec, CODEC_PREFIX};
use crate::embednet::{EmbedConfig, EmbedNet};
use crate::error::{Error, Result};
use crate::extractnet::{ExtractNet, ExtractNetConfig};
use crate::freq::{decompose, ExtractorKind};
use crate::image::Image;
use crate::losses::{
    bce_graph, jnd_graph_batch, l2_graph, ssim_graph, total_graph, JndMap, LossWeights,
};
use crate::nn::layers::{seeded_rng, BnSink};
use crate::nn::{AdamW, Graph, ParamStore, Tensor};
use crate::watermark::WatermarkBits;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Images are square at this side length.
    pub image_size: usize,
    pub watermark_length: usize,
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
    /// Stage switch: smoothed extraction loss below this value.
    pub stage_switch_threshold: f64,
    /// Moving-average window for the smoothed extraction loss.
    pub smooth_window: usize,
    /// Stage-1 iteration cap; exceeding it without convergence is an error.
    pub max_iterations: usize,
    /// Stage-2 budget; 0 means "as many iterations as stage 1 consumed".
    pub stage2_iterations: usize,
    /// Images held out of training for the periodic accuracy probe.
    pub heldout_count: usize,
    /// Iterations between held-out probes.
    pub eval_interval: usize,
    pub seed: u64,
    pub extractor: ExtractorKind,
    pub embedder: EmbedConfig,
    pub extractor_net: ExtractNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 2,
            image_size: 512,
            watermark_length: 64,
            stage1_weights: LossWeights::stage1(),
            stage2_weights: LossWeights::stage2(),
            stage_switch_threshold: 0.05,
            smooth_window: 100,
            max_iterations: 5000,
            stage2_iterations: 0,
            heldout_count: 8,
            eval_interval: 50,
            seed: 0,
            extractor: ExtractorKind::default(),
            embedder: EmbedConfig::default(),
            extractor_net: ExtractNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, codec_spec: &CodecSpec) -> Result<()> {
        if self.stage_switch_threshold <= 0.0 {
            return Err(Error::InvalidArgument("stage_switch_threshold must be > 0".into()));
        }
        if self.batch_size == 0 || self.smooth_window == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, smooth_window, and max_iterations must be positive".into(),
            ));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be even and >= 8, got {}",
                self.image_size
            )));
        }
        let ds = codec_spec.downsample_factor();
        if self.image_size % ds != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} not divisible by codec downsample factor {ds}",
                self.image_size
            )));
        }
        self.stage1_weights.validate()?;
        self.stage2_weights.validate()?;
        self.extractor.validate()?;
        self.embedder.validate()?;
        self.extractor_net.validate()?;
        Ok(())
    }
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub stage: u8,
    pub watermark: f64,
    pub l2: f64,
    pub ssim: f64,
    pub jnd: f64,
    pub total: f64,
    pub smoothed_watermark: f64,
    pub heldout_bit_accuracy: Option<f64>,
}

/// Moving average over the last `window` raw values (partial at the start).
#[derive(Clone, Debug)]
pub struct MovingAverage {
    window: usize,
    values: VecDeque<f64>,
    sum: f64,
}

impl MovingAverage {
    pub fn new(window: usize) -> Self {
        Self { window, values: VecDeque::new(), sum: 0.0 }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        self.values.push_back(v);
        self.sum += v;
        if self.values.len() > self.window {
            self.sum -= self.values.pop_front().expect("non-empty");
        }
        self.value()
    }

    pub fn value(&self) -> f64 {
        if self.values.is_empty() {
            f64::INFINITY
        } else {
            // Recompute exactly; the running sum only guards the hot path.
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct SampleCache {
    lows: Vec<Option<ndarray::Array3<f64>>>,
    highs: Vec<Option<ndarray::Array3<f64>>>,
    jnds: Vec<Option<JndMap>>,
}

pub struct Trainer {
    config: TrainConfig,
    embed: EmbedNet,
    extract: ExtractNet,
    codec: Codec,
    params: ParamStore,
    opt: AdamW,
    next_iteration: usize,
    stage: u8,
    stage1_iterations: Option<usize>,
    smoother: MovingAverage,
    log: Vec<MetricRow>,
    codec_hash: String,
    codec_pretrain_rms: Option<f64>,
    pub config_fingerprint: Option<String>,
}

impl Trainer {
    /// Fresh trainer around a frozen codec.
    pub fn new(config: TrainConfig, codec: &CodecHandle) -> Result<Self> {
        if !codec.frozen {
            return Err(Error::InvalidArgument(
                "codec must be frozen before watermark training".into(),
            ));
        }
        config.validate(&codec.codec.spec)?;
        let embed = EmbedNet::new(config.watermark_length, &config.embedder)?;
        let extract = ExtractNet::new(config.watermark_length, &config.extractor_net)?;

        let mut params = codec.params.clone();
        params.freeze_all();
        embed.register(&mut params, config.seed);
        extract.register(&mut params, config.seed.wrapping_add(1));

        let codec_hash = params.subset_hash(CODEC_PREFIX);
        Ok(Self {
            smoother: MovingAverage::new(config.smooth_window),
            embed,
            extract,
            codec: Codec::build(&codec.codec.spec)?,
            opt: AdamW::new(config.learning_rate, config.weight_decay),
            params,
            next_iteration: 1,
            stage: 1,
            stage1_iterations: None,
            log: Vec::new(),
            codec_hash,
            codec_pretrain_rms: codec.pretrain_rms,
            config,
            config_fingerprint: None,
        })
    }

    /// Continue from a snapshot written by [`Trainer::run`].
    pub fn resume(path: &Path) -> Result<Self> {
        let (ckpt, opt_state, snapshot) = ModelCheckpoint::load_full(path)?;
        let snapshot = snapshot.ok_or_else(|| {
            Error::Checkpoint("checkpoint is not a resumable snapshot".into())
        })?;
        let config = ckpt.meta.train_config.clone();
        let embed = EmbedNet::new(config.watermark_length, &config.embedder)?;
        let extract = ExtractNet::new(config.watermark_length, &config.extractor_net)?;
        let codec = Codec::build(&ckpt.meta.codec_spec)?;
        let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
        opt.import_state(opt_state, snapshot.optimizer_steps);

        let mut smoother = MovingAverage::new(config.smooth_window);
        let start = ckpt.metric_log.len().saturating_sub(config.smooth_window);
        for row in &ckpt.metric_log[start..] {
            smoother.push(row.watermark);
        }

        Ok(Self {
            smoother,
            embed,
            extract,
            codec,
            opt,
            params: ckpt.params,
            next_iteration: snapshot.next_iteration,
            stage: snapshot.stage,
            stage1_iterations: snapshot.stage1_iterations,
            log: ckpt.metric_log,
            codec_hash: ckpt.meta.codec_hash,
            codec_pretrain_rms: ckpt.meta.codec_pretrain_rms,
            config_fingerprint: ckpt.meta.config_fingerprint.clone(),
            config,
        })
    }

    fn stage2_budget(&self) -> usize {
        match self.config.stage2_iterations {
            0 => self.stage1_iterations.unwrap_or(0),
            n => n,
        }
    }

    fn check_dataset(&self, dataset: &[Image]) -> Result<usize> {
        let n = dataset.len();
        if n <= self.config.heldout_count || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset of {n} images cannot hold out {} and still train",
                self.config.heldout_count
            )));
        }
        let s = self.config.image_size;
        for (i, img) in dataset.iter().enumerate() {
            if img.height() != s || img.width() != s {
                return Err(Error::InvalidArgument(format!(
                    "image {i} is {}x{}, expected {s}x{s}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(n - self.config.heldout_count)
    }

    /// Run training to completion, optionally writing a resumable snapshot
    /// every `interval` iterations.
    pub fn run(
        &mut self,
        dataset: &[Image],
        snapshot: Option<(&Path, usize)>,
        mut progress: Option<&mut dyn FnMut(&MetricRow)>,
    ) -> Result<()> {
        let train_count = self.check_dataset(dataset)?;
        let mut cache = SampleCache {
            lows: vec![None; dataset.len()],
            highs: vec![None; dataset.len()],
            jnds: vec![None; dataset.len()],
        };

        loop {
            let it = self.next_iteration;
            match self.stage {
                1 => {
                    if it > self.config.max_iterations {
                        let curve: Vec<f64> =
                            self.log.iter().map(|r| r.smoothed_watermark).collect();
                        return Err(Error::NonConvergence {
                            message: format!(
                                "smoothed extraction loss {:.4} still above {} after {} iterations",
                                self.smoother.value(),
                                self.config.stage_switch_threshold,
                                self.config.max_iterations
                            ),
                            loss_curve: curve,
                        });
                    }
                }
                _ => {
                    let budget = self.stage2_budget();
                    let done = self.stage1_iterations.unwrap_or(0) + budget;
                    if it > done {
                        break;
                    }
                }
            }

            let row = self.run_iteration(it, dataset, train_count, &mut cache)?;
            if let Some(cb) = progress.as_deref_mut() {
                cb(&row);
            }
            self.log.push(row);

            // Stage transition at the first iteration whose smoothed loss
            // dips below the threshold.
            if self.stage == 1 && self.smoother.value() < self.config.stage_switch_threshold {
                self.stage1_iterations = Some(it);
                self.stage = 2;
            }
            self.next_iteration = it + 1;

            if let Some((dir, interval)) = snapshot {
                if interval > 0 && it % interval == 0 {
                    self.save_snapshot(&dir.join("snapshot_latest.lwck"))?;
                }
            }
        }
        self.verify_codec_frozen()?;
        Ok(())
    }

    fn sample_batch(&self, it: usize, train_count: usize) -> (Vec<usize>, Vec<WatermarkBits>) {
        use rand::Rng;
        let mut rng = seeded_rng(self.config.seed, &format!("train.iter{it}"));
        let mut idx = Vec::with_capacity(self.config.batch_size);
        let mut bits = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            idx.push(rng.gen_range(0..train_count));
            // Fresh message per sample per iteration.
            let b: Vec<u8> = (0..self.config.watermark_length)
                .map(|_| rng.gen_range(0..=1u8))
                .collect();
            bits.push(WatermarkBits::new(b).expect("nonempty"));
        }
        (idx, bits)
    }

    fn ensure_cached(&self, cache: &mut SampleCache, dataset: &[Image], i: usize) -> Result<()> {
        if cache.lows[i].is_none() {
            let band = decompose(&dataset[i], &self.config.extractor)?;
            cache.lows[i] = Some(band.low);
            cache.highs[i] = Some(band.high);
            cache.jnds[i] = Some(crate::losses::compute_jnd(&dataset[i]));
        }
        Ok(())
    }

    fn run_iteration(
        &mut self,
        it: usize,
        dataset: &[Image],
        train_count: usize,
        cache: &mut SampleCache,
    ) -> Result<MetricRow> {
        let (indices, batch_bits) = self.sample_batch(it, train_count);
        let s = self.config.image_size;
        let n = indices.len();
        for &i in &indices {
            self.ensure_cached(cache, dataset, i)?;
        }

        let mut low = Array4::zeros((n, 3, s, s));
        let mut high = Array4::zeros((n, 3, s, s));
        let mut orig = Array4::zeros((n, 3, s, s));
        let mut jnds = Vec::with_capacity(n);
        for (b, &i) in indices.iter().enumerate() {
            low.index_axis_mut(Axis(0), b).assign(cache.lows[i].as_ref().unwrap());
            high.index_axis_mut(Axis(0), b).assign(cache.highs[i].as_ref().unwrap());
            orig.index_axis_mut(Axis(0), b).assign(dataset[i].data());
            jnds.push(cache.jnds[i].clone().unwrap());
        }

        let weights = if self.stage == 1 {
            self.config.stage1_weights
        } else {
            self.config.stage2_weights
        };

        let mut g = Graph::new();
        let mut sink = BnSink::new();
        let low_c = g.constant(low.into_dyn());
        let high_c = g.constant(high.into_dyn());
        let orig_c = g.constant(orig.into_dyn());

        let latent = self.codec.encode_graph(&self.params, &mut g, low_c);
        let bits_in = self.embed.bits_input(&mut g, &batch_bits)?;
        let latent_w = self
            .embed
            .embed_latent(&self.params, &mut g, latent, bits_in, Some(&mut sink));
        let low_w = self.codec.decode_graph(&self.params, &mut g, latent_w);
        let raw = g.add(low_w, high_c);
        let watermarked = g.clamp(raw, 0.0, 1.0);

        // Extraction sees the same decomposition the embedder used.
        let low_again = g.low_band(watermarked, &self.config.extractor)?;
        let probs = self
            .extract
            .forward(&self.params, &mut g, low_again, Some(&mut sink));

        let mut targets = Array2::zeros((n, self.config.watermark_length));
        for (b, bits) in batch_bits.iter().enumerate() {
            for (j, &bit) in bits.bits().iter().enumerate() {
                targets[[b, j]] = bit as f64;
            }
        }
        let targets_c = g.constant(targets.into_dyn());

        let loss_w = bce_graph(&mut g, probs, targets_c);
        let loss_l2 = l2_graph(&mut g, orig_c, watermarked);
        let sim = ssim_graph(&mut g, orig_c, watermarked);
        let neg = g.scale(sim, -1.0);
        let loss_ssim = g.add_scalar(neg, 1.0);
        let loss_jnd = jnd_graph_batch(&mut g, orig_c, watermarked, &jnds);
        let total = total_graph(&mut g, loss_w, loss_l2, loss_ssim, loss_jnd, &weights)
            .map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("iteration {it}: {msg}")),
                other => other,
            })?;

        let values = (
            g.scalar_value(loss_w),
            g.scalar_value(loss_l2),
            g.scalar_value(loss_ssim),
            g.scalar_value(loss_jnd),
            g.scalar_value(total),
        );

        let mut grads = g.backward(total);
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in g.bindings() {
            if let Some(grad) = grads.take(*id) {
                by_name
                    .entry(name.clone())
                    .and_modify(|acc| *acc += &grad)
                    .or_insert(grad);
            }
        }
        drop(g);
        sink.apply(&mut self.params);
        self.opt.step(&mut self.params, &by_name);

        let smoothed = self.smoother.push(values.0);
        let heldout = if self.config.heldout_count > 0
            && self.config.eval_interval > 0
            && it % self.config.eval_interval == 0
        {
            Some(self.heldout_accuracy(it, dataset, train_count, cache)?)
        } else {
            None
        };

        Ok(MetricRow {
            iteration: it,
            stage: self.stage,
            watermark: values.0,
            l2: values.1,
            ssim: values.2,
            jnd: values.3,
            total: values.4,
            smoothed_watermark: smoothed,
            heldout_bit_accuracy: heldout,
        })
    }

    /// Clean bit accuracy on the held-out images, evaluation mode.
    fn heldout_accuracy(
        &self,
        it: usize,
        dataset: &[Image],
        train_count: usize,
        cache: &mut SampleCache,
    ) -> Result<f64> {
        use rand::Rng;
        let mut rng = seeded_rng(self.config.seed, &format!("heldout.iter{it}"));
        let mut total_bits = 0usize;
        let mut correct = 0usize;
        for i in train_count..dataset.len() {
            self.ensure_cached(cache, dataset, i)?;
            let bits: Vec<u8> = (0..self.config.watermark_length)
                .map(|_| rng.gen_range(0..=1u8))
                .collect();
            let message = WatermarkBits::new(bits)?;

            let low = cache.lows[i].as_ref().unwrap();
            let high = cache.highs[i].as_ref().unwrap();
            let extracted = self.embed_extract_eval(low, high, &message)?;
            total_bits += message.len();
            correct += message
                .bits()
                .iter()
                .zip(extracted.bits())
                .filter(|(a, b)| a == b)
                .count();
        }
        Ok(100.0 * correct as f64 / total_bits.max(1) as f64)
    }

    fn embed_extract_eval(
        &self,
        low: &ndarray::Array3<f64>,
        high: &ndarray::Array3<f64>,
        message: &WatermarkBits,
    ) -> Result<WatermarkBits> {
        let (c, h, w) = low.dim();
        let mut g = Graph::new();
        let low_c = g.constant(low.clone().into_shape_with_order((1, c, h, w)).unwrap().into_dyn());
        let high_c =
            g.constant(high.clone().into_shape_with_order((1, c, h, w)).unwrap().into_dyn());
        let latent = self.codec.encode_graph(&self.params, &mut g, low_c);
        let bits_in = self.embed.bits_input(&mut g, std::slice::from_ref(message))?;
        let latent_w = self.embed.embed_latent(&self.params, &mut g, latent, bits_in, None);
        let low_w = self.codec.decode_graph(&self.params, &mut g, latent_w);
        let raw = g.add(low_w, high_c);
        let watermarked = g.clamp(raw, 0.0, 1.0);
        let low_again = g.low_band(watermarked, &self.config.extractor)?;
        let probs = self.extract.forward(&self.params, &mut g, low_again, None);
        let bits: Vec<u8> = g
            .value(probs)
            .iter()
            .map(|&p| if p >= 0.5 { 1u8 } else { 0u8 })
            .collect();
        WatermarkBits::new(bits)
    }

    fn verify_codec_frozen(&self) -> Result<()> {
        let after = self.params.subset_hash(CODEC_PREFIX);
        if after != self.codec_hash {
            return Err(Error::Internal(
                "codec parameters changed during watermark training".into(),
            ));
        }
        Ok(())
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            extractor: self.config.extractor.clone(),
            watermark_length: self.config.watermark_length,
            image_size: self.config.image_size,
            codec_spec: self.codec.spec.clone(),
            embed_cfg: self.config.embedder.clone(),
            extract_cfg: self.config.extractor_net.clone(),
            stage_reached: self.stage,
            stage1_iterations: self.stage1_iterations,
            total_iterations: self.next_iteration.saturating_sub(1),
            config_fingerprint: self.config_fingerprint.clone(),
            codec_hash: self.codec_hash.clone(),
            codec_pretrain_rms: self.codec_pretrain_rms,
            train_config: self.config.clone(),
        }
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let ckpt = ModelCheckpoint {
            meta: self.meta(),
            params: self.params.clone(),
            metric_log: self.log.clone(),
        };
        let state = SnapshotState {
            next_iteration: self.next_iteration,
            stage: self.stage,
            stage1_iterations: self.stage1_iterations,
            optimizer_steps: self.opt.step_count(),
        };
        ckpt.save_with(path, Some(&self.opt.export_state()), Some(&state))
    }

    pub fn into_checkpoint(self) -> ModelCheckpoint {
        ModelCheckpoint { meta: self.meta(), params: self.params, metric_log: self.log }
    }

    pub fn metric_log(&self) -> &[MetricRow] {
        &self.log
    }

    /// Extend or shorten the stage-2 budget; a resumed snapshot carries the
    /// budget it was interrupted with.
    pub fn set_stage2_iterations(&mut self, iterations: usize) {
        self.config.stage2_iterations = iterations;
    }

    /// Raise the stage-1 iteration cap (for resuming with a larger budget).
    pub fn set_max_iterations(&mut self, iterations: usize) {
        self.config.max_iterations = iterations;
    }
}

/// Train to completion and return the checkpoint.
pub fn train(dataset: &[Image], config: &TrainConfig, codec: &CodecHandle) -> Result<ModelCheckpoint> {
    let mut trainer = Trainer::new(config.clone(), codec)?;
    trainer.run(dataset, None, None)?;
    Ok(trainer.into_checkpoint())
}

/// Clean-path quality of a checkpoint over an image/message set: mean bit
/// accuracy (percent), mean PSNR (dB), mean structural similarity.
pub fn evaluate_batch(
    checkpoint: &ModelCheckpoint,
    images: &[Image],
    watermarks: &[WatermarkBits],
) -> Result<(f64, f64, f64)> {
    if images.is_empty() || images.len() != watermarks.len() {
        return Err(Error::InvalidArgument(
            "evaluate_batch needs equally many images and watermarks".into(),
        ));
    }
    let model = crate::pipeline::WatermarkModel::from_checkpoint(checkpoint)?;
    let mut acc = 0.0;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (img, bits) in images.iter().zip(watermarks) {
        let wm = crate::pipeline::embed(&model, img, bits)?;
        let extracted = crate::pipeline::extract(&model, &wm)?;
        acc += crate::pipeline::bit_accuracy(bits, &extracted)?;
        psnr_sum += crate::image::psnr(img, &wm)?;
        ssim_sum += crate::losses::ssim(img, &wm)?;
    }
    let n = images.len() as f64;
    Ok((acc / n, psnr_sum / n, ssim_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            image_size: 32,
            watermark_length: 8,
            batch_size: 2,
            learning_rate: 1e-4,
            max_iterations: 12,
            stage2_iterations: 4,
            smooth_window: 4,
            heldout_count: 2,
            eval_interval: 5,
            // Instantly satisfiable threshold: stage 1 ends at iteration 1,
            // so unit runs complete quickly.
            stage_switch_threshold: 10.0,
            seed,
            embedder: EmbedConfig {
                fc_hidden: 8,
                primary_width: 4,
                tap_widths: [4, 4, 4],
                latent_width: 4,
                fused_widths: [8, 6, 5, 4],
                stream_widths: [6, 5, 4, 4],
            },
            extractor_net: ExtractNetConfig {
                feature_widths: [4, 4],
                decode_widths: [4, 4, 4, 4],
                fc_widths: [16, 8],
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(n: usize, side: usize) -> Vec<Image> {
        (0..n).map(|i| synth::natural_image(500 + i as u64, side, side).unwrap()).collect()
    }

    #[test]
    fn rejects_unfrozen_codec() {
        let codec = CodecHandle::init(&CodecSpec::tiny_default(), 1).unwrap();
        assert!(matches!(
            Trainer::new(TrainConfig::default(), &codec),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn validates_size_against_downsample() {
        let mut codec = CodecHandle::init(&CodecSpec::tiny_default(), 1).unwrap();
        codec.freeze();
        let cfg = TrainConfig { image_size: 30, ..tiny_config(1) };
        assert!(Trainer::new(cfg, &codec).is_err());
    }

    #[test]
    fn moving_average_partial_then_windowed() {
        let mut ma = MovingAverage::new(3);
        assert_eq!(ma.value(), f64::INFINITY);
        assert!((ma.push(1.0) - 1.0).abs() < 1e-12);
        assert!((ma.push(3.0) - 2.0).abs() < 1e-12);
        assert!((ma.push(5.0) - 3.0).abs() < 1e-12);
        // Window slides: (3 + 5 + 7) / 3
        assert!((ma.push(7.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stage_switch_at_first_subthreshold_iteration() {
        // Drive the smoothing rule directly: the switch must fire at the
        // first iteration whose windowed mean dips below the threshold.
        let threshold = 0.05;
        let mut ma = MovingAverage::new(3);
        let series = [0.9, 0.2, 0.08, 0.05, 0.04, 0.02];
        let mut switched_at = None;
        for (i, v) in series.iter().enumerate() {
            let smoothed = ma.push(*v);
            if switched_at.is_none() && smoothed < threshold {
                switched_at = Some(i + 1);
            }
        }
        // Windowed means: 0.9, 0.55, 0.393, 0.110, 0.057, 0.037 -> first
        // below the threshold at iteration 6.
        assert_eq!(switched_at, Some(6));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut codec =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 2)
                .unwrap();
        codec.freeze();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_iterations: 3,
            stage2_iterations: 1,
            heldout_count: 1,
            eval_interval: 0,
            ..tiny_config(3)
        };
        let mut trainer = Trainer::new(cfg, &codec).unwrap();
        let before = trainer.params.content_hash();
        let dataset = tiny_dataset(4, 32);
        trainer.run(&dataset, None, None).unwrap();
        // Weight decay scales with the learning rate, so nothing moves
        // except batch-norm running statistics.
        let after = trainer.params.content_hash();
        assert_ne!(before, after, "running stats should still update");
        let ckpt = trainer.into_checkpoint();
        // Re-run and compare trainable entries only.
        let mut codec2 =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 2)
                .unwrap();
        codec2.freeze();
        let cfg2 = TrainConfig {
            learning_rate: 0.0,
            max_iterations: 3,
            stage2_iterations: 1,
            heldout_count: 1,
            eval_interval: 0,
            ..tiny_config(3)
        };
        let trainer2 = Trainer::new(cfg2, &codec2).unwrap();
        for (name, entry) in trainer2.params.iter() {
            if entry.trainable {
                assert_eq!(
                    entry.value,
                    ckpt.params.get(name).value,
                    "trainable {name} changed under zero learning rate"
                );
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let mut codec =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 5)
                .unwrap();
        codec.freeze();
        let dataset = tiny_dataset(5, 32);
        let run = || {
            let mut t = Trainer::new(tiny_config(7), &codec).unwrap();
            t.run(&dataset, None, None).unwrap();
            t.into_checkpoint()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        assert_eq!(a.metric_log, b.metric_log);
    }

    #[test]
    fn codec_freeze_contract_holds() {
        let mut codec =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 8)
                .unwrap();
        codec.freeze();
        let before = codec.content_hash();
        let dataset = tiny_dataset(5, 32);
        let mut t = Trainer::new(tiny_config(9), &codec).unwrap();
        t.run(&dataset, None, None).unwrap();
        let ckpt = t.into_checkpoint();
        assert_eq!(ckpt.params.subset_hash(CODEC_PREFIX), before);
        assert_eq!(ckpt.meta.codec_hash, before);
    }

    #[test]
    fn non_convergence_carries_loss_curve() {
        let mut codec =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 10)
                .unwrap();
        codec.freeze();
        let cfg = TrainConfig {
            max_iterations: 5,
            stage_switch_threshold: 1e-9,
            ..tiny_config(11)
        };
        let mut t = Trainer::new(cfg, &codec).unwrap();
        let dataset = tiny_dataset(4, 32);
        match t.run(&dataset, None, None) {
            Err(Error::NonConvergence { loss_curve, .. }) => {
                assert_eq!(loss_curve.len(), 5);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_resume_replays_identical_log() {
        let dir = tempfile::tempdir().unwrap();
        let snap = dir.path().join("snapshot_latest.lwck");
        let mut codec =
            CodecHandle::init(&CodecSpec::TinyAe { downsample_factor: 2, widths: vec![4] }, 12)
                .unwrap();
        codec.freeze();
        let dataset = tiny_dataset(5, 32);

        // Uninterrupted run: stage 1 converges at iteration 1, stage 2 runs
        // its 8-iteration budget.
        let cfg_full = TrainConfig { stage2_iterations: 8, ..tiny_config(13) };
        let mut t_full = Trainer::new(cfg_full, &codec).unwrap();
        t_full.run(&dataset, None, None).unwrap();
        let full = t_full.into_checkpoint();

        // Interrupted: same run but stopped early (smaller stage-2 budget),
        // snapshotting every 4 iterations.
        let cfg_short = TrainConfig { stage2_iterations: 4, ..tiny_config(13) };
        let mut t_short = Trainer::new(cfg_short, &codec).unwrap();
        t_short.run(&dataset, Some((dir.path(), 4)), None).unwrap();
        assert!(snap.exists());

        let mut resumed = Trainer::resume(&snap).unwrap();
        // Restore the real budget (the snapshot recorded the short one).
        resumed.config.stage2_iterations = 8;
        resumed.run(&dataset, None, None).unwrap();
        let resumed_ckpt = resumed.into_checkpoint();

        assert_eq!(full.metric_log.len(), resumed_ckpt.metric_log.len());
        for (a, b) in full.metric_log.iter().zip(resumed_ckpt.metric_log.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(full.params.content_hash(), resumed_ckpt.params.content_hash());
    }
}
