//! The frozen latent codec: low-frequency images in, 4-channel latent maps
//! out, and back.
//!
//! Three variants share one contract:
//! - `TinyAe` — a small strided convolutional autoencoder trainable at desk
//!   scale by [`pretrain_tiny_autoencoder`];
//! - `ExternalVae` — the same conv-autoencoder family loaded from a
//!   user-supplied checkpoint file (weights are never distributed here; the
//!   default spatial compression is 8x);
//! - `Identity` — a spatial-domain stand-in that lifts 3 channels to 4 by
//!   zero-filling, for the no-latent-space ablation.
//!
//! Encoding is deterministic (a function, not a sample) and a frozen codec
//! never receives gradients; gradients still flow *through* its decoder into
//! whatever produced the latent.

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{assign_into_store, Container};
use crate::error::{Error, Result};
use crate::freq::{decompose, ExtractorKind};
use crate::image::Image;
use crate::nn::layers::seeded_rng;
use crate::nn::{AdamW, Conv2d, Graph, ParamStore, VarId};

/// Parameter-name prefix for every codec entry in a combined store.
pub const CODEC_PREFIX: &str = "codec";

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecSpec {
    Identity,
    TinyAe {
        downsample_factor: usize,
        widths: Vec<usize>,
    },
    ExternalVae {
        downsample_factor: usize,
        widths: Vec<usize>,
    },
}

impl CodecSpec {
    pub fn tiny_default() -> Self {
        CodecSpec::TinyAe { downsample_factor: 4, widths: vec![32, 64] }
    }

    pub fn downsample_factor(&self) -> usize {
        match self {
            CodecSpec::Identity => 1,
            CodecSpec::TinyAe { downsample_factor, .. }
            | CodecSpec::ExternalVae { downsample_factor, .. } => *downsample_factor,
        }
    }

    fn widths(&self) -> &[usize] {
        match self {
            CodecSpec::Identity => &[],
            CodecSpec::TinyAe { widths, .. } | CodecSpec::ExternalVae { widths, .. } => widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.downsample_factor();
        if ds == 0 || !ds.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "codec downsample_factor must be a power of two, got {ds}"
            )));
        }
        if matches!(self, CodecSpec::Identity) {
            return Ok(());
        }
        let stages = ds.trailing_zeros() as usize;
        let widths = self.widths();
        if widths.len() < stages.max(1) {
            return Err(Error::InvalidArgument(format!(
                "codec widths {widths:?} too short for downsample {ds} (need >= {})",
                stages.max(1)
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("codec widths must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Convolutional layer plan for one codec spec. Parameters live in a
/// [`ParamStore`] under the `codec.` prefix.
#[derive(Clone, Debug)]
pub struct Codec {
    pub spec: CodecSpec,
    /// Encoder hidden convs (first `stages` entries use stride 2).
    enc_hidden: Vec<Conv2d>,
    enc_out: Option<Conv2d>,
    dec_in: Option<Conv2d>,
    /// Decoder hidden convs, deepest first; entries paired with an upsample
    /// where the mirrored encoder conv had stride 2.
    dec_hidden: Vec<(bool, Conv2d)>,
}

impl Codec {
    pub fn build(spec: &CodecSpec) -> Result<Self> {
        spec.validate()?;
        if matches!(spec, CodecSpec::Identity) {
            return Ok(Self {
                spec: spec.clone(),
                enc_hidden: Vec::new(),
                enc_out: None,
                dec_in: None,
                dec_hidden: Vec::new(),
            });
        }
        let widths = spec.widths().to_vec();
        let stages = spec.downsample_factor().trailing_zeros() as usize;
        let k = widths.len();

        let mut enc_hidden = Vec::with_capacity(k);
        let mut prev = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i < stages { 2 } else { 1 };
            enc_hidden.push(Conv2d::new(
                &format!("{CODEC_PREFIX}.enc{i}"),
                prev,
                w,
                3,
                stride,
                1,
                true,
            ));
            prev = w;
        }
        let enc_out = Conv2d::new(&format!("{CODEC_PREFIX}.enc_out"), prev, 4, 3, 1, 1, true);

        let dec_in = Conv2d::new(&format!("{CODEC_PREFIX}.dec_in"), 4, widths[k - 1], 3, 1, 1, true);
        let mut dec_hidden = Vec::with_capacity(k);
        for i in (0..k).rev() {
            let upsample = i < stages;
            let out_ch = if i == 0 { 3 } else { widths[i - 1] };
            dec_hidden.push((
                upsample,
                Conv2d::new(&format!("{CODEC_PREFIX}.dec{i}"), widths[i], out_ch, 3, 1, 1, true),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            enc_hidden,
            enc_out: Some(enc_out),
            dec_in: Some(dec_in),
            dec_hidden,
        })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = seeded_rng(seed, "codec.init");
        for conv in &self.enc_hidden {
            conv.register(store, &mut rng, false);
        }
        if let Some(c) = &self.enc_out {
            c.register(store, &mut rng, false);
        }
        if let Some(c) = &self.dec_in {
            c.register(store, &mut rng, false);
        }
        for (_, conv) in &self.dec_hidden {
            conv.register(store, &mut rng, false);
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.spec.downsample_factor()
    }

    /// Graph-mode encoder: (N, 3, H, W) -> (N, 4, H/ds, W/ds).
    pub fn encode_graph(&self, store: &ParamStore, g: &mut Graph, x: VarId) -> VarId {
        if matches!(self.spec, CodecSpec::Identity) {
            let shape = g.value(x).shape().to_vec();
            let zeros = g.constant(ArrayD::zeros(IxDyn(&[shape[0], 1, shape[2], shape[3]])));
            return g.concat_channels(&[x, zeros]);
        }
        let mut h = x;
        for conv in &self.enc_hidden {
            h = conv.forward(store, g, h);
            h = g.selu(h);
        }
        self.enc_out.as_ref().unwrap().forward(store, g, h)
    }

    /// Graph-mode decoder: (N, 4, H', W') -> (N, 3, H'*ds, W'*ds).
    pub fn decode_graph(&self, store: &ParamStore, g: &mut Graph, z: VarId) -> VarId {
        if matches!(self.spec, CodecSpec::Identity) {
            return g.slice_channels(z, 0, 3);
        }
        let mut h = self.dec_in.as_ref().unwrap().forward(store, g, z);
        h = g.selu(h);
        for (i, (upsample, conv)) in self.dec_hidden.iter().enumerate() {
            if *upsample {
                h = g.upsample_nearest2(h);
            }
            h = conv.forward(store, g, h);
            if i + 1 < self.dec_hidden.len() {
                h = g.selu(h);
            }
        }
        h
    }

    fn check_encode_input(&self, low: &Array3<f64>) -> Result<()> {
        let (c, h, w) = low.dim();
        if c != 3 {
            return Err(Error::InvalidArgument(format!("encode expects 3 channels, got {c}")));
        }
        let ds = self.downsample_factor();
        if h % ds != 0 || w % ds != 0 {
            return Err(Error::InvalidArgument(format!(
                "encode: {h}x{w} not divisible by downsample factor {ds}"
            )));
        }
        if low.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("encode: non-finite input".into()));
        }
        Ok(())
    }

    /// Deterministic single-image encode.
    pub fn encode(&self, store: &ParamStore, low: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_encode_input(low)?;
        let (c, h, w) = low.dim();
        let x4 = low.clone().into_shape_with_order((1, c, h, w)).unwrap();
        let mut g = Graph::new();
        let xi = g.constant(x4.into_dyn());
        let z = self.encode_graph(store, &mut g, xi);
        let zv = g.value(z);
        let shape = zv.shape().to_vec();
        Ok(zv
            .clone()
            .into_shape_with_order((shape[1], shape[2], shape[3]))
            .unwrap()
            .into_dimensionality()
            .unwrap())
    }

    /// Deterministic single-image decode. Output values may leave [0, 1];
    /// clamping happens at final reconstruction.
    pub fn decode(&self, store: &ParamStore, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = latent.dim();
        if c != 4 {
            return Err(Error::InvalidArgument(format!("decode expects 4 channels, got {c}")));
        }
        let z4 = latent.clone().into_shape_with_order((1, c, h, w)).unwrap();
        let mut g = Graph::new();
        let zi = g.constant(z4.into_dyn());
        let y = self.decode_graph(store, &mut g, zi);
        let yv = g.value(y);
        let shape = yv.shape().to_vec();
        Ok(yv
            .clone()
            .into_shape_with_order((shape[1], shape[2], shape[3]))
            .unwrap()
            .into_dimensionality()
            .unwrap())
    }
}

// ---------------------------------------------------------------------------
// Handle: architecture + parameters + freeze state
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CodecHandle {
    pub codec: Codec,
    /// Entries under the `codec.` prefix.
    pub params: ParamStore,
    pub frozen: bool,
    /// Smoothed reconstruction RMS recorded at pre-training convergence.
    pub pretrain_rms: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    spec: CodecSpec,
    pretrain_rms: Option<f64>,
}

impl CodecHandle {
    pub fn identity() -> Self {
        Self {
            codec: Codec::build(&CodecSpec::Identity).expect("identity always valid"),
            params: ParamStore::new(),
            frozen: true,
            pretrain_rms: None,
        }
    }

    /// Fresh random parameters (unfrozen; freeze before watermark training).
    pub fn init(spec: &CodecSpec, seed: u64) -> Result<Self> {
        let codec = Codec::build(spec)?;
        let mut params = ParamStore::new();
        codec.register(&mut params, seed);
        Ok(Self { codec, params, frozen: false, pretrain_rms: None })
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
        self.frozen = true;
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn encode(&self, low: &Array3<f64>) -> Result<Array3<f64>> {
        self.codec.encode(&self.params, low)
    }

    pub fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        self.codec.decode(&self.params, latent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CodecMeta {
            spec: self.codec.spec.clone(),
            pretrain_rms: self.pretrain_rms,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Container::from_store(meta, &self.params).save(path)
    }

    /// Load a codec from a container file; the result is frozen. This is the
    /// adapter path for externally supplied weights as well.
    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::load(path).map_err(|e| Error::CodecLoad(e.to_string()))?;
        let meta: CodecMeta = container
            .meta_as()
            .map_err(|e| Error::CodecLoad(e.to_string()))?;
        let codec = Codec::build(&meta.spec).map_err(|e| Error::CodecLoad(e.to_string()))?;
        let mut params = ParamStore::new();
        codec.register(&mut params, 0);
        assign_into_store(&container, &mut params).map_err(|e| Error::CodecLoad(e.to_string()))?;
        params.freeze_all();
        Ok(Self { codec, params, frozen: true, pretrain_rms: meta.pretrain_rms })
    }
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// No improvement of the smoothed loss over this many iterations is a
    /// divergence error.
    pub patience: usize,
    pub smooth_window: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            batch_size: 8,
            patience: 500,
            smooth_window: 100,
            seed: 0,
        }
    }
}

/// Train a tiny autoencoder to reconstruct low-frequency images; the handle
/// comes back frozen with its convergence RMS recorded.
pub fn pretrain_tiny_autoencoder(
    images: &[Image],
    extractor: &ExtractorKind,
    spec: &CodecSpec,
    cfg: &PretrainConfig,
) -> Result<CodecHandle> {
    if images.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "codec pre-training needs at least 100 images, got {}",
            images.len()
        )));
    }
    if !matches!(spec, CodecSpec::TinyAe { .. }) {
        return Err(Error::InvalidArgument(
            "pre-training applies to the tiny autoencoder codec".into(),
        ));
    }
    let mut handle = CodecHandle::init(spec, cfg.seed)?;
    let ds = handle.codec.downsample_factor();
    let (h, w) = (images[0].height(), images[0].width());
    if h % ds != 0 || w % ds != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} not divisible by codec downsample factor {ds}"
        )));
    }

    // The training signal is the low band of each image.
    let lows: Vec<Array3<f64>> = images
        .iter()
        .map(|img| Ok(decompose(img, extractor)?.low))
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(cfg.learning_rate, 0.0);
    let mut window: Vec<f64> = Vec::new();
    let mut best_smoothed = f64::INFINITY;
    let mut last_improvement = 0usize;
    let mut smoothed = f64::INFINITY;

    for it in 1..=cfg.iterations {
        let mut rng = seeded_rng(cfg.seed, &format!("codec.iter{it}"));
        let mut batch = Array4::zeros((cfg.batch_size, 3, h, w));
        for b in 0..cfg.batch_size {
            use rand::Rng;
            let idx = rng.gen_range(0..lows.len());
            batch.index_axis_mut(Axis(0), b).assign(&lows[idx]);
        }
        let mut g = Graph::new();
        let x = g.constant(batch.into_dyn());
        let z = handle.codec.encode_graph(&handle.params, &mut g, x);
        let y = handle.codec.decode_graph(&handle.params, &mut g, z);
        let diff = g.sub(y, x);
        let sq = g.mul(diff, diff);
        let loss = g.mean_all(sq);
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!(
                "codec pre-training loss non-finite at iteration {it}"
            )));
        }

        let mut grads = g.backward(loss);
        let mut by_name = std::collections::BTreeMap::new();
        for (name, id) in g.bindings() {
            if let Some(grad) = grads.take(*id) {
                by_name
                    .entry(name.clone())
                    .and_modify(|acc: &mut crate::nn::Tensor| *acc += &grad)
                    .or_insert(grad);
            }
        }
        opt.step(&mut handle.params, &by_name);

        window.push(loss_val);
        if window.len() > cfg.smooth_window {
            window.remove(0);
        }
        smoothed = window.iter().sum::<f64>() / window.len() as f64;
        if smoothed < best_smoothed {
            best_smoothed = smoothed;
            last_improvement = it;
        }
        if it - last_improvement >= cfg.patience {
            return Err(Error::Divergence(format!(
                "codec pre-training loss non-decreasing for {} iterations (smoothed {smoothed:.6})",
                cfg.patience
            )));
        }
    }

    handle.pretrain_rms = Some(smoothed.sqrt());
    handle.freeze();
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use ndarray::Array3;

    #[test]
    fn identity_codec_lifts_and_drops_channel() {
        let handle = CodecHandle::identity();
        let img = synth::natural_image(1, 16, 16).unwrap();
        let z = handle.encode(img.data()).unwrap();
        assert_eq!(z.dim(), (4, 16, 16));
        for c in 0..3 {
            assert_eq!(z.index_axis(Axis(0), c), img.data().index_axis(Axis(0), c));
        }
        assert!(z.index_axis(Axis(0), 3).iter().all(|&v| v == 0.0));
        let back = handle.decode(&z).unwrap();
        assert_eq!(&back, img.data());
    }

    #[test]
    fn tiny_ae_shape_contract() {
        let handle = CodecHandle::init(&CodecSpec::tiny_default(), 3).unwrap();
        let img = synth::natural_image(2, 64, 64).unwrap();
        let z = handle.encode(img.data()).unwrap();
        assert_eq!(z.dim(), (4, 16, 16));
        let y = handle.decode(&z).unwrap();
        assert_eq!(y.dim(), (3, 64, 64));
    }

    #[test]
    fn zero_latent_decodes_finite() {
        let handle = CodecHandle::init(&CodecSpec::tiny_default(), 4).unwrap();
        let z = Array3::zeros((4, 8, 8));
        let y = handle.decode(&z).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let handle = CodecHandle::init(&CodecSpec::tiny_default(), 5).unwrap();
        let img = synth::natural_image(3, 32, 32).unwrap();
        let a = handle.encode(img.data()).unwrap();
        let b = handle.encode(img.data()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let handle = CodecHandle::init(&CodecSpec::tiny_default(), 6).unwrap();
        let odd = Array3::zeros((3, 30, 30)); // not divisible by 4
        assert!(matches!(
            handle.codec.encode(&handle.params, &odd),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(CodecSpec::TinyAe { downsample_factor: 3, widths: vec![8, 8] }
            .validate()
            .is_err());
        assert!(CodecSpec::TinyAe { downsample_factor: 4, widths: vec![8] }
            .validate()
            .is_err());
        assert!(CodecSpec::TinyAe { downsample_factor: 1, widths: vec![8] }
            .validate()
            .is_ok());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.lwck");
        let mut handle = CodecHandle::init(&CodecSpec::tiny_default(), 7).unwrap();
        handle.pretrain_rms = Some(0.0123);
        handle.freeze();
        handle.save(&path).unwrap();

        let loaded = CodecHandle::load(&path).unwrap();
        assert!(loaded.frozen);
        assert_eq!(loaded.pretrain_rms, Some(0.0123));
        assert_eq!(loaded.content_hash(), handle.content_hash());

        let img = synth::natural_image(9, 32, 32).unwrap();
        assert_eq!(
            handle.encode(img.data()).unwrap(),
            loaded.encode(img.data()).unwrap()
        );
    }

    #[test]
    fn load_missing_file_is_codec_error() {
        assert!(matches!(
            CodecHandle::load(Path::new("/nonexistent/codec.lwck")),
            Err(Error::CodecLoad(_))
        ));
    }

    #[test]
    fn load_corrupt_file_is_codec_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lwck");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(CodecHandle::load(&path), Err(Error::CodecLoad(_))));
    }

    #[test]
    fn pretraining_on_constant_images_reaches_near_zero_loss() {
        let images: Vec<Image> = (0..100)
            .map(|i| Image::constant(0.2 + (i % 5) as f64 * 0.1, 16, 16).unwrap())
            .collect();
        let cfg = PretrainConfig {
            iterations: 400,
            learning_rate: 3e-3,
            batch_size: 4,
            patience: 400,
            smooth_window: 50,
            seed: 1,
        };
        let spec = CodecSpec::TinyAe { downsample_factor: 2, widths: vec![8] };
        let handle =
            pretrain_tiny_autoencoder(&images, &ExtractorKind::default(), &spec, &cfg).unwrap();
        assert!(handle.frozen);
        let rms = handle.pretrain_rms.unwrap();
        assert!(rms < 0.05, "rms {rms}");
    }

    #[test]
    fn pretraining_requires_enough_images() {
        let images: Vec<Image> = (0..10).map(|_| Image::constant(0.5, 16, 16).unwrap()).collect();
        assert!(pretrain_tiny_autoencoder(
            &images,
            &ExtractorKind::default(),
            &CodecSpec::tiny_default(),
            &PretrainConfig::default()
        )
        .is_err());
    }
}
