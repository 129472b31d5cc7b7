//! The trainable extraction network: low-frequency image in, message out.
//!
//! A feature module lifts 3 channels to a wide representation, halves the
//! spatial size with 2x2 average pooling after the first block, and adaptive
//! average pooling fixes the grid at 64x64 so any input size reaches the
//! same dense head. Decoding blocks taper the channels to 4, a 1x1
//! convolution flattens to a 4096-vector, and three fully-connected layers
//! (SELU on the first two) taper to the message length; a sigmoid yields
//! per-bit probabilities. Rounding uses a fixed tie-break: probability 0.5
//! maps to bit 1.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{seeded_rng, BnSink};
use crate::nn::{Conv2d, ConvBnSelu, Graph, Linear, ParamStore, VarId};
use crate::watermark::WatermarkBits;

/// Fixed grid after adaptive pooling; flatten width is its square.
pub const POOL_SIDE: usize = 64;

/// Smallest accepted input side. Inputs below 128x128 are outside the
/// intended operating range but accepted down to this floor (shapes stay
/// consistent through the adaptive pooling); spatial sides must be even for
/// the 2x2 pooling stage.
pub const MIN_INPUT_SIDE: usize = 8;

/// Parameter-name prefix for extractor entries in a combined store.
pub const EXTRACT_PREFIX: &str = "extract";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractNetConfig {
    /// Widths of the two feature blocks (input lift, post-pool reduction).
    pub feature_widths: [usize; 2],
    /// Decoding block widths; the last must be 4 (a 1x1 conv then maps 4 -> 1).
    pub decode_widths: [usize; 4],
    /// Hidden widths of the first two fully-connected layers.
    pub fc_widths: [usize; 2],
}

impl Default for ExtractNetConfig {
    fn default() -> Self {
        Self {
            feature_widths: [256, 128],
            decode_widths: [32, 16, 8, 4],
            fc_widths: [512, 128],
        }
    }
}

impl ExtractNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decode_widths[3] != 4 {
            return Err(Error::InvalidArgument(
                "last decode width must be 4 (feeds the 4->1 convolution)".into(),
            ));
        }
        if self
            .feature_widths
            .iter()
            .chain(self.decode_widths.iter())
            .chain(self.fc_widths.iter())
            .any(|&w| w == 0)
        {
            return Err(Error::InvalidArgument("extractor widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct ExtractNet {
    pub watermark_length: usize,
    pub cfg: ExtractNetConfig,
    feature1: ConvBnSelu,
    feature2: ConvBnSelu,
    decode: [ConvBnSelu; 4],
    conv_flat: Conv2d,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl ExtractNet {
    pub fn new(watermark_length: usize, cfg: &ExtractNetConfig) -> Result<Self> {
        cfg.validate()?;
        if watermark_length == 0 {
            return Err(Error::InvalidArgument("watermark length must be positive".into()));
        }
        let p = EXTRACT_PREFIX;
        let fw = cfg.feature_widths;
        let dw = cfg.decode_widths;
        Ok(Self {
            watermark_length,
            cfg: cfg.clone(),
            feature1: ConvBnSelu::new(&format!("{p}.feature1"), 3, fw[0]),
            feature2: ConvBnSelu::new(&format!("{p}.feature2"), fw[0], fw[1]),
            decode: [
                ConvBnSelu::new(&format!("{p}.decode1"), fw[1], dw[0]),
                ConvBnSelu::new(&format!("{p}.decode2"), dw[0], dw[1]),
                ConvBnSelu::new(&format!("{p}.decode3"), dw[1], dw[2]),
                ConvBnSelu::new(&format!("{p}.decode4"), dw[2], dw[3]),
            ],
            conv_flat: Conv2d::new(&format!("{p}.conv_flat"), 4, 1, 1, 1, 0, true),
            fc1: Linear::new(&format!("{p}.fc1"), POOL_SIDE * POOL_SIDE, cfg.fc_widths[0]),
            fc2: Linear::new(&format!("{p}.fc2"), cfg.fc_widths[0], cfg.fc_widths[1]),
            fc3: Linear::new(&format!("{p}.fc3"), cfg.fc_widths[1], watermark_length),
        })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = seeded_rng(seed, "extract.init");
        self.feature1.register(store, &mut rng);
        self.feature2.register(store, &mut rng);
        for b in &self.decode {
            b.register(store, &mut rng);
        }
        self.conv_flat.register(store, &mut rng, false);
        self.fc1.register(store, &mut rng, false);
        self.fc2.register(store, &mut rng, false);
        self.fc3.register(store, &mut rng, false);
    }

    /// Probabilities (N, L) in [0, 1] from a low-frequency raster batch.
    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        low: VarId,
        mut sink: Option<&mut BnSink>,
    ) -> VarId {
        let shape = g.value(low).shape().to_vec();
        assert_eq!(shape.len(), 4, "extractor input must be (N, 3, H, W)");
        assert_eq!(shape[1], 3, "extractor input must have 3 channels");
        let n = shape[0];
        let f1 = self.feature1.forward(store, g, low, sink.as_deref_mut());
        let pooled = g.avg_pool2(f1);
        let f2 = self.feature2.forward(store, g, pooled, sink.as_deref_mut());
        let fixed = g.adaptive_avg_pool(f2, POOL_SIDE, POOL_SIDE);
        let mut h = fixed;
        for block in &self.decode {
            h = block.forward(store, g, h, sink.as_deref_mut());
        }
        let flat_map = self.conv_flat.forward(store, g, h);
        let flat = g.reshape(flat_map, &[n, POOL_SIDE * POOL_SIDE]);
        let h1 = self.fc1.forward(store, g, flat);
        let h1 = g.selu(h1);
        let h2 = self.fc2.forward(store, g, h1);
        let h2 = g.selu(h2);
        let logits = self.fc3.forward(store, g, h2);
        g.sigmoid(logits)
    }

    fn check_input(&self, low: &Array3<f64>) -> Result<()> {
        let (c, h, w) = low.dim();
        if c != 3 {
            return Err(Error::InvalidArgument(format!("extract expects 3 channels, got {c}")));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::InvalidArgument(format!(
                "extract input {h}x{w} below the {MIN_INPUT_SIDE}-pixel floor"
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "extract input sides must be even for 2x2 pooling, got {h}x{w}"
            )));
        }
        if low.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("extract: non-finite input".into()));
        }
        Ok(())
    }

    /// Single-image extraction in evaluation mode: probabilities plus the
    /// rounded message (probability >= 0.5 reads as bit 1).
    pub fn extract(
        &self,
        store: &ParamStore,
        low: &Array3<f64>,
    ) -> Result<(Vec<f64>, WatermarkBits)> {
        self.check_input(low)?;
        let (c, h, w) = low.dim();
        let x4 = low.clone().into_shape_with_order((1, c, h, w)).unwrap();
        let mut g = Graph::new();
        let xi = g.constant(x4.into_dyn());
        let probs_id = self.forward(store, &mut g, xi, None);
        let probs: Vec<f64> = g.value(probs_id).iter().copied().collect();
        let bits = WatermarkBits::new(
            probs.iter().map(|&p| if p >= 0.5 { 1u8 } else { 0u8 }).collect(),
        )?;
        Ok((probs, bits))
    }
}
