//! The trainable two-branch embedding module.
//!
//! A watermark branch expands the normalized message through two
//! fully-connected SELU layers to a 4096-vector, reshapes it onto a fixed
//! 64x64 grid, lifts it to a 128-channel feature map, and derives a chain of
//! narrower "evolving" feature maps. A latent branch lifts the 4-channel
//! latent to 128 channels. Four fusion stages process a fused stream and the
//! watermark stream through separate Conv-BN-SELU blocks, concatenating their
//! outputs as the next fused input, down to 4 channels each; a final 1x1
//! convolution reduces the concatenated pair to the 4-channel residual. The
//! residual is scaled by a fixed factor (not trained) and added to the
//! latent.
//!
//! The evolving-feature taps enter the watermark stream additively through
//! width-matching 1x1 convolutions at stages 2-4; that wiring, and the
//! interior stage widths, are isolated here and exposed as configuration.
//! The final 1x1 convolution starts at zero, so an untrained embedder
//! returns the latent unchanged.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{seeded_rng, BnSink};
use crate::nn::{Conv2d, ConvBnSelu, Graph, Linear, ParamStore, VarId};
use crate::watermark::WatermarkBits;

/// The watermark grid side; the branch's 4096-vector reshapes to 1 x 64 x 64.
pub const GRID_SIDE: usize = 64;

/// Residual scale; a constant of the method, not a trained parameter.
pub const RESIDUAL_SCALE: f64 = 0.2;

/// Parameter-name prefix for embedder entries in a combined store.
pub const EMBED_PREFIX: &str = "embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// Hidden width of the first fully-connected layer (the second expands
    /// to 4096).
    pub fc_hidden: usize,
    /// Channels of the watermark branch's primary feature map.
    pub primary_width: usize,
    /// Widths of the evolving-feature blocks tapped into stages 2-4.
    pub tap_widths: [usize; 3],
    /// Channels the latent branch lifts the 4-channel latent to.
    pub latent_width: usize,
    /// Fused-stream output widths per stage; the last must be 4.
    pub fused_widths: [usize; 4],
    /// Watermark-stream output widths per stage; the last must be 4.
    pub stream_widths: [usize; 4],
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            fc_hidden: 512,
            primary_width: 128,
            tap_widths: [32, 16, 8],
            latent_width: 128,
            fused_widths: [128, 64, 32, 4],
            stream_widths: [64, 32, 16, 4],
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fused_widths[3] != 4 || self.stream_widths[3] != 4 {
            return Err(Error::InvalidArgument(
                "final fused/stream stage widths must be 4 (the residual has 4 channels)".into(),
            ));
        }
        let all = [
            self.fc_hidden,
            self.primary_width,
            self.latent_width,
        ];
        if all.iter().chain(self.tap_widths.iter()).chain(self.fused_widths.iter()).chain(self.stream_widths.iter()).any(|&w| w == 0)
        {
            return Err(Error::InvalidArgument("embedder widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct EmbedNet {
    pub watermark_length: usize,
    pub cfg: EmbedConfig,
    fc1: Linear,
    fc2: Linear,
    conv_in: Conv2d,
    primary_block: ConvBnSelu,
    tap_blocks: [ConvBnSelu; 3],
    tap_projections: [Conv2d; 3],
    latent_block: ConvBnSelu,
    fused_blocks: [ConvBnSelu; 4],
    stream_blocks: [ConvBnSelu; 4],
    conv_out: Conv2d,
}

impl EmbedNet {
    pub fn new(watermark_length: usize, cfg: &EmbedConfig) -> Result<Self> {
        cfg.validate()?;
        if watermark_length == 0 {
            return Err(Error::InvalidArgument("watermark length must be positive".into()));
        }
        let p = EMBED_PREFIX;
        let pw = cfg.primary_width;
        let tw = cfg.tap_widths;
        let fw = cfg.fused_widths;
        let sw = cfg.stream_widths;
        Ok(Self {
            watermark_length,
            cfg: cfg.clone(),
            fc1: Linear::new(&format!("{p}.fc1"), watermark_length, cfg.fc_hidden),
            fc2: Linear::new(&format!("{p}.fc2"), cfg.fc_hidden, GRID_SIDE * GRID_SIDE),
            conv_in: Conv2d::new(&format!("{p}.conv_in"), 1, pw, 1, 1, 0, true),
            primary_block: ConvBnSelu::new(&format!("{p}.wm_block1"), pw, pw),
            tap_blocks: [
                ConvBnSelu::new(&format!("{p}.wm_block2"), pw, tw[0]),
                ConvBnSelu::new(&format!("{p}.wm_block3"), tw[0], tw[1]),
                ConvBnSelu::new(&format!("{p}.wm_block4"), tw[1], tw[2]),
            ],
            tap_projections: [
                Conv2d::new(&format!("{p}.tap_proj2"), tw[0], sw[0], 1, 1, 0, true),
                Conv2d::new(&format!("{p}.tap_proj3"), tw[1], sw[1], 1, 1, 0, true),
                Conv2d::new(&format!("{p}.tap_proj4"), tw[2], sw[2], 1, 1, 0, true),
            ],
            latent_block: ConvBnSelu::new(&format!("{p}.latent_block"), 4, cfg.latent_width),
            fused_blocks: [
                ConvBnSelu::new(&format!("{p}.fuse1"), cfg.latent_width + pw, fw[0]),
                ConvBnSelu::new(&format!("{p}.fuse2"), fw[0] + sw[0], fw[1]),
                ConvBnSelu::new(&format!("{p}.fuse3"), fw[1] + sw[1], fw[2]),
                ConvBnSelu::new(&format!("{p}.fuse4"), fw[2] + sw[2], fw[3]),
            ],
            stream_blocks: [
                ConvBnSelu::new(&format!("{p}.stream1"), pw, sw[0]),
                ConvBnSelu::new(&format!("{p}.stream2"), sw[0], sw[1]),
                ConvBnSelu::new(&format!("{p}.stream3"), sw[1], sw[2]),
                ConvBnSelu::new(&format!("{p}.stream4"), sw[2], sw[3]),
            ],
            conv_out: Conv2d::new(&format!("{p}.conv_out"), fw[3] + sw[3], 4, 1, 1, 0, true),
        })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = seeded_rng(seed, "embed.init");
        self.fc1.register(store, &mut rng, false);
        self.fc2.register(store, &mut rng, false);
        self.conv_in.register(store, &mut rng, false);
        self.primary_block.register(store, &mut rng);
        for b in &self.tap_blocks {
            b.register(store, &mut rng);
        }
        for c in &self.tap_projections {
            c.register(store, &mut rng, false);
        }
        self.latent_block.register(store, &mut rng);
        for b in &self.fused_blocks {
            b.register(store, &mut rng);
        }
        for b in &self.stream_blocks {
            b.register(store, &mut rng);
        }
        // Zero residual at initialization: the first training step starts
        // from an unwatermarked reconstruction.
        self.conv_out.register(store, &mut rng, true);
    }

    /// Normalized messages (N, L) as a graph constant.
    pub fn bits_input(&self, g: &mut Graph, messages: &[WatermarkBits]) -> Result<VarId> {
        for m in messages {
            if m.len() != self.watermark_length {
                return Err(Error::InvalidArgument(format!(
                    "watermark length {} does not match model length {}",
                    m.len(),
                    self.watermark_length
                )));
            }
        }
        let n = messages.len();
        let mut data = Array2::zeros((n, self.watermark_length));
        for (i, m) in messages.iter().enumerate() {
            for (j, v) in m.normalized().into_iter().enumerate() {
                data[[i, j]] = v;
            }
        }
        Ok(g.constant(data.into_dyn()))
    }

    /// Watermark branch: normalized bits (N, L) to the primary feature map
    /// (N, primary, 64, 64) plus the three evolving-feature taps.
    pub fn watermark_branch(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        bits_norm: VarId,
        mut sink: Option<&mut BnSink>,
    ) -> (VarId, [VarId; 3]) {
        let n = g.value(bits_norm).shape()[0];
        let h1 = self.fc1.forward(store, g, bits_norm);
        let h1 = g.selu(h1);
        let h2 = self.fc2.forward(store, g, h1);
        let h2 = g.selu(h2);
        let grid = g.reshape(h2, &[n, 1, GRID_SIDE, GRID_SIDE]);
        let lifted = self.conv_in.forward(store, g, grid);
        let primary = self.primary_block.forward(store, g, lifted, sink.as_deref_mut());
        let t2 = self.tap_blocks[0].forward(store, g, primary, sink.as_deref_mut());
        let t3 = self.tap_blocks[1].forward(store, g, t2, sink.as_deref_mut());
        let t4 = self.tap_blocks[2].forward(store, g, t3, sink.as_deref_mut());
        (primary, [t2, t3, t4])
    }

    /// Four-stage fusion producing the 4-channel residual on the 64x64 grid.
    pub fn fuse(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        latent_features: VarId,
        primary: VarId,
        taps: [VarId; 3],
        mut sink: Option<&mut BnSink>,
    ) -> VarId {
        let mut fused_in = g.concat_channels(&[latent_features, primary]);
        let mut stream = primary;
        let mut fused_out = fused_in;
        for stage in 0..4 {
            if stage > 0 {
                let proj = self.tap_projections[stage - 1].forward(store, g, taps[stage - 1]);
                stream = g.add(stream, proj);
            }
            let s_out = self.stream_blocks[stage].forward(store, g, stream, sink.as_deref_mut());
            fused_out = self.fused_blocks[stage].forward(store, g, fused_in, sink.as_deref_mut());
            if stage < 3 {
                fused_in = g.concat_channels(&[fused_out, s_out]);
            }
            stream = s_out;
        }
        let both = g.concat_channels(&[fused_out, stream]);
        self.conv_out.forward(store, g, both)
    }

    /// Fuse the message into the latent: latent + RESIDUAL_SCALE * residual.
    /// Latent grids other than 64x64 are bilinearly resampled to the
    /// watermark grid for fusion and the residual is resampled back.
    pub fn embed_latent(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        latent: VarId,
        bits_norm: VarId,
        mut sink: Option<&mut BnSink>,
    ) -> VarId {
        let shape = g.value(latent).shape().to_vec();
        assert_eq!(shape.len(), 4, "latent must be (N, 4, H', W')");
        assert_eq!(shape[1], 4, "latent must have 4 channels");
        assert_eq!(
            g.value(bits_norm).shape()[0],
            shape[0],
            "batch size mismatch between latent and messages"
        );
        let (hp, wp) = (shape[2], shape[3]);
        let residual = self.residual(store, g, latent, bits_norm, sink.as_deref_mut());
        let residual = g.bilinear_resize(residual, hp, wp);
        g.scale_add(latent, residual, RESIDUAL_SCALE)
    }

    /// The raw fusion residual on the 64x64 grid (before resampling and
    /// scaling); exposed so the residual-application identity can be
    /// re-verified independently.
    pub fn residual(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        latent: VarId,
        bits_norm: VarId,
        mut sink: Option<&mut BnSink>,
    ) -> VarId {
        let lat_feat = self.latent_block.forward(store, g, latent, sink.as_deref_mut());
        let lat_feat = g.bilinear_resize(lat_feat, GRID_SIDE, GRID_SIDE);
        let (primary, taps) = self.watermark_branch(store, g, bits_norm, sink.as_deref_mut());
        self.fuse(store, g, lat_feat, primary, taps, sink)
    }
}
