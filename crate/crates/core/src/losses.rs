//! The four-term compound training objective and its pieces: message BCE,
//! pixel L2, structural-similarity loss, and a perceptual penalty weighted
//! by a per-pixel visibility-threshold map.
//!
//! Every term exists as a graph builder (differentiable, used by the
//! trainer) and as a plain function over images (used by tests and reports);
//! the plain form evaluates the same graph so there is exactly one
//! implementation of each formula.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters;
use crate::image::Image;
use crate::nn::{Graph, VarId};
use crate::watermark::WatermarkBits;

/// Probabilities are clamped this far from {0, 1} before the log.
pub const BCE_EPSILON: f64 = 1e-7;

/// Preferred structural-similarity window (shrunk to fit small inputs).
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Non-negative weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub watermark: f64,
    pub l2: f64,
    pub ssim: f64,
    pub jnd: f64,
}

impl LossWeights {
    /// Stage-1 preset: extraction accuracy dominates.
    pub fn stage1() -> Self {
        Self { watermark: 5.0, l2: 0.1, ssim: 5.0, jnd: 10.0 }
    }

    /// Stage-2 preset: fidelity terms tightened.
    pub fn stage2() -> Self {
        Self { watermark: 5.0, l2: 1.0, ssim: 10.0, jnd: 50.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.watermark, self.l2, self.ssim, self.jnd];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Values of the four terms for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub watermark: f64,
    pub l2: f64,
    pub ssim: f64,
    pub jnd: f64,
}

// ---------------------------------------------------------------------------
// Visibility-threshold map
// ---------------------------------------------------------------------------

/// Per-pixel visibility threshold in [0, 0.5], single channel, broadcast
/// over color channels by the loss. Higher in textured and brightness-
/// adapted regions than in flat mid-gray ones.
#[derive(Clone, Debug, PartialEq)]
pub struct JndMap(Array2<f64>);

impl JndMap {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// The loss weight map (1 - 2*threshold), in [0, 1].
    pub fn weight(&self) -> Array2<f64> {
        self.0.mapv(|j| 1.0 - 2.0 * j)
    }
}

/// Luminance-adaptation + contrast-masking visibility threshold.
///
/// Background luminance over a 5x5 neighborhood drives the adaptation term
/// (minimal near mid-gray, rising toward dark and bright); local gradient
/// magnitude drives the masking term; the two combine with an overlap
/// deduction and clamp into [0, 0.5].
pub fn compute_jnd(image: &Image) -> JndMap {
    let luma = image.luma();
    let background = filters::mean_filter(&luma, 5).expect("odd kernel");
    let gradient = filters::gradient_magnitude(&luma);
    let masking_raw = filters::mean_filter(&gradient, 3).expect("odd kernel");

    let (h, w) = luma.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let b = background[[i, j]];
            let adaptation = if b <= 0.5 {
                0.12 * (1.0 - (b / 0.5).sqrt()) + 0.02
            } else {
                0.08 * (b - 0.5) / 0.5 + 0.02
            };
            let masking = 0.6 * masking_raw[[i, j]];
            // Nonlinear additivity: overlapping effects do not fully add.
            let jnd = adaptation + masking - 0.3 * adaptation.min(masking);
            out[[i, j]] = jnd.clamp(0.0, 0.5);
        }
    }
    JndMap(out)
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy between constant targets (N, L) and predicted
/// probabilities (N, L), with probabilities clamped away from {0, 1}.
pub fn bce_graph(g: &mut Graph, probs: VarId, targets: VarId) -> VarId {
    let shape = g.value(probs).shape().to_vec();
    assert_eq!(shape, g.value(targets).shape(), "bce: shape mismatch");
    let p = g.clamp(probs, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let ones = g.constant(ArrayD::from_elem(IxDyn(&shape), 1.0));
    let ln_p = g.ln(p);
    let q = g.sub(ones, p);
    let ln_q = g.ln(q);
    let t_term = g.mul(targets, ln_p);
    let ones2 = g.constant(ArrayD::from_elem(IxDyn(&shape), 1.0));
    let not_t = g.sub(ones2, targets);
    let q_term = g.mul(not_t, ln_q);
    let sum = g.add(t_term, q_term);
    let mean = g.mean_all(sum);
    g.scale(mean, -1.0)
}

/// Mean squared pixel difference.
pub fn l2_graph(g: &mut Graph, original: VarId, watermarked: VarId) -> VarId {
    let d = g.sub(original, watermarked);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Mean structural similarity over channels with a Gaussian window
/// (shrunk to the largest odd size fitting the input), standard stability
/// constants, valid-region averaging. Returns the similarity, not the loss.
pub fn ssim_graph(g: &mut Graph, a: VarId, b: VarId) -> VarId {
    let shape = g.value(a).shape().to_vec();
    assert_eq!(shape, g.value(b).shape(), "ssim: shape mismatch");
    let (h, w) = (shape[2], shape[3]);
    let win = ssim_window_for(h, w);
    let kernel = gaussian_window(win, SSIM_SIGMA);

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    let mu_a = g.depthwise_valid_filter(a, kernel.clone());
    let mu_b = g.depthwise_valid_filter(b, kernel.clone());
    let a2 = g.mul(a, a);
    let b2 = g.mul(b, b);
    let ab = g.mul(a, b);
    let m_a2 = g.depthwise_valid_filter(a2, kernel.clone());
    let m_b2 = g.depthwise_valid_filter(b2, kernel.clone());
    let m_ab = g.depthwise_valid_filter(ab, kernel);

    let mu_a2 = g.mul(mu_a, mu_a);
    let mu_b2 = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(m_a2, mu_a2);
    let var_b = g.sub(m_b2, mu_b2);
    let cov = g.sub(m_ab, mu_ab);

    let two_mu = g.scale(mu_ab, 2.0);
    let two_mu_c1 = g.add_scalar(two_mu, C1);
    let two_cov = g.scale(cov, 2.0);
    let two_cov_c2 = g.add_scalar(two_cov, C2);
    let num_map = g.mul(two_mu_c1, two_cov_c2);

    let mu_sum = g.add(mu_a2, mu_b2);
    let mu_sum_c1 = g.add_scalar(mu_sum, C1);
    let var_sum = g.add(var_a, var_b);
    let var_sum_c2 = g.add_scalar(var_sum, C2);
    let den_map = g.mul(mu_sum_c1, var_sum_c2);

    let ssim_map = g.div(num_map, den_map);
    g.mean_all(ssim_map)
}

fn ssim_window_for(h: usize, w: usize) -> usize {
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    win.max(1)
}

fn gaussian_window(k: usize, sigma: f64) -> Array2<f64> {
    let k1 = filters::gaussian_kernel_1d(k, sigma).expect("odd window");
    let mut out = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            out[[i, j]] = k1[i] * k1[j];
        }
    }
    out
}

/// Perceptual penalty: mean over pixels of weight * |original - watermarked|
/// where the weight map (1 - 2*threshold) derives from the original only and
/// enters as a constant.
pub fn jnd_graph(g: &mut Graph, original: VarId, watermarked: VarId, jnd: &JndMap) -> VarId {
    let shape = g.value(original).shape().to_vec();
    assert_eq!(shape, g.value(watermarked).shape(), "jnd: shape mismatch");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(jnd.0.dim(), (h, w), "jnd map size mismatch");
    let weight2 = jnd.weight();
    let mut weight = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            weight.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ch).assign(&weight2);
        }
    }
    let wconst = g.constant(weight.into_dyn());
    let d = g.sub(original, watermarked);
    let ad = g.abs(d);
    let weighted = g.mul(wconst, ad);
    g.mean_all(weighted)
}

/// Batched variant taking one threshold map per batch item.
pub fn jnd_graph_batch(
    g: &mut Graph,
    original: VarId,
    watermarked: VarId,
    jnds: &[JndMap],
) -> VarId {
    let shape = g.value(original).shape().to_vec();
    assert_eq!(shape, g.value(watermarked).shape(), "jnd: shape mismatch");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(jnds.len(), n, "one threshold map per batch item");
    let mut weight = Array4::zeros((n, c, h, w));
    for (b, jnd) in jnds.iter().enumerate() {
        assert_eq!(jnd.0.dim(), (h, w), "jnd map size mismatch");
        let w2 = jnd.weight();
        for ch in 0..c {
            weight.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ch).assign(&w2);
        }
    }
    let wconst = g.constant(weight.into_dyn());
    let d = g.sub(original, watermarked);
    let ad = g.abs(d);
    let weighted = g.mul(wconst, ad);
    g.mean_all(weighted)
}

/// Weighted sum of the four terms as a graph node. Errors (with term
/// attribution) if any term value is non-finite.
pub fn total_graph(
    g: &mut Graph,
    watermark: VarId,
    l2: VarId,
    ssim_loss: VarId,
    jnd: VarId,
    weights: &LossWeights,
) -> Result<VarId> {
    weights.validate()?;
    for (name, id) in [("watermark", watermark), ("l2", l2), ("ssim", ssim_loss), ("jnd", jnd)] {
        let v = g.scalar_value(id);
        if !v.is_finite() {
            return Err(Error::Divergence(format!("loss term {name} is non-finite ({v})")));
        }
    }
    let a = g.scale(watermark, weights.watermark);
    let b = g.scale(l2, weights.l2);
    let c = g.scale(ssim_loss, weights.ssim);
    let d = g.scale(jnd, weights.jnd);
    let ab = g.add(a, b);
    let cd = g.add(c, d);
    Ok(g.add(ab, cd))
}

// ---------------------------------------------------------------------------
// Plain-function forms
// ---------------------------------------------------------------------------

fn image_const(g: &mut Graph, image: &Image) -> VarId {
    let (h, w) = (image.height(), image.width());
    let x = image
        .data()
        .clone()
        .into_shape_with_order((1, 3, h, w))
        .unwrap();
    g.constant(x.into_dyn())
}

/// Mean BCE between a message and predicted probabilities.
pub fn watermark_loss(true_bits: &WatermarkBits, probabilities: &[f64]) -> Result<f64> {
    if true_bits.len() != probabilities.len() {
        return Err(Error::InvalidArgument(format!(
            "watermark_loss: {} bits vs {} probabilities",
            true_bits.len(),
            probabilities.len()
        )));
    }
    let l = probabilities.len();
    let mut g = Graph::new();
    let p = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, l]), probabilities.to_vec()).unwrap());
    let t = g.constant(
        ArrayD::from_shape_vec(
            IxDyn(&[1, l]),
            true_bits.bits().iter().map(|&b| b as f64).collect(),
        )
        .unwrap(),
    );
    let loss = bce_graph(&mut g, p, t);
    Ok(g.scalar_value(loss))
}

/// (mean squared error, 1 - SSIM) between two images.
pub fn fidelity_losses(original: &Image, watermarked: &Image) -> Result<(f64, f64)> {
    if original.data().shape() != watermarked.data().shape() {
        return Err(Error::InvalidArgument("fidelity_losses: shape mismatch".into()));
    }
    let mut g = Graph::new();
    let a = image_const(&mut g, original);
    let b = image_const(&mut g, watermarked);
    let l2 = l2_graph(&mut g, a, b);
    let s = ssim_graph(&mut g, a, b);
    Ok((g.scalar_value(l2), 1.0 - g.scalar_value(s)))
}

/// Mean structural similarity between two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.data().shape() != b.data().shape() {
        return Err(Error::InvalidArgument("ssim: shape mismatch".into()));
    }
    let mut g = Graph::new();
    let ai = image_const(&mut g, a);
    let bi = image_const(&mut g, b);
    let s = ssim_graph(&mut g, ai, bi);
    Ok(g.scalar_value(s))
}

/// Perceptually weighted absolute difference; `jnd` must come from the
/// original via [`compute_jnd`].
pub fn jnd_loss(original: &Image, watermarked: &Image, jnd: &JndMap) -> Result<f64> {
    if original.data().shape() != watermarked.data().shape() {
        return Err(Error::InvalidArgument("jnd_loss: shape mismatch".into()));
    }
    if jnd.0.dim() != (original.height(), original.width()) {
        return Err(Error::InvalidArgument("jnd_loss: map size mismatch".into()));
    }
    let mut g = Graph::new();
    let a = image_const(&mut g, original);
    let b = image_const(&mut g, watermarked);
    let loss = jnd_graph(&mut g, a, b, jnd);
    Ok(g.scalar_value(loss))
}

/// Weighted total; errors with term attribution on non-finite inputs.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [
        ("watermark", terms.watermark),
        ("l2", terms.l2),
        ("ssim", terms.ssim),
        ("jnd", terms.jnd),
    ] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("loss term {name} is non-finite ({v})")));
        }
    }
    Ok(weights.watermark * terms.watermark
        + weights.l2 * terms.l2
        + weights.ssim * terms.ssim
        + weights.jnd * terms.jnd)
}
