//! Eager tensor graph with reverse-mode differentiation.
//!
//! Each operation computes its value immediately and registers a backward
//! closure on a tape. `backward(loss)` walks the tape in reverse, producing
//! gradients for every variable that requires them. Values are f64
//! throughout; reductions are sequential and matrix products use fixed
//! panel blocking, so results are bit-reproducible across runs and thread
//! counts.
//!
//! Shape violations are programming errors and panic; caller-facing modules
//! validate their inputs before building graphs.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use num_complex::Complex64;

use crate::freq;
use crate::image::bilinear_axis_weights;

pub type Tensor = ArrayD<f64>;

/// Handle to a node in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradSink)>;

struct Step {
    back: BackFn,
}

/// Gradient accumulator used during the backward sweep.
pub struct GradSink<'a> {
    slots: &'a mut [Option<Tensor>],
    requires: &'a [bool],
}

impl GradSink<'_> {
    /// Whether a parent participates in differentiation at all.
    pub fn wants(&self, id: VarId) -> bool {
        self.requires[id.0]
    }

    /// Accumulate a gradient contribution into a parent's slot.
    pub fn add(&mut self, id: VarId, grad: Tensor) {
        if !self.requires[id.0] {
            return;
        }
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients keyed by variable id after a backward sweep.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.slots[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    steps: Vec<Option<Step>>,
    requires: Vec<bool>,
    /// (parameter name, var) pairs registered through `param_named`.
    bindings: Vec<(String, VarId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = &self.values[id.0];
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.requires[id.0]
    }

    pub fn bindings(&self) -> &[(String, VarId)] {
        &self.bindings
    }

    fn push(&mut self, value: Tensor, requires: bool, step: Option<Step>) -> VarId {
        self.values.push(value);
        self.requires.push(requires);
        self.steps.push(step);
        VarId(self.values.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, parents: &[VarId], back: BackFn) -> VarId {
        let requires = parents.iter().any(|p| self.requires[p.0]);
        let step = requires.then(|| Step { back });
        self.push(value, requires, step)
    }

    // -- leaves ---------------------------------------------------------------

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(value, true, None)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, None)
    }

    /// Named parameter leaf; the binding lets a trainer map gradients back to
    /// the parameter store. Frozen parameters enter as constants.
    pub fn param_named(&mut self, name: &str, value: Tensor, trainable: bool) -> VarId {
        let id = self.push(value, trainable, None);
        if trainable {
            self.bindings.push((name.to_string(), id));
        }
        id
    }

    // -- elementwise ----------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add: shape mismatch");
        let value = &self.values[a.0] + &self.values[b.0];
        self.push_op(value, &[a, b], Box::new(move |_v, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "sub: shape mismatch");
        let value = &self.values[a.0] - &self.values[b.0];
        self.push_op(value, &[a, b], Box::new(move |_v, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.mapv(|x| -x));
        }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "mul: shape mismatch");
        let value = &self.values[a.0] * &self.values[b.0];
        self.push_op(value, &[a, b], Box::new(move |v, g, sink| {
            if sink.wants(a) {
                sink.add(a, g * &v[b.0]);
            }
            if sink.wants(b) {
                sink.add(b, g * &v[a.0]);
            }
        }))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "div: shape mismatch");
        let value = &self.values[a.0] / &self.values[b.0];
        self.push_op(value, &[a, b], Box::new(move |v, g, sink| {
            if sink.wants(a) {
                sink.add(a, g / &v[b.0]);
            }
            if sink.wants(b) {
                let num = &v[a.0];
                let den = &v[b.0];
                let mut gb = g * num;
                gb.zip_mut_with(den, |x, &d| *x = -*x / (d * d));
                sink.add(b, gb);
            }
        }))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x * c);
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            sink.add(a, g.mapv(|x| x * c));
        }))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x + c);
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            sink.add(a, g.clone());
        }))
    }

    /// `a + alpha * b` fused, so the residual-application contract can be
    /// re-verified bit-exactly outside the graph.
    pub fn scale_add(&mut self, a: VarId, b: VarId, alpha: f64) -> VarId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "scale_add: shape mismatch");
        let mut value = self.values[b.0].mapv(|x| alpha * x);
        value += &self.values[a.0];
        self.push_op(value, &[a, b], Box::new(move |_v, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.mapv(|x| alpha * x));
        }))
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&mut self, a: VarId) -> VarId {
        let value = self.values[a.0].mapv(f64::abs);
        self.push_op(value, &[a], Box::new(move |v, g, sink| {
            let mut ga = g.clone();
            ga.zip_mut_with(&v[a.0], |x, &src| {
                *x *= if src > 0.0 {
                    1.0
                } else if src < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            sink.add(a, ga);
        }))
    }

    /// Gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let value = self.values[a.0].mapv(|x| x.clamp(lo, hi));
        self.push_op(value, &[a], Box::new(move |v, g, sink| {
            let mut ga = g.clone();
            ga.zip_mut_with(&v[a.0], |x, &src| {
                if !(src > lo && src < hi) {
                    *x = 0.0;
                }
            });
            sink.add(a, ga);
        }))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let value = self.values[a.0].mapv(f64::ln);
        self.push_op(value, &[a], Box::new(move |v, g, sink| {
            sink.add(a, g / &v[a.0]);
        }))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let value = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let saved = value.clone();
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            let mut ga = g.clone();
            ga.zip_mut_with(&saved, |x, &yy| *x *= yy * (1.0 - yy));
            sink.add(a, ga);
        }))
    }

    pub fn selu(&mut self, a: VarId) -> VarId {
        const LAMBDA: f64 = 1.0507009873554805;
        const ALPHA: f64 = 1.6732632423543772;
        let value = self.values[a.0].mapv(|x| {
            if x > 0.0 {
                LAMBDA * x
            } else {
                LAMBDA * ALPHA * (x.exp() - 1.0)
            }
        });
        self.push_op(value, &[a], Box::new(move |v, g, sink| {
            let mut ga = g.clone();
            ga.zip_mut_with(&v[a.0], |x, &src| {
                *x *= if src > 0.0 {
                    LAMBDA
                } else {
                    LAMBDA * ALPHA * src.exp()
                }
            });
            sink.add(a, ga);
        }))
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.values[a.0].sum();
        let shape = self.values[a.0].raw_dim();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            let gs = *g.iter().next().unwrap();
            sink.add(a, ArrayD::from_elem(shape.clone(), gs));
        }))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.values[a.0].len() as f64;
        let s = self.values[a.0].sum() / n;
        let shape = self.values[a.0].raw_dim();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            let gs = *g.iter().next().unwrap() / n;
            sink.add(a, ArrayD::from_elem(shape.clone(), gs));
        }))
    }

    // -- shape ----------------------------------------------------------------

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let old_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        let value = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            let gr = g
                .clone()
                .into_shape_with_order(IxDyn(&old_shape))
                .expect("reshape backward");
            sink.add(a, gr);
        }))
    }

    /// Concatenate along the channel axis (axis 1 of NCHW).
    pub fn concat_channels(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_channels");
        let owned_parts: Vec<VarId> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].shape()[1]).collect();
        self.push_op(value, parts, Box::new(move |_v, g, sink| {
            let mut start = 0;
            for (p, w) in owned_parts.iter().zip(&widths) {
                if sink.wants(*p) {
                    let gp = g
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + w))
                        .to_owned();
                    sink.add(*p, gp);
                }
                start += w;
            }
        }))
    }

    /// Select channels [start, end) along axis 1.
    pub fn slice_channels(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let value = self.values[a.0]
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        let full_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        self.push_op(value, &[a], Box::new(move |_v, g, sink| {
            let mut ga = ArrayD::zeros(IxDyn(&full_shape));
            ga.slice_axis_mut(Axis(1), ndarray::Slice::from(start..end))
                .assign(g);
            sink.add(a, ga);
        }))
    }

    // -- dense ----------------------------------------------------------------

    /// x: (N, F), w: (F, O), bias: (O). Returns (N, O).
    pub fn linear(&mut self, x: VarId, w: VarId, bias: VarId) -> VarId {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        let bv = self.values[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), wv.nrows(), "linear: inner dim mismatch");
        assert_eq!(wv.ncols(), bv.len(), "linear: bias width mismatch");
        let mut out = xv.dot(&wv);
        out += &bv;
        self.push_op(out.into_dyn(), &[x, w, bias], Box::new(move |v, g, sink| {
            let g2 = as2(g);
            if sink.wants(x) {
                let wv = as2(&v[w.0]);
                sink.add(x, g2.dot(&wv.t()).into_dyn());
            }
            if sink.wants(w) {
                let xv = as2(&v[x.0]);
                sink.add(w, xv.t().dot(&g2).into_dyn());
            }
            if sink.wants(bias) {
                sink.add(bias, g2.sum_axis(Axis(0)).into_dyn());
            }
        }))
    }

    // -- conv and friends -------------------------------------------------------

    /// x: (N, C, H, W), w: (O, C, kh, kw), bias: optional (O).
    /// Stride `s`, symmetric zero padding `p`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, bias: Option<VarId>, s: usize, p: usize) -> VarId {
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let (n, c, h, wd) = xv.dim();
        let (o, c2, kh, kw) = wv.dim();
        assert_eq!(c, c2, "conv2d: channel mismatch");
        assert!(h + 2 * p >= kh && wd + 2 * p >= kw, "conv2d: kernel larger than input");
        let value = {
            let cols = im2col(&xv, kh, kw, s, p);
            let w_mat = wv
                .to_owned()
                .into_shape_with_order((o, c * kh * kw))
                .unwrap();
            let mut out_mat = matmul_par(&w_mat.view(), &cols.view());
            if let Some(b) = bias {
                let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
                for (mut row, &bval) in out_mat.rows_mut().into_iter().zip(bv.iter()) {
                    row += bval;
                }
            }
            cols_to_nchw(&out_mat, n, o, out_len(h, kh, s, p), out_len(wd, kw, s, p))
        };
        let parents: Vec<VarId> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push_op(value.into_dyn(), &parents, Box::new(move |v, g, sink| {
            let g4 = as4(g);
            let (n, o, ho, wo) = g4.dim();
            let g_mat = nchw_to_cols(&g4);
            let wv = as4(&v[w.0]);
            let (_, c, kh, kw) = wv.dim();
            if sink.wants(w) {
                // Recompute im2col instead of saving it; trades ~15% compute
                // for not holding a k^2-times-larger buffer per conv.
                let xv = as4(&v[x.0]);
                let cols = im2col(&xv, kh, kw, s, p);
                let dw = matmul_par(&g_mat.view(), &cols.t());
                sink.add(
                    w,
                    dw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap(),
                );
            }
            if let Some(b) = bias {
                if sink.wants(b) {
                    let db = g_mat.sum_axis(Axis(1));
                    sink.add(b, db.into_dyn());
                }
            }
            if sink.wants(x) {
                let w_mat = wv
                    .to_owned()
                    .into_shape_with_order((o, c * kh * kw))
                    .unwrap();
                let dcols = matmul_par(&w_mat.t(), &g_mat.view());
                let xv = as4(&v[x.0]);
                let (_, _, h, wd) = xv.dim();
                let dx = col2im(&dcols, n, c, h, wd, kh, kw, s, p);
                debug_assert_eq!((ho, wo), (out_len(h, kh, s, p), out_len(wd, kw, s, p)));
                sink.add(x, dx.into_dyn());
            }
        }))
    }

    /// 2x2 average pooling with stride 2. Requires even spatial dims.
    pub fn avg_pool2(&mut self, x: VarId) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: dims must be even");
        let mut out = Array4::zeros((n, c, h / 2, w / 2));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[[b, ch, i, j]] = 0.25
                            * (xv[[b, ch, 2 * i, 2 * j]]
                                + xv[[b, ch, 2 * i, 2 * j + 1]]
                                + xv[[b, ch, 2 * i + 1, 2 * j]]
                                + xv[[b, ch, 2 * i + 1, 2 * j + 1]]);
                    }
                }
            }
        }
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let (n, c, ho, wo) = g4.dim();
            let mut dx = Array4::zeros((n, c, ho * 2, wo * 2));
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * g4[[b, ch, i, j]];
                            dx[[b, ch, 2 * i, 2 * j]] = v;
                            dx[[b, ch, 2 * i, 2 * j + 1]] = v;
                            dx[[b, ch, 2 * i + 1, 2 * j]] = v;
                            dx[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Adaptive average pooling to a fixed output size; bins follow the
    /// floor/ceil convention, so outputs larger than inputs duplicate bins.
    pub fn adaptive_avg_pool(&mut self, x: VarId, oh: usize, ow: usize) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let rows = adaptive_bins(h, oh);
        let cols = adaptive_bins(w, ow);
        let mut out = Array4::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let mut acc = 0.0;
                        for ii in r0..r1 {
                            for jj in c0..c1 {
                                acc += xv[[b, ch, ii, jj]];
                            }
                        }
                        out[[b, ch, i, j]] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
        }
        let in_shape = (n, c, h, w);
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let (n, c, _, _) = in_shape;
            let mut dx = Array4::zeros(in_shape);
            for b in 0..n {
                for ch in 0..c {
                    for (i, &(r0, r1)) in rows.iter().enumerate() {
                        for (j, &(c0, c1)) in cols.iter().enumerate() {
                            let v = g4[[b, ch, i, j]] / ((r1 - r0) * (c1 - c0)) as f64;
                            for ii in r0..r1 {
                                for jj in c0..c1 {
                                    dx[[b, ch, ii, jj]] += v;
                                }
                            }
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: VarId) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::zeros((n, c, h * 2, w * 2));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[b, ch, i, j]];
                        out[[b, ch, 2 * i, 2 * j]] = v;
                        out[[b, ch, 2 * i, 2 * j + 1]] = v;
                        out[[b, ch, 2 * i + 1, 2 * j]] = v;
                        out[[b, ch, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let (n, c, ho, wo) = g4.dim();
            let mut dx = Array4::zeros((n, c, ho / 2, wo / 2));
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..ho / 2 {
                        for j in 0..wo / 2 {
                            dx[[b, ch, i, j]] = g4[[b, ch, 2 * i, 2 * j]]
                                + g4[[b, ch, 2 * i, 2 * j + 1]]
                                + g4[[b, ch, 2 * i + 1, 2 * j]]
                                + g4[[b, ch, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Bilinear resampling to (oh, ow) with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: VarId, oh: usize, ow: usize) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        if (h, w) == (oh, ow) {
            // Identity shortcut keeps the tape small.
            return self.scale(x, 1.0);
        }
        let rows = bilinear_axis_weights(h, oh);
        let cols = bilinear_axis_weights(w, ow);
        let mut out = Array4::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                for (i, &(r0, r1, rf)) in rows.iter().enumerate() {
                    for (j, &(c0, c1, cf)) in cols.iter().enumerate() {
                        out[[b, ch, i, j]] = xv[[b, ch, r0, c0]] * (1.0 - rf) * (1.0 - cf)
                            + xv[[b, ch, r0, c1]] * (1.0 - rf) * cf
                            + xv[[b, ch, r1, c0]] * rf * (1.0 - cf)
                            + xv[[b, ch, r1, c1]] * rf * cf;
                    }
                }
            }
        }
        let in_shape = (n, c, h, w);
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let mut dx = Array4::zeros(in_shape);
            let (n, c, _, _) = in_shape;
            for b in 0..n {
                for ch in 0..c {
                    for (i, &(r0, r1, rf)) in rows.iter().enumerate() {
                        for (j, &(c0, c1, cf)) in cols.iter().enumerate() {
                            let gv = g4[[b, ch, i, j]];
                            dx[[b, ch, r0, c0]] += gv * (1.0 - rf) * (1.0 - cf);
                            dx[[b, ch, r0, c1]] += gv * (1.0 - rf) * cf;
                            dx[[b, ch, r1, c0]] += gv * rf * (1.0 - cf);
                            dx[[b, ch, r1, c1]] += gv * rf * cf;
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Depthwise VALID cross-correlation with a fixed (non-trainable) kernel;
    /// used by the structural-similarity windowing.
    pub fn depthwise_valid_filter(&mut self, x: VarId, kernel: Array2<f64>) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let (kh, kw) = kernel.dim();
        assert!(h >= kh && w >= kw, "depthwise_valid_filter: kernel exceeds input");
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut out = Array4::zeros((n, c, ho, wo));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                acc += kernel[[ki, kj]] * xv[[b, ch, i + ki, j + kj]];
                            }
                        }
                        out[[b, ch, i, j]] = acc;
                    }
                }
            }
        }
        let in_shape = (n, c, h, w);
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let (n, c, ho, wo) = g4.dim();
            let mut dx = Array4::zeros(in_shape);
            let (kh, kw) = kernel.dim();
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = g4[[b, ch, i, j]];
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    dx[[b, ch, i + ki, j + kj]] += gv * kernel[[ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Batch normalization in training mode (batch statistics). Returns the
    /// normalized output plus the per-channel batch mean and biased variance,
    /// so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> (VarId, Array1<f64>, Array1<f64>) {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f64;
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(gv.len(), c, "batch_norm: gamma width");

        let mut mu = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        acc += xv[[b, ch, i, j]];
                    }
                }
            }
            mu[ch] = acc / m;
            let mut vacc = 0.0;
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let d = xv[[b, ch, i, j]] - mu[ch];
                        vacc += d * d;
                    }
                }
            }
            var[ch] = vacc / m;
        }
        let istd: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (xv[[b, ch, i, j]] - mu[ch]) * istd[ch];
                        xhat[[b, ch, i, j]] = xh;
                        y[[b, ch, i, j]] = gv[ch] * xh + bv[ch];
                    }
                }
            }
        }

        let mu_out = mu.clone();
        let var_out = var.clone();
        let istd_b = istd;
        let xhat_b = xhat;
        let out = self.push_op(y.into_dyn(), &[x, gamma, beta], Box::new(move |v, g, sink| {
            let g4 = as4(g);
            let (n, c, h, w) = g4.dim();
            let m = (n * h * w) as f64;
            let gammav = v[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
            if sink.wants(beta) {
                let mut db = Array1::zeros(c);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                acc += g4[[b, ch, i, j]];
                            }
                        }
                    }
                    db[ch] = acc;
                }
                sink.add(beta, db.into_dyn());
            }
            if sink.wants(gamma) {
                let mut dg = Array1::zeros(c);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                acc += g4[[b, ch, i, j]] * xhat_b[[b, ch, i, j]];
                            }
                        }
                    }
                    dg[ch] = acc;
                }
                sink.add(gamma, dg.into_dyn());
            }
            if sink.wants(x) {
                // dx = istd/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                let mut dx = Array4::zeros((n, c, h, w));
                for ch in 0..c {
                    let gscale = gammav[ch];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for b in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let dxh = g4[[b, ch, i, j]] * gscale;
                                s1 += dxh;
                                s2 += dxh * xhat_b[[b, ch, i, j]];
                            }
                        }
                    }
                    for b in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let dxh = g4[[b, ch, i, j]] * gscale;
                                dx[[b, ch, i, j]] = istd_b[ch] / m
                                    * (m * dxh - s1 - xhat_b[[b, ch, i, j]] * s2);
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            }
        }));
        (out, mu_out, var_out)
    }

    /// Per-channel affine map y = x * scale[c] + shift[c] with constant
    /// coefficients; the evaluation-mode form of batch normalization.
    pub fn channel_affine(&mut self, x: VarId, scale: Array1<f64>, shift: Array1<f64>) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        assert_eq!(scale.len(), c);
        let mut out = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[[b, ch, i, j]] = xv[[b, ch, i, j]] * scale[ch] + shift[ch];
                    }
                }
            }
        }
        self.push_op(out.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let g4 = as4(g);
            let (n, c, h, w) = g4.dim();
            let mut dx = Array4::zeros((n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[b, ch, i, j]] = g4[[b, ch, i, j]] * scale[ch];
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Low-pass projection: per (batch, channel) plane, FFT, zero the stop
    /// band of the (unshifted) mask, inverse FFT, take the real part. The
    /// projection is an orthogonal, self-adjoint linear map, so the backward
    /// pass applies the identical projection to the gradient.
    pub fn lowpass_project(&mut self, x: VarId, mask_unshifted: Array2<bool>) -> VarId {
        let value = lowpass_apply(&as4(&self.values[x.0]).to_owned(), &mask_unshifted);
        let mask_b = mask_unshifted;
        self.push_op(value.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let dx = lowpass_apply(&as4(g).to_owned(), &mask_b);
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Index-threshold DCT low-band projection per plane; like the FFT
    /// variant this is an orthogonal self-adjoint projection, so backward
    /// reapplies it.
    pub fn dct_project(&mut self, x: VarId, u_cut: usize, v_cut: usize) -> VarId {
        let xv = as4(&self.values[x.0]);
        let (_, _, h, w) = xv.dim();
        let row_basis = freq::dct_matrix(h);
        let col_basis = freq::dct_matrix(w);
        let apply = move |arr: &Array4<f64>,
                          row_basis: &Array2<f64>,
                          col_basis: &Array2<f64>|
              -> Array4<f64> {
            let (n, c, h, w) = arr.dim();
            let mut out = Array4::zeros((n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    let plane = arr.index_axis(Axis(0), b).index_axis(Axis(0), ch).to_owned();
                    let lo = freq::dct_low_plane(&plane, row_basis, col_basis, u_cut, v_cut);
                    out.index_axis_mut(Axis(0), b)
                        .index_axis_mut(Axis(0), ch)
                        .assign(&lo);
                }
            }
            out
        };
        let value = apply(&xv.to_owned(), &row_basis, &col_basis);
        self.push_op(value.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let dx = apply(&as4(g).to_owned(), &row_basis, &col_basis);
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Separable blur with replicate padding per plane; backward applies the
    /// exact adjoint (scatter with the same edge clamping).
    pub fn blur_replicate(&mut self, x: VarId, kernel: Vec<f64>) -> VarId {
        let xv = as4(&self.values[x.0]);
        let per_plane = |arr: &Array4<f64>, f: &dyn Fn(&Array2<f64>) -> Array2<f64>| {
            let (n, c, h, w) = arr.dim();
            let mut out = Array4::zeros((n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    let plane = arr.index_axis(Axis(0), b).index_axis(Axis(0), ch).to_owned();
                    out.index_axis_mut(Axis(0), b)
                        .index_axis_mut(Axis(0), ch)
                        .assign(&f(&plane));
                }
            }
            out
        };
        let kf = kernel.clone();
        let value = per_plane(&xv.to_owned(), &|p| crate::filters::separable_filter(p, &kf));
        self.push_op(value.into_dyn(), &[x], Box::new(move |_v, g, sink| {
            let dx = per_plane(&as4(g).to_owned(), &|p| {
                crate::filters::separable_filter_adjoint(p, &kernel)
            });
            sink.add(x, dx.into_dyn());
        }))
    }

    /// Differentiable low-band extraction matching
    /// [`freq::decompose`]'s low band bit-for-bit for every extractor kind.
    pub fn low_band(&mut self, x: VarId, extractor: &freq::ExtractorKind) -> crate::error::Result<VarId> {
        extractor.validate()?;
        let shape = self.values[x.0].shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        Ok(match *extractor {
            freq::ExtractorKind::Fft { radius_fraction } => {
                let mask = freq::build_mask(h, w, radius_fraction)?;
                self.lowpass_project(x, mask.unshifted())
            }
            freq::ExtractorKind::Dct { coefficient_fraction } => {
                let (u_cut, v_cut) = freq::dct_cutoffs(h, w, coefficient_fraction);
                self.dct_project(x, u_cut, v_cut)
            }
            freq::ExtractorKind::Gaussian { kernel_size, sigma } => {
                let kernel = crate::filters::gaussian_kernel_1d(kernel_size, sigma)?;
                self.blur_replicate(x, kernel)
            }
        })
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns per-variable gradients for
    /// every grad-requiring leaf (and nothing else; interior grads are freed
    /// as soon as they have been consumed).
    pub fn backward(&self, loss: VarId) -> Grads {
        assert!(
            self.requires[loss.0],
            "backward: loss does not depend on any differentiable input"
        );
        assert_eq!(self.values[loss.0].len(), 1, "backward: loss must be scalar");
        let mut slots: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            match &self.steps[i] {
                Some(step) => {
                    let mut sink = GradSink { slots: &mut slots, requires: &self.requires };
                    (step.back)(&self.values, &g, &mut sink);
                }
                None => {
                    // Leaf: keep the accumulated gradient for retrieval.
                    slots[i] = Some(g);
                }
            }
        }
        Grads { slots }
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected rank-4 tensor")
}

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// (start, end) index pairs for adaptive pooling bins.
fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end.max(start + 1).min(input))
        })
        .collect()
}

/// Deterministic parallel matrix product: output columns are split into
/// fixed-size chunks, each computed by a sequential GEMM, so per-element
/// accumulation order never depends on the thread count.
pub(crate) fn matmul_par(a: &ndarray::ArrayView2<'_, f64>, b: &ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul: inner dimension mismatch");
    let mut out = Array2::zeros((m, n));
    const CHUNK: usize = 2048;
    if n <= CHUNK {
        general_mat_mul(1.0, a, b, 0.0, &mut out.view_mut());
        return out;
    }
    let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(1), CHUNK).collect();
    let b_chunks: Vec<_> = b.axis_chunks_iter(Axis(1), CHUNK).collect();
    out_chunks
        .into_par_iter()
        .zip(b_chunks.into_par_iter())
        .for_each(|(mut oc, bc)| {
            general_mat_mul(1.0, a, &bc, 0.0, &mut oc);
        });
    out
}

/// Unfold (N, C, H, W) into (C*kh*kw, N*Ho*Wo) patch columns.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = out_len(h, kh, stride, pad);
    let wo = out_len(w, kw, stride, pad);
    let mut cols = Array2::zeros((c * kh * kw, n * ho * wo));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let mut row_view = cols.row_mut(row);
                for b in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let base = (b * ho + oy) * wo;
                        if iy < 0 || iy >= h as isize {
                            continue; // zero padding already in place
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row_view[base + ox] = x[[b, ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold (C*kh*kw, N*Ho*Wo) patch-column gradients back into (N, C, H, W),
/// accumulating overlaps. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = out_len(h, kh, stride, pad);
    let wo = out_len(w, kw, stride, pad);
    let mut x = Array4::zeros((n, c, h, w));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let row_view = cols.row(row);
                for b in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[b, ch, iy as usize, ix as usize]] += row_view[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// (O, N*Ho*Wo) matrix to (N, O, Ho, Wo).
fn cols_to_nchw(mat: &Array2<f64>, n: usize, o: usize, ho: usize, wo: usize) -> Array4<f64> {
    let mut out = Array4::zeros((n, o, ho, wo));
    for oc in 0..o {
        let row = mat.row(oc);
        for b in 0..n {
            for y in 0..ho {
                for x in 0..wo {
                    out[[b, oc, y, x]] = row[(b * ho + y) * wo + x];
                }
            }
        }
    }
    out
}

/// (N, O, Ho, Wo) to (O, N*Ho*Wo).
fn nchw_to_cols(g: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, o, ho, wo) = g.dim();
    let mut out = Array2::zeros((o, n * ho * wo));
    for oc in 0..o {
        let mut row = out.row_mut(oc);
        for b in 0..n {
            for y in 0..ho {
                for x in 0..wo {
                    row[(b * ho + y) * wo + x] = g[[b, oc, y, x]];
                }
            }
        }
    }
    out
}

/// Apply the low-pass projection to each (batch, channel) plane.
fn lowpass_apply(x: &Array4<f64>, mask_unshifted: &Array2<bool>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert_eq!(mask_unshifted.dim(), (h, w), "lowpass mask size mismatch");
    let mut out = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), b).index_axis(Axis(0), ch).to_owned();
            let mut spec = freq::fft2(&plane);
            for (idx, keep) in mask_unshifted.indexed_iter() {
                if !keep {
                    spec[idx] = Complex64::new(0.0, 0.0);
                }
            }
            let inv = freq::ifft2(&spec);
            let max_imag = inv.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
            debug_assert!(max_imag < 1e-6, "lowpass projection imaginary residue {max_imag}");
            let mut target = out.index_axis_mut(Axis(0), b);
            let mut target = target.index_axis_mut(Axis(0), ch);
            target.assign(&inv.mapv(|z| z.re));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freq::build_mask;
    use crate::nn::gradcheck::{check_scalar_fn, GradCheckConfig};
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.input(arr1(&[1.0, 2.0]).into_dyn());
        let b = g.input(arr1(&[3.0, 4.0]).into_dyn());
        let s = g.mul(a, b);
        let loss = g.sum_all(s);
        let mut grads = g.backward(loss);
        assert_eq!(grads.take(a).unwrap(), arr1(&[3.0, 4.0]).into_dyn());
        assert_eq!(grads.take(b).unwrap(), arr1(&[1.0, 2.0]).into_dyn());
    }

    #[test]
    fn matmul_par_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((7, 13), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((13, 3000), |_| rng.gen_range(-1.0..1.0));
        let par = matmul_par(&a.view(), &b.view());
        let seq = a.dot(&b);
        // Chunked and plain GEMM share the same per-element accumulation order.
        assert_eq!(par, seq);
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((2, 3, 6, 5), |_| rng.gen_range(-1.0..1.0f64));
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.gen_range(-1.0..1.0f64));
        let bias = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0f64));
        let (s, p) = (1usize, 1usize);

        let mut g = Graph::new();
        let xi = g.input(x.clone().into_dyn());
        let wi = g.input(w.clone().into_dyn());
        let bi = g.input(bias.clone().into_dyn());
        let out = g.conv2d(xi, wi, Some(bi), s, p);
        let got = as4(g.value(out)).to_owned();

        let (ho, wo) = (6, 5);
        for b in 0..2 {
            for o in 0..4 {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = i as isize + ki as isize - 1;
                                    let ix = j as isize + kj as isize - 1;
                                    if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                        acc += x[[b, c, iy as usize, ix as usize]]
                                            * w[[o, c, ki, kj]];
                                    }
                                }
                            }
                        }
                        assert!((got[[b, o, i, j]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x0 = rand_tensor(&[1, 2, 5, 5], 3);
        let w0 = rand_tensor(&[3, 2, 3, 3], 4);
        let b0 = rand_tensor(&[3], 5);

        // d/dx
        let f_x = |x: &Tensor| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let wi = g.constant(w0.clone());
            let bi = g.constant(b0.clone());
            let out = g.conv2d(xi, wi, Some(bi), 2, 1);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let analytic_x = {
            let mut g = Graph::new();
            let xi = g.input(x0.clone());
            let wi = g.input(w0.clone());
            let bi = g.input(b0.clone());
            let out = g.conv2d(xi, wi, Some(bi), 2, 1);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            let mut grads = g.backward(loss);
            (grads.take(xi).unwrap(), grads.take(wi).unwrap(), grads.take(bi).unwrap())
        };
        let rep = check_scalar_fn(&f_x, &x0, &analytic_x.0, &GradCheckConfig::default());
        assert!(rep.pass(), "dx: {rep:?}");

        let f_w = |w: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(x0.clone());
            let wi = g.input(w.clone());
            let bi = g.constant(b0.clone());
            let out = g.conv2d(xi, wi, Some(bi), 2, 1);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_w, &w0, &analytic_x.1, &GradCheckConfig::default());
        assert!(rep.pass(), "dw: {rep:?}");

        let f_b = |b: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(x0.clone());
            let wi = g.constant(w0.clone());
            let bi = g.input(b.clone());
            let out = g.conv2d(xi, wi, Some(bi), 2, 1);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_b, &b0, &analytic_x.2, &GradCheckConfig::default());
        assert!(rep.pass(), "db: {rep:?}");
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let x0 = rand_tensor(&[4, 6], 8);
        let run = |x: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let s = g.sigmoid(xi);
            let e = g.selu(xi);
            let m = g.mul(s, e);
            let a = g.abs(m);
            let c = g.clamp(a, 0.05, 0.8);
            let l = g.ln(c);
            let loss = g.mean_all(l);
            if want_grad {
                let mut grads = g.backward(loss);
                (g.scalar_value(loss), Some(grads.take(xi).unwrap()))
            } else {
                (g.scalar_value(loss), None)
            }
        };
        let (_, analytic) = run(&x0, true);
        let f = |x: &Tensor| run(x, false).0;
        let rep = check_scalar_fn(&f, &x0, &analytic.unwrap(), &GradCheckConfig::default());
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn linear_gradcheck() {
        let x0 = rand_tensor(&[3, 5], 10);
        let w0 = rand_tensor(&[5, 4], 11);
        let b0 = rand_tensor(&[4], 12);
        let analytic = {
            let mut g = Graph::new();
            let xi = g.input(x0.clone());
            let wi = g.input(w0.clone());
            let bi = g.input(b0.clone());
            let out = g.linear(xi, wi, bi);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            let mut grads = g.backward(loss);
            (grads.take(wi).unwrap(), grads.take(bi).unwrap())
        };
        let f_w = |w: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(x0.clone());
            let wi = g.input(w.clone());
            let bi = g.constant(b0.clone());
            let out = g.linear(xi, wi, bi);
            let sq = g.mul(out, out);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_w, &w0, &analytic.0, &GradCheckConfig::default());
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn pool_resize_concat_gradcheck() {
        let x0 = rand_tensor(&[1, 2, 6, 6], 13);
        let run = |x: &Tensor, want: bool| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let p = g.avg_pool2(xi);
            let ap = g.adaptive_avg_pool(p, 5, 4);
            let up = g.upsample_nearest2(ap);
            let bi = g.bilinear_resize(up, 6, 6);
            let cat = g.concat_channels(&[bi, xi]);
            let part = g.slice_channels(cat, 1, 3);
            let sq = g.mul(part, part);
            let loss = g.mean_all(sq);
            if want {
                let mut grads = g.backward(loss);
                (g.scalar_value(loss), Some(grads.take(xi).unwrap()))
            } else {
                (g.scalar_value(loss), None)
            }
        };
        let (_, analytic) = run(&x0, true);
        let f = |x: &Tensor| run(x, false).0;
        let rep = check_scalar_fn(&f, &x0, &analytic.unwrap(), &GradCheckConfig::default());
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn batch_norm_train_gradcheck() {
        let x0 = rand_tensor(&[2, 3, 4, 4], 14);
        let g0 = rand_tensor(&[3], 15);
        let b0 = rand_tensor(&[3], 16);
        let analytic = {
            let mut g = Graph::new();
            let xi = g.input(x0.clone());
            let gi = g.input(g0.clone());
            let bi = g.input(b0.clone());
            let (y, _, _) = g.batch_norm_train(xi, gi, bi, 1e-5);
            let s = g.sigmoid(y);
            let loss = g.mean_all(s);
            let mut grads = g.backward(loss);
            (
                grads.take(xi).unwrap(),
                grads.take(gi).unwrap(),
                grads.take(bi).unwrap(),
            )
        };
        let f_x = |x: &Tensor| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let gi = g.constant(g0.clone());
            let bi = g.constant(b0.clone());
            let (y, _, _) = g.batch_norm_train(xi, gi, bi, 1e-5);
            let s = g.sigmoid(y);
            let loss = g.mean_all(s);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_x, &x0, &analytic.0, &GradCheckConfig::default());
        assert!(rep.pass(), "dx: {rep:?}");
        let f_g = |gm: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(x0.clone());
            let gi = g.input(gm.clone());
            let bi = g.constant(b0.clone());
            let (y, _, _) = g.batch_norm_train(xi, gi, bi, 1e-5);
            let s = g.sigmoid(y);
            let loss = g.mean_all(s);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_g, &g0, &analytic.1, &GradCheckConfig::default());
        assert!(rep.pass(), "dgamma: {rep:?}");
        let f_b = |bm: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(x0.clone());
            let gi = g.constant(g0.clone());
            let bi = g.input(bm.clone());
            let (y, _, _) = g.batch_norm_train(xi, gi, bi, 1e-5);
            let s = g.sigmoid(y);
            let loss = g.mean_all(s);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f_b, &b0, &analytic.2, &GradCheckConfig::default());
        assert!(rep.pass(), "dbeta: {rep:?}");
    }

    #[test]
    fn lowpass_projection_is_idempotent_and_self_adjoint() {
        let mask = build_mask(8, 8, 0.5).unwrap().unshifted();
        let x = as4(&rand_tensor(&[1, 1, 8, 8], 17)).to_owned();
        let y = lowpass_apply(&x, &mask);
        let yy = lowpass_apply(&y, &mask);
        for (a, b) in y.iter().zip(yy.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Self-adjointness: <Px, z> == <x, Pz>.
        let z = as4(&rand_tensor(&[1, 1, 8, 8], 18)).to_owned();
        let pz = lowpass_apply(&z, &mask);
        let lhs: f64 = y.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(pz.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn lowpass_projection_gradcheck() {
        let mask = build_mask(8, 8, 0.4).unwrap().unshifted();
        let x0 = rand_tensor(&[1, 3, 8, 8], 19);
        let analytic = {
            let mut g = Graph::new();
            let xi = g.input(x0.clone());
            let lp = g.lowpass_project(xi, mask.clone());
            let sq = g.mul(lp, lp);
            let loss = g.mean_all(sq);
            let mut grads = g.backward(loss);
            grads.take(xi).unwrap()
        };
        let mask2 = mask.clone();
        let f = move |x: &Tensor| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let lp = g.lowpass_project(xi, mask2.clone());
            let sq = g.mul(lp, lp);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f, &x0, &analytic, &GradCheckConfig::default());
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn low_band_matches_spatial_decompose_for_all_extractors() {
        use crate::freq::{decompose, ExtractorKind};
        use crate::synth;
        let img = synth::natural_image(31, 16, 16).unwrap();
        for kind in [
            ExtractorKind::Fft { radius_fraction: 0.3 },
            ExtractorKind::Dct { coefficient_fraction: 0.25 },
            ExtractorKind::Gaussian { kernel_size: 5, sigma: 1.1 },
        ] {
            let band = decompose(&img, &kind).unwrap();
            let mut g = Graph::new();
            let x4 = img.data().clone().into_shape_with_order((1, 3, 16, 16)).unwrap();
            let xi = g.constant(x4.into_dyn());
            let low = g.low_band(xi, &kind).unwrap();
            let got = g.value(low);
            for c in 0..3 {
                for i in 0..16 {
                    for j in 0..16 {
                        assert_eq!(
                            got[[0, c, i, j]],
                            band.low[[c, i, j]],
                            "kind {kind:?} at ({c},{i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dct_and_blur_band_gradchecks() {
        use crate::freq::ExtractorKind;
        for kind in [
            ExtractorKind::Dct { coefficient_fraction: 0.3 },
            ExtractorKind::Gaussian { kernel_size: 5, sigma: 1.3 },
        ] {
            let x0 = rand_tensor(&[1, 2, 8, 8], 41);
            let analytic = {
                let mut g = Graph::new();
                let xi = g.input(x0.clone());
                let lp = g.low_band(xi, &kind).unwrap();
                let sq = g.mul(lp, lp);
                let loss = g.mean_all(sq);
                let mut grads = g.backward(loss);
                grads.take(xi).unwrap()
            };
            let kind2 = kind.clone();
            let f = move |x: &Tensor| {
                let mut g = Graph::new();
                let xi = g.input(x.clone());
                let lp = g.low_band(xi, &kind2).unwrap();
                let sq = g.mul(lp, lp);
                let loss = g.mean_all(sq);
                g.scalar_value(loss)
            };
            let rep = check_scalar_fn(&f, &x0, &analytic, &GradCheckConfig::default());
            assert!(rep.pass(), "{kind:?}: {rep:?}");
        }
    }

    #[test]
    fn depthwise_filter_gradcheck() {
        let kernel = arr2(&[[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]]);
        let x0 = rand_tensor(&[2, 2, 5, 5], 20);
        let analytic = {
            let mut g = Graph::new();
            let xi = g.input(x0.clone());
            let f = g.depthwise_valid_filter(xi, kernel.clone());
            let sq = g.mul(f, f);
            let loss = g.mean_all(sq);
            let mut grads = g.backward(loss);
            grads.take(xi).unwrap()
        };
        let k2 = kernel.clone();
        let f = move |x: &Tensor| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let fl = g.depthwise_valid_filter(xi, k2.clone());
            let sq = g.mul(fl, fl);
            let loss = g.mean_all(sq);
            g.scalar_value(loss)
        };
        let rep = check_scalar_fn(&f, &x0, &analytic, &GradCheckConfig::default());
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param_named("x", arr1(&[1.0, 2.0]).into_dyn(), true);
        let w = g.param_named("w", arr1(&[3.0, 4.0]).into_dyn(), false);
        let m = g.mul(x, w);
        let loss = g.sum_all(m);
        let mut grads = g.backward(loss);
        assert!(grads.take(x).is_some());
        assert!(grads.take(w).is_none());
        assert_eq!(g.bindings().len(), 1);
    }
}
