//! Network building blocks over the tensor graph.
//!
//! Layers hold only their configuration and parameter names; the parameters
//! themselves live in a [`ParamStore`] keyed by name. That single store is
//! what the optimizer updates, the checkpoint serializes, and the freeze
//! contract hashes.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Graph, Tensor, VarId};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    /// Trainable parameters receive gradients; buffers (running statistics)
    /// and frozen sub-models do not.
    pub trainable: bool,
}

/// Named parameter arrays in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        assert!(
            self.entries
                .insert(name.to_string(), ParamEntry { value, trainable })
                .is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merge another store under a name prefix (consumes it).
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (name, entry) in other.entries {
            self.insert(&format!("{prefix}.{name}"), entry.value, entry.trainable);
        }
    }

    /// Merge another store as-is (consumes it). Duplicate names panic.
    pub fn merge(&mut self, other: ParamStore) {
        for (name, entry) in other.entries {
            self.insert(&name, entry.value, entry.trainable);
        }
    }

    /// Clone the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            if name.starts_with(prefix) {
                out.insert(name, entry.value.clone(), entry.trainable);
            }
        }
        out
    }

    /// Content hash restricted to names starting with `prefix`.
    pub fn subset_hash(&self, prefix: &str) -> String {
        self.subset(prefix).content_hash()
    }

    /// Freeze every entry (e.g. a codec before watermark training).
    pub fn freeze_all(&mut self) {
        for entry in self.entries.values_mut() {
            entry.trainable = false;
        }
    }

    /// SHA-256 over names, shapes, and raw little-endian values, in sorted
    /// name order. Used to verify the codec freeze contract.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in entry.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in entry.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Register a stored parameter in a graph; trainable entries collect
    /// gradients through the graph's name bindings.
    pub fn bind(&self, g: &mut Graph, name: &str) -> VarId {
        let entry = self.get(name);
        g.param_named(name, entry.value.clone(), entry.trainable)
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Deterministic fan-in-scaled normal init (lecun-normal), the conventional
/// choice under SELU activations.
pub fn lecun_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller from the seeded stream.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn seeded_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Fully-connected layer with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize) -> Self {
        Self { name: name.to_string(), in_features: in_f, out_features: out_f }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, zero: bool) {
        let w = if zero {
            ArrayD::zeros(IxDyn(&[self.in_features, self.out_features]))
        } else {
            lecun_normal(rng, &[self.in_features, self.out_features], self.in_features)
        };
        store.insert(&format!("{}.weight", self.name), w, true);
        store.insert(
            &format!("{}.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.out_features])),
            true,
        );
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: VarId) -> VarId {
        let w = store.bind(g, &format!("{}.weight", self.name));
        let b = store.bind(g, &format!("{}.bias", self.name));
        g.linear(x, w, b)
    }
}

/// 2D convolution; bias optional (omitted under a following norm layer).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Self { name: name.to_string(), in_ch, out_ch, kernel, stride, pad, bias }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, zero: bool) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        let w = if zero {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            lecun_normal(rng, &shape, fan_in)
        };
        store.insert(&format!("{}.weight", self.name), w, true);
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                ArrayD::zeros(IxDyn(&[self.out_ch])),
                true,
            );
        }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: VarId) -> VarId {
        let w = store.bind(g, &format!("{}.weight", self.name));
        let b = self.bias.then(|| store.bind(g, &format!("{}.bias", self.name)));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Pending running-statistics updates collected during a training-mode
/// forward pass. Keeping them out of the forward path lets every forward
/// borrow the store immutably; the trainer applies the sink afterwards.
#[derive(Debug, Default)]
pub struct BnSink {
    updates: Vec<BnUpdate>,
}

#[derive(Debug)]
struct BnUpdate {
    name: String,
    mu: Array1<f64>,
    var: Array1<f64>,
    sample_count: f64,
    momentum: f64,
}

impl BnSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold the collected batch statistics into the running buffers.
    pub fn apply(self, store: &mut ParamStore) {
        for u in self.updates {
            let unbias = if u.sample_count > 1.0 {
                u.sample_count / (u.sample_count - 1.0)
            } else {
                1.0
            };
            let rm = store.get_mut(&format!("{}.running_mean", u.name));
            rm.value.zip_mut_with(&u.mu.clone().into_dyn(), |r, &b| {
                *r = (1.0 - u.momentum) * *r + u.momentum * b
            });
            let rv = store.get_mut(&format!("{}.running_var", u.name));
            rv.value.zip_mut_with(&u.var.mapv(|v| v * unbias).into_dyn(), |r, &b| {
                *r = (1.0 - u.momentum) * *r + u.momentum * b
            });
        }
    }
}

/// Batch normalization over (N, H, W) per channel. Scale starts at one and
/// shift at zero (identity); running statistics start at (0, 1).
///
/// A `Some` sink selects training mode (batch statistics, update recorded);
/// `None` selects evaluation mode (frozen running statistics applied as a
/// constant per-channel affine map).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self { name: name.to_string(), channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn register(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert(&format!("{}.gamma", self.name), ArrayD::from_elem(IxDyn(&[c]), 1.0), true);
        store.insert(&format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[c])), true);
        store.insert(&format!("{}.running_mean", self.name), ArrayD::zeros(IxDyn(&[c])), false);
        store.insert(
            &format!("{}.running_var", self.name),
            ArrayD::from_elem(IxDyn(&[c]), 1.0),
            false,
        );
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: VarId,
        sink: Option<&mut BnSink>,
    ) -> VarId {
        let gamma_name = format!("{}.gamma", self.name);
        let beta_name = format!("{}.beta", self.name);
        match sink {
            Some(sink) => {
                let gamma = store.bind(g, &gamma_name);
                let beta = store.bind(g, &beta_name);
                let (y, mu, var) = g.batch_norm_train(x, gamma, beta, self.eps);
                let shape = g.value(x).shape();
                let sample_count = (shape[0] * shape[2] * shape[3]) as f64;
                sink.updates.push(BnUpdate {
                    name: self.name.clone(),
                    mu,
                    var,
                    sample_count,
                    momentum: self.momentum,
                });
                y
            }
            None => {
                let rm = &store.get(&format!("{}.running_mean", self.name)).value;
                let rv = &store.get(&format!("{}.running_var", self.name)).value;
                let gamma = &store.get(&gamma_name).value;
                let beta = &store.get(&beta_name).value;
                let mut scale = Array1::zeros(self.channels);
                let mut shift = Array1::zeros(self.channels);
                for c in 0..self.channels {
                    let istd = 1.0 / (rv[[c]] + self.eps).sqrt();
                    scale[c] = gamma[[c]] * istd;
                    shift[c] = beta[[c]] - gamma[[c]] * rm[[c]] * istd;
                }
                g.channel_affine(x, scale, shift)
            }
        }
    }
}

/// The recurring 3x3 Conv + BatchNorm + SELU block.
#[derive(Clone, Debug)]
pub struct ConvBnSelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnSelu {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        let conv = Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, 1, 1, false);
        let bn = BatchNorm2d::new(&format!("{name}.bn"), out_ch);
        Self { conv, bn }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.register(store, rng, false);
        self.bn.register(store);
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: VarId,
        sink: Option<&mut BnSink>,
    ) -> VarId {
        let c = self.conv.forward(store, g, x);
        let b = self.bn.forward(store, g, c, sink);
        g.selu(b)
    }
}
