//! Checkpoint container: named f64 arrays plus a JSON metadata header.
//!
//! Layout:
//! ```text
//! magic "LWCK0001" | u64 LE header length | header JSON | f64 LE data
//! ```
//! The header lists tensors sorted by name with shapes and data offsets, so
//! files written from identical state are byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::CodecSpec;
use crate::embednet::EmbedConfig;
use crate::error::{Error, Result};
use crate::extractnet::ExtractNetConfig;
use crate::freq::ExtractorKind;
use crate::nn::{ParamStore, Tensor};
use crate::trainer::{MetricRow, TrainConfig};

const MAGIC: &[u8; 8] = b"LWCK0001";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Offset into the data section, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// In-memory form of a container file.
pub struct Container {
    pub meta: serde_json::Value,
    /// name -> (tensor, trainable)
    pub tensors: BTreeMap<String, (Tensor, bool)>,
}

impl Container {
    pub fn from_store(meta: serde_json::Value, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(name, entry)| (name.clone(), (entry.value.clone(), entry.trainable)))
            .collect();
        Self { meta, tensors }
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, (value, trainable)) in self.tensors {
            store.insert(&name, value, trainable);
        }
        store
    }

    /// Deserialize the typed metadata section.
    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let mut records = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, (tensor, trainable)) in &self.tensors {
            records.push(TensorRecord {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                trainable: *trainable,
                offset,
                len: tensor.len(),
            });
            offset += tensor.len();
        }
        let header = Header { meta: self.meta.clone(), tensors: records };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, (tensor, _)) in &self.tensors {
            // Standard-layout iteration; all graph tensors are contiguous.
            for v in tensor.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never corrupts a
        // resumable snapshot.
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut buf = std::io::BufWriter::new(file);
            self.write_to(&mut buf)?;
            buf.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated container: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint container".into()));
        }
        let mut len_bytes = [0u8; 8];
        input
            .read_exact(&mut len_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated header length: {e}")))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        input
            .read_exact(&mut header_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        let mut data = vec![0u8; total * 8];
        input
            .read_exact(&mut data)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;

        let mut tensors = BTreeMap::new();
        for rec in header.tensors {
            let expected: usize = rec.shape.iter().product();
            if expected != rec.len {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: shape/len mismatch",
                    rec.name
                )));
            }
            let start = rec.offset * 8;
            let end = start + rec.len * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: data range out of bounds",
                    rec.name
                )));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_shape_vec(ndarray::IxDyn(&rec.shape), values)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", rec.name)))?;
            if !rec.name.starts_with("__") && !tensor.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} contains non-finite values",
                    rec.name
                )));
            }
            tensors.insert(rec.name, (tensor, rec.trainable));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Copy container tensors into an already-initialized store, validating that
/// names and shapes match exactly. Extra or missing names are errors.
pub fn assign_into_store(container: &Container, store: &mut ParamStore) -> Result<()> {
    let store_names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in &store_names {
        let (tensor, _) = container.tensors.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("container is missing parameter {name}"))
        })?;
        let entry = store.get_mut(name);
        if entry.value.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, {:?} expected",
                tensor.shape(),
                entry.value.shape()
            )));
        }
        entry.value.assign(tensor);
    }
    if container.tensors.len() != store_names.len() {
        let extra: Vec<&String> = container
            .tensors
            .keys()
            .filter(|k| !store.contains(k))
            .collect();
        return Err(Error::Checkpoint(format!(
            "container has {} unexpected tensors (e.g. {:?})",
            extra.len(),
            extra.first()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model checkpoint
// ---------------------------------------------------------------------------

/// Everything needed to re-create a watermarking model: architecture
/// metadata plus the unified parameter store (codec + embedder + extractor
/// entries under their prefixes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub extractor: ExtractorKind,
    pub watermark_length: usize,
    pub image_size: usize,
    pub codec_spec: CodecSpec,
    pub embed_cfg: EmbedConfig,
    pub extract_cfg: ExtractNetConfig,
    /// 1 while stage 1 is still running, 2 once the fidelity stage started.
    pub stage_reached: u8,
    pub stage1_iterations: Option<usize>,
    pub total_iterations: usize,
    pub config_fingerprint: Option<String>,
    pub codec_hash: String,
    pub codec_pretrain_rms: Option<f64>,
    pub train_config: TrainConfig,
}

/// Serialized training state carried only by resumable snapshots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotState {
    pub next_iteration: usize,
    pub stage: u8,
    pub stage1_iterations: Option<usize>,
    pub optimizer_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFileMeta {
    model: ModelMeta,
    metric_columns: Vec<String>,
    snapshot: Option<SnapshotState>,
}

pub struct ModelCheckpoint {
    pub meta: ModelMeta,
    pub params: ParamStore,
    pub metric_log: Vec<MetricRow>,
}

const METRIC_COLUMNS: [&str; 9] = [
    "iteration",
    "stage",
    "loss_watermark",
    "loss_l2",
    "loss_ssim",
    "loss_jnd",
    "loss_total",
    "smoothed_watermark",
    "heldout_bit_accuracy",
];

fn metric_log_to_tensor(log: &[MetricRow]) -> Tensor {
    let mut m = Array2::zeros((log.len(), METRIC_COLUMNS.len()));
    for (i, r) in log.iter().enumerate() {
        m[[i, 0]] = r.iteration as f64;
        m[[i, 1]] = r.stage as f64;
        m[[i, 2]] = r.watermark;
        m[[i, 3]] = r.l2;
        m[[i, 4]] = r.ssim;
        m[[i, 5]] = r.jnd;
        m[[i, 6]] = r.total;
        m[[i, 7]] = r.smoothed_watermark;
        m[[i, 8]] = r.heldout_bit_accuracy.unwrap_or(f64::NAN);
    }
    m.into_dyn()
}

fn metric_log_from_tensor(t: &Tensor) -> Result<Vec<MetricRow>> {
    let m = t
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Checkpoint("metric log must be a matrix".into()))?;
    if m.ncols() != METRIC_COLUMNS.len() {
        return Err(Error::Checkpoint("metric log column count mismatch".into()));
    }
    Ok((0..m.nrows())
        .map(|i| MetricRow {
            iteration: m[[i, 0]] as usize,
            stage: m[[i, 1]] as u8,
            watermark: m[[i, 2]],
            l2: m[[i, 3]],
            ssim: m[[i, 4]],
            jnd: m[[i, 5]],
            total: m[[i, 6]],
            smoothed_watermark: m[[i, 7]],
            heldout_bit_accuracy: if m[[i, 8]].is_nan() { None } else { Some(m[[i, 8]]) },
        })
        .collect())
}

/// Non-parameter tensors carried inside model files. The `__` prefix also
/// exempts them from the loader's finiteness check (the metric log encodes
/// absent held-out probes as NaN).
const LOG_TENSOR: &str = "__log.metrics";
const OPT_PREFIX: &str = "__opt.";

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None, None)
    }

    /// Save, optionally with optimizer state and snapshot info (a resumable
    /// snapshot); plain checkpoints carry neither.
    pub fn save_with(
        &self,
        path: &Path,
        optimizer_state: Option<&BTreeMap<String, Tensor>>,
        snapshot: Option<&SnapshotState>,
    ) -> Result<()> {
        let meta = ModelFileMeta {
            model: self.meta.clone(),
            metric_columns: METRIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
            snapshot: snapshot.cloned(),
        };
        let mut container = Container::from_store(
            serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            &self.params,
        );
        container
            .tensors
            .insert(LOG_TENSOR.into(), (metric_log_to_tensor(&self.metric_log), false));
        if let Some(state) = optimizer_state {
            for (name, tensor) in state {
                container
                    .tensors
                    .insert(format!("{OPT_PREFIX}{name}"), (tensor.clone(), false));
            }
        }
        container.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, _, _) = Self::load_full(path)?;
        Ok(ckpt)
    }

    /// Load including any optimizer state and snapshot info.
    #[allow(clippy::type_complexity)]
    pub fn load_full(
        path: &Path,
    ) -> Result<(Self, BTreeMap<String, Tensor>, Option<SnapshotState>)> {
        let container = Container::load(path)?;
        let meta: ModelFileMeta = container.meta_as()?;
        let mut params = ParamStore::new();
        let mut metric_log = Vec::new();
        let mut opt_state = BTreeMap::new();
        for (name, (tensor, trainable)) in container.tensors {
            if name == LOG_TENSOR {
                metric_log = metric_log_from_tensor(&tensor)?;
            } else if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
                opt_state.insert(rest.to_string(), tensor);
            } else {
                params.insert(&name, tensor, trainable);
            }
        }
        if params.is_empty() {
            return Err(Error::Checkpoint("checkpoint carries no parameters".into()));
        }
        Ok((
            Self { meta: meta.model, params, metric_log },
            opt_state,
            meta.snapshot,
        ))
    }

    /// Write the metric log as CSV (empty cell for absent held-out entries).
    pub fn write_metric_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(METRIC_COLUMNS)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &self.metric_log {
            wtr.write_record([
                r.iteration.to_string(),
                r.stage.to_string(),
                format!("{:.12e}", r.watermark),
                format!("{:.12e}", r.l2),
                format!("{:.12e}", r.ssim),
                format!("{:.12e}", r.jnd),
                format!("{:.12e}", r.total),
                format!("{:.12e}", r.smoothed_watermark),
                r.heldout_bit_accuracy
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b.weight", ArrayD::from_elem(IxDyn(&[2, 3]), 0.25), true);
        s.insert("a.buffer", ArrayD::from_elem(IxDyn(&[4]), -1.5), false);
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let store = sample_store();
        let meta = serde_json::json!({"kind": "test", "n": 3});
        let c = Container::from_store(meta.clone(), &store);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.meta, meta);
        let back_store = back.into_store();
        assert_eq!(back_store.get("b.weight").value, store.get("b.weight").value);
        assert!(!back_store.get("a.buffer").trainable);
        assert_eq!(back_store.content_hash(), store.content_hash());
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let store = sample_store();
        let meta = serde_json::json!({"kind": "test"});
        let mut b1 = Vec::new();
        Container::from_store(meta.clone(), &store).write_to(&mut b1).unwrap();
        let mut b2 = Vec::new();
        Container::from_store(meta, &store).write_to(&mut b2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::read_from(&b"not a container"[..]).is_err());
        let mut buf = Vec::new();
        Container::from_store(serde_json::json!({}), &sample_store())
            .write_to(&mut buf)
            .unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Container::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn assign_validates_names_and_shapes() {
        let store = sample_store();
        let c = Container::from_store(serde_json::json!({}), &store);

        let mut target = sample_store();
        assign_into_store(&c, &mut target).unwrap();

        let mut wrong_shape = ParamStore::new();
        wrong_shape.insert("b.weight", ArrayD::zeros(IxDyn(&[3, 2])), true);
        wrong_shape.insert("a.buffer", ArrayD::zeros(IxDyn(&[4])), false);
        assert!(assign_into_store(&c, &mut wrong_shape).is_err());

        let mut missing = ParamStore::new();
        missing.insert("other", ArrayD::zeros(IxDyn(&[1])), true);
        assert!(assign_into_store(&c, &mut missing).is_err());
    }
}
