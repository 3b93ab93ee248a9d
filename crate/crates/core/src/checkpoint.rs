//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PVCK"  u32 version
//! u32 metadata length, metadata (UTF-8 `key = value` lines, sorted by key)
//! u64 tensor count
//! per tensor: u32 name length, name, u32 rank, u64 extents[rank],
//!             u8 dtype (0 = f32, 1 = f64), u64 payload length, payload
//! u32 CRC-32 of everything above
//! ```
//!
//! Model parameters use their canonical names; momentum buffers are stored
//! as `optim.<param name>`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::PolyViT;
use crate::tensor::{DType, Element, Tensor};
use crate::trainer::OptimizerState;

pub const MAGIC: [u8; 4] = *b"PVCK";
pub const VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim.";
const CONFIG_PREFIX: &str = "config.";
const LAYOUT_MODALITIES: &str = "layout.modalities";
const LAYOUT_TASKS: &str = "layout.tasks";

/// One serialized tensor: raw little-endian payload plus its dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size_in_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            payload,
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {}, expected {}",
                self.name,
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let data = self.payload.chunks_exact(self.dtype.size_in_bytes()).map(T::read_le).collect();
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<RawTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\n', '=']) || v.contains('\n') || k.trim() != k || v.trim() != v {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` cannot be serialized")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut seen = BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            let expected = t.shape.iter().product::<usize>() * t.dtype.size_in_bytes();
            if t.payload.len() != expected {
                return Err(Error::Checkpoint(format!("tensor {} payload does not match its shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = utf8(r.take(meta_len, "metadata")?, "metadata")?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line `{line}`")))?;
            if metadata.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate metadata key {k}")));
            }
        }
        let count = r.len("tensor count")?;
        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = utf8(r.take(name_len, "tensor name")?, "tensor name")?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.len("extent"))
                .collect::<Result<Vec<_>>>()?;
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has unknown dtype tag {tag}")))?;
            let payload_len = r.len("payload length")?;
            let expected = shape
                .iter()
                .try_fold(dtype.size_in_bytes(), |acc, &e| acc.checked_mul(e));
            if expected != Some(payload_len) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: payload of {payload_len} bytes does not match shape {shape:?}"
                )));
            }
            let payload = r.take(payload_len, "payload")?.to_vec();
            tensors.push(RawTensor {
                name,
                shape,
                dtype,
                payload,
            });
        }
        let body = r.pos;
        let crc = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if crc32fast::hash(&bytes[..body]) != crc {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes atomically: a temporary sibling file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Checkpoint of a model, its run configuration and (optionally) its
    /// optimizer state.
    pub fn from_model<T: Element>(
        config: &RunConfig,
        model: &PolyViT<T>,
        state: Option<&OptimizerState<T>>,
    ) -> Result<Self> {
        if T::DTYPE != config.precision {
            return Err(Error::Checkpoint(format!(
                "model is {}, configuration says {}",
                T::DTYPE.name(),
                config.precision.name()
            )));
        }
        let mut metadata = BTreeMap::new();
        for line in config.echo().lines() {
            let (k, v) = line.split_once(" = ").expect("echo lines are key = value");
            if k == "train.out" || k == "train.log" {
                continue;
            }
            metadata.insert(format!("{CONFIG_PREFIX}{k}"), v.to_string());
        }
        let modalities: Vec<String> = config.modalities.iter().map(|m| m.geometry.modality.to_string()).collect();
        metadata.insert(LAYOUT_MODALITIES.into(), modalities.join(","));
        metadata.insert(LAYOUT_TASKS.into(), config.task_names().join(","));
        metadata.insert("format.drop_path".into(), "per_branch".into());
        metadata.insert("format.momentum".into(), "heavy_ball m=mu*m+g theta=theta-lr*m".into());
        metadata.insert("format.weights".into(), "fan_in x fan_out".into());
        let mut tensors: Vec<RawTensor> = model
            .params()
            .into_iter()
            .map(|p| RawTensor::from_tensor(&p.name, &p.value))
            .collect();
        if let Some(s) = state {
            metadata.insert("optim.momentum".into(), s.momentum.to_string());
            metadata.insert("optim.global_step".into(), s.global_step.to_string());
            metadata.insert(
                "optim.task_steps".into(),
                s.task_steps.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            );
            for (name, n) in &s.updates {
                metadata.insert(format!("optim.updates.{name}"), n.to_string());
            }
            for (name, m) in &s.buffers {
                tensors.push(RawTensor::from_tensor(&format!("{OPTIM_PREFIX}{name}"), m));
            }
        }
        Ok(Self { metadata, tensors })
    }

    /// The run configuration embedded in the metadata.
    pub fn config(&self) -> Result<RunConfig> {
        let order = |key: &str| -> Vec<&str> {
            self.metadata
                .get(key)
                .map(|v| v.split(',').filter(|s| !s.is_empty()).collect())
                .unwrap_or_default()
        };
        let (modalities, tasks) = (order(LAYOUT_MODALITIES), order(LAYOUT_TASKS));
        let rank = |key: &str| -> usize {
            let section = |prefix: &str, names: &[&str], base: usize| {
                let rest = key.strip_prefix(prefix)?;
                let name = rest.split('.').next()?;
                names.iter().position(|n| *n == name).map(|i| base + i)
            };
            if key.starts_with("model.") {
                0
            } else if let Some(r) = section("modality.", &modalities, 1) {
                r
            } else if let Some(r) = section("task.", &tasks, 1 + modalities.len()) {
                r
            } else {
                usize::MAX
            }
        };
        let mut lines: Vec<(usize, String)> = self
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (rank(k), format!("{k} = {v}\n"))))
            .collect();
        if lines.is_empty() {
            return Err(Error::Checkpoint("no embedded configuration".into()));
        }
        lines.sort_by_key(|l| l.0);
        let text: String = lines.into_iter().map(|l| l.1).collect();
        RunConfig::parse(&text).map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))
    }

    /// Rebuilds the model (every parameter must be present exactly once)
    /// and its optimizer state.
    pub fn to_model<T: Element>(&self) -> Result<(RunConfig, PolyViT<T>, OptimizerState<T>)> {
        let config = self.config()?;
        if T::DTYPE != config.precision {
            return Err(Error::Checkpoint(format!(
                "checkpoint is {}, requested {}",
                config.precision.name(),
                T::DTYPE.name()
            )));
        }
        let mut model: PolyViT<T> = config.build_model()?;
        let by_name: BTreeMap<&str, &RawTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut used = 0;
        for p in model.params_mut() {
            let raw = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            let t = raw.to_tensor::<T>()?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
            used += 1;
        }
        let mut state = OptimizerState::new(config.train.momentum, model.tasks.len());
        for raw in &self.tensors {
            if let Some(name) = raw.name.strip_prefix(OPTIM_PREFIX) {
                state.buffers.insert(name.to_string(), raw.to_tensor()?);
                used += 1;
            }
        }
        if used != self.tensors.len() {
            let known: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
            let extra = self
                .tensors
                .iter()
                .find(|t| !known.contains(&t.name) && !t.name.starts_with(OPTIM_PREFIX))
                .map_or("?", |t| t.name.as_str());
            return Err(Error::Checkpoint(format!("unknown tensor {extra}")));
        }
        let meta = |k: &str| self.metadata.get(k);
        let bad = |k: &str| Error::Checkpoint(format!("malformed metadata {k}"));
        if let Some(v) = meta("optim.momentum") {
            state.momentum = v.parse().map_err(|_| bad("optim.momentum"))?;
        }
        if let Some(v) = meta("optim.global_step") {
            state.global_step = v.parse().map_err(|_| bad("optim.global_step"))?;
        }
        if let Some(v) = meta("optim.task_steps") {
            state.task_steps = v
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("optim.task_steps")))
                .collect::<Result<_>>()?;
            if state.task_steps.len() != model.tasks.len() {
                return Err(bad("optim.task_steps"));
            }
        }
        for (k, v) in &self.metadata {
            if let Some(name) = k.strip_prefix("optim.updates.") {
                state.updates.insert(name.to_string(), v.parse().map_err(|_| bad(k))?);
            }
        }
        Ok((config, model, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RunConfig, PolyViT<f32>) {
        let c = RunConfig::parse(
            "model.width = 4\nmodel.layers = 1\nmodality.image.input = 4x4x1\nmodality.image.patch = 2x2\n\
             task.a.modality = image\ntask.a.classes = 2\n",
        )
        .unwrap();
        let m = c.build_model().unwrap();
        (c, m)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (c, m) = small();
        let ck = Checkpoint::from_model(&c, &m, None).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let (c2, m2, _) = back.to_model::<f32>().unwrap();
        assert_eq!(c2, c);
        assert_eq!(m2, m);
        assert_eq!(Checkpoint::from_model(&c2, &m2, None).unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(ck.tensors.len(), m.params().len());
    }

    #[test]
    fn task_and_modality_order_survive() {
        let c = RunConfig::parse(
            "model.width = 4\nmodel.layers = 1\nmodality.video.input = 2x4x4x1\nmodality.video.patch = 2x2x2\n\
             modality.audio.input = 4x4x1\nmodality.audio.patch = 2x2\n\
             task.zeta.modality = audio\ntask.zeta.classes = 2\ntask.alpha.modality = video\ntask.alpha.classes = 3\n",
        )
        .unwrap();
        let m: PolyViT<f32> = c.build_model().unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_model(&c, &m, None).unwrap().to_bytes().unwrap()).unwrap();
        let (c2, m2, _) = ck.to_model::<f32>().unwrap();
        assert_eq!(c2, c);
        assert_eq!(m2, m);
    }

    #[test]
    fn damage_is_detected() {
        let (c, m) = small();
        let bytes = Checkpoint::from_model(&c, &m, None).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("magic"));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("version"));
        let mut b = bytes.clone();
        let n = b.len();
        b[n - 10] ^= 1;
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes;
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn wrong_precision_is_refused() {
        let (c, m) = small();
        let ck = Checkpoint::from_model(&c, &m, None).unwrap();
        assert!(ck.to_model::<f64>().is_err());
    }

    #[test]
    fn duplicates_are_refused() {
        let (c, m) = small();
        let mut ck = Checkpoint::from_model(&c, &m, None).unwrap();
        ck.tensors.push(ck.tensors[0].clone());
        assert!(ck.to_bytes().is_err());
    }
}
