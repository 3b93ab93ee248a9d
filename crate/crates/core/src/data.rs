//! Synthetic classification tasks, minibatch streams and the `PVDS` dataset
//! file format.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::{Geometry, Modality};

/// One example: an input array and its class indices (one for single-label
/// tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor<f32>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    pub extents: Vec<usize>,
    pub classes: usize,
    pub multilabel: bool,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn inputs<T: Element>(&self, idx: &[usize]) -> Vec<Tensor<T>> {
        idx.iter().map(|&i| self.examples[i].input.cast()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<Vec<u32>> {
        idx.iter().map(|&i| self.examples[i].labels.clone()).collect()
    }

    /// One-hot (or multi-hot) targets `[B, C]`.
    pub fn targets<T: Element>(&self, idx: &[usize]) -> Tensor<T> {
        let c = self.classes;
        let mut t = Tensor::zeros([idx.len(), c]);
        for (row, &i) in idx.iter().enumerate() {
            for &k in &self.examples[i].labels {
                t.data_mut()[row * c + k as usize] = T::one();
            }
        }
        t
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn check(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.input.shape() != self.extents.as_slice() {
                return Err(Error::Data(format!(
                    "example {i} has shape {:?}, expected {:?}",
                    ex.input.shape(),
                    self.extents
                )));
            }
            if ex.labels.iter().any(|&k| k as usize >= self.classes)
                || ex.labels.is_empty()
                || (!self.multilabel && ex.labels.len() != 1)
            {
                return Err(Error::Data(format!("example {i} has invalid labels {:?}", ex.labels)));
            }
        }
        Ok(())
    }
}

/// Class-template generator: every example is its class template (the sum
/// of its classes' templates when multilabel) plus i.i.d. Gaussian noise.
/// Templates are mutually orthogonal with unit mean-square entries, so with
/// zero noise the classes are linearly separable on raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub geometry: Geometry,
    pub classes: usize,
    /// Noise standard deviation relative to template entries.
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub multilabel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Data(format!("unknown split `{name}`"))),
        }
    }
}

fn split_rng(seed: u64, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    rng
}

impl SyntheticTask {
    pub fn new(geometry: Geometry, classes: usize, seed: u64) -> Self {
        Self {
            geometry,
            classes,
            noise: 0.5,
            train: 64,
            val: 32,
            test: 32,
            seed,
            multilabel: false,
        }
    }

    fn dim(&self) -> usize {
        self.geometry.input.iter().product()
    }

    /// Orthogonal class templates, each with squared norm equal to the
    /// input size.
    pub fn templates(&self) -> Result<Vec<Vec<f64>>> {
        let dim = self.dim();
        if self.classes < 2 || self.classes > dim {
            return Err(Error::Data(format!(
                "need 2..={dim} classes for {dim}-value inputs, got {}",
                self.classes
            )));
        }
        let mut rng = split_rng(self.seed, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while out.len() < self.classes {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            let s = (dim as f64).sqrt() / norm;
            v.iter_mut().for_each(|a| *a *= s);
            out.push(v);
        }
        Ok(out)
    }

    fn labels(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
        let c = self.classes as u32;
        if !self.multilabel {
            let mut l: Vec<Vec<u32>> = (0..n).map(|i| vec![i as u32 % c]).collect();
            l.shuffle(rng);
            return l;
        }
        let mut out: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let mut set: Vec<u32> = (0..c).filter(|_| rng.gen_bool(0.5)).collect();
                if set.is_empty() {
                    set.push(rng.gen_range(0..c));
                }
                set
            })
            .collect();
        for (k, ex) in out.iter_mut().enumerate().take(self.classes) {
            if !ex.contains(&(k as u32)) {
                ex.push(k as u32);
                ex.sort_unstable();
            }
        }
        out.shuffle(rng);
        out
    }

    fn split(&self, n: usize, stream: u64, templates: &[Vec<f64>]) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Data("split sizes must be at least 1".into()));
        }
        let mut rng = split_rng(self.seed, stream);
        let labels = self.labels(n, &mut rng);
        let noise = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
        let extents = self.geometry.input.clone();
        let examples = labels
            .into_iter()
            .map(|labels| {
                let mut x = vec![0.0f64; self.dim()];
                for &k in &labels {
                    x.iter_mut().zip(&templates[k as usize]).for_each(|(a, b)| *a += b);
                }
                let values = x
                    .into_iter()
                    .map(|v| (v + if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 }) as f32)
                    .collect();
                Ok(Example {
                    input: Tensor::new(extents.clone(), values)?,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            modality: self.geometry.modality,
            extents,
            classes: self.classes,
            multilabel: self.multilabel,
            examples,
        })
    }

    /// Deterministic train/val/test splits.
    pub fn generate(&self) -> Result<Splits> {
        self.geometry.validate()?;
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Data(format!("invalid noise level {}", self.noise)));
        }
        let templates = self.templates()?;
        Ok(Splits {
            train: self.split(self.train, 1, &templates)?,
            val: self.split(self.val, 2, &templates)?,
            test: self.split(self.test, 3, &templates)?,
        })
    }
}

/// Endless minibatch stream over one dataset: a fresh seeded shuffle per
/// epoch, batches spanning epoch boundaries.
#[derive(Debug, Clone)]
pub struct Batcher {
    len: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Data("batcher needs a non-empty dataset and batch".into()));
        }
        let mut b = Self {
            len,
            batch,
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.len {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const PVDS_MAGIC: &[u8; 4] = b"PVDS";
const PVDS_VERSION: u32 = 1;

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated dataset: {e}")))?;
    Ok(buf)
}

fn write_all(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::Data(format!("write failed: {e}")))
}

/// Writes `magic, version, modality, multilabel, rank, extents, classes,
/// count` and then per example its f32 values, label count and labels, all
/// little-endian.
pub fn write_pvds(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    ds.check()?;
    write_all(w, PVDS_MAGIC)?;
    write_all(w, &PVDS_VERSION.to_le_bytes())?;
    write_all(w, &[ds.modality.tag(), u8::from(ds.multilabel)])?;
    write_all(w, &(ds.extents.len() as u32).to_le_bytes())?;
    for &e in &ds.extents {
        write_all(w, &(e as u64).to_le_bytes())?;
    }
    write_all(w, &(ds.classes as u32).to_le_bytes())?;
    write_all(w, &(ds.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for ex in &ds.examples {
        buf.clear();
        for &v in ex.input.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(ex.labels.len() as u32).to_le_bytes());
        for &k in &ex.labels {
            buf.extend_from_slice(&k.to_le_bytes());
        }
        write_all(w, &buf)?;
    }
    Ok(())
}

pub fn read_pvds(r: &mut impl Read) -> Result<Dataset> {
    if &read_exact::<4>(r)? != PVDS_MAGIC {
        return Err(Error::Data("not a PVDS dataset (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != PVDS_VERSION {
        return Err(Error::Data(format!("unsupported PVDS version {version}")));
    }
    let [tag, ml] = read_exact::<2>(r)?;
    let modality = Modality::from_tag(tag).ok_or_else(|| Error::Data(format!("unknown modality tag {tag}")))?;
    let rank = u32::from_le_bytes(read_exact(r)?) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Data(format!("implausible rank {rank}")));
    }
    let extents = (0..rank)
        .map(|_| Ok(u64::from_le_bytes(read_exact(r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let classes = u32::from_le_bytes(read_exact(r)?) as usize;
    let count = u64::from_le_bytes(read_exact(r)?) as usize;
    let numel: usize = extents.iter().product();
    let mut examples = Vec::new();
    let mut raw = vec![0u8; numel * 4];
    for _ in 0..count {
        r.read_exact(&mut raw)
            .map_err(|e| Error::Data(format!("truncated dataset: {e}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let k = u32::from_le_bytes(read_exact(r)?) as usize;
        if k > classes {
            return Err(Error::Data(format!("label record of {k} entries exceeds {classes} classes")));
        }
        let labels = (0..k)
            .map(|_| Ok(u32::from_le_bytes(read_exact(r)?)))
            .collect::<Result<Vec<_>>>()?;
        examples.push(Example {
            input: Tensor::new(extents.clone(), values)?,
            labels,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Data(e.to_string()))? != 0 {
        return Err(Error::Data("trailing bytes after dataset".into()));
    }
    let ds = Dataset {
        modality,
        extents,
        classes,
        multilabel: ml != 0,
        examples,
    };
    ds.check()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(Geometry::image(4, 4, 1, 2, 2).unwrap(), 3, 5)
    }

    #[test]
    fn templates_are_orthogonal_with_unit_rms() {
        let t = task().templates().unwrap();
        for (i, a) in t.iter().enumerate() {
            for (j, b) in t.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 16.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = task().generate().unwrap();
        assert_eq!(a, task().generate().unwrap());
        let mut counts = [0usize; 3];
        for ex in &a.train.examples {
            counts[ex.labels[0] as usize] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let mut other = task();
        other.seed = 6;
        assert_ne!(a, other.generate().unwrap());
    }

    #[test]
    fn multilabel_covers_every_class() {
        let mut t = task();
        t.multilabel = true;
        t.train = 3;
        let s = t.generate().unwrap();
        for k in 0..3 {
            assert!(s.train.examples.iter().any(|e| e.labels.contains(&k)));
        }
        assert!(s.train.examples.iter().all(|e| !e.labels.is_empty()));
    }

    #[test]
    fn batcher_visits_each_example_once_per_epoch() {
        let mut b = Batcher::new(10, 4, 3).unwrap();
        let seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch()).collect();
        assert_eq!(b.epoch(), 1);
        let mut first = seen[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pvds_round_trip_and_corruption() {
        let mut t = task();
        t.multilabel = true;
        let ds = t.generate().unwrap().val;
        let mut bytes = Vec::new();
        write_pvds(&ds, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PVDS");
        assert_eq!(read_pvds(&mut bytes.as_slice()).unwrap(), ds);
        assert!(read_pvds(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_pvds(&mut extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_pvds(&mut bad.as_slice()).is_err());
    }
}
