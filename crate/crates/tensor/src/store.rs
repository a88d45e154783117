//! Named parameter storage and the on-disk parameter archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! MITODET-PARAMS 1\n
//! <header byte length, decimal>\n
//! <JSON header: {"dtype", "meta", "tensors": [{"name","shape","offset","len"}]}>
//! <raw element bytes, tensors back to back in header order>
//! ```
//!
//! The JSON header doubles as the name-to-shape manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "MITODET-PARAMS 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Shape,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    dtype: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorHeader>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a trainable parameter.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Registers a non-trainable buffer (running statistics and the like).
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: e.value.shape(),
                rhs: value.shape(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// `(name, shape)` for every entry, in registration order.
    pub fn manifest(&self) -> Vec<(String, Shape)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let len = e.value.numel();
            tensors.push(TensorHeader {
                name: e.name.clone(),
                shape: e.value.shape(),
                trainable: e.trainable,
                offset,
                len,
            });
            offset += len;
        }
        let header = ArchiveHeader {
            dtype: T::ARCHIVE_TAG.to_string(),
            meta: meta.clone(),
            tensors,
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "{}", json.len())?;
        f.write_all(json.as_bytes())?;
        for e in &self.entries {
            f.write_all(&T::to_le_bytes_vec(e.value.data()))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads an archive into a fresh store, returning it with its metadata.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let bad = |msg: String| Error::Archive {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("not a parameter archive".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let hlen: usize = line
            .trim_end()
            .parse()
            .map_err(|_| bad("bad header length".into()))?;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: ArchiveHeader =
            serde_json::from_slice(&hbuf).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.dtype != T::ARCHIVE_TAG {
            return Err(bad(format!(
                "archive holds {} but {} was requested",
                header.dtype,
                T::ARCHIVE_TAG
            )));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let values = T::from_le_bytes_slice(&body);
        let mut store = Self::new();
        for t in header.tensors {
            let data = values
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| bad(format!("truncated data for `{}`", t.name)))?
                .to_vec();
            let tensor = Tensor::new(t.shape, data)?;
            store.insert(&t.name, tensor, t.trainable)?;
        }
        Ok((store, header.meta))
    }

    /// Copies every same-named, same-shaped entry of `other` into `self`.
    /// Returns the names of entries in `self` that were left untouched.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut untouched = Vec::new();
        for e in self.entries.iter_mut() {
            match other.id(&e.name).map(|id| other.get(id)) {
                Some(v) if v.shape() == e.value.shape() => e.value = v.clone(),
                _ => untouched.push(e.name.clone()),
            }
        }
        untouched
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let dir = std::env::temp_dir().join(format!("mitodet-store-{}", std::process::id()));
        let path = dir.join("p.bin");
        let mut s = ParamStore::<f32>::new();
        s.add(
            "a.weight",
            Tensor::from_fn([2, 3, 1, 1], |[n, c, _, _]| (n * 3 + c) as f32),
        )
        .unwrap();
        s.add_buffer("a.running_mean", Tensor::full([1, 3, 1, 1], 0.5))
            .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("step".into(), "17".into());
        s.save(&path, &meta).unwrap();
        let (back, m) = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(m["step"], "17");
        assert_eq!(back.manifest(), s.manifest());
        let id = back.id("a.weight").unwrap();
        assert_eq!(back.get(id), s.get(s.id("a.weight").unwrap()));
        assert!(!back.is_trainable(back.id("a.running_mean").unwrap()));
        assert!(ParamStore::<f64>::load(&path).is_err());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.add("x", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn load_matching_reports_missing() {
        let mut a = ParamStore::<f32>::new();
        a.add("x", Tensor::zeros([1, 2, 1, 1])).unwrap();
        a.add("y", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("x", Tensor::full([1, 2, 1, 1], 3.0)).unwrap();
        b.add("y", Tensor::full([1, 2, 1, 1], 3.0)).unwrap();
        assert_eq!(a.load_matching(&b), vec!["y".to_string()]);
        assert_eq!(a.get(a.id("x").unwrap()).data(), &[3.0, 3.0]);
    }
}
