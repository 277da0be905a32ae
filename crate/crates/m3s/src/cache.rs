//! Reference feature cache: K/V (and optionally Q) captured at every
//! injection layer and inversion timestep, keyed by
//! `(layer id, timestep, reference index)`.
//!
//! Features are held as `f32`, the precision of the on-disk format, so a
//! save/load round trip is bit-exact and synthesis behaves identically
//! whether the cache was just captured or read back from a file. Injection
//! widens to `f64` at lookup time.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"M3SFC1"
//! count   u64
//! entry*  layer_id u32, timestep u32, ref_index u32, rows u32, cols u32,
//!         K rows*cols f32, V rows*cols f32
//! ```
//!
//! Entries are written in key order, so equal caches serialize to equal
//! bytes. Queries are kept in memory only; runs that need them (the
//! AdaIN-aligned injection mode) capture references in-process.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;

use crate::attention::ReferenceFeatures;
use crate::error::{M3sError, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 6] = b"M3SFC1";
/// Upper bound on rows*cols per entry, to fail fast on corrupt headers.
const MAX_ENTRY_ELEMS: u64 = 1 << 26;

/// One layer/timestep/reference feature record.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFeatures {
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Captured only when a run needs query statistics; never serialized.
    pub q: Option<Array2<f32>>,
}

impl CachedFeatures {
    /// Widen to the `f64` features injection works in.
    pub fn widen(&self) -> ReferenceFeatures {
        ReferenceFeatures {
            k: self.k.mapv(f64::from),
            v: self.v.mapv(f64::from),
            q: self.q.as_ref().map(|q| q.mapv(f64::from)),
        }
    }
}

/// `(layer id, timestep, reference index)`.
pub type CacheKey = (u32, u32, u32);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: BTreeMap<CacheKey, CachedFeatures>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheKey, &CachedFeatures)> {
        self.entries.iter()
    }

    pub fn layer_ids(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|k| k.0).collect()
    }

    pub fn timesteps(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|k| k.1).collect()
    }

    /// Number of references present (largest index + 1).
    pub fn ref_count(&self) -> usize {
        self.entries
            .keys()
            .map(|k| k.2 as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Store one record, narrowing to the cache's `f32` precision. K and V
    /// must agree on shape (one token per row, shared projection width).
    pub fn insert(
        &mut self,
        layer_id: usize,
        timestep: usize,
        ref_index: usize,
        k: &Array2<f64>,
        v: &Array2<f64>,
        q: Option<&Array2<f64>>,
    ) -> Result<()> {
        if k.dim() != v.dim() {
            return Err(M3sError::ShapeMismatch {
                context: "cache insert k/v",
                expected: format!("{:?}", k.dim()),
                actual: format!("{:?}", v.dim()),
            });
        }
        if k.iter().chain(v.iter()).any(|x| !x.is_finite())
            || q.is_some_and(|q| q.iter().any(|x| !x.is_finite()))
        {
            return Err(M3sError::InvalidInput(
                "cache insert rejects non-finite feature values".into(),
            ));
        }
        let key = (
            narrow_index("layer id", layer_id)?,
            narrow_index("timestep", timestep)?,
            narrow_index("reference index", ref_index)?,
        );
        self.entries.insert(
            key,
            CachedFeatures {
                k: k.mapv(|x| x as f32),
                v: v.mapv(|x| x as f32),
                q: q.map(|q| q.mapv(|x| x as f32)),
            },
        );
        Ok(())
    }

    pub fn get(&self, layer_id: usize, timestep: usize, ref_index: usize) -> Result<&CachedFeatures> {
        let key = (
            narrow_index("layer id", layer_id)?,
            narrow_index("timestep", timestep)?,
            narrow_index("reference index", ref_index)?,
        );
        self.entries
            .get(&key)
            .ok_or(M3sError::CacheMiss { layer_id, timestep })
    }

    /// All references captured at a layer/timestep, widened to `f64`, in
    /// reference order. Indices must form a contiguous `0..n` run.
    pub fn references_at(&self, layer_id: usize, timestep: usize) -> Result<Vec<ReferenceFeatures>> {
        let layer = narrow_index("layer id", layer_id)?;
        let t = narrow_index("timestep", timestep)?;
        let hits: Vec<(&CacheKey, &CachedFeatures)> = self
            .entries
            .range((layer, t, 0)..=(layer, t, u32::MAX))
            .collect();
        if hits.is_empty() {
            return Err(M3sError::CacheMiss { layer_id, timestep });
        }
        for (i, (key, _)) in hits.iter().enumerate() {
            if key.2 as usize != i {
                return Err(M3sError::CacheFormat(format!(
                    "reference indices at layer {layer_id}, timestep {timestep} are not contiguous: found index {} at position {i}",
                    key.2
                )));
            }
        }
        Ok(hits.into_iter().map(|(_, f)| f.widen()).collect())
    }

    /// Serialize to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(MAGIC.len() + 8 + self.entries.len() * 128);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for ((layer, t, r), feats) in &self.entries {
            let (rows, cols) = feats.k.dim();
            buf.extend_from_slice(&layer.to_le_bytes());
            buf.extend_from_slice(&t.to_le_bytes());
            buf.extend_from_slice(&r.to_le_bytes());
            buf.extend_from_slice(&(rows as u32).to_le_bytes());
            buf.extend_from_slice(&(cols as u32).to_le_bytes());
            for &x in feats.k.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for &x in feats.v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(M3sError::CacheFormat(format!(
                "bad magic {:?}; expected {:?}",
                &magic[..magic.len().min(6)],
                MAGIC
            )));
        }
        let count = r.u64()?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let key = (r.u32()?, r.u32()?, r.u32()?);
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows as u64) * (cols as u64) > MAX_ENTRY_ELEMS {
                return Err(M3sError::CacheFormat(format!(
                    "entry {i} claims {rows}x{cols} features; refusing"
                )));
            }
            let k = r.matrix(rows, cols)?;
            let v = r.matrix(rows, cols)?;
            if k.iter().chain(v.iter()).any(|x| !x.is_finite()) {
                return Err(M3sError::CacheFormat(format!(
                    "entry {i} holds non-finite feature values"
                )));
            }
            if entries.insert(key, CachedFeatures { k, v, q: None }).is_some() {
                return Err(M3sError::CacheFormat(format!(
                    "duplicate entry for key {key:?}"
                )));
            }
        }
        if r.pos != bytes.len() {
            return Err(M3sError::CacheFormat(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn narrow_index(what: &str, value: usize) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| M3sError::InvalidInput(format!("{what} {value} exceeds the cache key width")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(M3sError::CacheFormat(format!(
                "truncated: wanted {n} bytes at offset {}, file holds {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let raw = self.take(rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| M3sError::CacheFormat(format!("bad matrix shape: {e}")))
    }
}
