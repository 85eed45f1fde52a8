//! Binary token cache.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "ADETOK1\0"
//! hash   32 bytes  SHA-256 of the backbone config
//! T       u32      tokens per image
//! D       u32      token width
//! count   u64      number of entries
//! index   count x { id_len u16, id utf-8 bytes, offset u64 }
//! data    count x T x D f32, row-major; offset is in bytes from the start of data
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::Backbone;
use crate::data::ImageRecord;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADETOK1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStore {
    pub hash: [u8; 32],
    pub tokens: usize,
    pub dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub encoded: usize,
    pub reused: usize,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Store("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl TokenStore {
    pub fn empty(hash: [u8; 32], tokens: usize, dim: usize) -> Self {
        TokenStore {
            hash,
            tokens,
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<ArrayView2<'_, f32>> {
        let i = *self.index.get(id)?;
        let n = self.tokens * self.dim;
        Some(
            ArrayView2::from_shape((self.tokens, self.dim), &self.data[i * n..(i + 1) * n])
                .expect("entry shape"),
        )
    }

    /// Widened copies of the entries for `ids`, in order.
    pub fn gather<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<Array2<f64>>> {
        ids.into_iter()
            .map(|id| {
                self.get(id)
                    .map(|t| t.mapv(f64::from))
                    .ok_or_else(|| Error::Store(format!("no cached tokens for {id:?}")))
            })
            .collect()
    }

    pub fn insert(&mut self, id: String, tokens: ArrayView2<f32>) -> Result<()> {
        if tokens.dim() != (self.tokens, self.dim) {
            return Err(Error::Shape(format!(
                "token store holds {}x{} entries, got {:?}",
                self.tokens,
                self.dim,
                tokens.dim()
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Store(format!("duplicate id {id:?}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend(tokens.iter());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entry = self.tokens * self.dim * 4;
        let mut out = Vec::with_capacity(56 + self.ids.len() * 16 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.hash);
        out.extend_from_slice(&(self.tokens as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&((i * entry) as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Store("bad magic".into()));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let tokens = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Store("id is not utf-8".into()))?
                .to_string();
            entries.push((id, r.u64()? as usize));
        }
        let base = r.pos;
        let entry = tokens * dim * 4;
        let mut store = TokenStore::empty(hash, tokens, dim);
        store.data.reserve(count * tokens * dim);
        for (id, offset) in entries {
            let start = base + offset;
            let bytes = buf
                .get(start..start + entry)
                .ok_or_else(|| Error::Store(format!("entry {id:?} out of bounds")))?;
            if store.index.insert(id.clone(), store.ids.len()).is_some() {
                return Err(Error::Store(format!("duplicate id {id:?}")));
            }
            store.ids.push(id);
            store.data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TokenStore::from_bytes(&buf)
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Ensures `path` holds tokens for every record. Existing entries are kept
/// when the store hash matches the backbone; a mismatch is an error.
pub fn cache_tokens(
    records: &[ImageRecord],
    backbone: &Backbone,
    path: &Path,
) -> Result<(TokenStore, CacheReport)> {
    let hash = backbone.config.content_hash()?;
    let (t, d) = (backbone.config.num_tokens(), backbone.config.dim);
    let existing = if path.exists() {
        let store = TokenStore::load(path)?;
        if store.hash != hash {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                expected: hex(&hash),
                found: hex(&store.hash),
            });
        }
        Some(store)
    } else {
        None
    };
    let missing: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| !existing.as_ref().is_some_and(|s| s.contains(&r.id)))
        .collect();
    let reused = records.len() - missing.len();
    if missing.is_empty() {
        if let Some(store) = existing {
            log::info!(
                "token store {} up to date ({} entries)",
                path.display(),
                store.len()
            );
            return Ok((store, CacheReport { encoded: 0, reused }));
        }
    }
    let encoded: Vec<_> = missing
        .par_iter()
        .map(|r| backbone.encode_path(&r.path))
        .collect::<Result<Vec<_>>>()?;
    let fresh: HashMap<&str, _> = missing
        .iter()
        .map(|r| r.id.as_str())
        .zip(&encoded)
        .collect();

    let mut store = TokenStore::empty(hash, t, d);
    for r in records {
        match fresh.get(r.id.as_str()) {
            Some(seq) => store.insert(r.id.clone(), seq.tokens.view())?,
            None => {
                let old = existing
                    .as_ref()
                    .and_then(|s| s.get(&r.id))
                    .expect("present in existing store");
                store.insert(r.id.clone(), old)?;
            }
        }
    }
    if let Some(old) = &existing {
        for id in old.ids() {
            if !store.contains(id) {
                store.insert(id.clone(), old.get(id).expect("listed id"))?;
            }
        }
    }
    store.save(path)?;
    log::info!(
        "token store {}: encoded {}, reused {}",
        path.display(),
        encoded.len(),
        reused
    );
    Ok((
        store,
        CacheReport {
            encoded: encoded.len(),
            reused,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn byte_round_trip() {
        let mut s = TokenStore::empty([7; 32], 2, 3);
        s.insert("a".into(), Array2::from_elem((2, 3), 1.5).view())
            .unwrap();
        s.insert(
            "b".into(),
            Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32).view(),
        )
        .unwrap();
        let back = TokenStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get("b").unwrap()[[1, 2]], 5.0);
        assert!(TokenStore::from_bytes(&s.to_bytes()[..60]).is_err());
        assert!(TokenStore::from_bytes(b"NOTASTORE").is_err());
        assert!(s.insert("a".into(), Array2::zeros((2, 3)).view()).is_err());
        assert!(s.insert("c".into(), Array2::zeros((3, 3)).view()).is_err());
    }
}
