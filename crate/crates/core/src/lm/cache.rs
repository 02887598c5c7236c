//! Append-only on-disk store of context vectors.
//!
//! Layout (little-endian): magic `OKGC`, format version `u32`, provider id
//! as `u32` length + UTF-8, `d_B` as `u32`, record count `u64`, then records
//! of `direction u8, np u32, rp u32, d_B × f32`. A sidecar `<file>.idx` TSV
//! lists `direction np rp ordinal` for inspection; the in-memory index is
//! always rebuilt from the records themselves.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ContextProvider, ContextQuery, Direction};
use crate::dataset::OpenKg;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OKGC";
const VERSION: u32 = 1;

pub struct ContextVectorCache {
    path: PathBuf,
    provider_id: String,
    dim: usize,
    count_offset: u64,
    index: HashMap<ContextQuery, usize>,
    values: Vec<f32>,
    keys: Vec<ContextQuery>,
}

fn idx_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Tail => "tail",
        Direction::Head => "head",
    }
}

impl ContextVectorCache {
    /// Creates an empty cache, replacing any file at `path`.
    pub fn create(path: &Path, provider_id: &str, dim: usize) -> Result<Self> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        f.write_all(MAGIC).map_err(io)?;
        f.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        f.write_u32::<LittleEndian>(provider_id.len() as u32).map_err(io)?;
        f.write_all(provider_id.as_bytes()).map_err(io)?;
        f.write_u32::<LittleEndian>(dim as u32).map_err(io)?;
        f.write_u64::<LittleEndian>(0).map_err(io)?;
        f.sync_all().map_err(io)?;
        File::create(idx_path(path)).map_err(|e| Error::io(idx_path(path), e))?;
        Ok(ContextVectorCache {
            path: path.to_path_buf(),
            provider_id: provider_id.to_string(),
            dim,
            count_offset: 4 + 4 + 4 + provider_id.len() as u64 + 4,
            index: HashMap::new(),
            values: Vec::new(),
            keys: Vec::new(),
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut r = std::io::BufReader::new(file);
        let bad = |m: &str| Error::Cache(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a context-vector cache"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let id_len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| bad("truncated header"))?;
        let provider_id = String::from_utf8(id).map_err(|_| bad("provider id is not UTF-8"))?;
        let dim = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let mut cache = ContextVectorCache {
            path: path.to_path_buf(),
            count_offset: 4 + 4 + 4 + id_len as u64 + 4,
            provider_id,
            dim,
            index: HashMap::with_capacity(count),
            values: Vec::with_capacity(count * dim),
            keys: Vec::with_capacity(count),
        };
        let mut row = vec![0f32; dim];
        for i in 0..count {
            let d = r
                .read_u8()
                .map_err(|_| bad(&format!("record {i} of {count} is truncated")))?;
            let direction = Direction::from_u8(d).ok_or_else(|| bad(&format!("record {i}: bad direction {d}")))?;
            let np = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated record"))?;
            let rp = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated record"))?;
            r.read_f32_into::<LittleEndian>(&mut row).map_err(|_| bad("truncated record"))?;
            let q = ContextQuery { direction, np, rp };
            cache.index.insert(q, cache.keys.len());
            cache.keys.push(q);
            cache.values.extend_from_slice(&row);
        }
        Ok(cache)
    }

    /// Opens `path` if it exists and belongs to `provider_id`, otherwise
    /// creates it.
    pub fn open_or_create(path: &Path, provider_id: &str, dim: usize) -> Result<Self> {
        if path.exists() {
            let cache = Self::open(path)?;
            cache.check_provider(provider_id)?;
            if cache.dim != dim {
                return Err(Error::Dimension {
                    context: "context cache",
                    expected: dim,
                    actual: cache.dim,
                });
            }
            Ok(cache)
        } else {
            Self::create(path, provider_id, dim)
        }
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, q: &ContextQuery) -> bool {
        self.index.contains_key(q)
    }

    pub fn get(&self, q: &ContextQuery) -> Option<&[f32]> {
        self.index
            .get(q)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    /// Stored keys in insertion order.
    pub fn keys(&self) -> &[ContextQuery] {
        &self.keys
    }

    pub fn check_provider(&self, provider_id: &str) -> Result<()> {
        if self.provider_id != provider_id {
            return Err(Error::Cache(format!(
                "{} holds vectors from `{}`, not `{provider_id}`",
                self.path.display(),
                self.provider_id
            )));
        }
        Ok(())
    }

    /// Appends one record. Existing keys are left untouched.
    pub fn insert(&mut self, q: ContextQuery, v: &[f32]) -> Result<()> {
        self.insert_many(&[(q, v.to_vec())])
    }

    /// Appends records and then bumps the header count, so a crash mid-write
    /// leaves a readable cache holding the previous records.
    pub fn insert_many(&mut self, rows: &[(ContextQuery, Vec<f32>)]) -> Result<()> {
        let fresh: Vec<&(ContextQuery, Vec<f32>)> = rows.iter().filter(|(q, _)| !self.contains(q)).collect();
        for (_, v) in &fresh {
            if v.len() != self.dim {
                return Err(Error::Dimension {
                    context: "context cache",
                    expected: self.dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Cache("refusing to store a non-finite vector".into()));
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        let mut file = OpenOptions::new().read(true).write(true).open(&path).map_err(io)?;
        let record = 9 + 4 * self.dim as u64;
        file.seek(SeekFrom::Start(self.count_offset + 8 + record * self.keys.len() as u64))
            .map_err(io)?;
        let mut w = BufWriter::new(&mut file);
        let mut idx = String::new();
        for (q, v) in &fresh {
            w.write_u8(q.direction as u8).map_err(io)?;
            w.write_u32::<LittleEndian>(q.np).map_err(io)?;
            w.write_u32::<LittleEndian>(q.rp).map_err(io)?;
            for x in v {
                w.write_f32::<LittleEndian>(*x).map_err(io)?;
            }
            let ord = self.keys.len();
            idx.push_str(&format!("{}\t{}\t{}\t{ord}\n", direction_name(q.direction), q.np, q.rp));
            self.index.insert(*q, ord);
            self.keys.push(*q);
            self.values.extend_from_slice(v);
        }
        w.flush().map_err(io)?;
        drop(w);
        file.seek(SeekFrom::Start(self.count_offset)).map_err(io)?;
        file.write_u64::<LittleEndian>(self.keys.len() as u64).map_err(io)?;
        file.sync_data().map_err(io)?;
        let ip = idx_path(&self.path);
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ip)
            .and_then(|mut f| f.write_all(idx.as_bytes()))
            .map_err(|e| Error::io(&ip, e))?;
        Ok(())
    }

    /// Returns the stored vector, computing and appending it on a miss.
    pub fn get_or_compute(&mut self, kg: &OpenKg, q: ContextQuery, provider: &dyn ContextProvider) -> Result<Vec<f32>> {
        self.check_provider(provider.provider_id())?;
        if let Some(v) = self.get(&q) {
            return Ok(v.to_vec());
        }
        let v = provider.context_vector(kg, q)?;
        self.insert(q, &v)?;
        Ok(v)
    }

    /// Computes every missing query in `queries`, appending in chunks.
    pub fn warm(&mut self, kg: &OpenKg, queries: &[ContextQuery], provider: &dyn ContextProvider) -> Result<usize> {
        self.check_provider(provider.provider_id())?;
        let missing: Vec<ContextQuery> = queries.iter().filter(|q| !self.contains(q)).copied().collect();
        for (n, chunk) in missing.chunks(256).enumerate() {
            let rows = chunk
                .iter()
                .map(|&q| provider.context_vector(kg, q).map(|v| (q, v)))
                .collect::<Result<Vec<_>>>()?;
            self.insert_many(&rows)?;
            log::info!("cached {} of {} context vectors", (n * 256 + chunk.len()).min(missing.len()), missing.len());
        }
        Ok(missing.len())
    }

    /// Queries from `queries` that the cache lacks.
    pub fn missing(&self, queries: &[ContextQuery]) -> Vec<ContextQuery> {
        queries.iter().filter(|q| !self.contains(q)).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_provider_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.okgc");
        let mut c = ContextVectorCache::create(&p, "mlm-base", 3).unwrap();
        c.insert(ContextQuery::tail(1, 2), &[0.1, -0.2, 3.5]).unwrap();
        c.insert(ContextQuery::head(1, 2), &[1.0, 2.0, 3.0]).unwrap();
        c.insert(ContextQuery::tail(1, 2), &[9.0, 9.0, 9.0]).unwrap();
        let r = ContextVectorCache::open(&p).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.get(&ContextQuery::tail(1, 2)).unwrap(), &[0.1, -0.2, 3.5]);
        assert!(r.check_provider("mlm-large").is_err());
        let idx = std::fs::read_to_string(idx_path(&p)).unwrap();
        assert_eq!(idx, "tail\t1\t2\t0\nhead\t1\t2\t1\n");
        assert!(ContextVectorCache::open_or_create(&p, "mlm-large", 3).is_err());
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ContextVectorCache::create(&dir.path().join("c"), "x", 2).unwrap();
        assert!(c.insert(ContextQuery::tail(0, 0), &[1.0]).is_err());
    }
}
