//! Binary index container.
//!
//! All integers and floats are little-endian. Layout, in order:
//!
//! | field              | type                                         |
//! |--------------------|----------------------------------------------|
//! | magic              | 8 bytes, `DAGRAGIX`                          |
//! | version            | u32 (currently 1)                            |
//! | dims               | u32                                          |
//! | max_neighbors      | u32                                          |
//! | ef_construction    | u32                                          |
//! | ef_search          | u32                                          |
//! | level_probability  | f64                                          |
//! | seed               | u64                                          |
//! | count              | u64                                          |
//! | entry_point        | u64, `u64::MAX` when empty                   |
//! | max_level          | u32                                          |
//! | levels             | `count` × u8                                 |
//! | adjacency          | for layer `0..=max_level`, for every node whose level ≥ layer in position order: u32 degree then degree × u32 neighbor positions |
//! | vectors            | `count × dims` × f64, row-major              |
//! | chunk_ids          | `count` × (u32 byte length, UTF-8 bytes)     |

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::sync::atomic::AtomicU64;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Index, IndexError, IndexParams, Result};

pub const MAGIC: [u8; 8] = *b"DAGRAGIX";
pub const FORMAT_VERSION: u32 = 1;

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| IndexError::InvalidParams(format!("{what} {n} exceeds u32")))
}

impl Index {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let p = &self.params;
        w.write_all(&MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u32::<LE>(to_u32(p.dims, "dims")?)?;
        w.write_u32::<LE>(to_u32(p.max_neighbors, "max_neighbors")?)?;
        w.write_u32::<LE>(to_u32(p.ef_construction, "ef_construction")?)?;
        w.write_u32::<LE>(to_u32(p.ef_search, "ef_search")?)?;
        w.write_f64::<LE>(p.level_probability)?;
        w.write_u64::<LE>(p.seed)?;
        w.write_u64::<LE>(self.len() as u64)?;
        w.write_u64::<LE>(self.entry.map_or(u64::MAX, u64::from))?;
        let max_level = self.max_level();
        w.write_u32::<LE>(max_level as u32)?;
        for layers in &self.links {
            w.write_u8((layers.len() - 1) as u8)?;
        }
        for layer in 0..=max_level {
            for layers in self.links.iter().filter(|l| l.len() > layer) {
                w.write_u32::<LE>(layers[layer].len() as u32)?;
                for &nb in &layers[layer] {
                    w.write_u32::<LE>(nb)?;
                }
            }
        }
        for &x in &self.vectors {
            w.write_f64::<LE>(x)?;
        }
        for id in &self.ids {
            w.write_u32::<LE>(to_u32(id.len(), "chunk id length")?)?;
            w.write_all(id.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(IndexError::FormatVersionMismatch(format!(
                "bad magic bytes {magic:02x?}"
            )));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::FormatVersionMismatch(format!(
                "version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let params = IndexParams {
            dims: r.read_u32::<LE>().map_err(truncated)? as usize,
            max_neighbors: r.read_u32::<LE>().map_err(truncated)? as usize,
            ef_construction: r.read_u32::<LE>().map_err(truncated)? as usize,
            ef_search: r.read_u32::<LE>().map_err(truncated)? as usize,
            level_probability: r.read_f64::<LE>().map_err(truncated)?,
            seed: r.read_u64::<LE>().map_err(truncated)?,
        };
        params
            .validate()
            .map_err(|e| IndexError::Corrupt(format!("header parameters: {e}")))?;
        let count = r.read_u64::<LE>().map_err(truncated)? as usize;
        let entry_raw = r.read_u64::<LE>().map_err(truncated)?;
        let max_level = r.read_u32::<LE>().map_err(truncated)? as usize;

        let mut links: Vec<Vec<Vec<u32>>> = Vec::new();
        for _ in 0..count {
            let level = r.read_u8().map_err(truncated)? as usize;
            if level > max_level {
                return Err(IndexError::Corrupt(format!("node level {level} above max {max_level}")));
            }
            links.push(vec![Vec::new(); level + 1]);
        }
        for layer in 0..=max_level {
            for layers in links.iter_mut().filter(|l| l.len() > layer) {
                let degree = r.read_u32::<LE>().map_err(truncated)? as usize;
                if degree > params.layer_capacity(layer) {
                    return Err(IndexError::Corrupt(format!("degree {degree} on layer {layer}")));
                }
                let mut nbrs = Vec::with_capacity(degree);
                for _ in 0..degree {
                    nbrs.push(r.read_u32::<LE>().map_err(truncated)?);
                }
                layers[layer] = nbrs;
            }
        }
        let mut vectors = Vec::with_capacity(count * params.dims);
        for _ in 0..count * params.dims {
            vectors.push(r.read_f64::<LE>().map_err(truncated)?);
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u32::<LE>().map_err(truncated)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(truncated)?;
            ids.push(String::from_utf8(buf).map_err(|_| IndexError::Corrupt("chunk id is not UTF-8".into()))?);
        }
        let entry = match entry_raw {
            u64::MAX => None,
            e if (e as usize) < count => Some(e as u32),
            e => return Err(IndexError::Corrupt(format!("entry point {e} out of range"))),
        };
        let index = Index {
            params,
            ids,
            vectors,
            links,
            entry,
            searches: AtomicU64::new(0),
        };
        if index.max_level() != max_level && count > 0 {
            return Err(IndexError::Corrupt("entry point is not on the top layer".into()));
        }
        if vectors_non_finite(&index.vectors) {
            return Err(IndexError::Corrupt("non-finite vector component".into()));
        }
        index.check_graph().map_err(IndexError::Corrupt)?;
        Ok(index)
    }
}

fn vectors_non_finite(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite())
}

fn truncated(e: std::io::Error) -> IndexError {
    if e.kind() == ErrorKind::UnexpectedEof {
        IndexError::Corrupt("file is truncated".into())
    } else {
        IndexError::StoreIO(e)
    }
}
