//! Single-file parameter archive.
//!
//! Layout: the 8-byte magic `RKARCH01`, a little-endian `u64` header
//! length, a JSON header (caller metadata plus tensor names and dims), then
//! every tensor's `f32` values little-endian in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RKARCH01";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} is not a parameter archive")]
    BadMagic { path: String },
    #[error("corrupt archive header in {path}: {source}")]
    Header { path: String, source: serde_json::Error },
    #[error("archive {path} is truncated")]
    Truncated { path: String },
    #[error("archive {path} holds {found} stores, expected {expected}")]
    StoreCount {
        path: String,
        found: usize,
        expected: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    stores: Vec<StoreLayout>,
}

#[derive(Serialize, Deserialize)]
struct StoreLayout {
    prefix: String,
    params: Vec<(String, [usize; 4])>,
    buffers: Vec<(String, [usize; 4])>,
}

pub fn write<M: Serialize>(path: &Path, meta: &M, stores: &[&ParamStore]) -> Result<(), ArchiveError> {
    let io = |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    };
    // Stores are serialized through serde to reach names/values uniformly.
    let mut layouts = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for store in stores {
        let json = serde_json::to_value(store).expect("store serializes");
        let mut layout = StoreLayout {
            prefix: store.prefix().to_string(),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        for (key, list) in [("params", &mut layout.params), ("buffers", &mut layout.buffers)] {
            for entry in json[key].as_array().expect("array") {
                let name = entry["name"].as_str().expect("name").to_string();
                let t: Tensor = serde_json::from_value(entry["value"].clone()).expect("tensor");
                list.push((name, t.dims()));
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        layouts.push(layout);
    }
    let header = serde_json::to_vec(&Header { meta, stores: layouts }).expect("header serializes");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&header).map_err(io)?;
    file.write_all(&payload).map_err(io)?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(path: &Path, expected_stores: usize) -> Result<(M, Vec<ParamStore>), ArchiveError> {
    let p = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ArchiveError::Io {
            path: p.clone(),
            source,
        })?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic { path: p });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| ArchiveError::Truncated { path: p.clone() })?;
    let header: Header<M> = serde_json::from_slice(body).map_err(|source| ArchiveError::Header {
        path: p.clone(),
        source,
    })?;
    if header.stores.len() != expected_stores {
        return Err(ArchiveError::StoreCount {
            path: p,
            found: header.stores.len(),
            expected: expected_stores,
        });
    }
    let mut cursor = 16 + hlen;
    let mut take = |dims: [usize; 4]| -> Result<Tensor, ArchiveError> {
        let len: usize = dims.iter().product();
        let raw = bytes
            .get(cursor..cursor + 4 * len)
            .ok_or_else(|| ArchiveError::Truncated { path: p.clone() })?;
        cursor += 4 * len;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(dims, data))
    };
    let mut stores = Vec::new();
    for layout in header.stores {
        let mut store = ParamStore::new(&layout.prefix);
        let strip = |name: &str| {
            name.strip_prefix(&format!("{}.", layout.prefix))
                .unwrap_or(name)
                .to_string()
        };
        for (name, dims) in &layout.params {
            store.add(&strip(name), take(*dims)?);
        }
        for (name, dims) in &layout.buffers {
            store.add_buffer(&strip(name), take(*dims)?);
        }
        stores.push(store);
    }
    Ok((header.meta, stores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rkc");
        let mut a = ParamStore::new("enc");
        a.add_conv_weight("c1", 3, 2, 3, 3);
        a.add_buffer("bn.mean", Tensor::full([1, 2, 1, 1], 0.1));
        let mut b = ParamStore::new("head");
        b.add("w", Tensor::from_vec([1, 1, 1, 3], vec![f32::MIN_POSITIVE, -0.0, 1e30]));
        write(&path, &"meta-v1".to_string(), &[&a, &b]).unwrap();
        let (meta, stores): (String, _) = read(&path, 2).unwrap();
        assert_eq!(meta, "meta-v1");
        assert_eq!(stores[0], a);
        assert_eq!(stores[1], b);
        assert_eq!(stores[1].checksum(), b.checksum());
        assert!(matches!(read::<String>(&path, 3), Err(ArchiveError::StoreCount { .. })));
    }
}
