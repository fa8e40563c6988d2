//! Checkpoint archives: a tar holding `manifest.json` plus one raw
//! little-endian f32 tensor per parameter under `params/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{bytes_to_f64, f32_bytes, sha256_hex};
use crate::nn::{Mat, ParamStore};

pub const ARCHIVE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest<M> {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: M,
}

fn tensor_path(name: &str) -> String {
    format!("params/{name}.f32")
}

fn append(builder: &mut tar::Builder<fs::File>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, path, bytes)?;
    Ok(())
}

/// Writes every parameter of `store` (optionally only names under `prefix`).
pub fn write_archive<M: Serialize>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    meta: &M,
    store: &ParamStore,
    prefix: &str,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
    }
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (_, name, m) in store.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        let bytes = f32_bytes(&m.data);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: vec![m.rows, m.cols],
            sha256: sha256_hex(&bytes),
        });
        blobs.push((tensor_path(name), bytes));
    }
    let manifest = ArchiveManifest {
        version: ARCHIVE_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        tensors,
        meta,
    };
    let tmp = path.with_extension("partial");
    let file = fs::File::create(&tmp).map_err(Error::file(&tmp))?;
    let mut builder = tar::Builder::new(file);
    append(&mut builder, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    for (p, bytes) in &blobs {
        append(&mut builder, p, bytes)?;
    }
    builder.into_inner()?.sync_all()?;
    fs::rename(&tmp, path).map_err(Error::file(path))?;
    Ok(())
}

/// A loaded archive: manifest plus verified tensors by name.
pub struct Archive<M> {
    pub manifest: ArchiveManifest<M>,
    pub tensors: BTreeMap<String, Mat>,
}

pub fn read_archive<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Archive<M>> {
    let file = fs::File::open(path).map_err(Error::file(path))?;
    let mut ar = tar::Archive::new(file);
    let mut files = BTreeMap::new();
    for entry in ar.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf)?;
        files.insert(name, buf);
    }
    let raw = files
        .get(MANIFEST)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no manifest", path.display())))?;
    let manifest: ArchiveManifest<M> = serde_json::from_slice(raw)?;
    if manifest.version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {}", manifest.version)));
    }
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let bytes = files
            .get(&tensor_path(&t.name))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
        if sha256_hex(bytes) != t.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for {}", t.name)));
        }
        let data = bytes_to_f64(bytes)?;
        if t.shape.len() != 2 || t.shape[0] * t.shape[1] != data.len() || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("malformed tensor {}", t.name)));
        }
        tensors.insert(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data));
    }
    Ok(Archive { manifest, tensors })
}

/// Copies archived tensors into a freshly built store. Every parameter
/// under `prefix` must be present with a matching shape.
pub fn restore_params(store: &mut ParamStore, tensors: &BTreeMap<String, Mat>, prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        let cur = store.get_mut(id);
        if cur.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                cur.shape()
            )));
        }
        *cur = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut s = ParamStore::new();
        s.add("a/w", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 0.25]));
        s.add("b", Mat::from_vec(1, 3, vec![-1.0, 0.0, 5.5]));
        write_archive(&p, "test", "h", &7u32, &s, "").unwrap();
        let ar: Archive<u32> = read_archive(&p, "test").unwrap();
        assert_eq!(ar.manifest.meta, 7);
        let mut t = ParamStore::new();
        t.add("a/w", Mat::zeros(2, 2));
        t.add("b", Mat::zeros(1, 3));
        restore_params(&mut t, &ar.tensors, "").unwrap();
        assert_eq!(t.fingerprint(""), s.fingerprint(""));
        assert!(read_archive::<u32>(&p, "other").is_err());
        let mut bad = ParamStore::new();
        bad.add("a/w", Mat::zeros(3, 2));
        assert!(restore_params(&mut bad, &ar.tensors, "").is_err());
        // identical inputs give identical bytes
        let q = dir.path().join("n.ckpt");
        write_archive(&q, "test", "h", &7u32, &s, "").unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }
}
