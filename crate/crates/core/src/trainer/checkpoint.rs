//! Checkpoint bundles: a directory with a plain-text manifest plus one
//! binary file per tensor.
//!
//! Tensor files carry a 16-byte header (4-byte magic, u32 rank, u32
//! rows, u32 cols, all little-endian) followed by the row-major f64
//! payload, little-endian IEEE-754. The manifest is UTF-8 `key=value`
//! lines recording the format version, free-form metadata, and per-file
//! shapes, tags, and SHA-256 checksums, so bundles are diff-able and
//! integrity-checkable. Loads stage everything in memory and verify
//! checksums before returning, so a corrupt bundle never yields partial
//! state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointErrorKind as Kind, Error, Result};
use crate::numkernel::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"QTNS";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * m.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_tensor(bytes: &[u8], file: &str) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(Error::checkpoint(
            Kind::Truncated,
            format!("{file}: {} bytes is shorter than the 16-byte header", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::checkpoint(
            Kind::Malformed,
            format!("{file}: bad magic"),
        ));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank != 2 {
        return Err(Error::checkpoint(
            Kind::Malformed,
            format!("{file}: unsupported rank {rank}"),
        ));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * rows * cols;
    if bytes.len() < expected {
        return Err(Error::checkpoint(
            Kind::Truncated,
            format!("{file}: {} bytes, header promises {expected}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::checkpoint(
            Kind::Malformed,
            format!("{file}: {} trailing bytes", bytes.len() - expected),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[16..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    // Bypass the finiteness check: bit-exact persistence must round-trip
    // whatever was stored; finiteness is the producer's invariant.
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().copy_from_slice(&data);
    Ok(m)
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub file: String,
    pub role: String,
    pub tag: Option<String>,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct ExtraEntry {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

/// Builds a bundle directory. Nothing is valid until `finish` writes the
/// manifest.
pub struct BundleWriter {
    dir: PathBuf,
    tensors: Vec<TensorEntry>,
    extras: Vec<ExtraEntry>,
    meta: BTreeMap<String, String>,
}

impl BundleWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            tensors: Vec::new(),
            extras: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn add_tensor(
        &mut self,
        file: &str,
        role: &str,
        tag: Option<String>,
        m: &Matrix,
    ) -> Result<()> {
        let bytes = encode_tensor(m);
        let sha = sha_hex(&bytes);
        fs::write(self.dir.join(file), &bytes)?;
        self.tensors.push(TensorEntry {
            file: file.to_string(),
            role: role.to_string(),
            tag,
            rows: m.rows(),
            cols: m.cols(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, file: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let sha = sha_hex(&bytes);
        fs::write(self.dir.join(file), &bytes)?;
        self.extras.push(ExtraEntry {
            name: name.to_string(),
            file: file.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("format_version={FORMAT_VERSION}\n"));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        out.push_str(&format!("n_tensors={}\n", self.tensors.len()));
        for (i, t) in self.tensors.iter().enumerate() {
            out.push_str(&format!("tensor.{i}.file={}\n", t.file));
            out.push_str(&format!("tensor.{i}.role={}\n", t.role));
            if let Some(tag) = &t.tag {
                out.push_str(&format!("tensor.{i}.tag={tag}\n"));
            }
            out.push_str(&format!("tensor.{i}.rows={}\n", t.rows));
            out.push_str(&format!("tensor.{i}.cols={}\n", t.cols));
            out.push_str(&format!("tensor.{i}.sha256={}\n", t.sha256));
        }
        for e in &self.extras {
            out.push_str(&format!("extra.{}.file={}\n", e.name, e.file));
            out.push_str(&format!("extra.{}.sha256={}\n", e.name, e.sha256));
        }
        fs::write(self.dir.join(MANIFEST_FILE), out)?;
        Ok(())
    }
}

/// Parsed, version-checked view of a bundle on disk. Payloads are
/// checksum-verified on access.
#[derive(Debug)]
pub struct Bundle {
    dir: PathBuf,
    tensors: Vec<TensorEntry>,
    extras: Vec<ExtraEntry>,
    meta: BTreeMap<String, String>,
}

impl Bundle {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::checkpoint(
                Kind::Missing,
                format!("{}: {e}", manifest_path.display()),
            )
        })?;
        let mut kv: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::checkpoint(
                    Kind::Malformed,
                    format!("manifest line {}: no '='", lineno + 1),
                )
            })?;
            kv.push((k.to_string(), v.to_string()));
        }
        let lookup = |key: &str| -> Option<&str> {
            kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
        };

        let version: u32 = lookup("format_version")
            .ok_or_else(|| Error::checkpoint(Kind::Malformed, "no format_version"))?
            .parse()
            .map_err(|_| Error::checkpoint(Kind::Malformed, "bad format_version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                Kind::VersionMismatch,
                format!("bundle is version {version}, this build reads {FORMAT_VERSION}"),
            ));
        }

        let n_tensors: usize = lookup("n_tensors")
            .ok_or_else(|| Error::checkpoint(Kind::Malformed, "no n_tensors"))?
            .parse()
            .map_err(|_| Error::checkpoint(Kind::Malformed, "bad n_tensors"))?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for i in 0..n_tensors {
            let want = |field: &str| -> Result<&str> {
                lookup(&format!("tensor.{i}.{field}")).ok_or_else(|| {
                    Error::checkpoint(Kind::Malformed, format!("tensor.{i}.{field} missing"))
                })
            };
            tensors.push(TensorEntry {
                file: want("file")?.to_string(),
                role: want("role")?.to_string(),
                tag: lookup(&format!("tensor.{i}.tag")).map(|s| s.to_string()),
                rows: want("rows")?
                    .parse()
                    .map_err(|_| Error::checkpoint(Kind::Malformed, "bad rows"))?,
                cols: want("cols")?
                    .parse()
                    .map_err(|_| Error::checkpoint(Kind::Malformed, "bad cols"))?,
                sha256: want("sha256")?.to_string(),
            });
        }

        let mut extras = Vec::new();
        let mut meta = BTreeMap::new();
        for (k, v) in &kv {
            if let Some(name) = k.strip_prefix("meta.") {
                meta.insert(name.to_string(), v.clone());
            } else if let Some(rest) = k.strip_prefix("extra.") {
                if let Some(name) = rest.strip_suffix(".file") {
                    let sha = lookup(&format!("extra.{name}.sha256"))
                        .ok_or_else(|| {
                            Error::checkpoint(
                                Kind::Malformed,
                                format!("extra.{name}.sha256 missing"),
                            )
                        })?
                        .to_string();
                    extras.push(ExtraEntry {
                        name: name.to_string(),
                        file: v.clone(),
                        sha256: sha,
                    });
                }
            }
        }

        Ok(Self {
            dir: dir.to_path_buf(),
            tensors,
            extras,
            meta,
        })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::checkpoint(Kind::Malformed, format!("meta.{key} missing")))
    }

    pub fn tensor_entries(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn entries_with_role(&self, role: &str) -> Vec<&TensorEntry> {
        self.tensors.iter().filter(|t| t.role == role).collect()
    }

    pub fn load_entry(&self, entry: &TensorEntry) -> Result<Matrix> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| {
            Error::checkpoint(Kind::Missing, format!("{}: {e}", path.display()))
        })?;
        if sha_hex(&bytes) != entry.sha256 {
            return Err(Error::checkpoint(
                Kind::Integrity,
                format!("{}: checksum mismatch", entry.file),
            ));
        }
        let m = decode_tensor(&bytes, &entry.file)?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(Error::checkpoint(
                Kind::ShapeMismatch,
                format!(
                    "{}: payload is {}x{}, manifest says {}x{}",
                    entry.file,
                    m.rows(),
                    m.cols(),
                    entry.rows,
                    entry.cols
                ),
            ));
        }
        Ok(m)
    }

    /// Loads the unique tensor with the given role.
    pub fn load_role(&self, role: &str) -> Result<Matrix> {
        let matches = self.entries_with_role(role);
        match matches.as_slice() {
            [one] => self.load_entry(one),
            [] => Err(Error::checkpoint(
                Kind::Missing,
                format!("no tensor with role {role:?}"),
            )),
            _ => Err(Error::checkpoint(
                Kind::Malformed,
                format!("multiple tensors with role {role:?}"),
            )),
        }
    }

    pub fn load_role_optional(&self, role: &str) -> Result<Option<Matrix>> {
        match self.entries_with_role(role).as_slice() {
            [] => Ok(None),
            [one] => Ok(Some(self.load_entry(one)?)),
            _ => Err(Error::checkpoint(
                Kind::Malformed,
                format!("multiple tensors with role {role:?}"),
            )),
        }
    }

    pub fn load_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let entry = self
            .extras
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::checkpoint(Kind::Missing, format!("no extra {name:?}")))?;
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| {
            Error::checkpoint(Kind::Missing, format!("{}: {e}", path.display()))
        })?;
        if sha_hex(&bytes) != entry.sha256 {
            return Err(Error::checkpoint(
                Kind::Integrity,
                format!("{}: checksum mismatch", entry.file),
            ));
        }
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::checkpoint(Kind::Malformed, format!("{name}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::randn(7, 5, 1.0, &mut rng);
        let bytes = encode_tensor(&m);
        let back = decode_tensor(&bytes, "t").unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::randn(3, 4, 1.0, &mut rng);
        let b = Matrix::randn(2, 2, 1.0, &mut rng);
        let mut w = BundleWriter::create(dir.path()).unwrap();
        w.set_meta("task_id", 7);
        w.add_tensor("a.bin", "prefix", None, &a).unwrap();
        w.add_tensor("b.bin", "queue_segment", Some("trained_prompt:1".into()), &b)
            .unwrap();
        w.add_json("notes", "notes.json", &vec![1, 2, 3]).unwrap();
        w.finish().unwrap();

        let bundle = Bundle::open(dir.path()).unwrap();
        assert_eq!(bundle.require_meta("task_id").unwrap(), "7");
        assert_eq!(bundle.load_role("prefix").unwrap(), a);
        let segs = bundle.entries_with_role("queue_segment");
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].tag.as_deref(), Some("trained_prompt:1"));
        assert_eq!(bundle.load_entry(segs[0]).unwrap(), b);
        let notes: Vec<i32> = bundle.load_json("notes").unwrap();
        assert_eq!(notes, vec![1, 2, 3]);
    }

    #[test]
    fn corrupted_payload_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::filled(4, 4, 1.25);
        let mut w = BundleWriter::create(dir.path()).unwrap();
        w.add_tensor("m.bin", "prefix", None, &m).unwrap();
        w.finish().unwrap();

        // Flip one byte inside the float payload.
        let path = dir.path().join("m.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 0x01;
        fs::write(&path, &bytes).unwrap();

        let bundle = Bundle::open(dir.path()).unwrap();
        match bundle.load_role("prefix") {
            Err(Error::Checkpoint { kind, .. }) => assert_eq!(kind, Kind::Integrity),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_detected() {
        let bytes = encode_tensor(&Matrix::filled(2, 2, 1.0));
        match decode_tensor(&bytes[..20], "t") {
            Err(Error::Checkpoint { kind, .. }) => assert_eq!(kind, Kind::Truncated),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = BundleWriter::create(dir.path()).unwrap();
        w.add_tensor("m.bin", "prefix", None, &Matrix::ones(1, 1))
            .unwrap();
        w.finish().unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace("format_version=1", "format_version=99");
        fs::write(&manifest, text).unwrap();
        match Bundle::open(dir.path()) {
            Err(Error::Checkpoint { kind, .. }) => assert_eq!(kind, Kind::VersionMismatch),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = BundleWriter::create(dir.path()).unwrap();
        w.add_tensor("m.bin", "prefix", None, &Matrix::ones(2, 3))
            .unwrap();
        w.finish().unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap().replace(
            "tensor.0.rows=2",
            "tensor.0.rows=3",
        );
        fs::write(&manifest, text).unwrap();
        // Checksum still passes (payload untouched) but the shape in the
        // manifest now disagrees with the header.
        let bundle = Bundle::open(dir.path()).unwrap();
        match bundle.load_role("prefix") {
            Err(Error::Checkpoint { kind, .. }) => assert_eq!(kind, Kind::ShapeMismatch),
            other => panic!("{other:?}"),
        }
    }
}
