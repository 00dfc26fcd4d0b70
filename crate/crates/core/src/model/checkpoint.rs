//! On-disk tensor archives.
//!
//! An archive is a directory holding `manifest.txt` and `tensors.bin`.
//! The manifest is line oriented:
//!
//! ```text
//! duet-archive 1
//! blob tensors.bin <sha256 of blob>
//! meta <key> <value>
//! tensor <name> <f32|f64> <d0>x<d1>... <byte offset>
//! ```
//!
//! The blob is the concatenation of every tensor, little-endian, in
//! manifest order. Keys and names contain no whitespace; values run to the
//! end of the line and contain no newline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::params::{Parameters, Role};

const HEADER: &str = "duet-archive 1";
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    /// Name to (storage type, values).
    pub tensors: BTreeMap<String, (DType, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_key(k: &str) -> Result<()> {
    if k.is_empty() || k.contains(char::is_whitespace) {
        return Err(bad(format!("invalid key {k:?}")));
    }
    Ok(())
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, t: Tensor) {
        self.tensors.insert(name.into(), (dtype, t));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta `{key}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut lines = String::new();
        for (name, (dtype, t)) in &self.tensors {
            check_key(name)?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(lines, "tensor {name} {} {} {}", dtype.as_str(), shape.join("x"), blob.len())
                .expect("write to string");
            match dtype {
                DType::F64 => t.data().iter().for_each(|v| blob.extend(v.to_le_bytes())),
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| blob.extend((v as f32).to_le_bytes())),
            }
        }
        let mut manifest = format!("{HEADER}\nblob {BLOB} {}\n", hex::encode(Sha256::digest(&blob)));
        for (k, v) in &self.meta {
            check_key(k)?;
            if v.contains('\n') {
                return Err(bad(format!("meta `{k}` contains a newline")));
            }
            writeln!(manifest, "meta {k} {v}").expect("write to string");
        }
        manifest.push_str(&lines);
        Ok((manifest, blob))
    }

    /// Writes the archive into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(BLOB), blob)?;
        std::fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join(MANIFEST))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("unrecognized manifest header"));
        }
        let blob_line = lines.next().ok_or_else(|| bad("missing blob line"))?;
        let mut parts = blob_line.split(' ');
        let (Some("blob"), Some(blob_name), Some(digest), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("malformed blob line {blob_line:?}")));
        };
        if blob_name.contains(['/', '\\']) {
            return Err(bad("blob name must be a plain file name"));
        }
        let blob = std::fs::read(dir.join(blob_name))?;
        if hex::encode(Sha256::digest(&blob)) != digest {
            return Err(bad("blob checksum mismatch"));
        }

        let mut out = Archive::default();
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                out.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dtype, t) = parse_tensor(rest, &blob)?;
                out.tensors.insert(name, (dtype, t));
            } else if !line.is_empty() {
                return Err(bad(format!("unexpected manifest line {line:?}")));
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 over the manifest text, which itself pins the blob
    /// digest. Identical archives hash identically.
    pub fn content_hash(&self) -> Result<String> {
        let (manifest, _) = self.encode()?;
        Ok(hex::encode(Sha256::digest(manifest.as_bytes())))
    }
}

fn parse_tensor(rest: &str, blob: &[u8]) -> Result<(String, DType, Tensor)> {
    let fields: Vec<&str> = rest.split(' ').collect();
    let [name, dtype, shape, offset] = fields[..] else {
        return Err(bad(format!("malformed tensor line {rest:?}")));
    };
    let dtype = match dtype {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(bad(format!("unknown dtype `{other}`"))),
    };
    let shape: Vec<usize> = shape
        .split('x')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(format!("bad shape for `{name}`")))?;
    let offset: usize = offset
        .parse()
        .map_err(|_| bad(format!("bad offset for `{name}`")))?;
    let n: usize = shape.iter().product();
    let end = n
        .checked_mul(dtype.width())
        .and_then(|b| b.checked_add(offset))
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| bad(format!("tensor `{name}` runs past the blob")))?;
    let bytes = &blob[offset..end];
    let data = match dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
    Ok((name.to_string(), dtype, t))
}

/// Stores a parameter set. `dtype` applies to every tensor; use
/// [`DType::F64`] when training will resume from the file.
pub fn params_to_archive(params: &Parameters, dtype: DType) -> Result<Archive> {
    let mut a = Archive::default();
    a.set_meta("role", params.role().as_str());
    a.set_meta("config", serde_json::to_string(params.config())?);
    for (name, t) in params.iter() {
        a.insert(format!("param/{name}"), dtype, t.clone());
    }
    Ok(a)
}

/// Inverse of [`params_to_archive`]; removes the consumed entries.
pub fn params_from_archive(a: &mut Archive) -> Result<Parameters> {
    let role: Role = a.meta("role")?.parse()?;
    let config: ModelConfig = serde_json::from_str(a.meta("config")?)?;
    let names: Vec<String> = a
        .tensors
        .keys()
        .filter(|k| k.starts_with("param/"))
        .cloned()
        .collect();
    let mut tensors = BTreeMap::new();
    for k in names {
        let t = a.take(&k)?;
        tensors.insert(k["param/".len()..].to_string(), t);
    }
    Parameters::from_tensors(config, role, tensors)
}

pub fn save_params(params: &Parameters, dir: &Path, dtype: DType) -> Result<()> {
    params_to_archive(params, dtype)?.save(dir)
}

pub fn load_params(dir: &Path) -> Result<Parameters> {
    params_from_archive(&mut Archive::load(dir)?)
}
