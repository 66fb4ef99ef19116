//! Artifact headers, provenance hashes and framed binary IO.
//!
//! Every file the pipeline produces starts with a header carrying the magic
//! string, the artifact kind and version, a snapshot of the config that
//! produced it, and the config hash + content hash of every upstream artifact
//! it consumed. JSON-lines artifacts store the header as their first line;
//! binary artifacts store it after an 8-byte magic prefix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &str = "spanret";
pub const BIN_MAGIC: &[u8; 8] = b"SPANRETB";

/// Reference to a consumed artifact: the hash of the config that produced it
/// and the hash of its bytes on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UpstreamRef {
    pub config_hash: String,
    pub file_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub config_hash: String,
    #[serde(default)]
    pub upstream: BTreeMap<String, UpstreamRef>,
}

impl Header {
    pub fn new<C: Serialize>(
        kind: &str,
        version: u32,
        config: &C,
        upstream: BTreeMap<String, UpstreamRef>,
    ) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let config_hash = hash_json(&config);
        Header {
            magic: MAGIC.to_string(),
            kind: kind.to_string(),
            version,
            config,
            config_hash,
            upstream,
        }
    }

    /// Validate magic, kind and version against what the reader expects.
    pub fn check(&self, kind: &str, version: u32) -> Result<()> {
        if self.magic != MAGIC || self.kind != kind {
            return Err(Error::BadArtifact {
                expected: kind.to_string(),
                msg: format!("header says magic={:?} kind={:?}", self.magic, self.kind),
            });
        }
        if self.version != version {
            return Err(Error::VersionMismatch {
                kind: kind.to_string(),
                found: self.version,
                expected: version,
            });
        }
        Ok(())
    }

    pub fn as_upstream(&self, path: &Path) -> Result<UpstreamRef> {
        Ok(UpstreamRef {
            config_hash: self.config_hash.clone(),
            file_sha256: file_sha256(path)?,
        })
    }
}

/// SHA-256 of a JSON value in its canonical serde rendering.
pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex_digest(&bytes)
}

/// SHA-256 of a config snapshot.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    hash_json(&serde_json::to_value(config).expect("config serializes"))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode_digest(hasher))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode_digest(hasher)
}

mod hex {
    use sha2::{Digest, Sha256};

    pub fn encode_digest(hasher: Sha256) -> String {
        let digest = hasher.finalize();
        let mut out = String::with_capacity(digest.len() * 2);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Read an artifact header without knowing the artifact kind: binary frame
/// first, then a JSON-lines first line. Returns None for plain input files.
pub fn probe_header(path: &Path) -> Result<Option<Header>> {
    let mut reader = open_reader(path)?;
    let mut magic = [0u8; 8];
    if reader.read_exact(&mut magic).is_ok() && &magic == BIN_MAGIC {
        let mut len_bytes = [0u8; 8];
        if reader.read_exact(&mut len_bytes).is_err() {
            return Ok(None);
        }
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; len];
        if reader.read_exact(&mut header_bytes).is_err() {
            return Ok(None);
        }
        return Ok(serde_json::from_slice(&header_bytes).ok());
    }
    let mut reader = open_reader(path)?;
    let mut line = String::new();
    if reader.read_line(&mut line).is_err() {
        return Ok(None);
    }
    let header: Option<Header> = serde_json::from_str(line.trim_end()).ok();
    Ok(header.filter(|h| h.magic == MAGIC))
}

/// Provenance reference for a consumed file: its config hash when it carries
/// an artifact header (empty otherwise) plus its content hash.
pub fn upstream_ref(path: &Path) -> Result<UpstreamRef> {
    let config_hash = probe_header(path)?
        .map(|h| h.config_hash)
        .unwrap_or_default();
    Ok(UpstreamRef {
        config_hash,
        file_sha256: file_sha256(path)?,
    })
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file))
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(file))
}

/// Write the header as the first line of a JSON-lines artifact.
pub fn write_jsonl_header<W: Write>(w: &mut W, header: &Header) -> Result<()> {
    let line = serde_json::to_string(header).expect("header serializes");
    writeln!(w, "{line}").map_err(|e| Error::io("<jsonl>", e))
}

/// Read and validate the first line of a JSON-lines artifact.
pub fn read_jsonl_header<R: BufRead>(r: &mut R, kind: &str, version: u32) -> Result<Header> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io("<jsonl>", e))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|_| Error::BadArtifact {
        expected: kind.to_string(),
        msg: "first line is not an artifact header".to_string(),
    })?;
    header.check(kind, version)?;
    Ok(header)
}

/// Framed binary writer: magic, header length, header JSON, then payload.
pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(mut inner: W, header: &Header) -> Result<Self> {
        let header_bytes = serde_json::to_vec(header).expect("header serializes");
        inner.write_all(BIN_MAGIC).map_err(bin_io)?;
        inner
            .write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(bin_io)?;
        inner.write_all(&header_bytes).map_err(bin_io)?;
        Ok(BinWriter { inner })
    }

    pub fn write_u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).map_err(bin_io)
    }

    pub fn write_u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).map_err(bin_io)
    }

    pub fn write_f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).map_err(bin_io)
    }

    pub fn write_str(&mut self, s: &str) -> Result<()> {
        self.write_u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes()).map_err(bin_io)
    }

    pub fn write_f64_slice(&mut self, data: &[f64]) -> Result<()> {
        self.write_u64(data.len() as u64)?;
        for v in data {
            self.inner.write_all(&v.to_le_bytes()).map_err(bin_io)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(bin_io)
    }
}

/// Framed binary reader; validates magic, kind and version on open.
pub struct BinReader<R: Read> {
    inner: R,
    pub header: Header,
}

impl<R: Read> BinReader<R> {
    pub fn new(mut inner: R, kind: &str, version: u32) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic).map_err(bin_io)?;
        if &magic != BIN_MAGIC {
            return Err(Error::BadArtifact {
                expected: kind.to_string(),
                msg: "bad magic bytes".to_string(),
            });
        }
        let mut len_bytes = [0u8; 8];
        inner.read_exact(&mut len_bytes).map_err(bin_io)?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; len];
        inner.read_exact(&mut header_bytes).map_err(bin_io)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|_| Error::BadArtifact {
                expected: kind.to_string(),
                msg: "unreadable binary header".to_string(),
            })?;
        header.check(kind, version)?;
        Ok(BinReader { inner, header })
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b).map_err(bin_io)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(bin_io)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(bin_io)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn read_str(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        let mut bytes = vec![0u8; len];
        self.inner.read_exact(&mut bytes).map_err(bin_io)?;
        String::from_utf8(bytes).map_err(|_| Error::BadArtifact {
            expected: "utf8 string".to_string(),
            msg: "invalid utf8 in binary artifact".to_string(),
        })
    }

    pub fn read_f64_vec(&mut self) -> Result<Vec<f64>> {
        let len = self.read_u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.read_f64()?);
        }
        Ok(out)
    }
}

fn bin_io(e: std::io::Error) -> Error {
    Error::Io {
        path: "<binary artifact>".to_string(),
        source: e,
    }
}
