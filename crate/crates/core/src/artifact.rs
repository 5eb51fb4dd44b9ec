//! Framed artifact container shared by every on-disk format.
//!
//! ```text
//! MAGIC\n
//! version MAJOR.MINOR\n
//! key value\n ...
//! \n
//! payload bytes
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Version {
    pub major: u32,
    pub minor: u32,
}

impl Version {
    pub const fn new(major: u32, minor: u32) -> Self {
        Self { major, minor }
    }
}

impl std::fmt::Display for Version {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.major, self.minor)
    }
}

/// Ordered header entries. Keys may repeat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    pub entries: Vec<(String, String)>,
}

impl Header {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(format!("header is missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("header `{key}` has unparsable value `{raw}`")))
    }
}

/// A decoded artifact.
#[derive(Clone, Debug)]
pub struct Framed {
    pub version: Version,
    pub header: Header,
    pub payload: Vec<u8>,
    /// Set when an older minor version was upgraded while loading.
    pub migration: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(magic: &str, version: Version, header: &Header, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("version {version}\n").as_bytes());
    for (k, v) in &header.entries {
        debug_assert!(!k.contains(' ') && !k.contains('\n') && !v.contains('\n'));
        out.extend_from_slice(format!("{k} {v}\n").as_bytes());
    }
    out.push(b'\n');
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Verifies the digest, magic and version, then splits header and payload.
/// A file from an older minor version of the same major version loads with a
/// migration note; newer minors and other majors are rejected.
pub fn decode(bytes: &[u8], magic: &str, current: Version) -> Result<Framed> {
    if bytes.len() < DIGEST_LEN {
        return Err(Error::Digest {
            expected: "32-byte trailer".into(),
            found: format!("{} bytes in total", bytes.len()),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let actual = Sha256::digest(body);
    if actual.as_slice() != trailer {
        return Err(Error::Digest {
            expected: hex::encode(trailer),
            found: hex::encode(actual),
        });
    }
    let mut lines = LineReader { bytes: body, pos: 0 };
    let first = lines.next_line()?;
    if first != magic {
        return Err(Error::format(format!("expected magic `{magic}`, found `{first}`")));
    }
    let vline = lines.next_line()?;
    let version = vline
        .strip_prefix("version ")
        .and_then(|v| v.split_once('.'))
        .and_then(|(a, b)| Some(Version::new(a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::format(format!("bad version line `{vline}`")))?;
    if version.major != current.major || version.minor > current.minor {
        return Err(Error::Version(format!(
            "{magic} file version {version} cannot be read by version {current}"
        )));
    }
    let mut header = Header::default();
    loop {
        let line = lines.next_line()?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        header.push(k, v);
    }
    let migration = (version < current).then(|| format!("migrated {magic} {version} -> {current}"));
    Ok(Framed {
        version,
        header,
        payload: body[lines.pos..].to_vec(),
        migration,
    })
}

struct LineReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LineReader<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format("unterminated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("header is not UTF-8"))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Little-endian `f64` helpers for payloads.
pub fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("payload truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::format(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}
