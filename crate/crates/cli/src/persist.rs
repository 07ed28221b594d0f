//! Sample container: a text header followed by a little-endian `f64` block.
//! The layout is documented bit-exactly in `docs/file-formats.md`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::CliError;

pub const MAGIC: &str = "OSSFIELD-SAMPLE v1";
const END: &str = "END";

/// Field values as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub digest: String,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub replicates: usize,
    pub points: Vec<Vec<f64>>,
    /// Replicate-major, then point, then component.
    pub values: Vec<f64>,
}

impl SampleFile {
    pub fn value(&self, rep: usize, point: usize) -> &[f64] {
        let off = (rep * self.points.len() + point) * self.m;
        &self.values[off..off + self.m]
    }

    pub fn header(&self) -> String {
        let mut h = String::new();
        writeln!(h, "{MAGIC}").unwrap();
        writeln!(h, "digest {}", self.digest).unwrap();
        writeln!(h, "dims d={} m={} points={} replicates={}", self.d, self.m, self.points.len(), self.replicates).unwrap();
        writeln!(h, "seed {}", self.seed).unwrap();
        writeln!(h, "encoding f64 little-endian").unwrap();
        writeln!(h, "layout replicate point component").unwrap();
        for (i, p) in self.points.iter().enumerate() {
            let coords: Vec<String> = p.iter().map(|v| format!("{v:e}")).collect();
            writeln!(h, "point {i} {}", coords.join(" ")).unwrap();
        }
        writeln!(h, "{END}").unwrap();
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.reserve(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |msg: &str| CliError::Config(format!("malformed sample file: {msg}"));
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..].iter().position(|b| *b == b'\n').ok_or_else(|| bad("header not terminated"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == END {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad("missing magic line"));
        }
        let field = |prefix: &str| -> Result<&str, CliError> {
            lines
                .iter()
                .find_map(|l| l.strip_prefix(prefix))
                .ok_or_else(|| bad(&format!("missing `{}` line", prefix.trim())))
        };
        let digest = field("digest ")?.to_string();
        let seed = field("seed ")?.parse().map_err(|_| bad("seed"))?;
        let mut dims = [0usize; 4];
        for (slot, tok) in dims.iter_mut().zip(field("dims ")?.split_whitespace()) {
            *slot = tok
                .split_once('=')
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| bad("dims"))?;
        }
        let [d, m, n_points, replicates] = dims;
        let points = lines
            .iter()
            .filter_map(|l| l.strip_prefix("point "))
            .map(|l| {
                l.split_whitespace()
                    .skip(1)
                    .map(|t| t.parse::<f64>().map_err(|_| bad("point coordinate")))
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if points.len() != n_points || points.iter().any(|p| p.len() != d) {
            return Err(bad("point list does not match dims"));
        }
        let body = &bytes[pos..];
        if body.len() != replicates * n_points * m * 8 {
            return Err(bad("value block has the wrong length"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            digest,
            d,
            m,
            seed,
            replicates,
            points,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Text export: one header line, then one row per replicate.
    pub fn to_text(&self) -> String {
        let mut out = String::from("replicate");
        for j in 0..self.points.len() {
            for c in 0..self.m {
                write!(out, " p{j}_c{c}").unwrap();
            }
        }
        out.push('\n');
        for r in 0..self.replicates {
            write!(out, "{r}").unwrap();
            for j in 0..self.points.len() {
                for v in self.value(r, j) {
                    write!(out, " {v:e}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `dir/name` and returns its manifest entry.
pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<crate::manifest::FileEntry, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(crate::manifest::FileEntry {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    })
}
