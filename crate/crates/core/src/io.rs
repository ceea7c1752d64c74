//! Trajectory files and CSV metrics.
//!
//! A trajectory file is one line of compact JSON (the header) terminated by
//! `\n`, followed by one block of `p` little-endian `f64` per checkpoint.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamVector};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub spec: NetworkSpec,
    pub times: Vec<f64>,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub header: TrajectoryHeader,
    pub thetas: Vec<ParamVector>,
}

impl TrajectoryFile {
    pub fn new(config_hash: impl Into<String>, spec: NetworkSpec, times: Vec<f64>, thetas: Vec<ParamVector>) -> Result<Self> {
        let p = spec.param_count();
        if times.len() != thetas.len() {
            return Err(Error::DimensionMismatch { what: "checkpoint times vs parameters", expected: times.len(), got: thetas.len() });
        }
        for th in &thetas {
            th.check(&spec)?;
        }
        let header = TrajectoryHeader { format_version: FORMAT_VERSION, config_hash: config_hash.into(), spec, times, p };
        Ok(TrajectoryFile { header, thetas })
    }

    pub fn last(&self) -> Option<(f64, &ParamVector)> {
        self.header.times.last().copied().zip(self.thetas.last())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.thetas.len() * self.header.p * 8);
        for th in &self.thetas {
            for v in &th.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header line".into()));
        }
        let header: TrajectoryHeader = serde_json::from_slice(&line)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        if header.p != header.spec.param_count() {
            return Err(Error::Format(format!("header p = {} but the spec has {} parameters", header.p, header.spec.param_count())));
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body)?;
        let expected = header.times.len() * header.p * 8;
        if body.len() != expected {
            return Err(Error::Format(format!("{} payload bytes, header implies {expected}", body.len())));
        }
        let thetas = if header.p == 0 {
            vec![ParamVector { data: Vec::new() }; header.times.len()]
        } else {
            body.chunks_exact(header.p * 8)
                .map(|block| ParamVector { data: block.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect() })
                .collect()
        };
        Ok(TrajectoryFile { header, thetas })
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial trajectory.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes serializable rows with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and rows of plain numbers.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
