//! Line-delimited log formats.
//!
//! Trajectory logs are the contract between data construction, training,
//! and reporting: one UTF-8 JSON record per line with a schema version
//! field `"v": "v1"`. Records are validated on read so downstream folds can
//! trust structural invariants.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Trajectory, TrajectoryError};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: invalid trajectory: {source}")]
    Invalid {
        path: String,
        line: usize,
        #[source]
        source: TrajectoryError,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> LogError {
    LogError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize)]
struct VersionedRef<'a, T: Serialize> {
    v: &'static str,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct VersionedOwned<T> {
    v: String,
    #[serde(flatten)]
    record: T,
}

/// Canonical single-line encoding of a record with the version field.
pub fn encode_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(&VersionedRef {
        v: SCHEMA_VERSION,
        record,
    })
    .expect("record serialization cannot fail")
}

/// Decode one line, checking the schema version.
pub fn decode_line<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T, String> {
    let rec: VersionedOwned<T> = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.v != SCHEMA_VERSION {
        return Err(format!("unsupported schema version '{}'", rec.v));
    }
    Ok(rec.record)
}

/// Write any serializable records as versioned JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), LogError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        out.write_all(encode_line(record).as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read versioned JSONL records.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, LogError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = decode_line(&line).map_err(|message| LogError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write a trajectory log, one trajectory per line.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), LogError> {
    write_jsonl(path, trajectories)
}

/// Read and validate a trajectory log.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, LogError> {
    let trajectories: Vec<Trajectory> = read_jsonl(path)?;
    for (idx, traj) in trajectories.iter().enumerate() {
        traj.validate().map_err(|source| LogError::Invalid {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
    }
    Ok(trajectories)
}
