//! Append-only newline-delimited JSON event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{ApeError, Result};

/// Field holding elapsed milliseconds. It is the only field that differs
/// between two runs of the same configuration.
pub const WALL_CLOCK_FIELD: &str = "wall_ms";

pub struct RunLog {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<Value>,
    start: Instant,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog {
            path: None,
            file: None,
            records: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ApeError::io(path, e))?;
        Ok(RunLog {
            path: Some(path.to_path_buf()),
            file: Some(file),
            records: Vec::new(),
            start: Instant::now(),
        })
    }

    /// Appends `{"kind": kind, ...fields, "wall_ms": ...}`. `fields` must
    /// serialize to a JSON object.
    pub fn record<T: Serialize>(&mut self, kind: &str, fields: &T) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("kind".into(), Value::from(kind));
        match serde_json::to_value(fields).map_err(|e| ApeError::InvalidArgument(e.to_string()))? {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                return Err(ApeError::InvalidArgument(format!(
                    "log fields must be an object, got {other}"
                )))
            }
        }
        obj.insert(
            WALL_CLOCK_FIELD.into(),
            Value::from(self.start.elapsed().as_millis() as u64),
        );
        let value = Value::Object(obj);
        if let Some(file) = &mut self.file {
            let path = self.path.as_deref().unwrap_or(Path::new(""));
            writeln!(file, "{value}").map_err(|e| ApeError::io(path, e))?;
        }
        self.records.push(value);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r["kind"] == kind)
    }

    /// Records with the wall-clock field removed, for run comparisons.
    pub fn without_wall_clock(&self) -> Vec<Value> {
        strip_wall_clock(&self.records)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<Value>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| ApeError::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ApeError::io(path, e))?;
            out.push(serde_json::from_str(&line).map_err(|e| ApeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

pub fn strip_wall_clock(records: &[Value]) -> Vec<Value> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Value::Object(m) = &mut r {
                m.remove(WALL_CLOCK_FIELD);
            }
            r
        })
        .collect()
}
