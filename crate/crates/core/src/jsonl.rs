//! JSON Lines persistence shared by every record type.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads one record per non-blank line. Errors carry the 1-based line number
/// and, where serde reports one, the offending field.
pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&line).map_err(|(field, message)| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            field,
            message,
        })?;
        out.push(parsed);
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(line: &str) -> std::result::Result<T, (String, String)> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ("<record>".to_string(), e.to_string()))?;
    serde_json::from_value(value).map_err(|e| {
        let message = e.to_string();
        (field_in_message(&message).unwrap_or("<record>").to_string(), message)
    })
}

// serde names fields as `name` in "missing field `text`" style messages
fn field_in_message(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

pub fn write<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes records to the exact bytes `write` would produce.
pub fn to_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}
