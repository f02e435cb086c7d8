//! Little-endian float32 files with a one-line JSON header per entry.
//! Precomputed-feature files hold a single anonymous entry; parameter
//! checkpoints hold one named entry per parameter.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("payload truncated for entry {0:?}")]
    Truncated(Option<String>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug)]
pub struct Entry {
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_entry<W: Write>(
    w: &mut W,
    name: Option<&str>,
    shape: &[usize],
    data: &[f32],
) -> Result<(), FormatError> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let header = Header {
        name: name.map(str::to_owned),
        shape: shape.to_vec(),
        dtype: "f32".into(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(|e| FormatError::Header(e.to_string()))?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_entries<R: BufRead>(r: &mut R) -> Result<Vec<Entry>, FormatError> {
    let mut entries = Vec::new();
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| FormatError::Header(format!("{e}: {line:?}")))?;
        if header.dtype != "f32" {
            return Err(FormatError::Header(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let numel: usize = header.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| FormatError::Truncated(header.name.clone()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry {
            name: header.name,
            shape: header.shape,
            data,
        });
    }
    Ok(entries)
}

pub fn write_single(path: &std::path::Path, shape: &[usize], data: &[f32]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_entry(&mut f, None, shape, data)
}

pub fn read_single(path: &std::path::Path) -> Result<Entry, FormatError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    let mut entries = read_entries(&mut f)?;
    if entries.len() != 1 {
        return Err(FormatError::Header(format!(
            "{}: expected exactly one entry, found {}",
            path.display(),
            entries.len()
        )));
    }
    Ok(entries.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_entries() {
        let mut buf = Vec::new();
        write_entry(&mut buf, Some("w"), &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_entry(&mut buf, None, &[2], &[-0.5, 0.25]).unwrap();
        let entries = read_entries(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].name.as_deref(), Some("w"));
        assert_eq!(entries[0].shape, vec![2, 3]);
        assert_eq!(entries[1].data, vec![-0.5, 0.25]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        write_entry(&mut buf, Some("w"), &[4], &[1.0; 4]).unwrap();
        buf.truncate(buf.len() - 2);
        let err = read_entries(&mut std::io::Cursor::new(buf)).unwrap_err();
        assert!(matches!(err, FormatError::Truncated(Some(_))));
    }
}
