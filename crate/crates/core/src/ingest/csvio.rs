//! Opening raw CSV exports, plain or gzip-compressed.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use csv::{ByteRecord, StringRecord};
use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};

/// Locates `rel` under `base`, falling back to `rel.gz`.
pub fn find_input(base: &Path, rel: &str) -> Option<PathBuf> {
    let plain = base.join(rel);
    if plain.is_file() {
        return Some(plain);
    }
    let gz = base.join(format!("{rel}.gz"));
    gz.is_file().then_some(gz)
}

pub fn require_input(base: &Path, rel: &str) -> Result<PathBuf> {
    find_input(base, rel).ok_or_else(|| Error::IngestMissingFile(base.join(rel)))
}

pub type CsvReader = csv::Reader<Box<dyn Read + Send>>;

pub fn open_csv(path: &Path) -> Result<CsvReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let inner: Box<dyn Read + Send> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(MultiGzDecoder::new(BufReader::with_capacity(1 << 16, file)))
    } else {
        Box::new(file)
    };
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .buffer_capacity(1 << 16)
        .from_reader(inner))
}

/// Header lookup with case-insensitive column names.
pub struct Header {
    path: PathBuf,
    names: Vec<String>,
}

impl Header {
    pub fn read(reader: &mut CsvReader, path: &Path) -> Result<Self> {
        let record: &StringRecord = reader.headers().map_err(|e| Error::csv(path, e))?;
        Ok(Header {
            path: path.to_path_buf(),
            names: record.iter().map(|s| s.trim().to_ascii_lowercase()).collect(),
        })
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        let name = name.to_ascii_lowercase();
        self.names.iter().position(|n| *n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.find(name).ok_or_else(|| Error::IngestSchema {
            file: self.path.clone(),
            column: name.to_string(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Field `i` of a record as trimmed UTF-8, or "" when absent or invalid.
pub fn field(record: &ByteRecord, i: usize) -> &str {
    record
        .get(i)
        .and_then(|b| std::str::from_utf8(b).ok())
        .map(str::trim)
        .unwrap_or("")
}

pub fn next_record(reader: &mut CsvReader, record: &mut ByteRecord, path: &Path) -> Result<bool> {
    reader
        .read_byte_record(record)
        .map_err(|e| Error::csv(path, e))
}
