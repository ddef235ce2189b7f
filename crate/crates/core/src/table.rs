//! Small helpers for delimited artifact files.
//!
//! All floating-point output goes through [`fmt_f64`], which prints 17
//! significant digits so that values round-trip bit-exactly.

use std::fs::File;
use std::path::Path;

use crate::{Error, Result};

pub type Writer = csv::Writer<File>;
pub type Reader = csv::Reader<File>;

/// Format a float with 17 significant digits (round-trip safe).
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 && x.is_sign_positive() {
        // Avoid "0.0000000000000000e0" noise for exact zeros.
        return "0".to_string();
    }
    format!("{x:.16e}")
}

/// Parse a float written by [`fmt_f64`] (or any standard decimal form).
pub fn parse_f64(raw: &str, path: &Path, line: u64) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("not a number: {raw:?}"),
    })
}

pub fn writer(path: &Path) -> Result<Writer> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| io_error(path, e))
}

pub fn reader(path: &Path) -> Result<Reader> {
    csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| io_error(path, e))
}

pub fn write_record<'a>(
    w: &mut Writer,
    path: &Path,
    fields: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    w.write_record(fields).map_err(|e| io_error(path, e))
}

pub fn flush(mut w: Writer, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn io_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
    }
}
