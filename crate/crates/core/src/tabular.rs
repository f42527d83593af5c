//! Delimited-file plumbing shared by the corpus, citation and analysis
//! readers: delimiter sniffing, header lookup and positioned errors.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

/// Structural problem in a delimited file. Always fatal for the file.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct TableError {
    pub source_name: String,
    /// 1-based line number, when known.
    pub line: Option<u64>,
    /// 1-based column (field) number, when known.
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for TableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
            if let Some(column) = self.column {
                write!(f, ":{column}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

impl TableError {
    pub fn new(source_name: &str, line: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            source_name: source_name.to_owned(),
            line,
            column: None,
            message: message.into(),
        }
    }

    pub fn from_csv(source_name: &str, err: &csv::Error) -> Self {
        let line = err.position().map(|p| p.line());
        let (column, message) = match err.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => (
                Some((*len).min(*expected_len) as usize + 1),
                format!("expected {expected_len} fields, found {len}"),
            ),
            csv::ErrorKind::Utf8 { err, .. } => (Some(err.field() + 1), "invalid UTF-8".to_owned()),
            csv::ErrorKind::Deserialize { err, .. } => (err.field().map(|f| f as usize + 1), err.to_string()),
            _ => (None, err.to_string()),
        };
        Self {
            source_name: source_name.to_owned(),
            line,
            column,
            message,
        }
    }
}

/// Tab when the header line contains a tab, comma otherwise.
pub fn sniff_delimiter(data: &[u8]) -> u8 {
    let header_end = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    if data[..header_end].contains(&b'\t') {
        b'\t'
    } else {
        b','
    }
}

pub fn reader<R: Read>(input: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

pub fn writer<W: Write>(output: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(output)
}

/// Column-name to index lookup built from a header record.
#[derive(Debug, Clone)]
pub struct Header {
    index: HashMap<String, usize>,
}

impl Header {
    pub fn new(record: &csv::StringRecord) -> Self {
        let index = record
            .iter()
            .enumerate()
            .map(|(i, name)| (name.trim().trim_start_matches('\u{feff}').to_owned(), i))
            .collect();
        Self { index }
    }

    pub fn require(&self, source_name: &str, name: &str) -> Result<usize, TableError> {
        self.index.get(name).copied().ok_or_else(|| TableError {
            source_name: source_name.to_owned(),
            line: Some(1),
            column: None,
            message: format!("missing required column `{name}`"),
        })
    }

    pub fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

pub fn read_header<R: Read>(source_name: &str, reader: &mut csv::Reader<R>) -> Result<Header, TableError> {
    let record = reader.headers().map_err(|e| TableError::from_csv(source_name, &e))?;
    Ok(Header::new(record))
}

/// Formats a float for output tables: shortest round-trip representation.
pub fn fmt_f64(value: f64) -> String {
    if value.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{value}")
    }
}

pub fn fmt_opt_f64(value: Option<f64>) -> String {
    value.map(fmt_f64).unwrap_or_default()
}
