//! Reading and writing capture data files.
//!
//! Records CSV: one row per observed individual, header `s1,...,sK`, entries
//! 0/1. Cells CSV: header `pattern,count`, patterns written `b_1` first.
//! Lines starting with `#` are comments in both formats.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use caprec::capture::cells;
use caprec::{CapturePattern, CellTable, Error as CoreError};
use clap::ValueEnum;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Records,
    Cells,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Records => "records",
            Format::Cells => "cells",
        })
    }
}

/// A malformed input file, with the 1-based line where it was detected.
#[derive(Debug)]
pub struct ParseError {
    pub line: Option<u64>,
    pub message: String,
    pub source: Option<CoreError>,
}

impl ParseError {
    fn at(line: u64, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
            source: None,
        }
    }

    fn whole(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
            source: None,
        }
    }

    fn core(line: Option<u64>, err: CoreError) -> Self {
        Self {
            line,
            message: err.to_string(),
            source: Some(err),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.source) {
            (Some(l), Some(e)) => write!(f, "line {l}: {} [{}]", self.message, e.kind()),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(e)) => write!(f, "{} [{}]", self.message, e.kind()),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ParseError {}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(src)
}

fn line_of(pos: Option<&csv::Position>) -> u64 {
    pos.map(|p| p.line()).unwrap_or(0)
}

/// Guesses the format from the header row.
pub fn detect_format(text: &str) -> Format {
    let header = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if header.to_ascii_lowercase().starts_with("pattern") {
        Format::Cells
    } else {
        Format::Records
    }
}

pub fn parse_records(text: &str) -> Result<CellTable, ParseError> {
    let mut rdr = reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| ParseError::whole(format!("cannot read header: {e}")))?
        .clone();
    let k = header.len();
    for (j, name) in header.iter().enumerate() {
        if !name.eq_ignore_ascii_case(&format!("s{}", j + 1)) {
            return Err(ParseError::at(
                line_of(header.position()),
                format!("expected column `s{}`, found `{name}`", j + 1),
            ));
        }
    }
    caprec::capture::check_k(k).map_err(|e| ParseError::core(Some(1), e))?;
    let mut counts = vec![0u64; 1 << k];
    for row in rdr.records() {
        let row = row.map_err(|e| ParseError::whole(e.to_string()))?;
        let line = line_of(row.position());
        if row.len() != k {
            return Err(ParseError::at(
                line,
                format!("expected {k} fields, found {}", row.len()),
            ));
        }
        let mut bits = Vec::with_capacity(k);
        for (j, field) in row.iter().enumerate() {
            match field {
                "0" => bits.push(0),
                "1" => bits.push(1),
                other => {
                    return Err(ParseError::at(
                        line,
                        format!("column s{}: expected 0 or 1, found `{other}`", j + 1),
                    ))
                }
            }
        }
        let pattern =
            CapturePattern::from_bits(&bits).map_err(|e| ParseError::core(Some(line), e))?;
        if pattern.is_zero() {
            return Err(ParseError::core(Some(line), CoreError::ZeroPatternObserved));
        }
        counts[pattern.index()] += 1;
    }
    CellTable::from_counts(k, counts).map_err(|e| ParseError::core(None, e))
}

pub fn parse_cells(text: &str) -> Result<CellTable, ParseError> {
    let mut rdr = reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| ParseError::whole(format!("cannot read header: {e}")))?
        .clone();
    let names: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names != ["pattern", "count"] {
        return Err(ParseError::at(
            line_of(header.position()),
            format!(
                "expected header `pattern,count`, found `{}`",
                names.join(",")
            ),
        ));
    }
    let mut k = None;
    let mut pairs = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| ParseError::whole(e.to_string()))?;
        let line = line_of(row.position());
        if row.len() != 2 {
            return Err(ParseError::at(
                line,
                format!("expected 2 fields, found {}", row.len()),
            ));
        }
        let pattern =
            CapturePattern::parse(&row[0]).map_err(|e| ParseError::core(Some(line), e))?;
        let count: u64 = row[1].parse().map_err(|_| {
            ParseError::at(
                line,
                format!("count `{}` is not a non-negative integer", &row[1]),
            )
        })?;
        match k {
            None => k = Some(pattern.k()),
            Some(k) if k != pattern.k() => {
                return Err(ParseError::core(
                    Some(line),
                    CoreError::KMismatch {
                        expected: k,
                        found: pattern.k(),
                    },
                ))
            }
            _ => {}
        }
        if pattern.is_zero() && count > 0 {
            return Err(ParseError::core(Some(line), CoreError::ZeroPatternObserved));
        }
        pairs.push((pattern, count));
    }
    let k = k.ok_or_else(|| ParseError::core(None, CoreError::EmptyInput))?;
    CellTable::from_pairs(k, pairs).map_err(|e| ParseError::core(None, e))
}

pub fn parse(text: &str, format: Format) -> Result<CellTable, ParseError> {
    match format {
        Format::Records => parse_records(text),
        Format::Cells => parse_cells(text),
    }
}

/// Reads a capture data file; `format` defaults to detection from the header.
pub fn read_table(path: &Path, format: Option<Format>) -> Result<(CellTable, Format), ParseError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ParseError::whole(format!("cannot read {}: {e}", path.display())))?;
    let format = format.unwrap_or_else(|| detect_format(&text));
    Ok((parse(&text, format)?, format))
}

/// Writes every nonzero pattern with its count, empty cells included.
pub fn write_cells<W: Write>(table: &CellTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pattern", "count"])?;
    for i in cells(table.k()) {
        let p = CapturePattern::new(i, table.k()).expect("index fits");
        w.write_record([p.to_string(), table.count(i).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records<W: Write>(table: &CellTable, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((1..=table.k()).map(|j| format!("s{j}")))?;
    for p in table.to_records() {
        w.write_record(p.bits().iter().map(|b| b.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
