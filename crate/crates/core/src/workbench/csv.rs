//! Versioned CSV tables.
//!
//! The first line is a schema comment `# malab-csv v1 <table name>`, the second
//! the header. Numbers are written with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_PREFIX: &str = "# malab-csv v";

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// `%.9g`: 9 significant digits, trailing zeros trimmed, exponent form outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mant}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn render_cell(c: &Cell) -> Result<String> {
    Ok(match c {
        Cell::Int(i) => i.to_string(),
        Cell::Num(v) => format_sig9(*v),
        Cell::Text(s) => {
            if s.contains([',', '"', '\n', '\r']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::InvalidParameter(format!(
                "table {}: row has {} cells, header has {}",
                self.name,
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "{SCHEMA_PREFIX}{SCHEMA_VERSION} {}", self.name).expect("string write");
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells = row.iter().map(render_cell).collect::<Result<Vec<_>>>()?;
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    std::fs::write(path, table.render()?).map_err(|e| Error::io(path, e))
}

/// Parsed CSV: every cell is kept as text.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .column(name)
            .ok_or_else(|| Error::CsvSchema(format!("{}: no column {name}", self.name)))?;
        self.rows
            .iter()
            .map(|r| {
                r[i].parse().map_err(|_| {
                    Error::CsvSchema(format!(
                        "{}: {name} value {:?} is not numeric",
                        self.name, r[i]
                    ))
                })
            })
            .collect()
    }
}

fn split_row(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match (ch, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => cells.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    cells.push(cur);
    cells
}

/// Reads text produced by [`Table::render`]; rejects other schema versions.
pub fn parse_csv(text: &str) -> Result<ParsedTable> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::CsvSchema("empty file".into()))?;
    let rest = first
        .strip_prefix(SCHEMA_PREFIX)
        .ok_or_else(|| Error::CsvSchema(format!("missing schema line, found {first:?}")))?;
    let (version, name) = rest.split_once(' ').unwrap_or((rest, ""));
    if version != SCHEMA_VERSION.to_string() {
        return Err(Error::CsvSchema(format!(
            "version v{version}, supported v{SCHEMA_VERSION}"
        )));
    }
    let header = split_row(
        lines
            .next()
            .ok_or_else(|| Error::CsvSchema("missing header".into()))?,
    );
    let rows = lines
        .map(|l| {
            let r = split_row(l);
            if r.len() != header.len() {
                return Err(Error::CsvSchema(format!(
                    "row {l:?} has {} cells, header has {}",
                    r.len(),
                    header.len()
                )));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedTable {
        name: name.to_string(),
        header,
        rows,
    })
}

pub fn read_csv(path: &Path) -> Result<ParsedTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}
