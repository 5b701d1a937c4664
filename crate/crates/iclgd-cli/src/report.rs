//! CSV emission with full-precision, locale-free number formatting.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), enough for an
//! exact `f64` round trip, so re-running a seeded experiment reproduces the
//! output byte for byte. Rows are comma-separated and line-feed terminated.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Format a float at full precision.
pub fn float_cell(x: f64) -> String {
    format!("{x:.16e}")
}

/// Format an optional float; absent values become empty cells.
pub fn opt_float_cell(x: Option<f64>) -> String {
    x.map(float_cell).unwrap_or_default()
}

/// A CSV sink writing to a file or stdout.
pub struct CsvSink {
    out: Box<dyn Write>,
}

impl CsvSink {
    pub fn create(path: Option<&Path>) -> io::Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Self { out })
    }

    pub fn header(&mut self, columns: &str) -> io::Result<()> {
        writeln!(self.out, "{columns}")
    }

    pub fn row(&mut self, cells: &[String]) -> io::Result<()> {
        writeln!(self.out, "{}", cells.join(","))
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}
