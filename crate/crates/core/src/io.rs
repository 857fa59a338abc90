//! Matrix files: CSV (one row per sample) or the `RMAT` binary layout.
//!
//! Binary layout, all little-endian:
//!
//! | offset | size | content            |
//! |--------|------|--------------------|
//! | 0      | 4    | magic `RMAT`       |
//! | 4      | 4    | `u32` version = 1  |
//! | 8      | 8    | `u64` rows         |
//! | 16     | 8    | `u64` cols         |
//! | 24     | 8·rc | `f64` row-major    |
//!
//! `NaN` entries are allowed and mark unobserved values in completion data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Mat, Result};

pub const MAGIC: &[u8; 4] = b"RMAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    /// `.csv` (any case) is CSV; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

fn reject_empty(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Parameter(format!("empty matrix ({rows}x{cols}) is not a valid dataset")));
    }
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Mat> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    match MatrixFormat::from_path(path) {
        MatrixFormat::Binary => read_binary(reader),
        MatrixFormat::Csv => read_csv(reader),
    }
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    let path = path.as_ref();
    let mut writer = BufWriter::new(File::create(path)?);
    match MatrixFormat::from_path(path) {
        MatrixFormat::Binary => write_binary(&mut writer, m)?,
        MatrixFormat::Csv => write_csv(&mut writer, m)?,
    }
    writer.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(w: &mut W, m: &Mat) -> Result<()> {
    let (rows, cols) = m.shape();
    reject_empty(rows, cols)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for i in 0..rows {
        for j in 0..cols {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes, reporting a short read at `offset`.
fn read_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                return Err(Error::Format {
                    offset: offset + filled as u64,
                    msg: format!("unexpected end of file while reading {what}"),
                })
            }
            k => filled += k,
        }
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Mat> {
    let mut magic = [0u8; 4];
    read_at(&mut r, &mut magic, 0, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, expected \"RMAT\"") });
    }
    let mut word = [0u8; 4];
    read_at(&mut r, &mut word, 4, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut long = [0u8; 8];
    read_at(&mut r, &mut long, 8, "row count")?;
    let rows = u64::from_le_bytes(long);
    read_at(&mut r, &mut long, 16, "column count")?;
    let cols = u64::from_le_bytes(long);
    if rows == 0 || cols == 0 {
        return Err(Error::Format { offset: 8, msg: format!("empty matrix ({rows}x{cols}) is not a valid dataset") });
    }
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some() && usize::try_from(*c).is_ok())
        .ok_or_else(|| Error::Format { offset: 8, msg: format!("dimensions {rows}x{cols} overflow") })?;
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = Vec::with_capacity((count as usize).min(1 << 24));
    for k in 0..count {
        read_at(&mut r, &mut long, HEADER_LEN + 8 * k, "payload")?;
        values.push(f64::from_le_bytes(long));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format {
            offset: HEADER_LEN + 8 * count,
            msg: format!("trailing bytes after {rows}x{cols} payload"),
        });
    }
    Ok(Mat::from_row_slice(rows, cols, &values))
}

/// Writes one row per line with 17 significant digits.
pub fn write_csv<W: Write>(w: &mut W, m: &Mat) -> Result<()> {
    let (rows, cols) = m.shape();
    reject_empty(rows, cols)?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let mut fields = Vec::with_capacity(cols);
    for i in 0..rows {
        fields.clear();
        fields.extend((0..cols).map(|j| format_value(m[(i, j)])));
        out.write_record(&fields).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Rows and columns in errors are 1-based.
pub fn read_csv<R: Read>(r: R) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 1, col: 0, msg: e.to_string() })?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Parse {
                    row: i + 1,
                    col: rec.len().min(c) + 1,
                    msg: format!("expected {c} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: i + 1,
                col: j + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    reject_empty(rows, cols)?;
    Ok(Mat::from_row_slice(rows, cols, &values))
}
