//! Sample files: CSV with an `x0,x1,…` header, or the `DRF1` binary twin.

use std::fmt::Write as _;
use std::path::Path;

use ratio_subsampler::dre::{read_drf1, write_drf1};
use ratio_subsampler::{DenseMatrix, Error, Result};

/// Formats rows with Rust's shortest round-trip float printing.
pub fn format_csv(m: &DenseMatrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 20);
    let header: Vec<String> = (0..m.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or(Error::Parse {
        offset: 0,
        message: "empty sample file".into(),
    })?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    for (j, c) in cols.iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(Error::Parse {
                offset: 0,
                message: format!("header field {j} is {c:?}, expected \"x{j}\""),
            });
        }
    }
    let mut data = Vec::new();
    let mut offset = header.len();
    let mut rows = 0;
    for line in lines {
        let body = line.trim_end();
        if body.is_empty() {
            offset += line.len();
            continue;
        }
        let mut n = 0;
        let mut field_start = offset;
        for field in body.split(',') {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                offset: field_start,
                message: format!("{field:?} is not a number"),
            })?;
            data.push(v);
            n += 1;
            field_start += field.len() + 1;
        }
        if n != cols.len() {
            return Err(Error::Parse {
                offset,
                message: format!("row {rows} has {n} fields, header has {}", cols.len()),
            });
        }
        rows += 1;
        offset += line.len();
    }
    DenseMatrix::from_vec(rows, cols.len(), data)
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "drf1")
}

/// Reads a sample file, choosing the format by extension (`.drf1` or CSV).
pub fn read_samples(path: &Path) -> Result<DenseMatrix> {
    if is_binary(path) {
        return read_drf1(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_csv(&text)
}

pub fn write_samples(path: &Path, m: &DenseMatrix) -> Result<()> {
    if is_binary(path) {
        return write_drf1(path, m);
    }
    std::fs::write(path, format_csv(m)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
