//! Partition files and JSON helpers.
//!
//! Two partition formats are supported:
//!
//! * columnar text (`.csv`): a header naming `y, x1..xp, h1..hM, z1..zq`,
//!   one observation per row;
//! * binary (`.vcmp`): magic `b"VCMP"`, `u16` version, `u16` reserved,
//!   `u32` partition id, `u64` rows, `u32` p, `u32` M, `u32` q, then each
//!   row as little-endian `f64` in the column order above, then a CRC-32 of
//!   everything before it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, VcmmError};
use crate::model::Partition;

pub const PARTITION_MAGIC: [u8; 4] = *b"VCMP";
pub const PARTITION_VERSION: u16 = 1;
const PARTITION_HEADER: usize = 4 + 2 + 2 + 4 + 8 + 4 + 4 + 4;

fn column_names(p: usize, m: usize, q: usize) -> Vec<String> {
    let mut names = vec!["y".to_string()];
    names.extend((1..=p).map(|i| format!("x{i}")));
    names.extend((1..=m).map(|i| format!("h{i}")));
    names.extend((1..=q).map(|i| format!("z{i}")));
    names
}

fn row_values(part: &Partition, i: usize) -> Vec<f64> {
    let mut row = vec![part.y[i]];
    row.extend(part.x.row(i).iter());
    row.extend(part.h.row(i).iter());
    row.extend(part.z.row(i).iter());
    row
}

pub fn write_partition_csv(path: &Path, part: &Partition) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(column_names(part.x.ncols(), part.h.ncols(), part.z.ncols()))?;
    for i in 0..part.n_rows() {
        // `{:?}` prints the shortest string that parses back to the same f64.
        w.write_record(row_values(part, i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn count_prefixed(header: &[String], prefix: char) -> Result<usize> {
    let cols: Vec<&String> =
        header.iter().filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok()).collect();
    for (i, c) in cols.iter().enumerate() {
        if **c != format!("{prefix}{}", i + 1) {
            return Err(VcmmError::Parse(format!("expected column {prefix}{} but found `{c}`", i + 1)));
        }
    }
    Ok(cols.len())
}

pub fn read_partition_csv(path: &Path, id: u32) -> Result<Partition> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("y") {
        return Err(VcmmError::Parse(format!("{}: first column must be `y`", path.display())));
    }
    let p = count_prefixed(&header, 'x')?;
    let m = count_prefixed(&header, 'h')?;
    let q = count_prefixed(&header, 'z')?;
    if header != column_names(p, m, q) {
        return Err(VcmmError::Parse(format!(
            "{}: columns must be y, x1..xp, h1..hM, z1..zq in order",
            path.display()
        )));
    }
    let width = 1 + p + m + q;
    let mut vals = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(VcmmError::Parse(format!("row {}: {} fields, expected {width}", line + 1, rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| VcmmError::Parse(format!("row {}: `{field}` is not a number", line + 1)))?;
            vals.push(v);
        }
    }
    Ok(from_rows(id, &vals, p, m, q))
}

fn from_rows(id: u32, vals: &[f64], p: usize, m: usize, q: usize) -> Partition {
    let width = 1 + p + m + q;
    let n = vals.len().checked_div(width).unwrap_or(0);
    let at = |i: usize, j: usize| vals[i * width + j];
    Partition {
        id,
        y: DVector::from_fn(n, |i, _| at(i, 0)),
        x: DMatrix::from_fn(n, p, |i, j| at(i, 1 + j)),
        h: DMatrix::from_fn(n, m, |i, j| at(i, 1 + p + j)),
        z: DMatrix::from_fn(n, q, |i, j| at(i, 1 + p + m + j)),
    }
}

pub fn write_partition_bin(path: &Path, part: &Partition) -> Result<()> {
    let mut body = Vec::with_capacity(part.n_rows() * 8 * (1 + part.x.ncols() + part.h.ncols() + part.z.ncols()));
    for i in 0..part.n_rows() {
        for v in row_values(part, i) {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut head = Vec::with_capacity(PARTITION_HEADER);
    head.extend_from_slice(&PARTITION_MAGIC);
    head.extend_from_slice(&PARTITION_VERSION.to_le_bytes());
    head.extend_from_slice(&0u16.to_le_bytes());
    head.extend_from_slice(&part.id.to_le_bytes());
    head.extend_from_slice(&(part.n_rows() as u64).to_le_bytes());
    for dim in [part.x.ncols(), part.h.ncols(), part.z.ncols()] {
        head.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let mut crc = crc32fast::Hasher::new();
    crc.update(&head);
    crc.update(&body);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&head)?;
    w.write_all(&body)?;
    w.write_all(&crc.finalize().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_partition_bin(path: &Path) -> Result<Partition> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < PARTITION_HEADER + 4 {
        return Err(VcmmError::Parse(format!("{}: file truncated", path.display())));
    }
    if bytes[..4] != PARTITION_MAGIC {
        return Err(VcmmError::Parse(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PARTITION_VERSION {
        return Err(VcmmError::Parse(format!("{}: unsupported version {version}", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let id = u32_at(8);
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let (p, m, q) = (u32_at(20) as usize, u32_at(24) as usize, u32_at(28) as usize);
    let body_len = n * (1 + p + m + q) * 8;
    if bytes.len() != PARTITION_HEADER + body_len + 4 {
        return Err(VcmmError::Parse(format!("{}: length does not match header", path.display())));
    }
    let body = &bytes[PARTITION_HEADER..PARTITION_HEADER + body_len];
    let stored = u32_at(PARTITION_HEADER + body_len);
    let computed = crc32fast::hash(&bytes[..PARTITION_HEADER + body_len]);
    if stored != computed {
        return Err(VcmmError::Checksum { stored, computed });
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(from_rows(id, &vals, p, m, q))
}

/// Reads a partition, choosing the format from the extension. CSV files
/// carry no id, so `id` is used for them.
pub fn read_partition(path: &Path, id: u32) -> Result<Partition> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_partition_csv(path, id),
        Some("vcmp") => read_partition_bin(path),
        _ => Err(VcmmError::Parse(format!("{}: unknown partition format", path.display()))),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
