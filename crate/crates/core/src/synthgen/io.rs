//! Dataset files.
//!
//! CSV: header `x0,x1,x2,label`, label `s` or `b`.
//!
//! Binary: magic `INFD`, version `u32`, row count `u64`, then per row three
//! little-endian `f64` and one label byte (`b's'` / `b'b'`).

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use super::{LabeledDataset, Label, Observation};

pub const BINARY_MAGIC: &[u8; 4] = b"INFD";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
}

fn parse_label(s: &str) -> Result<Label, DatasetIoError> {
    match s {
        "s" => Ok(Label::Signal),
        "b" => Ok(Label::Background),
        other => Err(DatasetIoError::Format(format!("unknown label `{other}`"))),
    }
}

pub fn write_csv<W: Write>(data: &LabeledDataset, out: W) -> Result<(), DatasetIoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x0", "x1", "x2", "label"])?;
    for (o, l) in data.observations.iter().zip(&data.labels) {
        w.write_record([o.x0.to_string(), o.x1.to_string(), o.x2.to_string(), l.as_char().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<LabeledDataset, DatasetIoError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x0", "x1", "x2", "label"] {
        return Err(DatasetIoError::Format(format!("unexpected header {headers:?}")));
    }
    let mut ds = LabeledDataset { lambda0: super::LAMBDA0, ..Default::default() };
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, DatasetIoError> {
            rec[i].parse().map_err(|e| DatasetIoError::Format(format!("column {i}: {e}")))
        };
        ds.observations.push(Observation::new(num(0)?, num(1)?, num(2)?));
        ds.labels.push(parse_label(&rec[3])?);
    }
    Ok(ds)
}

pub fn write_binary<W: Write>(data: &LabeledDataset, out: W) -> Result<(), DatasetIoError> {
    let mut w = BufWriter::new(out);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for (o, l) in data.observations.iter().zip(&data.labels) {
        for v in o.as_array() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[l.as_char() as u8])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<LabeledDataset, DatasetIoError> {
    let mut head = [0u8; 16];
    input.read_exact(&mut head)?;
    if &head[..4] != BINARY_MAGIC {
        return Err(DatasetIoError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return Err(DatasetIoError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != count * 25 {
        return Err(DatasetIoError::Format(format!("expected {} body bytes, found {}", count * 25, body.len())));
    }
    let mut ds = LabeledDataset { lambda0: super::LAMBDA0, ..Default::default() };
    ds.observations.reserve(count);
    ds.labels.reserve(count);
    for row in body.chunks_exact(25) {
        let f = |i: usize| f64::from_le_bytes(row[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        ds.observations.push(Observation::new(f(0), f(1), f(2)));
        ds.labels.push(match row[24] {
            b's' => Label::Signal,
            b'b' => Label::Background,
            other => return Err(DatasetIoError::Format(format!("bad label byte {other}"))),
        });
    }
    Ok(ds)
}

/// Format chosen from the extension: `.bin`/`.infd` is binary, anything else CSV.
pub fn is_binary_path(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("bin" | "infd"))
}

pub fn save(data: &LabeledDataset, path: &Path) -> Result<(), DatasetIoError> {
    let file = fs::File::create(path)?;
    if is_binary_path(path) {
        write_binary(data, file)
    } else {
        write_csv(data, BufWriter::new(file))
    }
}

pub fn load(path: &Path) -> Result<LabeledDataset, DatasetIoError> {
    let file = io::BufReader::new(fs::File::open(path)?);
    if is_binary_path(path) {
        read_binary(file)
    } else {
        read_csv(file)
    }
}
