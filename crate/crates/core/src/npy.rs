//! Minimal reader/writer for NPY version 1.0 files holding 2-D float arrays.
//!
//! Only little-endian, C-ordered `<f4` / `<f8` arrays are accepted. `<f4`
//! payloads are widened to `f64` on read; everything is written as `<f8`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_from(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_matrix_from<R: Read>(reader: &mut R) -> Result<DMatrix<f64>> {
    let header = read_header(reader)?;
    let (rows, cols) = match header.shape.as_slice() {
        [r, c] => (*r, *c),
        other => return Err(Error::NotTwoDimensional(other.len())),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Npy("shape overflows".into()))?;
    let mut raw = vec![0u8; count * header.dtype.size()];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Npy(format!("payload shorter than {count} elements")))?;
    let values: Vec<f64> = match header.dtype {
        Dtype::F8 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F4 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_matrix_to(&mut writer, matrix)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_matrix_to<W: Write>(writer: &mut W, matrix: &DMatrix<f64>) -> std::io::Result<()> {
    let dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        matrix.nrows(),
        matrix.ncols()
    );
    // magic + version + u16 length + dict + '\n', padded to a multiple of 64
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header_len = dict.len() + padding + 1;

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header_len as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    writer.write_all(&vec![b' '; padding])?;
    writer.write_all(b"\n")?;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            writer.write_all(&matrix[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut preamble = [0u8; 10];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::Npy("file too short for header".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Npy("bad magic bytes".into()));
    }
    if preamble[6] != 1 || preamble[7] != 0 {
        return Err(Error::Npy(format!(
            "unsupported version {}.{}",
            preamble[6], preamble[7]
        )));
    }
    let len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut dict = vec![0u8; len];
    reader
        .read_exact(&mut dict)
        .map_err(|_| Error::Npy("truncated header".into()))?;
    let dict = std::str::from_utf8(&dict).map_err(|_| Error::Npy("header is not ASCII".into()))?;
    parse_header_dict(dict)
}

fn parse_header_dict(dict: &str) -> Result<Header> {
    let descr = dict_value(dict, "descr")?;
    let dtype = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(Error::Npy(format!("unsupported descr {other}"))),
    };
    match dict_value(dict, "fortran_order")? {
        "False" => {}
        "True" => return Err(Error::Npy("fortran_order arrays are not supported".into())),
        other => return Err(Error::Npy(format!("bad fortran_order {other}"))),
    }
    let shape = dict_value(dict, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Npy(format!("bad shape {shape}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header { dtype, shape })
}

/// Extracts the raw text of `key`'s value from a Python dict literal.
fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::Npy(format!("header missing '{key}'"));
    let start = dict
        .find(&format!("'{key}'"))
        .or_else(|| dict.find(&format!("\"{key}\"")))
        .ok_or_else(missing)?;
    let rest = &dict[start + key.len() + 2..];
    let rest = rest
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(missing)?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(missing)?;
    Ok(rest[..end].trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(matrix: &DMatrix<f64>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, matrix).unwrap();
        buf
    }

    #[test]
    fn header_is_aligned_to_64_bytes() {
        let buf = encode(&DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(buf[10 + header_len - 1], b'\n');
        assert_eq!(buf.len(), 10 + header_len + 6 * 8);
    }

    #[test]
    fn reads_row_major_payload() {
        let m = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let back = read_matrix_from(&mut encode(&m).as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back[(0, 2)], 3.0);
        assert_eq!(back[(1, 0)], 4.0);
    }

    #[test]
    fn widens_f4_payload() {
        // header as numpy writes it for np.float32 arrays
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2), }";
        let mut buf = MAGIC.to_vec();
        buf.extend([1, 0]);
        let pad = (64 - (10 + dict.len() + 1) % 64) % 64;
        buf.extend(((dict.len() + pad + 1) as u16).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.extend(vec![b' '; pad]);
        buf.push(b'\n');
        buf.extend(0.5f32.to_le_bytes());
        buf.extend((-2.25f32).to_le_bytes());
        let m = read_matrix_from(&mut buf.as_slice()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(1, 2, &[0.5, -2.25]));
    }

    #[test]
    fn rejects_one_dimensional_array() {
        let mut buf = encode(&DMatrix::from_row_slice(1, 3, &[1., 2., 3.]));
        let text = String::from_utf8_lossy(&buf[10..]).into_owned();
        let patched = text.replacen("(1, 3)", "(3,)   ", 1);
        buf.truncate(10);
        buf.extend(patched.as_bytes());
        let err = read_matrix_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("expected 2-D array"), "{err}");
    }

    #[test]
    fn rejects_fortran_order_and_big_endian() {
        for (from, to) in [("False", "True "), ("'<f8'", "'>f8'")] {
            let mut buf = encode(&DMatrix::from_row_slice(1, 1, &[1.]));
            let text = String::from_utf8_lossy(&buf[10..]).into_owned();
            let patched = text.replacen(from, to, 1);
            buf.truncate(10);
            buf.extend(patched.as_bytes());
            assert!(read_matrix_from(&mut buf.as_slice()).is_err());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let buf = encode(&DMatrix::from_row_slice(2, 2, &[1., 2., 3., 4.]));
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(read_matrix_from(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 3];
        assert!(read_matrix_from(&mut &short[..]).is_err());
    }
}
