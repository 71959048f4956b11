//! NPY (version 1.0, little-endian f64, C order) and binary PGM writers used
//! for interchange and debugging.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Write `data` as an NPY v1.0 file with the given shape, `<f8` C-order.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            actual: vec![data.len()],
        });
    }
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    // pad so that magic + version + len field + header is a multiple of 64,
    // ending in newline
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat(' ').take(pad));
    header.push('\n');

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(NPY_MAGIC)?;
    out.write_all(&[1u8, 0u8])?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read an NPY v1.0 `<f8` C-order file, returning `(shape, data)`.
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let format_err = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| format_err(0, "truncated magic".into()))?;
    if &magic != NPY_MAGIC {
        return Err(format_err(0, "not an NPY file".into()));
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| format_err(6, "truncated version".into()))?;
    if version != [1, 0] {
        return Err(format_err(
            6,
            format!("unsupported NPY version {}.{}", version[0], version[1]),
        ));
    }
    let mut len_bytes = [0u8; 2];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| format_err(8, "truncated header length".into()))?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|_| format_err(10, "truncated header".into()))?;
    let header = String::from_utf8(header)
        .map_err(|_| format_err(10, "header is not valid UTF-8".into()))?;

    if !header.contains("'descr': '<f8'") {
        return Err(format_err(10, format!("expected <f8 descr in: {header}")));
    }
    if !header.contains("'fortran_order': False") {
        return Err(format_err(10, "fortran order is not supported".into()));
    }
    let shape = parse_shape(&header).ok_or_else(|| {
        format_err(10, format!("could not parse shape from header: {header}"))
    })?;

    let count: usize = shape.iter().product();
    let data_offset = (10 + header_len) as u64;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != count * 8 {
        return Err(format_err(
            data_offset,
            format!("expected {} data bytes, found {}", count * 8, raw.len()),
        ));
    }
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let start = header.find("'shape':")? + "'shape':".len();
    let rest = &header[start..];
    let open = rest.find('(')?;
    let close = rest.find(')')?;
    let inner = &rest[open + 1..close];
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(part.parse::<usize>().ok()?);
    }
    Some(shape)
}

impl Tensor {
    /// Dump as NPY v1.0 with the 4D `(n, c, h, w)` shape.
    pub fn save_npy(&self, path: &Path) -> Result<()> {
        let (n, c, h, w) = self.shape();
        write_npy(path, &[n, c, h, w], self.data())
    }

    /// Load a 4D NPY file written by [`Tensor::save_npy`].
    pub fn load_npy(path: &Path) -> Result<Tensor> {
        let (shape, data) = read_npy(path)?;
        if shape.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 10,
                message: format!("expected 4D tensor, got shape {shape:?}"),
            });
        }
        Tensor::new(shape[0], shape[1], shape[2], shape[3], data)
    }
}

/// Export a single-channel, single-item tensor as a binary PGM (P5) image.
/// Values are clamped to `[0, 1]`, scaled by 255 and rounded.
pub fn save_pgm(t: &Tensor, path: &Path) -> Result<()> {
    let (n, c, h, w) = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::invalid(format!(
            "PGM export expects a (1, 1, h, w) tensor, got ({n}, {c}, {h}, {w})"
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let t = Tensor::new(
            2,
            1,
            2,
            3,
            vec![
                0.0,
                -0.0,
                1.5,
                f64::MIN_POSITIVE,
                -3.25e300,
                7.0,
                1.0 / 3.0,
                -1.0,
                9.9,
                0.125,
                2.0,
                4.0,
            ],
        )
        .unwrap();
        t.save_npy(&path).unwrap();
        let back = Tensor::load_npy(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn npy_header_is_version_1_and_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        write_npy(&path, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        assert_eq!(&bytes[6..8], &[1, 0]);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        assert_eq!(bytes.len(), 10 + hlen + 3 * 8);
    }

    #[test]
    fn npy_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, b"not an npy file").unwrap();
        assert!(matches!(read_npy(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn npy_rejects_truncated_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        write_npy(&path, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_npy(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_writes_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let t = Tensor::new(1, 1, 2, 2, vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        save_pgm(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..10], b"P5\n2 2\n255");
        assert_eq!(&bytes[11..], &[0u8, 255, 128, 255]);
    }
}
